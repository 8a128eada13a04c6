use crate::error::{Error, Result};

/// Kernel connectivity flags of a convolution layer: one bit per
/// (output map, input map) pair. A cleared bit means the kernel is pruned
/// and the connection is never computed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Connectivity {
    out_maps: usize,
    in_maps: usize,
    bits: Vec<u64>,
}

impl Connectivity {
    pub fn dense(out_maps: usize, in_maps: usize) -> Self {
        let mut c = Connectivity::empty(out_maps, in_maps);
        for o in 0..out_maps {
            for i in 0..in_maps {
                c.set(o, i, true);
            }
        }
        c
    }

    pub fn empty(out_maps: usize, in_maps: usize) -> Self {
        Connectivity {
            out_maps,
            in_maps,
            bits: vec![0; (out_maps * in_maps).div_ceil(64)],
        }
    }

    pub fn out_maps(&self) -> usize {
        self.out_maps
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    /// Number of flag bits, independent of how many are set.
    pub fn flag_bits(&self) -> usize {
        self.out_maps * self.in_maps
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize) -> bool {
        let b = o * self.in_maps + i;
        self.bits[b / 64] >> (b % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, o: usize, i: usize, on: bool) {
        let b = o * self.in_maps + i;
        if on {
            self.bits[b / 64] |= 1 << (b % 64);
        } else {
            self.bits[b / 64] &= !(1 << (b % 64));
        }
    }

    pub fn count_active(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn active_in_row(&self, o: usize) -> usize {
        (0..self.in_maps).filter(|&i| self.get(o, i)).count()
    }

    pub fn is_dense(&self) -> bool {
        self.count_active() == self.flag_bits()
    }

    /// Input maps feeding output map `o`, ascending.
    pub fn inputs_of(&self, o: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.in_maps).filter(move |&i| self.get(o, i))
    }

    pub fn clear_row(&mut self, o: usize) {
        for i in 0..self.in_maps {
            self.set(o, i, false);
        }
    }

    pub fn clear_column(&mut self, i: usize) {
        for o in 0..self.out_maps {
            self.set(o, i, false);
        }
    }

    /// Keeps only the listed rows and columns (both ascending).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Connectivity {
        let mut c = Connectivity::empty(rows.len(), cols.len());
        for (no, &o) in rows.iter().enumerate() {
            for (ni, &i) in cols.iter().enumerate() {
                c.set(no, ni, self.get(o, i));
            }
        }
        c
    }

    /// Packs the flags row-major, least significant bit first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.flag_bits();
        let mut out = vec![0u8; n.div_ceil(8)];
        for b in 0..n {
            if self.bits[b / 64] >> (b % 64) & 1 == 1 {
                out[b / 8] |= 1 << (b % 8);
            }
        }
        out
    }

    pub fn from_bytes(out_maps: usize, in_maps: usize, bytes: &[u8]) -> Result<Self> {
        let n = out_maps * in_maps;
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Shape(format!(
                "connectivity {out_maps}x{in_maps} needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let mut c = Connectivity::empty(out_maps, in_maps);
        for b in 0..n {
            if bytes[b / 8] >> (b % 8) & 1 == 1 {
                c.bits[b / 64] |= 1 << (b % 64);
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_has_every_flag() {
        let c = Connectivity::dense(7, 13);
        assert_eq!(c.count_active(), 91);
        assert!(c.is_dense());
    }

    #[test]
    fn byte_packing_round_trips() {
        let mut c = Connectivity::dense(5, 11);
        c.set(2, 3, false);
        c.set(4, 10, false);
        let back = Connectivity::from_bytes(5, 11, &c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.count_active(), 53);
    }

    #[test]
    fn select_keeps_flags() {
        let mut c = Connectivity::dense(3, 3);
        c.set(2, 0, false);
        let s = c.select(&[0, 2], &[0, 1]);
        assert!(s.get(0, 0));
        assert!(!s.get(1, 0));
        assert!(s.get(1, 1));
    }
}
