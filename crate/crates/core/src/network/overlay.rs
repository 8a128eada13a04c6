use std::collections::{BTreeMap, BTreeSet};

use super::{Layer, Network};
use crate::error::{Error, Result};
use crate::layers::{Connectivity, DenseLayer};
use crate::scalar::Scalar;

/// Pruning applied at inference time without touching the network.
///
/// Killed maps are skipped by their own layer, zeroed after activation, and
/// dropped as inputs of the next conv (or of the first fully connected layer).
/// Cut connections are skipped like cleared connectivity flags. The
/// summation order matches a physically pruned network, so outputs agree
/// bit for bit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overlay {
    dead: BTreeMap<usize, BTreeSet<usize>>,
    cuts: BTreeMap<usize, BTreeSet<(usize, usize)>>,
}

impl Overlay {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks output map `map` of conv layer `conv` (1-based) as pruned.
    pub fn kill_map(&mut self, conv: usize, map: usize) {
        self.dead.entry(conv).or_default().insert(map);
    }

    /// Marks connection `input -> output` of conv layer `conv` as pruned.
    pub fn cut_connection(&mut self, conv: usize, output: usize, input: usize) {
        self.cuts.entry(conv).or_default().insert((output, input));
    }

    pub fn is_empty(&self) -> bool {
        self.dead.values().all(|s| s.is_empty()) && self.cuts.values().all(|s| s.is_empty())
    }

    pub fn prepare<T: Scalar>(&self, net: &Network<T>) -> Result<PreparedOverlay<T>> {
        let positions = net.conv_positions();
        let n_layers = net.layers().len();
        let mut conns: Vec<Option<Connectivity>> = vec![None; n_layers];
        let mut dead: Vec<Option<Vec<bool>>> = vec![None; n_layers];
        for (&conv, maps) in &self.dead {
            let pos = net.conv_position(conv)?;
            let out_maps = net.conv(conv)?.conv.out_maps();
            let mut flags = vec![false; out_maps];
            for &m in maps {
                if m >= out_maps {
                    return Err(Error::Mask(format!("Conv{conv} has no map {m}")));
                }
                flags[m] = true;
            }
            dead[pos] = Some(flags);
        }
        for (ci, &pos) in positions.iter().enumerate() {
            let conv = ci + 1;
            let layer = match &net.layers()[pos] {
                Layer::Conv(b) => &b.conv,
                _ => unreachable!(),
            };
            let mut conn = None::<Connectivity>;
            let mut edit = |f: &mut dyn FnMut(&mut Connectivity)| {
                f(conn.get_or_insert_with(|| layer.connectivity().clone()));
            };
            if let Some(flags) = &dead[pos] {
                for (m, _) in flags.iter().enumerate().filter(|(_, d)| **d) {
                    edit(&mut |c| c.clear_row(m));
                }
            }
            if ci > 0 {
                if let Some(prev) = &dead[positions[ci - 1]] {
                    for (m, _) in prev.iter().enumerate().filter(|(_, d)| **d) {
                        edit(&mut |c| c.clear_column(m));
                    }
                }
            }
            if let Some(cuts) = self.cuts.get(&conv) {
                for &(o, i) in cuts {
                    if o >= layer.out_maps() || i >= layer.in_maps() {
                        return Err(Error::Mask(format!("Conv{conv} has no connection ({i} -> {o})")));
                    }
                    edit(&mut |c| c.set(o, i, false));
                }
            }
            conns[pos] = conn;
        }
        for &conv in self.cuts.keys() {
            net.conv_position(conv)?;
        }

        let mut dense = None;
        let last_conv = *positions.last().expect("validated spec has a conv layer");
        if let Some(flags) = &dead[last_conv] {
            let first_fc = (last_conv..n_layers)
                .find(|&i| matches!(net.layers()[i], Layer::Dense(_) | Layer::Classifier(_)))
                .expect("validated spec ends in a classifier");
            let [maps, h, w] = net.spec().shapes()[first_fc - 1];
            debug_assert_eq!(maps, flags.len());
            let plane = h * w;
            let keep: Vec<usize> = (0..maps)
                .filter(|&m| !flags[m])
                .flat_map(|m| m * plane..(m + 1) * plane)
                .collect();
            let layer = match &net.layers()[first_fc] {
                Layer::Dense(d) | Layer::Classifier(d) => d.select_inputs(&keep),
                _ => unreachable!(),
            };
            dense = Some((first_fc, layer, keep));
        }
        Ok(PreparedOverlay {
            layer_count: n_layers,
            conns,
            dead,
            dense,
        })
    }
}

/// An [`Overlay`] resolved against a specific network.
#[derive(Debug, Clone)]
pub struct PreparedOverlay<T> {
    layer_count: usize,
    conns: Vec<Option<Connectivity>>,
    dead: Vec<Option<Vec<bool>>>,
    dense: Option<(usize, DenseLayer<T>, Vec<usize>)>,
}

impl<T: Scalar> PreparedOverlay<T> {
    pub(crate) fn connectivity(&self, pos: usize) -> Option<&Connectivity> {
        self.conns.get(pos).and_then(|c| c.as_ref())
    }

    pub(crate) fn dead_maps(&self, pos: usize) -> Option<&[bool]> {
        self.dead.get(pos).and_then(|d| d.as_deref())
    }

    pub(crate) fn compacted_dense(&self, pos: usize) -> Option<(&DenseLayer<T>, &[usize])> {
        match &self.dense {
            Some((p, layer, keep)) if *p == pos => Some((layer, keep)),
            _ => None,
        }
    }

    pub(crate) fn check_fits(&self, net: &Network<T>) -> Result<()> {
        if self.layer_count != net.layers().len() {
            return Err(Error::Mask("overlay prepared for a different network".into()));
        }
        Ok(())
    }
}
