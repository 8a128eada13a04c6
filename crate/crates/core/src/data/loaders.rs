//! Raw dataset formats: IDX (MNIST) and the CIFAR-10 binary batches.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Pixels of an IDX image file as `(count, rows, cols, bytes)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(path, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let want = n * rows * cols;
    if body.len() != want {
        return Err(Error::format(
            path,
            format!("expected {want} pixel bytes for {n}x{rows}x{cols}, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body))
}

pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(path, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(path, format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body)
}

/// Loads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let img_bytes = read(ip)?;
    let lbl_bytes = read(lp)?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes, ip)?;
    let labels = parse_idx_labels(&lbl_bytes, lp)?;
    if labels.len() != n {
        return Err(Error::format(lp, format!("{} labels for {n} images", labels.len())));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(10);
    let samples = Tensor::new(vec![n, 1, rows, cols], pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect())?;
    Ok(
        Dataset::new(samples, labels.iter().map(|&l| l as usize).collect(), classes)?
            .with_provenance(format!("idx:{}", ip.display())),
    )
}

/// Loads the MNIST files under `dir` using their official names.
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>, split: Split) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let (img, lbl) = match split {
        Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        _ => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    };
    Ok(load_idx(dir.join(img), dir.join(lbl))?.with_split(split))
}

/// Parses CIFAR-10 binary records (label byte + 3072 channel-major pixels).
pub fn parse_cifar10<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Vec<T>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            path,
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::format(path, format!("label byte {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| T::of(p as f64 / 255.0)));
    }
    Ok((pixels, labels))
}

pub fn load_cifar10<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    load_cifar10_batches(&[path])
}

/// Concatenates several CIFAR-10 batch files, in the order given.
pub fn load_cifar10_batches<T: Scalar, P: AsRef<Path>>(paths: &[P]) -> Result<Dataset<T>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut prov = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let (px, lb) = parse_cifar10::<T>(&read(p)?, p)?;
        pixels.extend(px);
        labels.extend(lb);
        prov.push(p.display().to_string());
    }
    let n = labels.len();
    let samples = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Ok(Dataset::new(samples, labels, 10)?.with_provenance(format!("cifar10:{}", prov.join(","))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
        for v in [2u32, 2, 3] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 1]);
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        let (ip, lp) = (dir.join("img"), dir.join("lbl"));
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lbl).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_exact_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path());
        let d = load_idx::<f64>(&ip, &lp).unwrap();
        assert_eq!(d.samples().shape(), &[2, 1, 2, 3]);
        assert_eq!(d.labels(), &[7, 3]);
        assert_eq!(d.sample(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(d.sample(1)[5], 1.0 / 255.0);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path());
        // labels passed as images and vice versa: wrong magic both ways
        assert!(matches!(load_idx::<f64>(&lp, &ip), Err(Error::Format { .. })));
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.pop();
        std::fs::write(&ip, &bytes).unwrap();
        assert!(load_idx::<f64>(&ip, &lp).is_err());
        assert!(matches!(load_idx::<f64>(dir.path().join("nope"), &lp), Err(Error::Io { .. })));
    }

    #[test]
    fn cifar_single_record_round_trip() {
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let (px, lb) = parse_cifar10::<f32>(&rec, Path::new("mem")).unwrap();
        assert_eq!(lb, vec![4]);
        let back: Vec<u8> = px.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, rec[1..]);
        assert!(parse_cifar10::<f32>(&rec[..3000], Path::new("mem")).is_err());
    }
}
