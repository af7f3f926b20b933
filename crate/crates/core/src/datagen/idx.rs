//! IDX ubyte files (the MNIST distribution format). Headers are big-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Batch;
use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// How labels become rows of `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    OneHot { classes: usize },
    Raw,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::BadIdxMagic { expected, found });
    }
    Ok(())
}

/// Parses an image file; returns `N × (rows·cols)` pixels scaled to `[0, 1]`.
pub fn read_idx_images(bytes: &[u8]) -> Result<Matrix> {
    check_magic(bytes, IMAGES_MAGIC, "image file")?;
    let n = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(Error::Truncated(format!(
            "image file holds {} pixel bytes, header promises {}",
            body.len(),
            n * d
        )));
    }
    let data = body[..n * d].iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::new(n, d, data)
}

/// Parses a label file into raw class indices.
pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, "label file")?;
    let n = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated(format!(
            "label file holds {} labels, header promises {n}",
            body.len()
        )));
    }
    Ok(body[..n].to_vec())
}

/// Loads an image/label file pair into a batch.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    encoding: LabelEncoding,
) -> Result<Batch> {
    let x = read_idx_images(&fs::read(images_path)?)?;
    let labels = read_idx_labels(&fs::read(labels_path)?)?;
    if labels.len() != x.rows() {
        return Err(invalid(format!(
            "{} images but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let y = match encoding {
        LabelEncoding::Raw => Matrix::from_fn(labels.len(), 1, |i, _| f64::from(labels[i])),
        LabelEncoding::OneHot { classes } => {
            if let Some(&bad) = labels.iter().find(|&&l| usize::from(l) >= classes) {
                return Err(invalid(format!("label {bad} out of range for {classes} classes")));
            }
            Matrix::from_fn(labels.len(), classes, |i, j| {
                if usize::from(labels[i]) == j {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    Batch::new(x, y)
}

/// Encodes `n` images of `rows × cols` bytes.
pub fn write_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(invalid("pixel count does not match the header"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("images.idx3-ubyte");
        let lp = dir.join("labels.idx1-ubyte");
        fs::write(&ip, images).unwrap();
        fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn empty_pair_gives_empty_batch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &write_idx_images(0, 28, 28, &[]).unwrap(), &write_idx_labels(&[]));
        let b = load_idx(ip, lp, LabelEncoding::OneHot { classes: 10 }).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn shapes_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 10 * 784];
        pixels[0] = 255;
        let labels: Vec<u8> = (0..10).collect();
        let (ip, lp) = write_pair(dir.path(), &write_idx_images(10, 28, 28, &pixels).unwrap(), &write_idx_labels(&labels));
        let b = load_idx(&ip, &lp, LabelEncoding::OneHot { classes: 10 }).unwrap();
        assert_eq!(b.x.shape(), (10, 784));
        assert_eq!(b.x[(0, 0)], 1.0);
        assert_eq!(b.y.shape(), (10, 10));
        assert_eq!(b.y[(3, 3)], 1.0);
        let raw = load_idx(&ip, &lp, LabelEncoding::Raw).unwrap();
        assert_eq!(raw.y[(7, 0)], 7.0);
    }

    #[test]
    fn error_paths() {
        let mut bad = write_idx_images(1, 2, 2, &[0; 4]).unwrap();
        bad[3] = 0x01;
        let err = read_idx_images(&bad).unwrap_err();
        assert!(err.to_string().contains("bad IDX magic"));

        let good = write_idx_images(2, 2, 2, &[0; 8]).unwrap();
        assert!(matches!(read_idx_images(&good[..good.len() - 1]), Err(Error::Truncated(_))));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = write_pair(dir.path(), &good, &write_idx_labels(&[1, 2, 3]));
        assert!(load_idx(ip, lp, LabelEncoding::Raw).is_err());
    }
}
