//! Reader and writer for the big-endian IDX files MNIST and EMNIST ship in.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{LabeledImageSet, IMAGE_SIDE};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated, expected {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: images are {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}")]
    BadDimensions { path: PathBuf, rows: usize, cols: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) struct RawIdx {
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn header(bytes: &[u8], words: usize, path: &Path) -> Result<Vec<u32>, IdxError> {
    if bytes.len() < 4 * words {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected: 4 * words,
            found: bytes.len(),
        });
    }
    Ok(bytes[..4 * words]
        .chunks_exact(4)
        .map(|w| u32::from_be_bytes([w[0], w[1], w[2], w[3]]))
        .collect())
}

fn check_magic(found: u32, expected: u32, path: &Path) -> Result<(), IdxError> {
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<(), IdxError> {
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(())
}

pub(crate) fn load_idx_raw(images_path: &Path, labels_path: &Path) -> Result<RawIdx, IdxError> {
    let img = read(images_path)?;
    let h = header(&img, 4, images_path)?;
    check_magic(h[0], IMAGES_MAGIC, images_path)?;
    let (count, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    if (rows, cols) != (IMAGE_SIDE, IMAGE_SIDE) {
        return Err(IdxError::BadDimensions {
            path: images_path.to_path_buf(),
            rows,
            cols,
        });
    }
    check_len(&img, 16 + count * rows * cols, images_path)?;

    let lab = read(labels_path)?;
    let h = header(&lab, 2, labels_path)?;
    check_magic(h[0], LABELS_MAGIC, labels_path)?;
    let label_count = h[1] as usize;
    check_len(&lab, 8 + label_count, labels_path)?;
    if label_count != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }

    Ok(RawIdx {
        pixels: img[16..16 + count * rows * cols]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect(),
        labels: lab[8..8 + count].to_vec(),
        rows,
        cols,
    })
}

/// Loads a 28×28 image file and its label file. Pixels are scaled by 1/255;
/// the class count is inferred as `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> crate::Result<LabeledImageSet> {
    let raw = load_idx_raw(images_path.as_ref(), labels_path.as_ref())?;
    let labels: Vec<usize> = raw.labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |&m| m + 1);
    LabeledImageSet::new(raw.pixels, labels, classes, raw.rows, raw.cols)
}

/// Writes a set as an IDX image/label file pair, quantizing pixels to bytes
/// with round-half-up.
pub fn write_idx(set: &LabeledImageSet, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> crate::Result<()> {
    if set.class_count() > 256 {
        return Err(crate::Error::InvalidArgument(
            "IDX label files hold at most 256 classes".into(),
        ));
    }
    let mut img = Vec::with_capacity(16 + set.pixels().len());
    for word in [IMAGES_MAGIC, set.len() as u32, set.height() as u32, set.width() as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend(set.pixels().iter().map(|&p| super::pgm::quantize(p)));
    let mut lab = Vec::with_capacity(8 + set.len());
    for word in [LABELS_MAGIC, set.len() as u32] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    lab.extend(set.labels().iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lab)?;
    Ok(())
}
