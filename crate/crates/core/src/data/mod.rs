//! Labeled image sets, IDX ingestion, checkpoints and PGM export.

pub mod checkpoint;
pub mod idx;
pub mod pgm;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainingMetadata};
pub use idx::{load_idx, write_idx, IdxError};
pub use pgm::{encode_pgm, export_pgm};

/// Side length of the character images the networks are built for.
pub const IMAGE_SIDE: usize = 28;

/// Single-channel images in `[0, 1]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pixels: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
    height: usize,
    width: usize,
}

/// A class that had fewer samples than requested by [`take_per_class`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassShortfall {
    pub class: usize,
    pub available: usize,
    pub requested: usize,
}

impl LabeledImageSet {
    pub fn new(
        pixels: Vec<f64>,
        labels: Vec<usize>,
        class_count: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if pixels.len() != labels.len() * height * width {
            return Err(Error::shape(
                "LabeledImageSet",
                format!(
                    "{} pixels for {} images of {height}x{width}",
                    pixels.len(),
                    labels.len()
                ),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            labels,
            class_count,
            height,
            width,
        })
    }

    /// Builds a set from a `[N, H, W, 1]` batch tensor.
    pub fn from_tensor<T: Element>(images: &Tensor<T>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        images.expect_rank(4, "LabeledImageSet::from_tensor")?;
        if images.dim(3) != 1 || images.dim(0) != labels.len() {
            return Err(Error::shape(
                "LabeledImageSet::from_tensor",
                format!("{:?} for {} labels", images.shape(), labels.len()),
            ));
        }
        let pixels = images.data().iter().map(|p| p.as_f64().clamp(0.0, 1.0)).collect();
        Self::new(pixels, labels, class_count, images.dim(1), images.dim(2))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Pixels rounded to the 1/255 grid an IDX file stores.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.pixels {
            *p = f64::from(pgm::quantize(*p)) / 255.0;
        }
        out
    }

    /// Same samples under a different class count.
    pub fn with_class_count(self, class_count: usize) -> Result<Self> {
        Self::new(self.pixels, self.labels, class_count, self.height, self.width)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let n = self.height * self.width;
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            height: self.height,
            width: self.width,
        }
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.height, self.width, self.class_count) != (other.height, other.width, other.class_count) {
            return Err(Error::InvalidArgument(
                "cannot concatenate sets with different image sizes or class counts".into(),
            ));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    /// Images at `indices` as a `[n, H, W, 1]` tensor.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::from_f64_lossy(p)));
        }
        Tensor::new([indices.len(), self.height, self.width, 1], data)
            .expect("batch shape matches pixel count")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Number of samples in each class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Transposes every image. EMNIST stores characters transposed relative to
/// MNIST; applying this twice is the identity.
pub fn orient_emnist(set: &LabeledImageSet) -> LabeledImageSet {
    let (h, w) = (set.height, set.width);
    let mut pixels = Vec::with_capacity(set.pixels.len());
    for i in 0..set.len() {
        let img = set.image(i);
        for r in 0..w {
            for c in 0..h {
                pixels.push(img[c * w + r]);
            }
        }
    }
    LabeledImageSet {
        pixels,
        labels: set.labels.clone(),
        class_count: set.class_count,
        height: w,
        width: h,
    }
}

/// Keeps the first `n` samples of each class, in file order. Classes with
/// fewer than `n` samples are kept whole and reported.
pub fn take_per_class(set: &LabeledImageSet, n: usize) -> Result<(LabeledImageSet, Vec<ClassShortfall>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("samples per class must be at least 1".into()));
    }
    let mut taken = vec![0usize; set.class_count];
    let mut keep = Vec::new();
    for (i, &label) in set.labels.iter().enumerate() {
        if taken[label] < n {
            taken[label] += 1;
            keep.push(i);
        }
    }
    let shortfalls: Vec<_> = taken
        .iter()
        .enumerate()
        .filter(|&(_, &count)| count < n)
        .map(|(class, &available)| ClassShortfall {
            class,
            available,
            requested: n,
        })
        .collect();
    for s in &shortfalls {
        log::warn!(
            "class {} has only {} samples ({} requested); keeping all of them",
            s.class,
            s.available,
            s.requested
        );
    }
    Ok((set.subset(&keep), shortfalls))
}

/// Dataset families the loader knows the file layout of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    EmnistLetters,
    EmnistBalanced,
    EmnistDigits,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::EmnistLetters => "emnist-letters",
            DatasetKind::EmnistBalanced => "emnist-balanced",
            DatasetKind::EmnistDigits => "emnist-digits",
            DatasetKind::Custom => "custom",
        }
    }

    /// Class count of the family, if fixed.
    pub fn class_count(self) -> Option<usize> {
        match self {
            DatasetKind::Mnist | DatasetKind::EmnistDigits => Some(10),
            DatasetKind::EmnistLetters => Some(26),
            DatasetKind::EmnistBalanced => Some(47),
            DatasetKind::Custom => None,
        }
    }

    /// EMNIST-letters labels run 1..=26 on disk.
    fn label_offset(self) -> usize {
        match self {
            DatasetKind::EmnistLetters => 1,
            _ => 0,
        }
    }

    pub fn is_emnist(self) -> bool {
        matches!(
            self,
            DatasetKind::EmnistLetters | DatasetKind::EmnistBalanced | DatasetKind::EmnistDigits
        )
    }

    /// `(images, labels)` file paths of a split inside `dir`.
    pub fn files(self, dir: &Path, split: Split) -> (PathBuf, PathBuf) {
        let prefix = match (self, split) {
            (DatasetKind::Mnist, Split::Train) => "train".to_string(),
            (DatasetKind::Mnist, Split::Test) => "t10k".to_string(),
            (DatasetKind::Custom, Split::Train) => "train".to_string(),
            (DatasetKind::Custom, Split::Test) => "test".to_string(),
            (kind, Split::Train) => format!("{}-train", kind.as_str()),
            (kind, Split::Test) => format!("{}-test", kind.as_str()),
        };
        (
            dir.join(format!("{prefix}-images-idx3-ubyte")),
            dir.join(format!("{prefix}-labels-idx1-ubyte")),
        )
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mnist" => DatasetKind::Mnist,
            "emnist-letters" => DatasetKind::EmnistLetters,
            "emnist-balanced" => DatasetKind::EmnistBalanced,
            "emnist-digits" => DatasetKind::EmnistDigits,
            "custom" => DatasetKind::Custom,
            other => return Err(Error::Config(format!("unknown dataset `{other}`"))),
        })
    }
}

/// Loads one split of a dataset directory, applying the family's label
/// offset, class count and EMNIST orientation.
pub fn load_dataset(dir: &Path, kind: DatasetKind, split: Split) -> Result<LabeledImageSet> {
    let (images, labels) = kind.files(dir, split);
    let raw = idx::load_idx_raw(&images, &labels)?;
    let offset = kind.label_offset();
    let labels = raw
        .labels
        .iter()
        .map(|&l| {
            (l as usize).checked_sub(offset).ok_or(Error::LabelOutOfRange {
                label: l as usize,
                classes: kind.class_count().unwrap_or(0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let class_count = match kind.class_count() {
        Some(m) => m,
        None => labels.iter().max().map_or(1, |&m| m + 1),
    };
    let set = LabeledImageSet::new(raw.pixels, labels, class_count, raw.rows, raw.cols)?;
    Ok(if kind.is_emnist() { orient_emnist(&set) } else { set })
}
