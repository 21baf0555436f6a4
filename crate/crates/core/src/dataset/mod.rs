//! Labeled digit images: IDX and CSV readers plus seeded splits.

mod csv;
mod idx;
mod split;

pub use self::csv::{read_csv_set, write_csv_set};
pub use self::idx::{read_idx_images, read_idx_labels, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use self::split::{stratified_split, Split, SplitSpec};

use std::path::Path;

use crate::{Error, Result, Tensor};

pub const MAX_DIGIT_LABEL: u8 = 9;

/// `N×1×H×W` images in `[0, 1]` with one digit label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<u8>,
    source: String,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<u8>, source: impl Into<String>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::dim(format!(
                "images must be [N, 1, H, W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > MAX_DIGIT_LABEL) {
            return Err(Error::invalid(format!("label {bad} is not a digit")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            source: source.into(),
        })
    }

    /// Images from an IDX image file and an IDX label file.
    pub fn from_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let (images, labels) = (images.as_ref(), labels.as_ref());
        let source = format!("idx:{}", images.display());
        Self::new(read_idx_images(images)?, read_idx_labels(labels)?, source)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// `[1, H, W]` view of image `i`.
    pub fn image(&self, i: usize) -> Tensor {
        let s = self.images.shape();
        Tensor::new(vec![1, s[2], s[3]], self.images.row(i).to_vec())
            .expect("row matches plane shape")
    }

    /// Copy of the given samples in the given order.
    pub fn subset(&self, indices: &[usize], source: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            source: source.into(),
        })
    }

    /// Images `[start, end)` as a model batch.
    pub(crate) fn batch(&self, start: usize, end: usize) -> Tensor {
        let idx: Vec<usize> = (start..end).collect();
        self.images.select_rows(&idx).expect("range within set")
    }
}
