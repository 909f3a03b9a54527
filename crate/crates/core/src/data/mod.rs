//! Lesion datasets: the synthetic generator, directory I/O and augmentation.

mod augment;
mod loader;
pub mod netpbm;
mod synthetic;

pub use augment::{augment, flip_horizontal, flip_vertical, resize_normalize, AugmentConfig};
pub use loader::{export_dataset, load_directory_dataset};
pub use synthetic::{generate_dataset, ArtifactLevel, ArtifactParams, ClassParams, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its ground-truth mask and class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionSample {
    pub id: String,
    pub label: usize,
    /// `[3,S,S]`, values in `[0,1]`.
    pub image: Tensor,
    /// `[1,S,S]`, values exactly 0 or 1.
    pub mask: Tensor,
}

impl LesionSample {
    pub fn side(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.numel() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.side();
        if self.image.shape() != [3, s, s] || self.mask.shape() != [1, s, s] {
            return Err(Error::Dataset(format!(
                "sample {}: image {:?} / mask {:?} are not [3,S,S] / [1,S,S]",
                self.id,
                self.image.shape(),
                self.mask.shape()
            )));
        }
        if !self.image.all_finite() {
            return Err(Error::Dataset(format!("sample {}: non-finite pixels", self.id)));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Dataset(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }
}

/// Stacks samples into `[B,3,S,S]` images and `[B,1,S,S]` masks.
pub fn stack(samples: &[&LesionSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("cannot stack an empty batch".into()))?;
    let s = first.side();
    let mut images = Vec::with_capacity(samples.len() * 3 * s * s);
    let mut masks = Vec::with_capacity(samples.len() * s * s);
    for sample in samples {
        if sample.side() != s {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first.image.shape().to_vec(),
                right: sample.image.shape().to_vec(),
            });
        }
        images.extend_from_slice(sample.image.data());
        masks.extend_from_slice(sample.mask.data());
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, s, s], images)?,
        Tensor::new(vec![samples.len(), 1, s, s], masks)?,
    ))
}

/// Distinct labels present in `samples`, ascending.
pub fn class_labels(samples: &[LesionSample]) -> Vec<usize> {
    let mut labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}
