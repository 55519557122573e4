//! Datasets: an image tensor with labels, plus loaders for the synthetic
//! two-signal corpus, IDX and CIFAR-10 binary files, and a compact on-disk
//! format of our own.

mod batch;
mod file;
mod parse;
mod synth;

pub use batch::{batches, Batches};
pub use file::{load_dataset, save_dataset};
pub use parse::{load_cifar10, load_idx, parse_cifar10, parse_idx_images, parse_idx_labels};
pub use synth::{
    class_signal, generate, nrf_flip_radius, rf_flip_radius, SyntheticData, SyntheticSpec, HEIGHT,
    NRF_ROWS, RF_ROWS, WIDTH,
};

use crate::error::{Error, Result};
use crate::tensor::Buffer;

/// Labeled images, batch-first `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Buffer,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Buffer, labels: Vec<usize>, n_classes: usize, name: &str) -> Result<Dataset> {
        if images.shape().len() != 4 {
            return Err(Error::Data(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bad, n_classes
            )));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
            name: name.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One image as `[1, C, H, W]`.
    pub fn image(&self, i: usize) -> Buffer {
        let mut shape = self.images.shape().to_vec();
        shape[0] = 1;
        Buffer::new(self.images.sample(i).to_vec(), shape).unwrap()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(crate::tensor::numel(&shape));
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!(
                    "subset index {} out of range for {} samples",
                    i,
                    self.len()
                )));
            }
            data.extend_from_slice(self.images.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(Buffer::new(data, shape)?, labels, self.n_classes, &self.name)
    }

    /// The first `n` samples, typically used to cap evaluation cost.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx)
    }
}
