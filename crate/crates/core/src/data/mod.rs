//! Datasets, loaders and federated partitioning.

mod idx;
mod partition;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn::Batch;
use crate::tensor::Tensor;

pub use idx::{load_idx, write_idx};
pub use partition::{label_entropy, partition, ClientData, PartitionPlan, PartitionScheme};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Labelled samples. `inputs` has a leading sample dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(input_err(format!(
                "{} labels for inputs shaped {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(input_err(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.inputs.row_len();
        &self.inputs.data()[i * n..(i + 1) * n]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let row = self.inputs.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            inputs: Tensor::new(shape, data).expect("sized from row length"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let sub = self.subset(indices);
        Batch::new(sub.inputs, sub.labels)
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Write one row per sample: `label,f0,f1,...` with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let width = self.inputs.row_len();
        let mut header = vec!["label".to_string()];
        header.extend((0..width).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.sample(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
