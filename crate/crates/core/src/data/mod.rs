//! Datasets: synthetic 2-D domains, IDX ingestion and non-IID partitioning.

pub mod idx;
mod scenario;
mod synth;

pub use idx::load_idx;
pub use scenario::{
    label_quota, partition, ClientGroup, ClientPlan, ClientShard, DomainData, DomainSpec, Scenario,
    PRESETS,
};
pub use synth::{synth_domain, GaussianDomain};

use crate::tensor::Tensor;

/// Labeled samples stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.features[i * n..(i + 1) * n]
    }

    /// Gather rows `indices` into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (
            Tensor::from_vec(&shape, data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (t, labels) = self.batch(indices);
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features: t.into_data(),
            labels,
            classes: self.classes,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
