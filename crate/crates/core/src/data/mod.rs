//! Datasets, synthetic generators, label-skew partitioners and the IDX loader.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx, parse_idx};
pub use partition::{
    label_counts, largest_remainder, mean_pairwise_tv, partition, write_partition_csv, ClientShard, PartitionSpec,
    Scheme,
};
pub use synthetic::{make_synthetic, GaussianMixture};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labelled dataset with a fixed feature dimension and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidConfig("dataset must not be empty".into()))?;
        let dim = first.features.len();
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::dim(format!("features of sample {i}"), dim, s.features.len()));
            }
            if s.label >= classes {
                return Err(Error::InvalidConfig(format!(
                    "sample {i} has label {} but only {classes} classes",
                    s.label
                )));
            }
        }
        Ok(Self { samples, dim, classes })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        label_counts(&self.samples, self.classes)
    }
}
