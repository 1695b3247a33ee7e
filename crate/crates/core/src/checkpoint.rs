//! JSON parameter checkpoints: a map from tensor name to
//! `{rows, cols, values}` with row-major values.
//!
//! Dense networks are stored as `<prefix>.layer.<l>.weight` and
//! `<prefix>.layer.<l>.bias` (a `1 × out` tensor).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseNet, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            rows: m.rows(),
            cols: m.cols(),
            values: m.data().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.tensors.insert(name.into(), Tensor::from(m));
    }

    pub fn insert_net(&mut self, prefix: &str, net: &DenseNet) {
        for (l, layer) in net.layers().iter().enumerate() {
            self.insert_matrix(format!("{prefix}.layer.{l}.weight"), &layer.weight);
            self.tensors.insert(
                format!("{prefix}.layer.{l}.bias"),
                Tensor {
                    rows: 1,
                    cols: layer.bias.len(),
                    values: layer.bias.clone(),
                },
            );
        }
    }

    fn tensor(&self, name: &str, rows: usize, cols: usize) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.rows != rows || t.cols != cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
        if t.values.len() != rows * cols {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` declares {rows}x{cols} but holds {} values",
                t.values.len()
            )));
        }
        if t.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{name}` has non-finite values")));
        }
        Ok(t)
    }

    pub fn read_matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        let t = self.tensor(name, rows, cols)?;
        Matrix::from_vec(rows, cols, t.values.clone())
    }

    /// Loads parameters into `net`, which supplies the expected shapes.
    pub fn load_net(&self, prefix: &str, net: &mut DenseNet) -> Result<()> {
        for (l, layer) in net.layers_mut().iter_mut().enumerate() {
            let (rows, cols) = (layer.out_dim(), layer.in_dim());
            layer.weight = self.read_matrix(&format!("{prefix}.layer.{l}.weight"), rows, cols)?;
            let bias = self.tensor(&format!("{prefix}.layer.{l}.bias"), 1, rows)?;
            layer.bias.copy_from_slice(&bias.values);
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
