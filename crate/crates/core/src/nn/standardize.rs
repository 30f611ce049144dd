use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::Result;
use crate::nn::ModelDoc;

/// Per-column affine map `(v - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; constant columns get
    /// scale 1.
    pub fn fit(t: &Tensor) -> Self {
        let scale = t
            .column_stds()
            .into_iter()
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Self {
            mean: t.column_means(),
            scale,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        let cols = t.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % cols;
            *v = (*v - self.mean[c]) / self.scale[c];
        }
        out
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn restore(&self, c: usize, v: f64) -> f64 {
        self.mean[c] + self.scale[c] * v
    }

    pub fn put(&self, doc: &mut ModelDoc, prefix: &str) {
        doc.put(&format!("{prefix}.mean"), self.mean.iter());
        doc.put(&format!("{prefix}.scale"), self.scale.iter());
    }

    pub fn get(doc: &ModelDoc, prefix: &str) -> Result<Self> {
        Ok(Self {
            mean: doc.get_list(&format!("{prefix}.mean"))?,
            scale: doc.get_list(&format!("{prefix}.scale"))?,
        })
    }
}
