//! Common view of the two extractor families for noise, auditing and metrics.

use crate::embedding::{self, EmbeddingMatrix, SparseInputVector};
use crate::error::{Error, Result};
use crate::nn::{DnnExtractor, ParamId};
use crate::numeric::Vector;

/// A feature extractor with an addressable flat parameter list.
pub trait Mlc: Clone {
    type Input: ?Sized;

    fn features(&self, x: &Self::Input) -> Result<Vector>;

    /// Input-space coordinates used to find similar inputs.
    fn coordinates(x: &Self::Input) -> Vec<f64>;

    /// Named parameter groups (layers) in a fixed order.
    fn parameter_groups(&self) -> Vec<(String, Vec<f64>)>;

    /// A copy with every parameter replaced, in `parameter_groups` order.
    fn with_parameters(&self, values: &[f64]) -> Result<Self>;

    fn param_count(&self) -> usize {
        self.parameter_groups().iter().map(|g| g.1.len()).sum()
    }

    fn flat_parameters(&self) -> Vec<f64> {
        self.parameter_groups().into_iter().flat_map(|g| g.1).collect()
    }

    /// `(group name, size)` pairs; equal shapes mean comparable models.
    fn shape(&self) -> Vec<(String, usize)> {
        self.parameter_groups().into_iter().map(|(n, v)| (n, v.len())).collect()
    }
}

impl Mlc for EmbeddingMatrix {
    type Input = SparseInputVector;

    fn features(&self, x: &SparseInputVector) -> Result<Vector> {
        embedding::extract(self, x)
    }

    fn coordinates(x: &SparseInputVector) -> Vec<f64> {
        x.to_dense()
    }

    fn parameter_groups(&self) -> Vec<(String, Vec<f64>)> {
        vec![("M".to_string(), self.values().to_vec())]
    }

    fn shape(&self) -> Vec<(String, usize)> {
        vec![(format!("M {}x{}", self.dim(), self.vocab()), self.values().len())]
    }

    fn with_parameters(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.values().len() {
            return Err(Error::dim("parameter count mismatch"));
        }
        let mut out = self.clone();
        out.values_mut().copy_from_slice(values);
        Ok(out)
    }
}

impl Mlc for DnnExtractor {
    type Input = [f64];

    fn features(&self, x: &[f64]) -> Result<Vector> {
        DnnExtractor::features(self, x)
    }

    fn coordinates(x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    fn parameter_groups(&self) -> Vec<(String, Vec<f64>)> {
        self.layers()
            .enumerate()
            .map(|(i, l)| (format!("layer{i}"), l.params().collect()))
            .collect()
    }

    fn shape(&self) -> Vec<(String, usize)> {
        self.layers()
            .enumerate()
            .map(|(i, l)| (format!("layer{i} {}x{}", l.outputs, l.inputs), l.param_count()))
            .collect()
    }

    fn with_parameters(&self, values: &[f64]) -> Result<Self> {
        if values.len() != DnnExtractor::param_count(self) {
            return Err(Error::dim("parameter count mismatch"));
        }
        let ids: Vec<ParamId> = self.param_ids().collect();
        let mut out = self.clone();
        for (id, &v) in ids.into_iter().zip(values) {
            out.set_param(id, v);
        }
        Ok(out)
    }
}
