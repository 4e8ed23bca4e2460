//! Per-sample compressed gradients for a model and dataset.

use rayon::prelude::*;

use crate::compressor::Compressor;
use crate::error::Result;
use crate::factorized::FactorizedCompressor;
use crate::gradient::OpCount;
use crate::model::{Dataset, Loss, Mlp, Target};

/// Either a flat pipeline over the whole gradient or a per-layer
/// factorized compressor over the layer traces.
#[derive(Debug, Clone)]
pub enum Featurizer {
    Flat(Compressor),
    Factorized(FactorizedCompressor),
}

impl Featurizer {
    pub fn output_dim(&self) -> usize {
        match self {
            Featurizer::Flat(c) => c.output_dim(),
            Featurizer::Factorized(f) => f.output_dim(),
        }
    }

    /// Block sizes for the layer-wise mode; a flat compressor is one block.
    pub fn block_dims(&self) -> Vec<usize> {
        match self {
            Featurizer::Flat(c) => vec![c.output_dim()],
            Featurizer::Factorized(f) => f.block_dims(),
        }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        match self {
            Featurizer::Flat(c) => c.fingerprint(),
            Featurizer::Factorized(f) => f.fingerprint(),
        }
    }

    /// Compressed gradient of one sample.
    pub fn featurize(&self, model: &Mlp, x: &[f64], target: &Target, loss: Loss) -> Result<(Vec<f32>, OpCount)> {
        let (g, traces) = model.per_sample_grad_single(x, target, loss)?;
        let mut ops = OpCount::default();
        let out = match self {
            Featurizer::Flat(c) => c
                .compress_counted::<f64>(&g, &mut ops)?
                .into_iter()
                .map(|v| v as f32)
                .collect(),
            Featurizer::Factorized(f) => {
                let (v, layer_ops) = f.compress_model::<f32>(&traces)?;
                for op in layer_ops {
                    ops.merge(op.as_op_count());
                }
                v
            }
        };
        Ok((out, ops))
    }

    /// Compressed gradients of `rows`, in order, computed in parallel.
    pub fn featurize_rows(&self, model: &Mlp, data: &Dataset, rows: &[usize], loss: Loss) -> Result<Vec<Vec<f32>>> {
        rows.par_iter()
            .map(|&i| self.featurize(model, data.row(i), &data.target(i), loss).map(|(v, _)| v))
            .collect()
    }
}
