//! Coordinate-selection sparsifiers.
//!
//! A mask keeps a sorted subset of coordinates and drops the rest; applying
//! it is a plain gather with no rescaling.

mod factorized;
mod io;
mod selective;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::gradient::{GradientVector, OpCount, Scalar};

pub use factorized::{
    factorized_mean_correlation, factorized_objective, selective_train_factorized, FactorizedSelectiveProblem,
    FactorizedSelectiveResult,
};
pub use io::{read_mask_file, write_mask_file, MASK_MAGIC, MASK_VERSION};
pub use selective::{
    mean_correlation, selective_objective, selective_objective_with_grad, selective_train,
    GradientEstimator, SelectiveMaskProblem, SelectiveResult, TemperatureSchedule, TraceRow,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskProvenance {
    Random { seed: u64 },
    /// Trained Selective Mask, tagged with a fingerprint of its training data.
    Selective { fingerprint: String },
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    input_dim: usize,
    indices: Vec<usize>,
    pub provenance: MaskProvenance,
}

impl MaskSpec {
    pub fn new(input_dim: usize, indices: Vec<usize>, provenance: MaskProvenance) -> Result<Self> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("mask indices must be strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= input_dim {
                return Err(Error::OutOfRange {
                    index: last,
                    dim: input_dim,
                });
            }
        }
        Ok(MaskSpec {
            input_dim,
            indices,
            provenance,
        })
    }

    pub fn identity(p: usize) -> Self {
        MaskSpec {
            input_dim: p,
            indices: (0..p).collect(),
            provenance: MaskProvenance::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of kept coordinates.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn apply<T: Scalar>(&self, g: &GradientVector<T>) -> Result<Vec<T>> {
        self.apply_counted(g, &mut OpCount::default())
    }

    pub fn apply_counted<T: Scalar>(
        &self,
        g: &GradientVector<T>,
        ops: &mut OpCount,
    ) -> Result<Vec<T>> {
        check_dim(self.input_dim, g.dim())?;
        ops.add(self.indices.len() as u64);
        Ok(match g {
            GradientVector::Dense(v) => self.indices.iter().map(|&j| v[j]).collect(),
            GradientVector::Sparse {
                indices, values, ..
            } => {
                let mut out = vec![T::default(); self.indices.len()];
                // Both index lists are sorted: walk them together.
                let (mut a, mut b) = (0, 0);
                while a < self.indices.len() && b < indices.len() {
                    match self.indices[a].cmp(&indices[b]) {
                        std::cmp::Ordering::Less => a += 1,
                        std::cmp::Ordering::Greater => b += 1,
                        std::cmp::Ordering::Equal => {
                            out[a] = values[b];
                            a += 1;
                            b += 1;
                        }
                    }
                }
                out
            }
        })
    }

    /// Embeds a masked vector back into `input_dim` coordinates (zeros
    /// elsewhere).
    pub fn scatter<T: Scalar>(&self, masked: &[T]) -> Result<Vec<T>> {
        check_dim(self.indices.len(), masked.len())?;
        let mut out = vec![T::default(); self.input_dim];
        for (&j, &v) in self.indices.iter().zip(masked) {
            out[j] = v;
        }
        Ok(out)
    }

    /// Selection matrix `M` (k' x p) as row-major dense. Oracle only.
    pub fn materialize(&self) -> Result<crate::sketch::DenseMatrix> {
        let entries = self.indices.len() as u128 * self.input_dim as u128;
        if entries > crate::sketch::MATERIALIZE_LIMIT {
            return Err(Error::MaterializeGuard {
                entries,
                limit: crate::sketch::MATERIALIZE_LIMIT,
            });
        }
        let mut m = crate::sketch::DenseMatrix::zeros(self.indices.len(), self.input_dim);
        for (t, &j) in self.indices.iter().enumerate() {
            m.data[t * self.input_dim + j] = 1.0;
        }
        Ok(m)
    }
}

/// Uniform `k'`-subset of `[p]`, sorted, deterministic in `seed`.
pub fn random_mask(p: usize, k: usize, seed: u64) -> Result<MaskSpec> {
    if k > p {
        return Err(Error::invalid(format!(
            "mask size {k} exceeds input dimension {p}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, p, k).into_vec();
    indices.sort_unstable();
    Ok(MaskSpec {
        input_dim: p,
        indices,
        provenance: MaskProvenance::Random { seed },
    })
}

pub fn apply_mask<T: Scalar>(mask: &MaskSpec, g: &GradientVector<T>) -> Result<Vec<T>> {
    mask.apply(g)
}

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
