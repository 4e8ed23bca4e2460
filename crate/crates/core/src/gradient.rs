//! Dense and sparse gradient vectors.

use crate::error::{Error, Result};

/// Floating point storage type for gradients and projections.
///
/// Reductions are always carried out in `f64`; this trait only governs the
/// storage width of inputs and outputs.
pub trait Scalar: Copy + Send + Sync + PartialEq + std::fmt::Debug + Default + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// A per-sample gradient, stored densely or as sorted `(index, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientVector<T: Scalar = f32> {
    Dense(Vec<T>),
    Sparse {
        dim: usize,
        indices: Vec<usize>,
        values: Vec<T>,
    },
}

impl<T: Scalar> GradientVector<T> {
    pub fn dense(values: Vec<T>) -> Self {
        GradientVector::Dense(values)
    }

    /// Builds a sparse vector, validating that indices are strictly
    /// increasing and below `dim`.
    pub fn sparse(dim: usize, indices: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("sparse indices must be strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(Error::OutOfRange { index: last, dim });
            }
        }
        Ok(GradientVector::Sparse {
            dim,
            indices,
            values,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        GradientVector::Dense(vec![T::default(); dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            GradientVector::Dense(v) => v.len(),
            GradientVector::Sparse { dim, .. } => *dim,
        }
    }

    /// Number of nonzeros: stored entries for sparse, `|v| > 0` for dense.
    pub fn nnz(&self) -> usize {
        match self {
            GradientVector::Dense(v) => v.iter().filter(|x| x.to_f64() != 0.0).count(),
            GradientVector::Sparse { indices, .. } => indices.len(),
        }
    }

    /// Visits the nonzero coordinates in ascending index order.
    ///
    /// Dense storage skips exact zeros so dense and sparse representations of
    /// the same vector produce the same visit sequence.
    pub fn for_each_nonzero(&self, mut f: impl FnMut(usize, f64)) {
        match self {
            GradientVector::Dense(v) => {
                for (j, x) in v.iter().enumerate() {
                    let x = x.to_f64();
                    if x != 0.0 {
                        f(j, x);
                    }
                }
            }
            GradientVector::Sparse {
                indices, values, ..
            } => {
                for (&j, x) in indices.iter().zip(values) {
                    let x = x.to_f64();
                    if x != 0.0 {
                        f(j, x);
                    }
                }
            }
        }
    }

    pub fn get(&self, j: usize) -> T {
        match self {
            GradientVector::Dense(v) => v[j],
            GradientVector::Sparse {
                indices, values, ..
            } => match indices.binary_search(&j) {
                Ok(pos) => values[pos],
                Err(_) => T::default(),
            },
        }
    }

    pub fn to_dense(&self) -> Vec<T> {
        match self {
            GradientVector::Dense(v) => v.clone(),
            GradientVector::Sparse {
                dim,
                indices,
                values,
            } => {
                let mut out = vec![T::default(); *dim];
                for (&j, &x) in indices.iter().zip(values) {
                    out[j] = x;
                }
                out
            }
        }
    }

    /// Sparse copy holding only the nonzero coordinates.
    pub fn to_sparse(&self) -> Self {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        self.for_each_nonzero(|j, x| {
            indices.push(j);
            values.push(T::from_f64(x));
        });
        GradientVector::Sparse {
            dim: self.dim(),
            indices,
            values,
        }
    }

    pub fn cast<U: Scalar>(&self) -> GradientVector<U> {
        match self {
            GradientVector::Dense(v) => {
                GradientVector::Dense(v.iter().map(|x| U::from_f64(x.to_f64())).collect())
            }
            GradientVector::Sparse {
                dim,
                indices,
                values,
            } => GradientVector::Sparse {
                dim: *dim,
                indices: indices.clone(),
                values: values.iter().map(|x| U::from_f64(x.to_f64())).collect(),
            },
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.to_dense().into_iter().map(Scalar::to_f64).collect()
    }
}

impl<T: Scalar> From<Vec<T>> for GradientVector<T> {
    fn from(v: Vec<T>) -> Self {
        GradientVector::Dense(v)
    }
}

/// Multiply-add and allocation counters reported by the instrumented
/// compression paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    pub madds: u64,
    /// Bytes of scratch buffers allocated during the call, output included.
    pub aux_bytes: u64,
}

impl OpCount {
    pub fn add(&mut self, madds: u64) {
        self.madds += madds;
    }

    pub fn merge(&mut self, other: OpCount) {
        self.madds += other.madds;
        self.aux_bytes = self.aux_bytes.max(other.aux_bytes);
    }
}
