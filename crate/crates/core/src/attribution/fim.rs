//! Fisher information accumulation and damped inverse products.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::gradient::Scalar;

pub const FIM_MAGIC: &[u8; 4] = b"GFIM";
pub const FIM_VERSION: u32 = 1;

/// Row-wise parallelism only pays off above this dimension.
const PAR_MIN_DIM: usize = 64;

/// Accumulates `sum_i g_i g_i^T` in f64; dividing by `n` is deferred to
/// [`FimState::finalize`].
#[derive(Debug, Clone)]
pub struct FimState {
    k: usize,
    n: u64,
    /// Row-major `k x k` running sum.
    sum: Vec<f64>,
    finalized: Option<Vec<f64>>,
    factor: Option<Cholesky>,
}

/// Lower-triangular factor of `F + damping * I`, row-major.
#[derive(Debug, Clone)]
struct Cholesky {
    damping: f64,
    lower: Vec<f64>,
}

impl FimState {
    pub fn new(k: usize) -> Self {
        FimState {
            k,
            n: 0,
            sum: vec![0.0; k * k],
            finalized: None,
            factor: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn accumulate<T: Scalar>(&mut self, g: &[T]) -> Result<()> {
        self.accumulate_batch(std::slice::from_ref(&g))
    }

    /// Rank-1 updates for a batch. Each output row is owned by one task and
    /// visits the samples in order, so the result does not depend on the
    /// thread count.
    pub fn accumulate_batch<T: Scalar, R: AsRef<[T]> + Sync>(&mut self, batch: &[R]) -> Result<()> {
        for g in batch {
            check_dim(self.k, g.as_ref().len())?;
        }
        let k = self.k;
        let rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|g| g.as_ref().iter().map(|v| v.to_f64()).collect())
            .collect();
        let update = |(r, out): (usize, &mut [f64])| {
            for g in &rows {
                let gr = g[r];
                if gr != 0.0 {
                    for (o, &gc) in out.iter_mut().zip(g) {
                        *o += gr * gc;
                    }
                }
            }
        };
        if k >= PAR_MIN_DIM {
            self.sum.par_chunks_mut(k.max(1)).enumerate().for_each(update);
        } else {
            self.sum.chunks_mut(k.max(1)).enumerate().for_each(update);
        }
        self.n += batch.len() as u64;
        self.finalized = None;
        self.factor = None;
        Ok(())
    }

    /// Adds another state's sums (same dimension).
    pub fn merge(&mut self, other: &FimState) -> Result<()> {
        check_dim(self.k, other.k)?;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.n += other.n;
        self.finalized = None;
        self.factor = None;
        Ok(())
    }

    /// `F = sum / n` (zero when no samples were seen).
    pub fn finalize(&mut self) -> &[f64] {
        let n = self.n.max(1) as f64;
        let f = self.finalized.insert(self.sum.iter().map(|v| v / n).collect());
        f
    }

    /// The finalized matrix, row-major.
    pub fn matrix(&mut self) -> &[f64] {
        if self.finalized.is_none() {
            self.finalize();
        }
        self.finalized.as_deref().expect("just finalized")
    }

    pub fn damping(&self) -> Option<f64> {
        self.factor.as_ref().map(|c| c.damping)
    }

    /// Cholesky factorization of `F + damping * I`, cached until the next
    /// accumulation or a different damping.
    pub fn factorize(&mut self, damping: f64) -> Result<()> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::invalid(format!("damping must be finite and >= 0, got {damping}")));
        }
        if self.damping() == Some(damping) {
            return Ok(());
        }
        let k = self.k;
        let mut a = self.matrix().to_vec();
        for i in 0..k {
            a[i * k + i] += damping;
        }
        let lower = cholesky_in_place(a, k, damping)?;
        self.factor = Some(Cholesky { damping, lower });
        Ok(())
    }

    /// `(F + damping * I)^{-1} g`. The cached factorization must have been
    /// computed for exactly this damping.
    pub fn ifvp<T: Scalar>(&self, damping: f64, g: &[T]) -> Result<Vec<f64>> {
        check_dim(self.k, g.len())?;
        let chol = self.factor.as_ref().ok_or_else(|| {
            Error::invalid("no factorization available; call factorize(damping) first")
        })?;
        if chol.damping != damping {
            return Err(Error::invalid(format!(
                "stale factorization: computed for damping {:e}, requested {:e}",
                chol.damping, damping
            )));
        }
        let mut x: Vec<f64> = g.iter().map(|v| v.to_f64()).collect();
        solve_lower(&chol.lower, self.k, &mut x);
        solve_upper_transposed(&chol.lower, self.k, &mut x);
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(24 + 8 * self.sum.len());
        out.extend_from_slice(FIM_MAGIC);
        out.extend_from_slice(&FIM_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        for v in &self.sum {
            out.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 24 || &buf[..4] != FIM_MAGIC {
            return Err(Error::format(path, "not a FIM file"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != FIM_VERSION {
            return Err(Error::format(path, format!("unsupported FIM version {version}")));
        }
        let k = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
        let n = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes"));
        let expected = k
            .checked_mul(k)
            .and_then(|e| e.checked_mul(8))
            .and_then(|e| e.checked_add(24))
            .ok_or_else(|| Error::format(path, "FIM size overflow"))?;
        if buf.len() != expected {
            return Err(Error::format(
                path,
                format!("FIM file has {} bytes, header implies {expected}", buf.len()),
            ));
        }
        let sum = buf[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(FimState {
            k,
            n,
            sum,
            finalized: None,
            factor: None,
        })
    }
}

/// Row-oriented Cholesky of the symmetric matrix `a` (row-major, lower
/// triangle read). Returns `L` with `L L^T = a`.
fn cholesky_in_place(mut a: Vec<f64>, k: usize, damping: f64) -> Result<Vec<f64>> {
    let max_diag = (0..k).map(|i| a[i * k + i].abs()).fold(0.0f64, f64::max);
    let tiny = max_diag * 1e-13;
    for j in 0..k {
        let (done, rest) = a.split_at_mut(j * k);
        let row_j = &mut rest[..k];
        // Row j left of the diagonal, from already-finished rows.
        for c in 0..j {
            let row_c = &done[c * k..c * k + c + 1];
            let s: f64 = row_j[..c].iter().zip(&row_c[..c]).map(|(x, y)| x * y).sum();
            row_j[c] = (row_j[c] - s) / row_c[c];
        }
        let d = row_j[j] - row_j[..j].iter().map(|x| x * x).sum::<f64>();
        if !(d > tiny) || !d.is_finite() {
            return Err(Error::Factorization { pivot: j, damping });
        }
        row_j[j] = d.sqrt();
        for v in &mut row_j[j + 1..] {
            *v = 0.0;
        }
    }
    Ok(a)
}

fn solve_lower(l: &[f64], k: usize, x: &mut [f64]) {
    for i in 0..k {
        let row = &l[i * k..i * k + i];
        let s: f64 = row.iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
        x[i] = (x[i] - s) / l[i * k + i];
    }
}

fn solve_upper_transposed(l: &[f64], k: usize, x: &mut [f64]) {
    for i in (0..k).rev() {
        x[i] /= l[i * k + i];
        let xi = x[i];
        for (j, xj) in x.iter_mut().enumerate().take(i) {
            *xj -= l[i * k + j] * xi;
        }
    }
}
