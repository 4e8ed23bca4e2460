//! Seeded random projections: dense Gaussian and Rademacher, the subsampled
//! randomized Hadamard transform (FJLT), and the sparse JL transform (SJLT).
//!
//! All projection matrices are generated on the fly from counter-based
//! hashes of `(seed, row, column)`, so two projectors built from equal specs
//! are bit-identical and nothing proportional to `k * p` is ever stored
//! unless a matrix is explicitly materialized.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::gradient::{GradientVector, OpCount, Scalar};
use crate::prf;

/// Largest matrix (in entries) the oracle materializers will build.
pub const MATERIALIZE_LIMIT: u128 = 100_000_000;

const SIGN_SALT: u64 = 0x5349_474e;
const FJLT_SALT: u64 = 0x464a_4c54;
const RADEMACHER_SALT: u64 = 0x5241_4445;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SketchKind {
    Gaussian,
    Rademacher,
    Fjlt,
    Sjlt,
}

impl SketchKind {
    pub fn name(self) -> &'static str {
        match self {
            SketchKind::Gaussian => "gaussian",
            SketchKind::Rademacher => "rademacher",
            SketchKind::Fjlt => "fjlt",
            SketchKind::Sjlt => "sjlt",
        }
    }
}

impl fmt::Display for SketchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SketchSpec {
    pub kind: SketchKind,
    pub input_dim: usize,
    pub target_dim: usize,
    /// Nonzeros per column; only meaningful for SJLT.
    pub sparsity: usize,
    pub seed: u64,
    pub normalize: bool,
}

impl SketchSpec {
    pub fn new(kind: SketchKind, input_dim: usize, target_dim: usize, seed: u64) -> Self {
        SketchSpec {
            kind,
            input_dim,
            target_dim,
            sparsity: 1,
            seed,
            normalize: false,
        }
    }

    pub fn sjlt(input_dim: usize, target_dim: usize, sparsity: usize, seed: u64) -> Self {
        SketchSpec {
            sparsity,
            ..Self::new(SketchKind::Sjlt, input_dim, target_dim, seed)
        }
    }

    pub fn normalized(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.target_dim == 0 {
            return Err(Error::invalid("projection dimensions must be positive"));
        }
        if self.kind == SketchKind::Sjlt && (self.sparsity == 0 || self.sparsity > self.target_dim)
        {
            return Err(Error::invalid(format!(
                "SJLT sparsity s={} must satisfy 1 <= s <= k={}",
                self.sparsity, self.target_dim
            )));
        }
        if self.kind == SketchKind::Fjlt && self.target_dim > self.input_dim.next_power_of_two() {
            return Err(Error::invalid(format!(
                "FJLT target dim {} exceeds padded input dim {}",
                self.target_dim,
                self.input_dim.next_power_of_two()
            )));
        }
        if self.target_dim > self.input_dim {
            log::warn!(
                "{} projection expands {} -> {}",
                self.kind,
                self.input_dim,
                self.target_dim
            );
        }
        Ok(())
    }

    /// Scale applied to every output coordinate.
    fn scale(&self) -> f64 {
        match (self.kind, self.normalize) {
            (SketchKind::Sjlt, true) => 1.0 / (self.sparsity as f64).sqrt(),
            (SketchKind::Gaussian | SketchKind::Rademacher, true) => {
                1.0 / (self.target_dim as f64).sqrt()
            }
            (SketchKind::Fjlt, true) => 1.0 / (self.target_dim as f64).sqrt(),
            (SketchKind::Fjlt, false) => 1.0 / (self.input_dim.next_power_of_two() as f64).sqrt(),
            (_, false) => 1.0,
        }
    }
}

/// Rows and signs an SJLT column contributes to.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnHash {
    pub rows: Vec<usize>,
    pub signs: Vec<f64>,
}

/// Fills `rows`/`signs` (length `s`) for column `j`. Rows are drawn
/// uniformly without replacement by rejection on the attempt counter.
#[inline]
fn column_hash_into(seed: u64, k: usize, j: usize, rows: &mut [usize], signs: &mut [f64]) {
    for slot in 0..rows.len() {
        let mut attempt = 0u64;
        let row = loop {
            let r = prf::below(prf::hash3(seed, j as u64, slot as u64, attempt), k);
            if !rows[..slot].contains(&r) {
                break r;
            }
            attempt += 1;
        };
        rows[slot] = row;
        signs[slot] = prf::sign(prf::hash3(seed ^ SIGN_SALT, j as u64, slot as u64, 0));
    }
}

/// Rows and signs of SJLT column `j`; a pure function of `(seed, j)`.
pub fn derive_column_hash(spec: &SketchSpec, j: usize) -> Result<ColumnHash> {
    if spec.kind != SketchKind::Sjlt {
        return Err(Error::invalid("column hashes exist only for SJLT"));
    }
    spec.validate()?;
    if j >= spec.input_dim {
        return Err(Error::OutOfRange {
            index: j,
            dim: spec.input_dim,
        });
    }
    let mut rows = vec![0; spec.sparsity];
    let mut signs = vec![0.0; spec.sparsity];
    column_hash_into(spec.seed, spec.target_dim, j, &mut rows, &mut signs);
    Ok(ColumnHash { rows, signs })
}

/// Compressed-sparse-column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn nnz_in_column(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - self.col_ptr[j]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (j, &xj) in x.iter().enumerate().take(self.cols) {
            for (r, v) in self.column(j) {
                out[r] += v * xj;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows, self.cols);
        for j in 0..self.cols {
            for (r, v) in self.column(j) {
                m.data[r * self.cols + j] += v;
            }
        }
        m
    }
}

/// Row-major dense matrix used by the oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for t in 0..self.cols {
                let a = self.get(i, t);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(other.row(t)) {
                    *d += a * b;
                }
            }
        }
        out
    }
}

fn guard(rows: usize, cols: usize) -> Result<()> {
    let entries = rows as u128 * cols as u128;
    if entries > MATERIALIZE_LIMIT {
        Err(Error::MaterializeGuard {
            entries,
            limit: MATERIALIZE_LIMIT,
        })
    } else {
        Ok(())
    }
}

/// A validated projection ready to apply. Holds the FJLT row sample and,
/// optionally, a cached dense matrix for Gaussian/Rademacher.
#[derive(Debug, Clone)]
pub struct Projector {
    spec: SketchSpec,
    fjlt_rows: Vec<usize>,
    cached: Option<DenseMatrix>,
}

impl Projector {
    pub fn new(spec: SketchSpec) -> Result<Self> {
        spec.validate()?;
        let fjlt_rows = if spec.kind == SketchKind::Fjlt {
            let padded = spec.input_dim.next_power_of_two();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ FJLT_SALT);
            let mut all: Vec<usize> = (0..padded).collect();
            let (chosen, _) = all.partial_shuffle(&mut rng, spec.target_dim);
            chosen.to_vec()
        } else {
            Vec::new()
        };
        Ok(Projector {
            spec,
            fjlt_rows,
            cached: None,
        })
    }

    /// Precomputes the dense matrix for Gaussian/Rademacher projections.
    pub fn with_cached_matrix(mut self) -> Result<Self> {
        if matches!(self.spec.kind, SketchKind::Gaussian | SketchKind::Rademacher) {
            let (k, p) = (self.spec.target_dim, self.spec.input_dim);
            guard(k, p)?;
            // Unscaled: the output scale is applied after the product.
            let mut m = DenseMatrix::zeros(k, p);
            m.data.par_chunks_mut(p).enumerate().for_each(|(r, row)| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = self.dense_entry(r, j);
                }
            });
            self.cached = Some(m);
        }
        Ok(self)
    }

    pub fn spec(&self) -> &SketchSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.spec.target_dim
    }

    pub fn project<T: Scalar>(&self, g: &GradientVector<T>) -> Result<Vec<T>> {
        let mut ops = OpCount::default();
        self.project_counted(g, &mut ops)
    }

    pub fn project_counted<T: Scalar>(
        &self,
        g: &GradientVector<T>,
        ops: &mut OpCount,
    ) -> Result<Vec<T>> {
        check_dim(self.spec.input_dim, g.dim())?;
        let mut acc = vec![0.0f64; self.spec.target_dim];
        match self.spec.kind {
            SketchKind::Sjlt => {
                let mut rows = vec![0usize; self.spec.sparsity];
                let mut signs = vec![0.0f64; self.spec.sparsity];
                g.for_each_nonzero(|j, x| {
                    self.sjlt_scatter(j, x, &mut rows, &mut signs, &mut acc);
                });
                ops.add((self.spec.sparsity * g.nnz()) as u64);
            }
            SketchKind::Gaussian | SketchKind::Rademacher => {
                let x: Vec<f64> = g.to_f64_vec();
                self.dense_apply(&x, &mut acc);
                ops.add((self.spec.target_dim * self.spec.input_dim) as u64);
            }
            SketchKind::Fjlt => {
                self.fjlt_apply(g, &mut acc);
                let padded = self.spec.input_dim.next_power_of_two();
                ops.add(
                    (self.spec.input_dim
                        + padded * padded.trailing_zeros() as usize
                        + self.spec.target_dim) as u64,
                );
            }
        }
        let scale = self.spec.scale();
        Ok(acc.into_iter().map(|v| T::from_f64(v * scale)).collect())
    }

    /// Adds `x` times column `j` into `acc` (unscaled). Scratch buffers have
    /// length `s`.
    #[inline]
    pub(crate) fn sjlt_scatter(
        &self,
        j: usize,
        x: f64,
        rows: &mut [usize],
        signs: &mut [f64],
        acc: &mut [f64],
    ) {
        column_hash_into(self.spec.seed, self.spec.target_dim, j, rows, signs);
        for (&r, &sg) in rows.iter().zip(signs.iter()) {
            acc[r] += sg * x;
        }
    }

    pub(crate) fn output_scale(&self) -> f64 {
        self.spec.scale()
    }

    /// Projects a dense f64 slice into `out` (scaled), with the same op
    /// accounting as [`Projector::project_counted`].
    pub(crate) fn project_slice_into(&self, x: &[f64], out: &mut [f64], ops: &mut OpCount) {
        debug_assert_eq!(x.len(), self.spec.input_dim);
        debug_assert_eq!(out.len(), self.spec.target_dim);
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.spec.kind {
            SketchKind::Sjlt => {
                let s = self.spec.sparsity;
                let mut rows = vec![0usize; s];
                let mut signs = vec![0.0f64; s];
                let mut nnz = 0u64;
                for (j, &v) in x.iter().enumerate() {
                    if v != 0.0 {
                        self.sjlt_scatter(j, v, &mut rows, &mut signs, out);
                        nnz += 1;
                    }
                }
                ops.add(s as u64 * nnz);
            }
            SketchKind::Gaussian | SketchKind::Rademacher => {
                self.dense_apply(x, out);
                ops.add((self.spec.target_dim * self.spec.input_dim) as u64);
            }
            SketchKind::Fjlt => {
                self.fjlt_apply(&GradientVector::Dense(x.to_vec()), out);
                let padded = self.spec.input_dim.next_power_of_two();
                ops.add(
                    (self.spec.input_dim
                        + padded * padded.trailing_zeros() as usize
                        + self.spec.target_dim) as u64,
                );
            }
        }
        let scale = self.output_scale();
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
    }

    #[inline]
    fn dense_entry(&self, r: usize, j: usize) -> f64 {
        match self.spec.kind {
            SketchKind::Gaussian => prf::gaussian(self.spec.seed, r as u64, j as u64),
            SketchKind::Rademacher => prf::sign(prf::hash3(
                self.spec.seed,
                r as u64,
                j as u64,
                RADEMACHER_SALT,
            )),
            _ => unreachable!("dense entries exist only for Gaussian/Rademacher"),
        }
    }

    fn dense_apply(&self, x: &[f64], acc: &mut [f64]) {
        if let Some(m) = &self.cached {
            acc.copy_from_slice(&m.mul_vec(x));
            return;
        }
        acc.par_iter_mut().enumerate().for_each(|(r, out)| {
            let mut s = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                s += self.dense_entry(r, j) * xj;
            }
            *out = s;
        });
    }

    fn fjlt_sign(&self, j: usize) -> f64 {
        prf::sign(prf::hash3(self.spec.seed, j as u64, 0, FJLT_SALT))
    }

    fn fjlt_apply<T: Scalar>(&self, g: &GradientVector<T>, acc: &mut [f64]) {
        let padded = self.spec.input_dim.next_power_of_two();
        let mut buf = vec![0.0f64; padded];
        g.for_each_nonzero(|j, x| buf[j] = self.fjlt_sign(j) * x);
        walsh_hadamard_in_place(&mut buf);
        for (out, &row) in acc.iter_mut().zip(&self.fjlt_rows) {
            *out = buf[row];
        }
    }

    /// Explicit `k x p` matrix (scaling included). Oracle only.
    pub fn materialize_dense(&self) -> Result<DenseMatrix> {
        let (k, p) = (self.spec.target_dim, self.spec.input_dim);
        guard(k, p)?;
        let scale = self.spec.scale();
        let mut m = DenseMatrix::zeros(k, p);
        match self.spec.kind {
            SketchKind::Gaussian | SketchKind::Rademacher => {
                m.data.par_chunks_mut(p).enumerate().for_each(|(r, row)| {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = self.dense_entry(r, j) * scale;
                    }
                });
            }
            SketchKind::Fjlt => {
                for (t, &row) in self.fjlt_rows.iter().enumerate() {
                    for j in 0..p {
                        let h = if (row & j).count_ones() % 2 == 0 {
                            1.0
                        } else {
                            -1.0
                        };
                        m.data[t * p + j] = scale * h * self.fjlt_sign(j);
                    }
                }
            }
            SketchKind::Sjlt => return Ok(self.materialize_sparse()?.to_dense()),
        }
        Ok(m)
    }

    /// Explicit CSC matrix for SJLT, exactly `s` entries per column.
    pub fn materialize_sparse(&self) -> Result<SparseMatrix> {
        if self.spec.kind != SketchKind::Sjlt {
            return Err(Error::invalid("sparse materialization is SJLT only"));
        }
        let (k, p, s) = (self.spec.target_dim, self.spec.input_dim, self.spec.sparsity);
        guard(k, p)?;
        let scale = self.spec.scale();
        let mut col_ptr = Vec::with_capacity(p + 1);
        let mut row_idx = Vec::with_capacity(p * s);
        let mut values = Vec::with_capacity(p * s);
        let mut rows = vec![0; s];
        let mut signs = vec![0.0; s];
        col_ptr.push(0);
        for j in 0..p {
            column_hash_into(self.spec.seed, k, j, &mut rows, &mut signs);
            let mut pairs: Vec<(usize, f64)> =
                rows.iter().copied().zip(signs.iter().map(|sg| sg * scale)).collect();
            pairs.sort_by_key(|&(r, _)| r);
            for (r, v) in pairs {
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Ok(SparseMatrix {
            rows: k,
            cols: p,
            col_ptr,
            row_idx,
            values,
        })
    }
}

/// SJLT projection of `g` under `spec`.
pub fn sjlt_project<T: Scalar>(spec: &SketchSpec, g: &GradientVector<T>) -> Result<Vec<T>> {
    if spec.kind != SketchKind::Sjlt {
        return Err(Error::invalid("sjlt_project requires an SJLT spec"));
    }
    Projector::new(spec.clone())?.project(g)
}

pub fn sjlt_materialize(spec: &SketchSpec) -> Result<SparseMatrix> {
    Projector::new(spec.clone())?.materialize_sparse()
}

pub fn gaussian_project<T: Scalar>(spec: &SketchSpec, g: &GradientVector<T>) -> Result<Vec<T>> {
    if spec.kind != SketchKind::Gaussian {
        return Err(Error::invalid("gaussian_project requires a Gaussian spec"));
    }
    Projector::new(spec.clone())?.project(g)
}

pub fn rademacher_project<T: Scalar>(spec: &SketchSpec, g: &GradientVector<T>) -> Result<Vec<T>> {
    if spec.kind != SketchKind::Rademacher {
        return Err(Error::invalid("rademacher_project requires a Rademacher spec"));
    }
    Projector::new(spec.clone())?.project(g)
}

pub fn fjlt_project<T: Scalar>(spec: &SketchSpec, g: &GradientVector<T>) -> Result<Vec<T>> {
    if spec.kind != SketchKind::Fjlt {
        return Err(Error::invalid("fjlt_project requires an FJLT spec"));
    }
    Projector::new(spec.clone())?.project(g)
}

/// Unnormalized in-place Walsh-Hadamard transform; `buf.len()` must be a
/// power of two.
pub fn walsh_hadamard_in_place(buf: &mut [f64]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for block in buf.chunks_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchmarkResult {
    pub wall_time: Duration,
    /// Mean multiply-adds per projection.
    pub op_count: u64,
    pub median_relative_error: f64,
}

/// Random input with roughly `fraction * p` nonzeros (at least one), stored
/// sparsely.
pub fn random_sparse_input(rng: &mut impl Rng, p: usize, fraction: f64) -> GradientVector<f32> {
    let nnz = ((fraction * p as f64).round() as usize).clamp(1, p);
    let mut idx: Vec<usize> = (0..p).collect();
    let (chosen, _) = idx.partial_shuffle(rng, nnz);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    let normal = rand_distr::StandardNormal;
    let values = chosen
        .iter()
        .map(|_| {
            let v: f64 = rng.sample(normal);
            v as f32
        })
        .collect();
    GradientVector::Sparse {
        dim: p,
        indices: chosen,
        values,
    }
}

/// Times `trials` pairs of random inputs at the given nonzero fraction,
/// counting multiply-adds and measuring pairwise-distance distortion of the
/// normalized variant.
pub fn benchmark_projection(
    spec: &SketchSpec,
    sparsity_level: f64,
    trials: usize,
) -> Result<BenchmarkResult> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if !(sparsity_level > 0.0 && sparsity_level <= 1.0) {
        return Err(Error::invalid("sparsity level must lie in (0, 1]"));
    }
    let projector = Projector::new(spec.clone())?;
    let normalized = Projector::new(spec.clone().normalized(true))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x4245_4e43);
    let mut ops = OpCount::default();
    let mut wall = Duration::ZERO;
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let u = random_sparse_input(&mut rng, spec.input_dim, sparsity_level);
        let v = random_sparse_input(&mut rng, spec.input_dim, sparsity_level);
        let start = Instant::now();
        std::hint::black_box(projector.project_counted(&u, &mut ops)?);
        std::hint::black_box(projector.project_counted(&v, &mut ops)?);
        wall += start.elapsed();

        let pu = normalized.project(&u)?;
        let pv = normalized.project(&v)?;
        let (ud, vd) = (u.to_f64_vec(), v.to_f64_vec());
        let true_d = l2_dist(&ud, &vd);
        let proj_d = l2_dist_f32(&pu, &pv);
        if true_d > 0.0 {
            errors.push((proj_d - true_d).abs() / true_d);
        }
    }
    Ok(BenchmarkResult {
        wall_time: wall,
        op_count: ops.madds / (2 * trials) as u64,
        median_relative_error: median(&mut errors),
    })
}

pub(crate) fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn l2_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
