//! Cache and attribute stages over compressed gradients: FIM, damped
//! inverse products, influence and GradDot scores.

mod featurize;
mod fim;
mod store;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};

pub use featurize::Featurizer;
pub use fim::{FimState, FIM_MAGIC, FIM_VERSION};
pub use store::{GradientStore, StoreKind, STORE_MAGIC, STORE_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttributionMode {
    WholeModel { k: usize },
    /// Block-diagonal FIM, one block per linear layer.
    LayerwiseBlockDiagonal { blocks: Vec<usize> },
}

impl AttributionMode {
    pub fn dim(&self) -> usize {
        match self {
            AttributionMode::WholeModel { k } => *k,
            AttributionMode::LayerwiseBlockDiagonal { blocks } => blocks.iter().sum(),
        }
    }

    pub fn blocks(&self) -> Vec<usize> {
        match self {
            AttributionMode::WholeModel { k } => vec![*k],
            AttributionMode::LayerwiseBlockDiagonal { blocks } => blocks.clone(),
        }
    }

    /// Splits a concatenated vector into per-block slices.
    pub fn split<'a, T>(&self, v: &'a [T]) -> Result<Vec<&'a [T]>> {
        check_dim(self.dim(), v.len())?;
        let mut out = Vec::new();
        let mut start = 0;
        for b in self.blocks() {
            out.push(&v[start..start + b]);
            start += b;
        }
        Ok(out)
    }
}

/// Maps `ifvp` over every record of a raw store.
pub fn precondition_store(raw: &GradientStore, fim: &FimState, damping: f64) -> Result<GradientStore> {
    if raw.kind != StoreKind::Raw {
        return Err(Error::invalid("precondition_store expects a raw store"));
    }
    check_dim(fim.dim(), raw.dim())?;
    let rows: Vec<Vec<f32>> = (0..raw.len())
        .into_par_iter()
        .map(|i| {
            fim.ifvp(damping, raw.row(i))
                .map(|x| x.into_iter().map(|v| v as f32).collect())
        })
        .collect::<Result<_>>()?;
    GradientStore::from_rows(raw.dim(), StoreKind::Preconditioned, damping, raw.fingerprint, &rows)
}

fn dot_scores(store: &GradientStore, test: &[f32]) -> Vec<f64> {
    (0..store.len())
        .into_par_iter()
        .map(|i| {
            store
                .row(i)
                .iter()
                .zip(test)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        })
        .collect()
}

/// `<g_test, g_tilde_i>` for every record of a preconditioned store, in
/// store order.
pub fn influence_scores(pre: &GradientStore, test: &[f32], fingerprint: &[u8; 32]) -> Result<Vec<f64>> {
    pre.check_fingerprint(fingerprint)?;
    if pre.kind != StoreKind::Preconditioned {
        return Err(Error::invalid("influence scores need a preconditioned store"));
    }
    check_dim(pre.dim(), test.len())?;
    Ok(dot_scores(pre, test))
}

/// `<g_test, g_i>` over a raw store.
pub fn graddot_scores(raw: &GradientStore, test: &[f32], fingerprint: &[u8; 32]) -> Result<Vec<f64>> {
    raw.check_fingerprint(fingerprint)?;
    if raw.kind != StoreKind::Raw {
        return Err(Error::invalid("GradDot scores need a raw store"));
    }
    check_dim(raw.dim(), test.len())?;
    Ok(dot_scores(raw, test))
}

/// Sum over layers of `<g_test_l, g_tilde_{i,l}>`, one preconditioned
/// store per block.
pub fn layerwise_attribute(
    mode: &AttributionMode,
    stores: &[GradientStore],
    fingerprints: &[[u8; 32]],
    test: &[f32],
) -> Result<Vec<f64>> {
    let blocks = mode.split(test)?;
    check_dim(blocks.len(), stores.len())?;
    check_dim(blocks.len(), fingerprints.len())?;
    let n = stores.first().map_or(0, GradientStore::len);
    let mut total = vec![0.0; n];
    for ((store, fp), block) in stores.iter().zip(fingerprints).zip(blocks) {
        if store.len() != n {
            return Err(Error::invalid(format!(
                "layer stores disagree on record count ({} vs {n})",
                store.len()
            )));
        }
        let scores = influence_scores(store, block, fp)?;
        for (t, s) in total.iter_mut().zip(scores) {
            *t += s;
        }
    }
    Ok(total)
}

/// `train_index,score` rows.
pub fn write_scores_csv(path: &Path, scores: &[f64]) -> Result<()> {
    let mut s = String::from("train_index,score\n");
    for (i, v) in scores.iter().enumerate() {
        let _ = writeln!(s, "{i},{v:e}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Like [`write_scores_csv`] but labels each row with its own identifier.
pub fn write_scores_csv_with_ids(path: &Path, ids: &[usize], scores: &[f64]) -> Result<()> {
    check_dim(ids.len(), scores.len())?;
    let mut s = String::from("train_index,score\n");
    for (i, v) in ids.iter().zip(scores) {
        let _ = writeln!(s, "{i},{v:e}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Fingerprint of one layer block of a factorized compressor, so per-layer
/// stores cannot be swapped.
pub fn block_fingerprint(fingerprint: &[u8; 32], block: usize) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(fingerprint);
    h.update(b"block");
    h.update((block as u64).to_le_bytes());
    h.finalize().into()
}

pub const SCORES_MAGIC: &[u8; 4] = b"GSCR";

/// Score matrix for several test points as little-endian f32 blocks:
/// magic, `u64` test count, `u64` train count, then one block per test
/// point.
pub fn write_scores_binary(path: &Path, scores: &[Vec<f64>]) -> Result<()> {
    let n_train = scores.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(20 + 4 * n_train * scores.len());
    out.extend_from_slice(SCORES_MAGIC);
    out.extend_from_slice(&(scores.len() as u64).to_le_bytes());
    out.extend_from_slice(&(n_train as u64).to_le_bytes());
    for row in scores {
        check_dim(n_train, row.len())?;
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores_binary(path: &Path) -> Result<Vec<Vec<f32>>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 20 || &buf[..4] != SCORES_MAGIC {
        return Err(Error::format(path, "not a score file"));
    }
    let m = u64::from_le_bytes(buf[4..12].try_into().expect("8 bytes")) as usize;
    let n = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    if m.checked_mul(n).and_then(|e| e.checked_mul(4)) != Some(buf.len() - 20) {
        return Err(Error::format(path, "score file size does not match its header"));
    }
    let values: Vec<f32> = buf[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(values.chunks(n.max(1)).take(m).map(<[f32]>::to_vec).collect())
}

/// Indices of the `k` highest scores, best first; `k` is clamped to `n`.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
