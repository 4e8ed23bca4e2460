//! Linear datamodeling score: retrain on random half-subsets, predict each
//! subset's test loss from summed attributions, and rank-correlate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{mean_std, spearman};
use crate::attribution::{AttributionMode, Featurizer, FimState};
use crate::error::{Error, Result};
use crate::model::{train_sgd, Dataset, Mlp, TrainConfig};
use crate::prf;

/// `1e-7, 1e-6, ..., 1e2`.
pub const DEFAULT_DAMPING_GRID: [f64; 10] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2];

const SUBSET_SALT: u64 = 0x4c44_5353;

#[derive(Debug, Clone, PartialEq)]
pub struct LdsConfig {
    pub subsets: usize,
    pub fraction: f64,
    pub train: TrainConfig,
    pub seed: u64,
    /// Share of test points used only for the damping search.
    pub val_fraction: f64,
    pub damping_grid: Vec<f64>,
    pub null_shuffles: usize,
    /// Multiplies summed attributions before ranking. Influence scores
    /// estimate how much a sample lowers the test loss, so the default
    /// `-1` makes larger predictions mean larger losses.
    pub sign: f64,
}

impl Default for LdsConfig {
    fn default() -> Self {
        LdsConfig {
            subsets: 50,
            fraction: 0.5,
            train: TrainConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            damping_grid: DEFAULT_DAMPING_GRID.to_vec(),
            null_shuffles: 200,
            sign: -1.0,
        }
    }
}

impl LdsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subsets < 2 {
            return Err(Error::invalid("LDS needs at least 2 subsets"));
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::invalid("subset fraction must lie in (0, 1)"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("validation fraction must lie in (0, 1)"));
        }
        if self.damping_grid.is_empty() {
            return Err(Error::invalid("damping grid is empty"));
        }
        Ok(())
    }
}

/// `m` seeded subsets of `0..n`, each with exactly `floor(fraction * n)`
/// sorted positions.
pub fn sample_subsets(n: usize, m: usize, fraction: f64, seed: u64) -> Vec<Vec<usize>> {
    let size = (fraction * n as f64).floor() as usize;
    (0..m)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(prf::hash3(seed, b as u64, 0, SUBSET_SALT));
            let mut s = rand::seq::index::sample(&mut rng, n, size).into_vec();
            s.sort_unstable();
            s
        })
        .collect()
}

/// Retraining results shared by every attribution method under test.
#[derive(Debug, Clone)]
pub struct Retrained {
    /// Training rows of the dataset, in the order attribution scores use.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// Positions into `train_rows`.
    pub subsets: Vec<Vec<usize>>,
    pub subset_seeds: Vec<u64>,
    /// `losses[b][t]`: test loss of the model retrained on subset `b`.
    pub losses: Vec<Vec<f64>>,
}

/// Retrains `init` on every subset (in parallel) and records test losses.
/// All retrainings start from the same initialization; each subset gets
/// its own shuffle seed.
pub fn retrain_subsets(init: &Mlp, data: &Dataset, cfg: &LdsConfig) -> Result<Retrained> {
    cfg.validate()?;
    let train_rows = data.train_indices();
    let test_rows = data.test_indices();
    if test_rows.is_empty() {
        return Err(Error::invalid("LDS needs test rows"));
    }
    let subsets = sample_subsets(train_rows.len(), cfg.subsets, cfg.fraction, cfg.seed);
    let subset_seeds: Vec<u64> = (0..cfg.subsets)
        .map(|b| prf::hash3(cfg.train.seed, b as u64, 1, SUBSET_SALT))
        .collect();
    let losses = subsets
        .par_iter()
        .zip(&subset_seeds)
        .enumerate()
        .map(|(b, (subset, &seed))| {
            let rows: Vec<usize> = subset.iter().map(|&p| train_rows[p]).collect();
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let report = train_sgd(init, data, &tc, Some(&rows)).map_err(|e| match e {
                Error::Divergence { .. } | Error::Numerical(_) => {
                    Error::Numerical(format!("retraining on subset {b} failed: {e}"))
                }
                other => other,
            })?;
            test_rows
                .iter()
                .map(|&t| report.model.loss(data.row(t), &data.target(t), cfg.train.loss))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Retrained {
        train_rows,
        test_rows,
        subsets,
        subset_seeds,
        losses,
    })
}

/// `sign * sum_{i in S_b} scores[i]` for every subset.
pub fn subset_predictions(subsets: &[Vec<usize>], scores: &[f64], sign: f64) -> Vec<f64> {
    subsets
        .iter()
        .map(|s| sign * s.iter().map(|&i| scores[i]).sum::<f64>())
        .collect()
}

/// Per test point Spearman correlation between `predictions[b][t]` and
/// `losses[b][t]` over subsets `b`. Constant columns give `None`.
pub fn lds_from_predictions(predictions: &[Vec<f64>], losses: &[Vec<f64>]) -> Vec<Option<f64>> {
    let n_test = losses.first().map_or(0, Vec::len);
    (0..n_test)
        .map(|t| {
            let p: Vec<f64> = predictions.iter().map(|row| row[t]).collect();
            let l: Vec<f64> = losses.iter().map(|row| row[t]).collect();
            spearman(&p, &l)
        })
        .collect()
}

/// Mean LDS for a subset of test positions given per-test-point scores
/// (`scores[j]` belongs to `tests[j]`).
fn mean_lds(r: &Retrained, tests: &[usize], scores: &[Vec<f64>], sign: f64) -> (f64, Vec<f64>) {
    let rhos: Vec<f64> = tests
        .iter()
        .zip(scores)
        .filter_map(|(&t, s)| {
            let pred = subset_predictions(&r.subsets, s, sign);
            let loss: Vec<f64> = r.losses.iter().map(|row| row[t]).collect();
            spearman(&pred, &loss)
        })
        .collect();
    if rhos.len() < tests.len() {
        log::warn!(
            "{} of {} test points had constant predictions or losses and were skipped",
            tests.len() - rhos.len(),
            tests.len()
        );
    }
    let mean = if rhos.is_empty() {
        f64::NAN
    } else {
        rhos.iter().sum::<f64>() / rhos.len() as f64
    };
    (mean, rhos)
}

/// Mean LDS after independently permuting each test point's scores across
/// training samples, repeated `shuffles` times.
pub fn null_distribution(
    r: &Retrained,
    tests: &[usize],
    scores: &[Vec<f64>],
    sign: f64,
    shuffles: usize,
    seed: u64,
) -> Vec<f64> {
    (0..shuffles)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(prf::hash3(seed, s as u64, 2, SUBSET_SALT));
            let shuffled: Vec<Vec<f64>> = scores
                .iter()
                .map(|row| {
                    let mut v = row.clone();
                    v.shuffle(&mut rng);
                    v
                })
                .collect();
            mean_lds(r, tests, &shuffled, sign).0
        })
        .collect()
}

/// Splits test positions `0..n` into disjoint validation and evaluation
/// sets (at least one of each).
pub fn split_validation(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("need at least 2 test points to split off validation"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(prf::hash3(seed, 0, 3, SUBSET_SALT)));
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut val = order[..n_val].to_vec();
    let mut eval = order[n_val..].to_vec();
    val.sort_unstable();
    eval.sort_unstable();
    Ok((val, eval))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DampingSearch {
    pub best: f64,
    /// Each candidate with its validation score, `None` where the
    /// factorization failed.
    pub table: Vec<(f64, Option<f64>)>,
}

/// Picks the damping maximizing `evaluate`; ties go to the smaller value.
/// Candidates whose factorization fails are skipped.
pub fn damping_grid_search(grid: &[f64], mut evaluate: impl FnMut(f64) -> Result<f64>) -> Result<DampingSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("damping grid is empty"));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut table = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &sorted {
        match evaluate(lambda) {
            Ok(v) => {
                table.push((lambda, Some(v)));
                if v.is_finite() && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((lambda, v));
                }
            }
            Err(Error::Factorization { .. }) => {
                log::warn!("damping {lambda:e}: factorization failed, skipping");
                table.push((lambda, None));
            }
            Err(e) => return Err(e),
        }
    }
    let (best, _) = best.ok_or_else(|| {
        Error::Numerical("no damping value in the grid gave a usable factorization".into())
    })?;
    Ok(DampingSearch { best, table })
}

#[derive(Debug, Clone)]
pub struct LdsReport {
    /// Spearman correlation per evaluation test point.
    pub rho: Vec<f64>,
    pub mean_rho: f64,
    /// Dataset rows of the evaluation test points.
    pub eval_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    pub damping: f64,
    pub damping_table: Vec<(f64, Option<f64>)>,
    pub subset_seeds: Vec<u64>,
    pub null_mean: f64,
    pub null_std: f64,
}

impl LdsReport {
    /// Distance of the mean from the null mean, in null standard deviations.
    pub fn null_z(&self) -> f64 {
        (self.mean_rho - self.null_mean) / self.null_std
    }
}

/// Influence scores of every train sample for the given test features,
/// `(F_l + damping I)^{-1}` applied block-wise to the test side.
fn block_scores(
    fims: &[FimState],
    mode: &AttributionMode,
    damping: f64,
    train: &[Vec<f32>],
    test: &[&Vec<f32>],
) -> Result<Vec<Vec<f64>>> {
    let blocks = mode.blocks();
    test.par_iter()
        .map(|g| {
            let mut pre = Vec::with_capacity(g.len());
            for (fim, part) in fims.iter().zip(mode.split(g)?) {
                pre.extend(fim.ifvp(damping, part)?);
            }
            debug_assert_eq!(pre.len(), blocks.iter().sum::<usize>());
            Ok(train
                .iter()
                .map(|row| row.iter().zip(&pre).map(|(&a, b)| a as f64 * b).sum())
                .collect())
        })
        .collect()
}

/// Full LDS protocol for one attribution method: features of the trained
/// model, FIM per block, damping chosen on validation test points, LDS and
/// its shuffled-score null on the remaining test points.
pub fn lds_evaluate(
    cfg: &LdsConfig,
    retrained: &Retrained,
    model: &Mlp,
    data: &Dataset,
    featurizer: &Featurizer,
    mode: &AttributionMode,
) -> Result<LdsReport> {
    cfg.validate()?;
    crate::error::check_dim(featurizer.output_dim(), mode.dim())?;
    let loss = cfg.train.loss;
    let train = featurizer.featurize_rows(model, data, &retrained.train_rows, loss)?;
    let test = featurizer.featurize_rows(model, data, &retrained.test_rows, loss)?;
    let mut fims: Vec<FimState> = mode.blocks().into_iter().map(FimState::new).collect();
    for row in &train {
        for (fim, part) in fims.iter_mut().zip(mode.split(row)?) {
            fim.accumulate(part)?;
        }
    }
    let (val, eval) = split_validation(retrained.test_rows.len(), cfg.val_fraction, cfg.seed)?;
    let factorize = |fims: &mut [FimState], damping: f64| -> Result<()> {
        for f in fims.iter_mut() {
            f.factorize(damping)?;
        }
        Ok(())
    };
    let val_test: Vec<&Vec<f32>> = val.iter().map(|&t| &test[t]).collect();
    let search = damping_grid_search(&cfg.damping_grid, |damping| {
        factorize(&mut fims, damping)?;
        let scores = block_scores(&fims, mode, damping, &train, &val_test)?;
        Ok(mean_lds(retrained, &val, &scores, cfg.sign).0)
    })?;
    factorize(&mut fims, search.best)?;
    let eval_test: Vec<&Vec<f32>> = eval.iter().map(|&t| &test[t]).collect();
    let scores = block_scores(&fims, mode, search.best, &train, &eval_test)?;
    let (mean_rho, rho) = mean_lds(retrained, &eval, &scores, cfg.sign);
    let null = null_distribution(retrained, &eval, &scores, cfg.sign, cfg.null_shuffles, cfg.seed);
    let (null_mean, null_std) = mean_std(&null);
    Ok(LdsReport {
        rho,
        mean_rho,
        eval_rows: eval.iter().map(|&t| retrained.test_rows[t]).collect(),
        val_rows: val.iter().map(|&t| retrained.test_rows[t]).collect(),
        damping: search.best,
        damping_table: search.table,
        subset_seeds: retrained.subset_seeds.clone(),
        null_mean,
        null_std,
    })
}
