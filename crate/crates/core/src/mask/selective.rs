//! Selective Mask: learn a soft mask `sigmoid(S / T)` that preserves the
//! correlation between original and masked GradDot scores, with an l1
//! penalty pushing the mask toward sparsity.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{log_sigmoid, sigmoid, top_k_indices, MaskProvenance, MaskSpec};
use crate::error::{Error, Result};

/// Geometric annealing from `start` to `end` over the training steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 1.0,
            end: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        if steps <= 1 {
            return self.end;
        }
        let frac = step as f64 / (steps - 1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid("temperatures must be positive and finite"))
        }
    }
}

/// How the ascent direction is computed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientEstimator {
    /// Exact gradient of the soft objective.
    Exact,
    /// Correlation term evaluated at the hard top-k' mask, differentiated
    /// through the sigmoid surrogate. The penalty term stays exact.
    #[default]
    StraightThrough,
}

#[derive(Debug, Clone)]
pub struct SelectiveMaskProblem {
    n: usize,
    m: usize,
    p: usize,
    /// Row-major `n x p`.
    train: Vec<f64>,
    /// Row-major `m x p`.
    test: Vec<f64>,
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    pub schedule: TemperatureSchedule,
    pub target_k: usize,
    pub estimator: GradientEstimator,
}

impl SelectiveMaskProblem {
    /// Defaults: lambda 0.01, 500 steps, step size 0.1, T from 1.0 to 0.1.
    pub fn new(train: &[Vec<f64>], test: &[Vec<f64>], target_k: usize) -> Result<Self> {
        let n = train.len();
        let m = test.len();
        if n < 2 {
            return Err(Error::invalid("selective mask needs at least 2 training gradients"));
        }
        if m == 0 {
            return Err(Error::invalid("selective mask needs at least 1 test gradient"));
        }
        let p = train[0].len();
        for g in train.iter().chain(test) {
            crate::error::check_dim(p, g.len())?;
        }
        if target_k == 0 || target_k > p {
            return Err(Error::invalid(format!(
                "target mask size {target_k} must lie in [1, {p}]"
            )));
        }
        Ok(SelectiveMaskProblem {
            n,
            m,
            p,
            train: train.concat(),
            test: test.concat(),
            lambda: 0.01,
            steps: 500,
            step_size: 0.1,
            schedule: TemperatureSchedule::default(),
            target_k,
            estimator: GradientEstimator::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn n_train(&self) -> usize {
        self.n
    }

    pub fn n_test(&self) -> usize {
        self.m
    }

    fn train_row(&self, i: usize) -> &[f64] {
        &self.train[i * self.p..(i + 1) * self.p]
    }

    fn test_row(&self, t: usize) -> &[f64] {
        &self.test[t * self.p..(t + 1) * self.p]
    }

    /// Permutes the training rows (the objective must not care).
    pub fn permute_train(&mut self, order: &[usize]) {
        let rows: Vec<f64> = order
            .iter()
            .flat_map(|&i| self.train_row(i).to_vec())
            .collect();
        self.train = rows;
    }

    pub(crate) fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in self.train.iter().chain(&self.test) {
            h.update(v.to_le_bytes());
        }
        h.update((self.n as u64).to_le_bytes());
        h.update((self.p as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Pearson correlation of `a` and `b`, and its gradient with respect to `b`.
/// `None` when either vector has zero variance.
pub(crate) fn pearson_with_grad(a: &[f64], b: &[f64], want_grad: bool) -> Option<(f64, Vec<f64>)> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale_a = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale_b = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if saa <= 1e-24 * scale_a * scale_a * n || sbb <= 1e-24 * scale_b * scale_b * n || saa == 0.0 || sbb == 0.0 {
        return None;
    }
    let (na, nb) = (saa.sqrt(), sbb.sqrt());
    let r = sab / (na * nb);
    let grad = if want_grad {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - ma) / (na * nb) - r * (y - mb) / sbb)
            .collect()
    } else {
        Vec::new()
    };
    Some((r, grad))
}

/// Mean Pearson correlation between original and weighted GradDot scores,
/// `a_i = <g_i, g_t>` and `a_hat_i = sum_j w_j g_i[j] g_t[j]`, plus the
/// gradient with respect to `w` when requested.
fn correlation_terms(
    problem: &SelectiveMaskProblem,
    weights: &[f64],
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let p = problem.p;
    let per_test: Vec<Option<(f64, Vec<f64>)>> = (0..problem.m)
        .into_par_iter()
        .map(|t| {
            let gt = problem.test_row(t);
            let wgt: Vec<f64> = gt.iter().zip(weights).map(|(g, w)| g * w).collect();
            let mut a = Vec::with_capacity(problem.n);
            let mut ahat = Vec::with_capacity(problem.n);
            for i in 0..problem.n {
                let gi = problem.train_row(i);
                a.push(dot(gi, gt));
                ahat.push(dot(gi, &wgt));
            }
            let (r, u) = pearson_with_grad(&a, &ahat, want_grad)?;
            let mut dw = Vec::new();
            if want_grad {
                dw = vec![0.0; p];
                for (i, &ui) in u.iter().enumerate() {
                    for (d, &g) in dw.iter_mut().zip(problem.train_row(i)) {
                        *d += ui * g;
                    }
                }
                for (d, &g) in dw.iter_mut().zip(gt) {
                    *d *= g;
                }
            }
            Some((r, dw))
        })
        .collect();
    combine_correlations(per_test, p, want_grad)
}

pub(crate) fn combine_correlations(
    per_test: Vec<Option<(f64, Vec<f64>)>>,
    p: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let total = per_test.len();
    let kept: Vec<(f64, Vec<f64>)> = per_test.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(Error::Numerical(
            "every test point has zero score variance; correlation undefined".into(),
        ));
    }
    if kept.len() < total {
        log::warn!(
            "excluded {} of {} test points with zero score variance",
            total - kept.len(),
            total
        );
    }
    let count = kept.len() as f64;
    let mut mean = 0.0;
    let mut grad = if want_grad { vec![0.0; p] } else { Vec::new() };
    for (r, dw) in &kept {
        mean += r;
        if want_grad {
            for (g, d) in grad.iter_mut().zip(dw) {
                *g += d;
            }
        }
    }
    grad.iter_mut().for_each(|g| *g /= count);
    Ok((mean / count, grad))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean correlation for an explicit weight vector (weights multiply both
/// train and test coordinates once, so soft masks enter squared).
pub fn mean_correlation(problem: &SelectiveMaskProblem, weights: &[f64]) -> Result<f64> {
    crate::error::check_dim(problem.p, weights.len())?;
    Ok(correlation_terms(problem, weights, false)?.0)
}

/// Soft-mask weights `sigmoid(S_j / T)^2`, rescaled so the largest is 1.
/// Correlation ignores a common positive factor, and working in log space
/// keeps the weights from underflowing to all zeros when `S` is very
/// negative.
pub(crate) fn soft_weights(s: &[f64], temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let sig = s.iter().map(|&x| sigmoid(x / temperature)).collect();
    let log_w: Vec<f64> = s.iter().map(|&x| 2.0 * log_sigmoid(x / temperature)).collect();
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (sig, log_w.iter().map(|&l| (l - top).exp()).collect())
}

/// Chains `d corr / d w` (taken at the rescaled weights) and the penalty
/// through the sigmoid. With `w = c * w'`, `d corr/dw_j * dw_j/dS_j`
/// equals `d corr/dw'_j * 2 w'_j (1 - sigma_j) / T`.
pub(crate) fn chain_through_sigmoid(
    sig: &[f64],
    w_scaled: &[f64],
    dw: &[f64],
    temperature: f64,
    lambda: f64,
) -> Vec<f64> {
    sig.iter()
        .zip(w_scaled)
        .zip(dw)
        .map(|((&sg, &w), &d)| {
            (d * 2.0 * w * (1.0 - sg) - lambda * sg * (1.0 - sg)) / temperature
        })
        .collect()
}

/// `mean_t corr(a, a_hat) - lambda * sum_j sigmoid(S_j / T)`.
pub fn selective_objective(problem: &SelectiveMaskProblem, s: &[f64], temperature: f64) -> Result<f64> {
    crate::error::check_dim(problem.p, s.len())?;
    let (sig, w) = soft_weights(s, temperature);
    let (corr, _) = correlation_terms(problem, &w, false)?;
    Ok(corr - problem.lambda * sig.iter().sum::<f64>())
}

/// Objective and its exact gradient with respect to `S`.
pub fn selective_objective_with_grad(
    problem: &SelectiveMaskProblem,
    s: &[f64],
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    crate::error::check_dim(problem.p, s.len())?;
    let (sig, w) = soft_weights(s, temperature);
    let (corr, dw) = correlation_terms(problem, &w, true)?;
    let obj = corr - problem.lambda * sig.iter().sum::<f64>();
    Ok((obj, chain_through_sigmoid(&sig, &w, &dw, temperature, problem.lambda)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub objective: f64,
    pub l1: f64,
}

#[derive(Debug, Clone)]
pub struct SelectiveResult {
    pub scores: Vec<f64>,
    pub mask: MaskSpec,
    pub final_objective: f64,
    /// Fraction of `sigmoid(S*/T_final)` values in (0.25, 0.75).
    pub undecided_fraction: f64,
    pub trace: Vec<TraceRow>,
}

fn straight_through_step(
    problem: &SelectiveMaskProblem,
    s: &[f64],
    temperature: f64,
    k: usize,
) -> Result<Vec<f64>> {
    let (sig, w) = soft_weights(s, temperature);
    let mut hard = vec![0.0; s.len()];
    for j in top_k_indices(&sig, k) {
        hard[j] = 1.0;
    }
    let (_, dw) = correlation_terms(problem, &hard, true)?;
    Ok(chain_through_sigmoid(&sig, &w, &dw, temperature, problem.lambda))
}

pub(crate) fn undecided_fraction(sig: &[f64]) -> f64 {
    if sig.is_empty() {
        return 0.0;
    }
    sig.iter().filter(|&&v| v > 0.25 && v < 0.75).count() as f64 / sig.len() as f64
}

/// Gradient ascent on the selective objective from `S = 0`, annealing the
/// temperature, then top-k' extraction.
pub fn selective_train(problem: &SelectiveMaskProblem) -> Result<SelectiveResult> {
    problem.schedule.validate()?;
    let p = problem.p;
    let mut s = vec![0.0; p];
    let mut trace = Vec::with_capacity(problem.steps);
    for step in 0..problem.steps {
        let temp = problem.schedule.at(step, problem.steps);
        let (objective, exact) = selective_objective_with_grad(problem, &s, temp)?;
        let grad = match problem.estimator {
            GradientEstimator::Exact => exact,
            GradientEstimator::StraightThrough => {
                straight_through_step(problem, &s, temp, problem.target_k)?
            }
        };
        if !objective.is_finite() {
            return Err(Error::Divergence {
                stage: "selective mask step",
                step,
                what: "objective",
            });
        }
        let l1 = s.iter().map(|&x| sigmoid(x / temp)).sum();
        trace.push(TraceRow {
            step,
            objective,
            l1,
        });
        for (x, g) in s.iter_mut().zip(&grad) {
            *x += problem.step_size * g;
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                stage: "selective mask step",
                step,
                what: "mask logits",
            });
        }
    }
    let t_final = problem.schedule.end;
    let sig: Vec<f64> = s.iter().map(|&x| sigmoid(x / t_final)).collect();
    let indices = top_k_indices(&sig, problem.target_k);
    let final_objective = selective_objective(problem, &s, t_final)?;
    Ok(SelectiveResult {
        mask: MaskSpec::new(
            p,
            indices,
            MaskProvenance::Selective {
                fingerprint: problem.fingerprint(),
            },
        )?,
        undecided_fraction: undecided_fraction(&sig),
        scores: s,
        final_objective,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, n: usize, m: usize, p: usize) -> SelectiveMaskProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let train = draw(n);
        let test = draw(m);
        SelectiveMaskProblem::new(&train, &test, p / 2).unwrap()
    }

    #[test]
    fn saturated_mask_gives_unit_correlation() {
        let mut pr = random_problem(1, 8, 3, 10);
        pr.lambda = 0.05;
        let s = vec![60.0; 10];
        let obj = selective_objective(&pr, &s, 1.0).unwrap();
        assert!((obj - (1.0 - 0.05 * 10.0)).abs() < 1e-12, "{obj}");
    }

    #[test]
    fn objective_is_bounded_without_penalty() {
        let mut pr = random_problem(2, 2, 4, 6);
        pr.lambda = 0.0;
        let s: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let obj = selective_objective(&pr, &s, 0.7).unwrap();
        assert!((-1.0..=1.0).contains(&obj));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut pr = random_problem(3, 16, 4, 64);
        pr.lambda = 0.03;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let s: Vec<f64> = (0..64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let temp = 0.8;
        let (_, grad) = selective_objective_with_grad(&pr, &s, temp).unwrap();
        let h = 1e-5;
        for j in 0..64 {
            let mut sp = s.clone();
            let mut sm = s.clone();
            sp[j] += h;
            sm[j] -= h;
            let fd = (selective_objective(&pr, &sp, temp).unwrap()
                - selective_objective(&pr, &sm, temp).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grad[j].abs()).max(1e-6);
            assert!((fd - grad[j]).abs() / denom < 1e-5, "coord {j}: fd {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn zero_variance_everywhere_is_an_error() {
        let train = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let test = vec![vec![1.0, 0.0]];
        let pr = SelectiveMaskProblem::new(&train, &test, 1).unwrap();
        assert!(matches!(
            selective_objective(&pr, &[0.0, 0.0], 1.0),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn zero_steps_keeps_initial_top_k() {
        let mut pr = random_problem(4, 6, 2, 12);
        pr.steps = 0;
        pr.target_k = 5;
        let r = selective_train(&pr).unwrap();
        assert_eq!(r.mask.indices(), &[0, 1, 2, 3, 4]);
        assert!(r.trace.is_empty());
    }

    #[test]
    fn huge_penalty_still_returns_exactly_k() {
        let mut pr = random_problem(5, 6, 2, 20);
        pr.lambda = 1e4;
        pr.steps = 50;
        pr.target_k = 7;
        let r = selective_train(&pr).unwrap();
        assert_eq!(r.mask.len(), 7);
        let t = pr.schedule.end;
        assert!(r.scores.iter().all(|&x| sigmoid(x / t) < 1e-3));
    }

    #[test]
    fn objective_ignores_training_order() {
        let pr = random_problem(6, 10, 3, 16);
        let mut shuffled = pr.clone();
        shuffled.permute_train(&[3, 9, 0, 1, 8, 2, 7, 5, 6, 4]);
        let s: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let a = selective_objective(&pr, &s, 0.5).unwrap();
        let b = selective_objective(&shuffled, &s, 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
