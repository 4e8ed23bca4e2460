//! Selective Mask for one linear layer, with separate soft masks on the
//! input and output factors.
//!
//! The per-sample gradient is `sum_t z_in[t] (x) dz_out[t]`, so a weighted
//! inner product of two such gradients with weights `w_in (x) w_out`
//! collapses to `sum_{t,u} <z_in, z_in'>_{w_in} <dz, dz'>_{w_out}`. Nothing
//! of size `d_in * d_out` is ever formed.

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::selective::{
    chain_through_sigmoid, combine_correlations, pearson_with_grad, soft_weights, undecided_fraction,
};
use super::{sigmoid, top_k_indices, GradientEstimator, MaskProvenance, MaskSpec, TemperatureSchedule, TraceRow};
use crate::error::{Error, Result};
use crate::model::LinearLayerTrace;

#[derive(Debug, Clone)]
pub struct FactorizedSelectiveProblem {
    d_in: usize,
    d_out: usize,
    train: Vec<LinearLayerTrace>,
    test: Vec<LinearLayerTrace>,
    pub lambda: f64,
    pub steps: usize,
    pub step_size: f64,
    pub schedule: TemperatureSchedule,
    pub k_in: usize,
    pub k_out: usize,
    pub estimator: GradientEstimator,
}

#[derive(Debug, Clone)]
pub struct FactorizedSelectiveResult {
    pub scores_in: Vec<f64>,
    pub scores_out: Vec<f64>,
    pub mask_in: MaskSpec,
    pub mask_out: MaskSpec,
    pub final_objective: f64,
    pub undecided_fraction: f64,
    pub trace: Vec<TraceRow>,
}

impl FactorizedSelectiveProblem {
    /// Same defaults as the flat problem.
    pub fn new(
        train: Vec<LinearLayerTrace>,
        test: Vec<LinearLayerTrace>,
        k_in: usize,
        k_out: usize,
    ) -> Result<Self> {
        if train.len() < 2 {
            return Err(Error::invalid("selective mask needs at least 2 training samples"));
        }
        if test.is_empty() {
            return Err(Error::invalid("selective mask needs at least 1 test sample"));
        }
        let (d_in, d_out) = (train[0].d_in, train[0].d_out);
        for tr in train.iter().chain(&test) {
            crate::error::check_dim(d_in, tr.d_in)?;
            crate::error::check_dim(d_out, tr.d_out)?;
        }
        if k_in == 0 || k_in > d_in || k_out == 0 || k_out > d_out {
            return Err(Error::invalid(format!(
                "factor mask sizes {k_in}x{k_out} must lie within {d_in}x{d_out}"
            )));
        }
        Ok(FactorizedSelectiveProblem {
            d_in,
            d_out,
            train,
            test,
            lambda: 0.01,
            steps: 500,
            step_size: 0.1,
            schedule: TemperatureSchedule::default(),
            k_in,
            k_out,
            estimator: GradientEstimator::default(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn permute_train(&mut self, order: &[usize]) {
        self.train = order.iter().map(|&i| self.train[i].clone()).collect();
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for tr in self.train.iter().chain(&self.test) {
            for v in tr.z_in.iter().chain(&tr.dz_out) {
                h.update(v.to_le_bytes());
            }
        }
        h.update((self.train.len() as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

fn weighted_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| x * y * w).sum()
}

/// Mean correlation for explicit factor weights, with the gradient with
/// respect to `[w_in, w_out]` when asked.
fn factorized_terms(
    pr: &FactorizedSelectiveProblem,
    w_in: &[f64],
    w_out: &[f64],
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (d_in, d_out) = (pr.d_in, pr.d_out);
    let ones_in = vec![1.0; d_in];
    let ones_out = vec![1.0; d_out];
    let per_test: Vec<Option<(f64, Vec<f64>)>> = pr
        .test
        .par_iter()
        .map(|te| {
            let n = pr.train.len();
            let mut a = Vec::with_capacity(n);
            let mut ahat = Vec::with_capacity(n);
            // Per train sample, the token-pair factor inner products.
            let mut blocks = Vec::with_capacity(n);
            for tr in &pr.train {
                let pairs = tr.tokens * te.tokens;
                let mut ain = Vec::with_capacity(pairs);
                let mut aout = Vec::with_capacity(pairs);
                let (mut plain, mut weighted) = (0.0, 0.0);
                for t in 0..tr.tokens {
                    for u in 0..te.tokens {
                        let (zi, zt) = (tr.z_in_token(t), te.z_in_token(u));
                        let (di, dt) = (tr.dz_out_token(t), te.dz_out_token(u));
                        plain += weighted_dot(zi, zt, &ones_in) * weighted_dot(di, dt, &ones_out);
                        let x = weighted_dot(zi, zt, w_in);
                        let y = weighted_dot(di, dt, w_out);
                        weighted += x * y;
                        ain.push(x);
                        aout.push(y);
                    }
                }
                a.push(plain);
                ahat.push(weighted);
                blocks.push((ain, aout));
            }
            let (r, u) = pearson_with_grad(&a, &ahat, want_grad)?;
            let mut dw = Vec::new();
            if want_grad {
                dw = vec![0.0; d_in + d_out];
                let (gin, gout) = dw.split_at_mut(d_in);
                for ((tr, (ain, aout)), &ui) in pr.train.iter().zip(&blocks).zip(&u) {
                    let mut pair = 0;
                    for t in 0..tr.tokens {
                        for v in 0..te.tokens {
                            let cin = ui * aout[pair];
                            let cout = ui * ain[pair];
                            for ((g, x), y) in gin.iter_mut().zip(tr.z_in_token(t)).zip(te.z_in_token(v)) {
                                *g += cin * x * y;
                            }
                            for ((g, x), y) in gout.iter_mut().zip(tr.dz_out_token(t)).zip(te.dz_out_token(v)) {
                                *g += cout * x * y;
                            }
                            pair += 1;
                        }
                    }
                }
            }
            Some((r, dw))
        })
        .collect();
    combine_correlations(per_test, d_in + d_out, want_grad)
}

/// Mean correlation for explicit weights; `w_in (x) w_out` plays the role
/// of the flat weight vector.
pub fn factorized_mean_correlation(
    pr: &FactorizedSelectiveProblem,
    w_in: &[f64],
    w_out: &[f64],
) -> Result<f64> {
    crate::error::check_dim(pr.d_in, w_in.len())?;
    crate::error::check_dim(pr.d_out, w_out.len())?;
    Ok(factorized_terms(pr, w_in, w_out, false)?.0)
}

/// `mean_t corr - lambda * (sum sigmoid(S_in/T) + sum sigmoid(S_out/T))`.
pub fn factorized_objective(
    pr: &FactorizedSelectiveProblem,
    s_in: &[f64],
    s_out: &[f64],
    temperature: f64,
) -> Result<f64> {
    Ok(factorized_objective_with_grad(pr, s_in, s_out, temperature, false)?.0)
}

pub(crate) fn factorized_objective_with_grad(
    pr: &FactorizedSelectiveProblem,
    s_in: &[f64],
    s_out: &[f64],
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    crate::error::check_dim(pr.d_in, s_in.len())?;
    crate::error::check_dim(pr.d_out, s_out.len())?;
    let (sig_in, w_in) = soft_weights(s_in, temperature);
    let (sig_out, w_out) = soft_weights(s_out, temperature);
    let (corr, dw) = factorized_terms(pr, &w_in, &w_out, want_grad)?;
    let obj = corr - pr.lambda * (sig_in.iter().sum::<f64>() + sig_out.iter().sum::<f64>());
    let grad = if want_grad {
        let (d_in, d_out) = dw.split_at(pr.d_in);
        let mut g = chain_through_sigmoid(&sig_in, &w_in, d_in, temperature, pr.lambda);
        g.extend(chain_through_sigmoid(&sig_out, &w_out, d_out, temperature, pr.lambda));
        g
    } else {
        Vec::new()
    };
    Ok((obj, grad))
}

fn hard_weights(sig: &[f64], k: usize) -> Vec<f64> {
    let mut w = vec![0.0; sig.len()];
    for j in top_k_indices(sig, k) {
        w[j] = 1.0;
    }
    w
}

/// Joint ascent on both factor masks; same schedule and estimator options
/// as the flat trainer.
pub fn selective_train_factorized(pr: &FactorizedSelectiveProblem) -> Result<FactorizedSelectiveResult> {
    pr.schedule.validate()?;
    let d_in = pr.d_in;
    let mut s = vec![0.0; d_in + pr.d_out];
    let mut trace = Vec::with_capacity(pr.steps);
    for step in 0..pr.steps {
        let temp = pr.schedule.at(step, pr.steps);
        let (s_in, s_out) = s.split_at(d_in);
        let (objective, exact) = factorized_objective_with_grad(
            pr,
            s_in,
            s_out,
            temp,
            pr.estimator == GradientEstimator::Exact,
        )?;
        if !objective.is_finite() {
            return Err(Error::Divergence {
                stage: "factorized selective mask step",
                step,
                what: "objective",
            });
        }
        let sig: Vec<f64> = s.iter().map(|&x| sigmoid(x / temp)).collect();
        let grad = match pr.estimator {
            GradientEstimator::Exact => exact,
            GradientEstimator::StraightThrough => {
                let (_, w_in) = soft_weights(&s[..d_in], temp);
                let (_, w_out) = soft_weights(&s[d_in..], temp);
                let hard_in = hard_weights(&sig[..d_in], pr.k_in);
                let hard_out = hard_weights(&sig[d_in..], pr.k_out);
                let (_, dw) = factorized_terms(pr, &hard_in, &hard_out, true)?;
                let mut g = chain_through_sigmoid(&sig[..d_in], &w_in, &dw[..d_in], temp, pr.lambda);
                g.extend(chain_through_sigmoid(&sig[d_in..], &w_out, &dw[d_in..], temp, pr.lambda));
                g
            }
        };
        trace.push(TraceRow {
            step,
            objective,
            l1: sig.iter().sum(),
        });
        for (x, g) in s.iter_mut().zip(&grad) {
            *x += pr.step_size * g;
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence {
                stage: "factorized selective mask step",
                step,
                what: "mask logits",
            });
        }
    }
    let t_final = pr.schedule.end;
    let sig: Vec<f64> = s.iter().map(|&x| sigmoid(x / t_final)).collect();
    let fingerprint = pr.fingerprint();
    let mask_in = MaskSpec::new(
        d_in,
        top_k_indices(&sig[..d_in], pr.k_in),
        MaskProvenance::Selective {
            fingerprint: format!("{fingerprint}:in"),
        },
    )?;
    let mask_out = MaskSpec::new(
        pr.d_out,
        top_k_indices(&sig[d_in..], pr.k_out),
        MaskProvenance::Selective {
            fingerprint: format!("{fingerprint}:out"),
        },
    )?;
    let final_objective = factorized_objective(pr, &s[..d_in], &s[d_in..], t_final)?;
    Ok(FactorizedSelectiveResult {
        scores_out: s[d_in..].to_vec(),
        scores_in: s[..d_in].to_vec(),
        mask_in,
        mask_out,
        final_objective,
        undecided_fraction: undecided_fraction(&sig),
        trace,
    })
}
