use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grad, Dataset, Loss, Mlp, Target};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.1,
            batch_size: 32,
            seed: 0,
            loss: Loss::CrossEntropy,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Mlp,
    pub initial_loss: f64,
    /// Mean training loss after each epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_curve.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Mean loss over the given rows.
pub fn evaluate_loss(model: &Mlp, data: &Dataset, rows: &[usize], loss: Loss) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in rows {
        total += model.loss(data.row(i), &data.target(i), loss)?;
    }
    Ok(total / rows.len() as f64)
}

/// Mean gradient over a batch, flattened in the model's parameter order.
pub fn batch_grad(model: &Mlp, xs: &[&[f64]], targets: &[Target], loss: Loss) -> Result<Vec<f64>> {
    crate::error::check_dim(xs.len(), targets.len())?;
    let mut grads: Vec<Vec<f64>> = model
        .layers
        .iter()
        .map(|l| vec![0.0; l.param_count()])
        .collect();
    for (x, y) in xs.iter().zip(targets) {
        let cache = model.forward(x)?;
        let (value, d_out) = loss_and_grad(&cache.output, y, loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("loss is {value}")));
        }
        let dz = model.backward(&cache, &d_out);
        for (l, layer) in model.layers.iter().enumerate() {
            let g = &mut grads[l];
            let d_out = layer.d_out;
            for (a, &za) in cache.inputs[l].iter().enumerate() {
                if za == 0.0 {
                    continue;
                }
                for (o, &d) in g[a * d_out..(a + 1) * d_out].iter_mut().zip(&dz[l]) {
                    *o += za * d;
                }
            }
            if layer.bias.is_some() {
                let a = layer.d_in;
                for (o, &d) in g[a * d_out..(a + 1) * d_out].iter_mut().zip(&dz[l]) {
                    *o += d;
                }
            }
        }
    }
    let scale = 1.0 / xs.len().max(1) as f64;
    Ok(grads.into_iter().flatten().map(|v| v * scale).collect())
}

/// Minibatch SGD with a seeded per-epoch shuffle. When `subset` is given
/// only those rows are used; otherwise all training rows.
pub fn train_sgd(
    model: &Mlp,
    data: &Dataset,
    config: &TrainConfig,
    subset: Option<&[usize]>,
) -> Result<TrainReport> {
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::invalid("learning rate must be finite and non-negative"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rows: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => data.train_indices(),
    };
    let mut model = model.clone();
    let initial_loss = evaluate_loss(&model, data, &rows, config.loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = model.flatten();
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rows.shuffle(&mut rng);
        for batch in rows.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| data.row(i)).collect();
            let ys: Vec<Target> = batch.iter().map(|&i| data.target(i)).collect();
            let g = batch_grad(&model, &xs, &ys, config.loss).map_err(|_| Error::Divergence {
                stage: "epoch",
                step: epoch,
                what: "loss",
            })?;
            for (p, gi) in params.iter_mut().zip(&g) {
                *p -= config.lr * (gi + config.weight_decay * *p);
            }
            model.unflatten(&params)?;
        }
        let epoch_loss = evaluate_loss(&model, data, &rows, config.loss)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence {
                stage: "epoch",
                step: epoch,
                what: "loss",
            });
        }
        curve.push(epoch_loss);
    }
    Ok(TrainReport {
        model,
        initial_loss,
        loss_curve: curve,
    })
}
