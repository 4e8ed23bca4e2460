//! Per-layer compression cost: measured op counts, wall time and auxiliary
//! memory next to the analytic op model.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorized::{LayerOps, LayerPlan};
use crate::model::{Dataset, LinearLayerTrace, Loss, Mlp};

#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputRow {
    pub method: String,
    pub layer: usize,
    pub k_layer: usize,
    /// Seconds spent compressing every sample for this layer.
    pub wall_time: f64,
    /// Mean multiply-adds per sample.
    pub op_count: f64,
    /// Mean analytic prediction per sample.
    pub predicted_ops: f64,
    pub peak_aux_bytes: u64,
}

/// Per-layer traces of `rows`, computed once so timing excludes backprop.
pub fn collect_traces(model: &Mlp, data: &Dataset, rows: &[usize], loss: Loss) -> Result<Vec<Vec<LinearLayerTrace>>> {
    rows.par_iter()
        .map(|&i| {
            model
                .per_sample_grad_single(data.row(i), &data.target(i), loss)
                .map(|(_, t)| t)
        })
        .collect()
}

/// Runs every method's layer plans over `samples` (each a full list of
/// layer traces) and reports one row per method and layer.
pub fn compare_throughput(
    samples: &[Vec<LinearLayerTrace>],
    methods: &[(String, Vec<LayerPlan>)],
) -> Result<Vec<ThroughputRow>> {
    if samples.is_empty() {
        return Err(Error::invalid("throughput comparison needs at least one sample"));
    }
    let mut rows = Vec::new();
    for (name, plans) in methods {
        for plan in plans {
            let compressor = plan.build()?;
            let traces: Vec<&LinearLayerTrace> = samples
                .iter()
                .map(|s| {
                    s.get(plan.layer)
                        .ok_or_else(|| Error::invalid(format!("samples have no layer {}", plan.layer)))
                })
                .collect::<Result<_>>()?;
            let mut ops = LayerOps::default();
            let mut predicted = 0u64;
            let mut peak = 0u64;
            let start = Instant::now();
            for tr in &traces {
                let mut one = LayerOps::default();
                let out = compressor.compress_counted::<f32>(tr, &mut one)?;
                std::hint::black_box(out);
                ops.per_token += one.per_token;
                ops.once += one.once;
                peak = peak.max(one.aux_bytes);
                predicted += plan.op_model(tr.tokens as u64);
            }
            let wall_time = start.elapsed().as_secs_f64();
            let n = traces.len() as f64;
            rows.push(ThroughputRow {
                method: name.clone(),
                layer: plan.layer,
                k_layer: compressor.output_dim(),
                wall_time,
                op_count: ops.total() as f64 / n,
                predicted_ops: predicted as f64 / n,
                peak_aux_bytes: peak,
            });
        }
    }
    Ok(rows)
}

fn pairs_agree(rows: &[ThroughputRow], measured: impl Fn(&ThroughputRow) -> f64) -> bool {
    for a in rows {
        for b in rows {
            if a.layer != b.layer || a.method == b.method || a.predicted_ops >= b.predicted_ops {
                continue;
            }
            if measured(a) > measured(b) {
                return false;
            }
        }
    }
    true
}

/// True when, on every layer, a method predicted cheaper never measures
/// more operations than the costlier one.
pub fn op_ordering_holds(rows: &[ThroughputRow]) -> bool {
    pairs_agree(rows, |r| r.op_count)
}

/// Same check against wall time. Timing is noisy, so callers treat a
/// `false` as a warning.
pub fn wall_clock_ordering_holds(rows: &[ThroughputRow]) -> bool {
    pairs_agree(rows, |r| r.wall_time)
}

pub fn write_throughput_csv(path: &Path, rows: &[ThroughputRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "method,layer,k_l,wall_time,op_count,predicted_ops,peak_aux_memory")?;
        for r in rows {
            writeln!(
                out,
                "{},{},{},{:.6},{},{},{}",
                r.method, r.layer, r.k_layer, r.wall_time, r.op_count, r.predicted_ops, r.peak_aux_bytes
            )?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
