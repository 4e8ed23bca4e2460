use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{MethodName, ModeName, PredictorName, RunConfig};
use crate::attribution::{
    block_fingerprint, graddot_scores, influence_scores, precondition_store, top_k, write_scores_binary,
    write_scores_csv_with_ids, AttributionMode, Featurizer, FimState, GradientStore, StoreKind,
};
use crate::compressor::parse_compressor;
use crate::error::{Error, Result};
use crate::eval::{
    collect_traces, compare_throughput, lds_evaluate, lds_from_predictions, op_ordering_holds, retrain_subsets,
    wall_clock_ordering_holds, write_throughput_csv, LdsReport, ThroughputRow,
};
use crate::factorized::parse_factorized;
use crate::gradient::OpCount;
use crate::mask::{
    selective_train, selective_train_factorized, write_mask_file, FactorizedSelectiveProblem, SelectiveMaskProblem,
    TemperatureSchedule,
};
use crate::model::{load_checkpoint, save_checkpoint, train_sgd, Loss, Mlp};
use crate::sketch::{benchmark_projection, SketchKind, SketchSpec};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "GRASS_RUN_ROOT";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// A loaded config bound to its run directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    /// Directory of the config file; relative compressor paths resolve here.
    pub base_dir: PathBuf,
    pub run_dir: PathBuf,
    pub force: bool,
}

impl Context {
    /// Creates the run directory `<run_root>/<config hash>` and writes the
    /// resolved config into it before anything else.
    pub fn new(config: RunConfig, base_dir: &Path, run_root: &Path, force: bool) -> Result<Self> {
        let run_dir = run_root.join(config.hash());
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        let sidecar = run_dir.join(RESOLVED_CONFIG);
        let text = format!("# base directory: {}\n{}", base_dir.display(), config.to_toml());
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        Ok(Context {
            config,
            base_dir: base_dir.to_path_buf(),
            run_dir,
            force,
        })
    }

    /// Loads `path` with overrides; the run root comes from
    /// `GRASS_RUN_ROOT`, defaulting to `./runs`.
    pub fn from_file(path: &Path, overrides: &[String], force: bool) -> Result<Self> {
        let config = RunConfig::load(path, overrides)?;
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        let base = cwd.join(path).parent().map(Path::to_path_buf).unwrap_or(cwd.clone());
        let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| cwd.join("runs"), PathBuf::from);
        Self::new(config, &base, &root, force)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.config
            .model
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.path("model.gmlp"))
    }

    fn load_model(&self) -> Result<Mlp> {
        let path = self.checkpoint_path();
        if !path.is_file() {
            return Err(Error::invalid(format!(
                "no checkpoint at {}; run `grass train` first",
                path.display()
            )));
        }
        load_checkpoint(&path)
    }

    fn featurizer(&self, model: &Mlp) -> Result<Featurizer> {
        let c = self
            .config
            .compressor
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a [compressor] section".into()))?;
        if let Some(spec) = &c.spec {
            let compressor = parse_compressor(spec)?.build(model.param_count(), Some(&self.base_dir))?;
            Ok(Featurizer::Flat(compressor))
        } else {
            let spec = parse_factorized(c.factorized.as_deref().unwrap_or_default())?;
            Ok(Featurizer::Factorized(spec.build(&model.factor_dims())?))
        }
    }

    fn mode(&self, f: &Featurizer) -> AttributionMode {
        match self.config.attribution.mode {
            ModeName::Whole => AttributionMode::WholeModel { k: f.output_dim() },
            ModeName::Layerwise => AttributionMode::LayerwiseBlockDiagonal { blocks: f.block_dims() },
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub loss_curve: PathBuf,
    /// True when an existing checkpoint was kept.
    pub skipped: bool,
}

/// Trains from the seeded initialization and writes `model.gmlp` plus
/// `loss_curve.csv`.
pub fn cmd_train(ctx: &Context) -> Result<TrainOutput> {
    let checkpoint = ctx.path("model.gmlp");
    let loss_curve = ctx.path("loss_curve.csv");
    if checkpoint.is_file() && !ctx.force {
        log::info!("{} exists; pass --force to retrain", checkpoint.display());
        return Ok(TrainOutput {
            checkpoint,
            loss_curve,
            skipped: true,
        });
    }
    let data = ctx.config.dataset()?;
    let init = ctx.config.init_model(&data)?;
    let report = train_sgd(&init, &data, &ctx.config.train_config(), None)?;
    let mut csv = format!("epoch,loss\n0,{:e}\n", report.initial_loss);
    for (e, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:e}", e + 1);
    }
    write_text(&loss_curve, &csv)?;
    save_checkpoint(&checkpoint, &report.model)?;
    log::info!(
        "trained {} parameters: loss {:.4} -> {:.4}",
        report.model.param_count(),
        report.initial_loss,
        report.final_loss()
    );
    Ok(TrainOutput {
        checkpoint,
        loss_curve,
        skipped: false,
    })
}

#[derive(Debug, Clone)]
pub struct CacheOutput {
    pub raw: Vec<PathBuf>,
    pub fims: Vec<PathBuf>,
    pub preconditioned: Vec<PathBuf>,
    pub skipped: bool,
    /// Multiply-adds summed over every training sample.
    pub op_count: u64,
}

struct BlockFiles {
    raw: PathBuf,
    fim: PathBuf,
    pre: PathBuf,
    fingerprint: [u8; 32],
}

fn block_files(ctx: &Context, f: &Featurizer, mode: &AttributionMode) -> Vec<BlockFiles> {
    let fp = f.fingerprint();
    let tag = hex::encode(&fp[..8]);
    let layered = matches!(mode, AttributionMode::LayerwiseBlockDiagonal { .. });
    (0..mode.blocks().len())
        .map(|b| {
            let (name, fingerprint) = if layered {
                (format!("{tag}-layer{b}"), block_fingerprint(&fp, b))
            } else {
                (tag.clone(), fp)
            };
            BlockFiles {
                raw: ctx.path(&format!("store-{name}.raw.ggst")),
                fim: ctx.path(&format!("fim-{name}.gfim")),
                pre: ctx.path(&format!("store-{name}.pre.ggst")),
                fingerprint,
            }
        })
        .collect()
}

/// Compressed training gradients, the FIM of each block and the
/// preconditioned gradients. Re-running with the same config writes
/// nothing.
pub fn cmd_cache(ctx: &Context) -> Result<CacheOutput> {
    let data = ctx.config.dataset()?;
    let model = ctx.load_model()?;
    let featurizer = ctx.featurizer(&model)?;
    let mode = ctx.mode(&featurizer);
    let files = block_files(ctx, &featurizer, &mode);
    let rows = data.train_indices();
    let damping = ctx.config.attribution.damping;
    let output = |skipped, op_count| CacheOutput {
        raw: files.iter().map(|b| b.raw.clone()).collect(),
        fims: files.iter().map(|b| b.fim.clone()).collect(),
        preconditioned: files.iter().map(|b| b.pre.clone()).collect(),
        skipped,
        op_count,
    };

    let existing = files.iter().filter(|b| b.raw.exists() || b.pre.exists()).count();
    if existing > 0 && !ctx.force {
        let consistent = existing == files.len()
            && files.iter().all(|b| {
                let ok = |p: &Path| {
                    GradientStore::read_checked(p, &b.fingerprint).is_ok_and(|s| s.len() == rows.len())
                };
                ok(&b.raw) && ok(&b.pre) && b.fim.is_file()
            });
        if consistent {
            log::info!("stores for fingerprint {} already cached", featurizer_hex(&featurizer));
            return Ok(output(true, 0));
        }
        return Err(Error::invalid(format!(
            "existing stores in {} do not match this compressor; refusing to overwrite without --force",
            ctx.run_dir.display()
        )));
    }

    let start = Instant::now();
    let loss = Loss::CrossEntropy;
    let features: Vec<(Vec<f32>, OpCount)> = rows
        .par_iter()
        .map(|&i| featurizer.featurize(&model, data.row(i), &data.target(i), loss))
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let op_count: u64 = features.iter().map(|(_, o)| o.madds).sum();
    log::info!(
        "compressed {} samples to k = {} in {elapsed:.3}s ({:.0} samples/s, {} multiply-adds per sample)",
        rows.len(),
        featurizer.output_dim(),
        rows.len() as f64 / elapsed.max(1e-9),
        op_count / rows.len().max(1) as u64
    );

    let blocks = mode.blocks();
    for (b, files) in files.iter().enumerate() {
        let block_rows: Vec<Vec<f32>> = features
            .iter()
            .map(|(v, _)| mode.split(v).map(|parts| parts[b].to_vec()))
            .collect::<Result<_>>()?;
        let raw = GradientStore::from_rows(blocks[b], StoreKind::Raw, 0.0, files.fingerprint, &block_rows)?;
        let mut fim = FimState::new(blocks[b]);
        fim.accumulate_batch(&block_rows)?;
        fim.save(&files.fim)?;
        fim.factorize(damping)?;
        let pre = precondition_store(&raw, &fim, damping)?;
        raw.write(&files.raw)?;
        pre.write(&files.pre)?;
    }
    Ok(output(false, op_count))
}

fn featurizer_hex(f: &Featurizer) -> String {
    hex::encode(f.fingerprint())
}

#[derive(Debug, Clone)]
pub struct AttributeOutput {
    /// Dataset rows of the scored test points.
    pub test_rows: Vec<usize>,
    /// Dataset rows of the training samples, in score order.
    pub train_rows: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub csvs: Vec<PathBuf>,
    pub binary: PathBuf,
    pub top_k: Option<PathBuf>,
}

/// Scores every cached training sample against the selected test points.
pub fn cmd_attribute(ctx: &Context) -> Result<AttributeOutput> {
    let data = ctx.config.dataset()?;
    let model = ctx.load_model()?;
    let featurizer = ctx.featurizer(&model)?;
    let mode = ctx.mode(&featurizer);
    let files = block_files(ctx, &featurizer, &mode);
    let cfg = &ctx.config.attribution;
    let stores: Vec<GradientStore> = files
        .iter()
        .map(|b| {
            let path = match cfg.method {
                MethodName::Influence => &b.pre,
                MethodName::Graddot => &b.raw,
            };
            if !path.is_file() {
                return Err(Error::invalid(format!(
                    "no gradient store at {}; run `grass cache` first",
                    path.display()
                )));
            }
            GradientStore::read_checked(path, &b.fingerprint)
        })
        .collect::<Result<_>>()?;
    if cfg.method == MethodName::Influence {
        if let Some(s) = stores.iter().find(|s| s.damping != cfg.damping) {
            return Err(Error::invalid(format!(
                "preconditioned store was built with damping {:e}, config asks for {:e}; rerun `grass cache --force`",
                s.damping, cfg.damping
            )));
        }
    }
    let all_tests = data.test_indices();
    let test_rows: Vec<usize> = match &cfg.test {
        None => all_tests.clone(),
        Some(sel) => sel
            .iter()
            .map(|&t| {
                all_tests.get(t).copied().ok_or_else(|| {
                    Error::Config(format!(
                        "attribution.test: position {t} out of range ({} test rows)",
                        all_tests.len()
                    ))
                })
            })
            .collect::<Result<_>>()?,
    };
    let train_rows = data.train_indices();
    let scores: Vec<Vec<f64>> = test_rows
        .iter()
        .map(|&t| {
            let (g, _) = featurizer.featurize(&model, data.row(t), &data.target(t), Loss::CrossEntropy)?;
            let mut total = vec![0.0; stores.first().map_or(0, GradientStore::len)];
            for ((store, files), part) in stores.iter().zip(&files).zip(mode.split(&g)?) {
                let s = match cfg.method {
                    MethodName::Influence => influence_scores(store, part, &files.fingerprint)?,
                    MethodName::Graddot => graddot_scores(store, part, &files.fingerprint)?,
                };
                if stores.len() == 1 {
                    total = s;
                } else {
                    total.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                }
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    let dir = ctx.path("scores");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ids: &[usize] = if stores.first().is_some_and(|s| s.len() == train_rows.len()) {
        &train_rows
    } else {
        &[]
    };
    let mut csvs = Vec::with_capacity(test_rows.len());
    for (&t, s) in test_rows.iter().zip(&scores) {
        let path = dir.join(format!("test_{t}.csv"));
        write_scores_csv_with_ids(&path, &ids[..s.len().min(ids.len())], s)?;
        csvs.push(path);
    }
    let binary = ctx.path("scores.gscr");
    write_scores_binary(&binary, &scores)?;
    let top_path = match cfg.top_k {
        None => None,
        Some(k) => {
            let mut csv = String::from("test_index,rank,train_index,score\n");
            for (&t, s) in test_rows.iter().zip(&scores) {
                for (rank, i) in top_k(s, k).into_iter().enumerate() {
                    let _ = writeln!(csv, "{t},{},{},{:e}", rank + 1, train_rows[i], s[i]);
                }
            }
            let path = ctx.path("top_k.csv");
            write_text(&path, &csv)?;
            Some(path)
        }
    };
    Ok(AttributeOutput {
        test_rows,
        train_rows,
        scores,
        csvs,
        binary,
        top_k: top_path,
    })
}

#[derive(Debug, Clone)]
pub struct LdsOutput {
    pub mean_rho: f64,
    /// `(test row, rho)` per evaluated test point.
    pub rho: Vec<(usize, f64)>,
    /// Absent for the oracle predictor.
    pub report: Option<LdsReport>,
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Retrains on random subsets and scores the configured predictor.
pub fn cmd_lds(ctx: &Context) -> Result<LdsOutput> {
    let data = ctx.config.dataset()?;
    let init = ctx.config.init_model(&data)?;
    let cfg = ctx.config.lds_config();
    let trained = match ctx.config.lds.predictor {
        PredictorName::Oracle => None,
        PredictorName::Influence => {
            let model = ctx.load_model()?;
            let featurizer = ctx.featurizer(&model)?;
            Some((model, featurizer))
        }
    };
    let start = Instant::now();
    let retrained = retrain_subsets(&init, &data, &cfg)?;
    log::info!("retrained {} subsets in {:.1}s", cfg.subsets, start.elapsed().as_secs_f64());
    let (rho, report) = match trained {
        None => {
            let rho: Vec<(usize, f64)> = lds_from_predictions(&retrained.losses, &retrained.losses)
                .into_iter()
                .zip(&retrained.test_rows)
                .filter_map(|(r, &t)| r.map(|r| (t, r)))
                .collect();
            (rho, None)
        }
        Some((model, featurizer)) => {
            let mode = ctx.mode(&featurizer);
            let report = lds_evaluate(&cfg, &retrained, &model, &data, &featurizer, &mode)?;
            let rho = report.eval_rows.iter().copied().zip(report.rho.iter().copied()).collect();
            (rho, Some(report))
        }
    };
    let mean_rho = if rho.is_empty() {
        f64::NAN
    } else {
        rho.iter().map(|(_, r)| r).sum::<f64>() / rho.len() as f64
    };
    let mut csv = String::from("test_index,rho\n");
    for (t, r) in &rho {
        let _ = writeln!(csv, "{t},{r}");
    }
    let csv_path = ctx.path("lds.csv");
    write_text(&csv_path, &csv)?;
    let mut summary = format!(
        "predictor: {:?}\nsubsets: {}\ntest points: {}\nmean rho: {mean_rho:.6}\n",
        ctx.config.lds.predictor,
        cfg.subsets,
        rho.len()
    );
    if let Some(r) = &report {
        let _ = writeln!(summary, "damping: {:e}", r.damping);
        let _ = writeln!(summary, "null mean: {:.6}\nnull std: {:.6}", r.null_mean, r.null_std);
        let _ = writeln!(summary, "validation points: {}", r.val_rows.len());
        let mut grid = String::from("damping,val_mean_rho\n");
        for (l, v) in &r.damping_table {
            let _ = writeln!(grid, "{l:e},{}", v.map_or("failed".to_string(), |v| v.to_string()));
        }
        write_text(&ctx.path("lds_damping.csv"), &grid)?;
    }
    let seeds: Vec<String> = retrained.subset_seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(summary, "subset seeds: {}", seeds.join(" "));
    let summary_path = ctx.path("lds_summary.txt");
    write_text(&summary_path, &summary)?;
    log::info!("mean LDS {mean_rho:.4} over {} test points", rho.len());
    Ok(LdsOutput {
        mean_rho,
        rho,
        report,
        csv: csv_path,
        summary: summary_path,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub k: usize,
    pub sparsity: usize,
    pub wall_time: f64,
    pub op_count: u64,
    pub median_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct BenchOutput {
    pub rows: Vec<BenchRow>,
    pub throughput: Vec<ThroughputRow>,
    pub csv: PathBuf,
    pub throughput_csv: Option<PathBuf>,
}

fn sketch_kind(name: &str) -> Result<SketchKind> {
    Ok(match name {
        "sjlt" => SketchKind::Sjlt,
        "gaussian" => SketchKind::Gaussian,
        "rademacher" => SketchKind::Rademacher,
        "fjlt" => SketchKind::Fjlt,
        other => return Err(Error::Config(format!("bench.methods: unknown method `{other}`"))),
    })
}

/// Projection micro-benchmarks, one row per (method, k, sparsity), plus a
/// layer-by-layer comparison of factorized specs when configured.
pub fn cmd_bench(ctx: &Context) -> Result<BenchOutput> {
    let b = &ctx.config.bench;
    let mut rows = Vec::new();
    for method in &b.methods {
        let kind = sketch_kind(method)?;
        for &k in &b.ks {
            for &s in &b.sparsities {
                let spec = SketchSpec {
                    sparsity: s,
                    ..SketchSpec::new(kind, b.p, k, b.seed)
                };
                let r = benchmark_projection(&spec, b.nnz_fraction, b.trials)?;
                rows.push(BenchRow {
                    method: method.clone(),
                    k,
                    sparsity: s,
                    wall_time: r.wall_time.as_secs_f64(),
                    op_count: r.op_count,
                    median_relative_error: r.median_relative_error,
                });
            }
        }
    }
    let mut csv = String::from("method,k,sparsity,nnz_fraction,wall_time,op_count,median_relative_error\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{},{:.6}",
            r.method, r.k, r.sparsity, b.nnz_fraction, r.wall_time, r.op_count, r.median_relative_error
        );
    }
    let csv_path = ctx.path("bench.csv");
    write_text(&csv_path, &csv)?;

    let mut throughput = Vec::new();
    let mut throughput_csv = None;
    if !b.factorized.is_empty() {
        let data = ctx.config.dataset()?;
        let model = match ctx.load_model() {
            Ok(m) => m,
            Err(_) => {
                log::warn!("no trained checkpoint; benchmarking traces of the initial model");
                ctx.config.init_model(&data)?
            }
        };
        let train = data.train_indices();
        let sample = &train[..b.samples.clamp(1, train.len())];
        let traces = collect_traces(&model, &data, sample, Loss::CrossEntropy)?;
        let dims = model.factor_dims();
        let mut methods = Vec::with_capacity(b.factorized.len());
        for (i, text) in b.factorized.iter().enumerate() {
            let spec = parse_factorized(text)?;
            let plans = spec.resolve(&dims)?;
            let base = plans.first().map_or("empty", |p| p.mode.name());
            let name = if methods.iter().any(|(n, _): &(String, _)| n == base) {
                format!("{base}#{i}")
            } else {
                base.to_string()
            };
            methods.push((name, plans));
        }
        throughput = compare_throughput(&traces, &methods)?;
        let path = ctx.path("throughput.csv");
        write_throughput_csv(&path, &throughput)?;
        throughput_csv = Some(path);
        if !wall_clock_ordering_holds(&throughput) {
            log::warn!("wall-clock ordering differs from the op-count model (timing noise or cache effects)");
        }
        if !op_ordering_holds(&throughput) {
            return Err(Error::Numerical(
                "measured op counts contradict the analytic op model".into(),
            ));
        }
    }
    Ok(BenchOutput {
        rows,
        throughput,
        csv: csv_path,
        throughput_csv,
    })
}

#[derive(Debug, Clone)]
pub struct SelectMaskOutput {
    /// One file for a flat mask, input and output factor masks otherwise.
    pub masks: Vec<PathBuf>,
    pub sizes: Vec<usize>,
    pub final_objective: f64,
}

fn sample_rows(rows: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n.min(rows.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, rows.len(), n)
        .into_iter()
        .map(|i| rows[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Learns a selective mask from the trained model's gradients.
pub fn cmd_select_mask(ctx: &Context) -> Result<SelectMaskOutput> {
    let c = &ctx.config.select_mask;
    let data = ctx.config.dataset()?;
    let model = ctx.load_model()?;
    let train = sample_rows(&data.train_indices(), c.train_samples, c.seed);
    let test = sample_rows(&data.test_indices(), c.test_samples, c.seed ^ 1);
    let schedule = TemperatureSchedule {
        start: c.t_start,
        end: c.t_end,
    };
    let loss = Loss::CrossEntropy;
    match c.layer {
        None => {
            let k = c
                .k
                .ok_or_else(|| Error::Config("select_mask.k is required".into()))?;
            let grads = |rows: &[usize]| -> Result<Vec<Vec<f64>>> {
                rows.par_iter()
                    .map(|&i| {
                        model
                            .per_sample_grad_single(data.row(i), &data.target(i), loss)
                            .map(|(g, _)| g.to_f64_vec())
                    })
                    .collect()
            };
            let mut problem = SelectiveMaskProblem::new(&grads(&train)?, &grads(&test)?, k)?;
            problem.lambda = c.lambda;
            problem.steps = c.steps;
            problem.step_size = c.step_size;
            problem.schedule = schedule;
            let result = selective_train(&problem)?;
            let path = ctx.path("mask.gmsk");
            write_mask_file(&path, &result.mask, Some(&result.trace))?;
            Ok(SelectMaskOutput {
                masks: vec![path],
                sizes: vec![result.mask.len()],
                final_objective: result.final_objective,
            })
        }
        Some(layer) => {
            let (k_in, k_out) = match (c.k_in, c.k_out, c.k) {
                (Some(a), Some(b), _) => (a, b),
                (None, None, Some(k)) => {
                    let r = (k as f64).sqrt().floor() as usize;
                    (r, r)
                }
                _ => {
                    return Err(Error::Config(
                        "select_mask needs k_in and k_out, or k, when a layer is given".into(),
                    ))
                }
            };
            let layer_traces = |rows: &[usize]| -> Result<Vec<crate::model::LinearLayerTrace>> {
                let traces = collect_traces(&model, &data, rows, loss)?;
                traces
                    .into_iter()
                    .map(|mut t| {
                        if layer >= t.len() {
                            return Err(Error::Config(format!(
                                "select_mask.layer {layer}: model has {} layers",
                                t.len()
                            )));
                        }
                        Ok(t.swap_remove(layer))
                    })
                    .collect()
            };
            let mut problem = FactorizedSelectiveProblem::new(layer_traces(&train)?, layer_traces(&test)?, k_in, k_out)?;
            problem.lambda = c.lambda;
            problem.steps = c.steps;
            problem.step_size = c.step_size;
            problem.schedule = schedule;
            let result = selective_train_factorized(&problem)?;
            let p_in = ctx.path(&format!("mask-layer{layer}-in.gmsk"));
            let p_out = ctx.path(&format!("mask-layer{layer}-out.gmsk"));
            write_mask_file(&p_in, &result.mask_in, Some(&result.trace))?;
            write_mask_file(&p_out, &result.mask_out, None)?;
            Ok(SelectMaskOutput {
                masks: vec![p_in, p_out],
                sizes: vec![result.mask_in.len(), result.mask_out.len()],
                final_objective: result.final_objective,
            })
        }
    }
}

