//! End-to-end checks of the command pipeline, through the library entry
//! points and through the `grass` binary for exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use grass::attribution::{influence_scores, Featurizer, GradientStore};
use grass::cli::*;
use grass::compressor::parse_compressor;
use grass::mask::read_mask_file;
use grass::model::{load_checkpoint, Loss};
use sha2::{Digest, Sha256};

const BASE: &str = r#"
[dataset]
kind = "blobs"
n = 110
dim = 4
test = 10
separation = 0.7
seed = 3

[model]
hidden = [8, 8]
epochs = 8
lr = 0.1

[compressor]
spec = "sjlt:k=64,s=1,seed=1"

[lds]
subsets = 12
null_shuffles = 20
"#;

fn context(root: &Path, overrides: &[&str]) -> Context {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = RunConfig::parse(BASE, &o, root).unwrap();
    Context::new(cfg, root, &root.join("runs"), false).unwrap()
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

#[test]
fn train_writes_checkpoint_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), &[]);
    assert!(ctx.run_dir.join(RESOLVED_CONFIG).is_file());
    let out = cmd_train(&ctx).unwrap();
    assert!(!out.skipped);
    let curve = fs::read_to_string(&out.loss_curve).unwrap();
    let losses: Vec<f64> = curve.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let first = sha(&out.checkpoint);

    let other = tempfile::tempdir().unwrap();
    let again = cmd_train(&context(other.path(), &[])).unwrap();
    assert_eq!(first, sha(&again.checkpoint));
    assert!(cmd_train(&ctx).unwrap().skipped);
}

#[test]
fn cache_writes_expected_store_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), &[]);
    cmd_train(&ctx).unwrap();
    let out = cmd_cache(&ctx).unwrap();
    assert!(!out.skipped);
    let raw = GradientStore::read(&out.raw[0]).unwrap();
    assert_eq!((raw.len(), raw.dim()), (100, 64));
    let before: Vec<_> = out.raw.iter().chain(&out.preconditioned).map(|p| sha(p)).collect();
    let count = fs::read_dir(&ctx.run_dir).unwrap().count();

    let again = cmd_cache(&ctx).unwrap();
    assert!(again.skipped);
    let after: Vec<_> = again.raw.iter().chain(&again.preconditioned).map(|p| sha(p)).collect();
    assert_eq!(before, after);
    assert_eq!(count, fs::read_dir(&ctx.run_dir).unwrap().count());
}

#[test]
fn layerwise_cache_writes_one_block_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(
        dir.path(),
        &["compressor.spec=", "compressor.factorized=factgrass:layer=*,kl=4", "attribution.mode=layerwise"],
    );
    cmd_train(&ctx).unwrap();
    let out = cmd_cache(&ctx).unwrap();
    assert_eq!(out.raw.len(), 3);
    assert_eq!(out.fims.len(), 3);
    for p in &out.preconditioned {
        let s = GradientStore::read(p).unwrap();
        assert_eq!((s.len(), s.dim()), (100, 4));
    }
    let scores = cmd_attribute(&ctx).unwrap();
    assert_eq!(scores.scores.len(), 10);
}

#[test]
fn attribute_matches_library_scores_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), &["attribution.test=[0, 3]", "attribution.top_k=500"]);
    cmd_train(&ctx).unwrap();
    let cache = cmd_cache(&ctx).unwrap();
    let out = cmd_attribute(&ctx).unwrap();
    assert_eq!(out.scores.len(), 2);

    let data = ctx.config.dataset().unwrap();
    let model = load_checkpoint(&ctx.run_dir.join("model.gmlp")).unwrap();
    let compressor = parse_compressor("sjlt:k=64,s=1,seed=1").unwrap().build(model.param_count(), None).unwrap();
    let featurizer = Featurizer::Flat(compressor);
    let pre = GradientStore::read(&cache.preconditioned[0]).unwrap();
    for ((&t, scores), csv) in out.test_rows.iter().zip(&out.scores).zip(&out.csvs) {
        let (g, _) = featurizer.featurize(&model, data.row(t), &data.target(t), Loss::CrossEntropy).unwrap();
        let lib = influence_scores(&pre, &g, &featurizer.fingerprint()).unwrap();
        assert_eq!(&lib, scores);
        let parsed: Vec<f64> = fs::read_to_string(csv)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(parsed, lib);
    }
    // Top-K with K > n is clamped to n rows per test point.
    let top = fs::read_to_string(out.top_k.unwrap()).unwrap();
    assert_eq!(top.lines().count(), 1 + 2 * 100);
}

#[test]
fn large_damping_reduces_influence_to_graddot() {
    let dir = tempfile::tempdir().unwrap();
    let lambda = 1e8;
    let inf = context(dir.path(), &["attribution.damping=1e8", "attribution.test=[1]"]);
    cmd_train(&inf).unwrap();
    cmd_cache(&inf).unwrap();
    let a = cmd_attribute(&inf).unwrap();
    let dot = context(dir.path(), &["attribution.damping=1e8", "attribution.test=[1]", "attribution.method=graddot"]);
    cmd_train(&dot).unwrap();
    cmd_cache(&dot).unwrap();
    let b = cmd_attribute(&dot).unwrap();
    let scaled: Vec<f64> = a.scores[0].iter().map(|v| v * lambda).collect();
    let num: f64 = scaled.iter().zip(&b.scores[0]).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.scores[0].iter().map(|y| y * y).sum();
    assert!((num / den).sqrt() < 1e-4, "relative error {}", (num / den).sqrt());
}

#[test]
fn swapped_store_is_rejected_by_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let a = context(dir.path(), &[]);
    cmd_train(&a).unwrap();
    let cache_a = cmd_cache(&a).unwrap();
    let b = context(dir.path(), &["compressor.spec=sjlt:k=64,s=1,seed=2"]);
    cmd_train(&b).unwrap();
    let cache_b = cmd_cache(&b).unwrap();
    fs::copy(&cache_a.preconditioned[0], &cache_b.preconditioned[0]).unwrap();
    let err = cmd_attribute(&b).unwrap_err();
    assert!(matches!(err, grass::Error::FingerprintMismatch { .. }), "{err}");
}

#[test]
fn oracle_predictor_has_lds_one() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), &["lds.predictor=oracle"]);
    let out = cmd_lds(&ctx).unwrap();
    assert!(!out.rho.is_empty());
    assert!((out.mean_rho - 1.0).abs() < 1e-12, "{}", out.mean_rho);
}

#[test]
fn influence_lds_reports_damping_and_null() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), &["lds.damping_grid=[0.01, 1.0]"]);
    cmd_train(&ctx).unwrap();
    let out = cmd_lds(&ctx).unwrap();
    let report = out.report.unwrap();
    assert!([0.01, 1.0].contains(&report.damping));
    assert_eq!(report.subset_seeds.len(), 12);
    assert!(report.rho.iter().all(|r| (-1.0..=1.0).contains(r)));
    assert!(report.val_rows.iter().all(|v| !report.eval_rows.contains(v)));
    assert!(fs::read_to_string(out.summary).unwrap().contains("mean rho"));
}

#[test]
fn bench_emits_one_row_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(
        dir.path(),
        &[
            "bench.p=1024",
            "bench.methods=[\"sjlt\", \"gaussian\"]",
            "bench.ks=[16, 64]",
            "bench.sparsities=[1, 2, 4]",
            "bench.trials=2",
            "bench.factorized=[\"logra:layer=*,kl=16\", \"factmask:layer=*,kl=16\"]",
        ],
    );
    let out = cmd_bench(&ctx).unwrap();
    assert_eq!(out.rows.len(), 2 * 2 * 3);
    assert_eq!(fs::read_to_string(&out.csv).unwrap().lines().count(), 13);
    assert_eq!(out.throughput.len(), 2 * 3);
}

#[test]
fn select_mask_writes_exactly_k_indices() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = context(dir.path(), &["select_mask.k=17", "select_mask.steps=40"]);
    cmd_train(&ctx).unwrap();
    let out = cmd_select_mask(&ctx).unwrap();
    let mask = read_mask_file(&out.masks[0]).unwrap();
    assert_eq!(mask.len(), 17);

    let layered = context(dir.path(), &["select_mask.layer=1", "select_mask.k_in=3", "select_mask.k_out=4", "select_mask.steps=20"]);
    cmd_train(&layered).unwrap();
    let out = cmd_select_mask(&layered).unwrap();
    assert_eq!(out.sizes, vec![3, 4]);
}

fn run_binary(dir: &Path, config: &str, args: &[&str]) -> (i32, String) {
    let path = dir.join("run.toml");
    fs::write(&path, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_grass"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .env(RUN_ROOT_ENV, dir.join("runs"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = run_binary(dir.path(), "[dataset]\nkind = \"idx\"\nlabels = \"labels.idx\"\n", &["train"]);
    assert_eq!(code, 2);
    assert!(err.contains("dataset.images"), "{err}");

    let (code, err) = run_binary(dir.path(), &format!("{BASE}\nunknown_section = 1\n"), &["train"]);
    assert_eq!(code, 2, "{err}");

    let (code, err) = run_binary(dir.path(), BASE, &["attribute"]);
    assert_eq!(code, 3, "{err}");

    let (code, err) = run_binary(dir.path(), BASE, &["train", "--set", "model.lr=1e300"]);
    assert_eq!(code, 4, "{err}");

    let (code, err) = run_binary(dir.path(), BASE, &["lds", "--threads", "2", "--set", "lds.predictor=\"oracle\""]);
    assert_eq!(code, 0, "{err}");
}
