//! Composed compression pipelines and the compressor spec grammar.
//!
//! A spec is a `+`-separated list of stages, each `name:key=val,...`:
//!
//! ```text
//! mask:k=4096,seed=1+sjlt:k=1024,s=1,seed=2
//! ```
//!
//! Stages: `gaussian`, `rademacher`, `fjlt`, `sjlt` (keys `k`, `seed`,
//! `norm`, plus `s` for SJLT), `mask` (random, keys `k`, `seed`) and `smask`
//! (a trained mask file, keys `path` and optional `k`). The first stage may
//! declare the input dimension with `in=`. GraSS is the two-stage chain
//! mask then SJLT.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::gradient::{GradientVector, OpCount, Scalar};
use crate::mask::{random_mask, read_mask_file, MaskProvenance, MaskSpec};
use crate::sketch::{Projector, SketchKind, SketchSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageSpec {
    Sketch {
        kind: SketchKind,
        k: usize,
        sparsity: usize,
        seed: u64,
        normalize: bool,
    },
    RandomMask {
        k: usize,
        seed: u64,
    },
    SelectiveMask {
        path: PathBuf,
        k: Option<usize>,
    },
}

impl StageSpec {
    fn output_dim(&self) -> Option<usize> {
        match self {
            StageSpec::Sketch { k, .. } | StageSpec::RandomMask { k, .. } => Some(*k),
            StageSpec::SelectiveMask { k, .. } => *k,
        }
    }

    fn is_mask(&self) -> bool {
        matches!(self, StageSpec::RandomMask { .. } | StageSpec::SelectiveMask { .. })
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageSpec::Sketch {
                kind,
                k,
                sparsity,
                seed,
                normalize,
            } => {
                write!(f, "{kind}:k={k}")?;
                if *kind == SketchKind::Sjlt {
                    write!(f, ",s={sparsity}")?;
                }
                write!(f, ",seed={seed}")?;
                if *normalize {
                    f.write_str(",norm=1")?;
                }
                Ok(())
            }
            StageSpec::RandomMask { k, seed } => write!(f, "mask:k={k},seed={seed}"),
            StageSpec::SelectiveMask { path, k } => {
                write!(f, "smask:path={}", path.display())?;
                if let Some(k) = k {
                    write!(f, ",k={k}")?;
                }
                Ok(())
            }
        }
    }
}

/// Parsed, chain-checked pipeline description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressorSpec {
    pub input_dim: Option<usize>,
    pub stages: Vec<StageSpec>,
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            let text = stage.to_string();
            match (i, self.input_dim) {
                (0, Some(p)) => {
                    let (name, rest) = text.split_once(':').expect("stages print name:keys");
                    write!(f, "{name}:in={p},{rest}")?;
                }
                _ => f.write_str(&text)?,
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for CompressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_compressor(s)
    }
}

fn parse_error(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, pos: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| parse_error(pos, format!("invalid value {value:?} for key {key}")))
}

/// Stage arguments not yet consumed, with their byte offsets.
struct Keys<'a>(Vec<(&'a str, &'a str, usize)>);

impl<'a> Keys<'a> {
    fn take(&mut self, key: &str) -> Option<(&'a str, usize)> {
        let i = self.0.iter().position(|(k, _, _)| *k == key)?;
        let (_, v, p) = self.0.remove(i);
        Some((v, p))
    }

    fn required_k(&mut self, stage: &str, stage_pos: usize) -> Result<usize> {
        let (v, p) = self
            .take("k")
            .ok_or_else(|| parse_error(stage_pos, format!("stage {stage} is missing k")))?;
        let k = parse_value::<usize>("k", v, p)?;
        if k == 0 {
            return Err(parse_error(p, "k must be positive"));
        }
        Ok(k)
    }

    fn seed(&mut self) -> Result<u64> {
        self.take("seed").map_or(Ok(0), |(v, p)| parse_value("seed", v, p))
    }
}

/// Parses the spec grammar; positions in errors are byte offsets.
pub fn parse_compressor(text: &str) -> Result<CompressorSpec> {
    if text.trim().is_empty() {
        return Err(parse_error(0, "empty compressor spec"));
    }
    let mut input_dim = None;
    let mut stages = Vec::new();
    let mut stage_positions = Vec::new();
    let mut offset = 0;
    for (index, chunk) in text.split('+').enumerate() {
        let start = offset;
        offset += chunk.len() + 1;
        let (name, args) = chunk.split_once(':').unwrap_or((chunk, ""));
        let name = name.trim();
        let mut keys: Vec<(&str, &str, usize)> = Vec::new();
        let mut arg_pos = start + chunk.len() - args.len();
        if !args.is_empty() {
            for field in args.split(',') {
                let Some((k, v)) = field.split_once('=') else {
                    return Err(parse_error(arg_pos, format!("expected key=value, found {field:?}")));
                };
                let k = k.trim();
                if keys.iter().any(|(seen, _, _)| *seen == k) {
                    return Err(parse_error(arg_pos, format!("duplicate key {k}")));
                }
                keys.push((k, v.trim(), arg_pos));
                arg_pos += field.len() + 1;
            }
        }
        let mut keys = Keys(keys);
        if let Some((v, p)) = keys.take("in") {
            if index > 0 {
                return Err(parse_error(p, "only the first stage may declare in="));
            }
            input_dim = Some(parse_value::<usize>("in", v, p)?);
        }
        let stage = match name {
            "gaussian" | "rademacher" | "fjlt" | "sjlt" => {
                let kind = match name {
                    "gaussian" => SketchKind::Gaussian,
                    "rademacher" => SketchKind::Rademacher,
                    "fjlt" => SketchKind::Fjlt,
                    _ => SketchKind::Sjlt,
                };
                let k = keys.required_k(name, start)?;
                let seed = keys.seed()?;
                let sparsity = if kind == SketchKind::Sjlt {
                    match keys.take("s") {
                        Some((v, p)) => {
                            let s: usize = parse_value("s", v, p)?;
                            if s == 0 || s > k {
                                return Err(parse_error(p, format!("s ({s}) must lie in [1, k={k}]")));
                            }
                            s
                        }
                        None => 1,
                    }
                } else {
                    1
                };
                let normalize = match keys.take("norm") {
                    Some(("1" | "true", _)) => true,
                    Some(("0" | "false", _)) | None => false,
                    Some((v, p)) => return Err(parse_error(p, format!("invalid value {v:?} for key norm"))),
                };
                StageSpec::Sketch {
                    kind,
                    k,
                    sparsity,
                    seed,
                    normalize,
                }
            }
            "mask" => StageSpec::RandomMask {
                k: keys.required_k(name, start)?,
                seed: keys.seed()?,
            },
            "smask" => {
                let (path, _) = keys.take("path").ok_or_else(|| parse_error(start, "stage smask is missing path"))?;
                let k = match keys.take("k") {
                    Some((v, p)) => Some(parse_value("k", v, p)?),
                    None => None,
                };
                StageSpec::SelectiveMask {
                    path: PathBuf::from(path),
                    k,
                }
            }
            other => return Err(parse_error(start, format!("unknown stage {other:?}"))),
        };
        if let Some((k, _, p)) = keys.0.first() {
            return Err(parse_error(*p, format!("unknown key {k:?} for stage {name}")));
        }
        stages.push(stage);
        stage_positions.push(start);
    }
    let spec = CompressorSpec { input_dim, stages };
    spec.check_chain(spec.input_dim, &stage_positions)?;
    Ok(spec)
}

impl CompressorSpec {
    /// Output dimension, if every stage declares one.
    pub fn output_dim(&self) -> Option<usize> {
        self.stages.last().and_then(StageSpec::output_dim)
    }

    /// True for chains other than a single stage or mask-then-SJLT.
    pub fn is_noncanonical(&self) -> bool {
        match self.stages.as_slice() {
            [_] => false,
            [m, StageSpec::Sketch { kind: SketchKind::Sjlt, .. }] => !m.is_mask(),
            _ => true,
        }
    }

    /// GraSS with a random mask: `mask:k=k'+sjlt:k=k`.
    pub fn grass(k_mask: usize, k: usize, sparsity: usize, mask_seed: u64, sjlt_seed: u64) -> Self {
        CompressorSpec {
            input_dim: None,
            stages: vec![
                StageSpec::RandomMask {
                    k: k_mask,
                    seed: mask_seed,
                },
                StageSpec::Sketch {
                    kind: SketchKind::Sjlt,
                    k,
                    sparsity,
                    seed: sjlt_seed,
                    normalize: false,
                },
            ],
        }
    }

    fn check_chain(&self, input_dim: Option<usize>, positions: &[usize]) -> Result<()> {
        let mut dim = input_dim;
        for (i, stage) in self.stages.iter().enumerate() {
            let k = stage.output_dim();
            if let (Some(d), Some(k)) = (dim, k) {
                let limit = match stage {
                    StageSpec::Sketch {
                        kind: SketchKind::Fjlt,
                        ..
                    } => d.next_power_of_two(),
                    _ => d,
                };
                if k > limit {
                    return Err(parse_error(
                        positions.get(i).copied().unwrap_or(0),
                        format!("k ({k}) exceeds stage input dim ({d})"),
                    ));
                }
            }
            dim = k;
        }
        Ok(())
    }

    /// Resolves mask files relative to `base` and builds the pipeline for
    /// inputs of dimension `p`.
    pub fn build(&self, p: usize, base: Option<&Path>) -> Result<Compressor> {
        if let Some(declared) = self.input_dim {
            if declared != p {
                return Err(Error::invalid(format!(
                    "compressor declares input dim {declared} but gradients have {p}"
                )));
            }
        }
        self.check_chain(Some(p), &vec![0; self.stages.len()])
            .map_err(|e| match e {
                Error::Parse { message, .. } => Error::invalid(message),
                other => other,
            })?;
        let mut dim = p;
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let built = match stage {
                StageSpec::Sketch {
                    kind,
                    k,
                    sparsity,
                    seed,
                    normalize,
                } => Stage::Project(Projector::new(SketchSpec {
                    kind: *kind,
                    input_dim: dim,
                    target_dim: *k,
                    sparsity: *sparsity,
                    seed: *seed,
                    normalize: *normalize,
                })?),
                StageSpec::RandomMask { k, seed } => Stage::Mask(random_mask(dim, *k, *seed)?),
                StageSpec::SelectiveMask { path, k } => {
                    let resolved = match base {
                        Some(b) if path.is_relative() => b.join(path),
                        _ => path.clone(),
                    };
                    let mask = read_mask_file(&resolved)?;
                    check_dim(dim, mask.input_dim())?;
                    if let Some(k) = k {
                        check_dim(*k, mask.len())?;
                    }
                    Stage::Mask(mask)
                }
            };
            dim = built.output_dim();
            stages.push(built);
        }
        if self.is_noncanonical() {
            log::warn!("non-canonical compressor chain {self}");
        }
        Compressor::from_stages(p, stages)
    }
}

/// One executable stage.
#[derive(Debug, Clone)]
pub enum Stage {
    Project(Projector),
    Mask(MaskSpec),
}

impl Stage {
    pub fn input_dim(&self) -> usize {
        match self {
            Stage::Project(p) => p.input_dim(),
            Stage::Mask(m) => m.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Stage::Project(p) => p.target_dim(),
            Stage::Mask(m) => m.len(),
        }
    }

    fn apply<T: Scalar>(&self, g: &GradientVector<T>, ops: &mut OpCount) -> Result<Vec<T>> {
        match self {
            Stage::Project(p) => p.project_counted(g, ops),
            Stage::Mask(m) => m.apply_counted(g, ops),
        }
    }

    /// Text used in the fingerprint. Mask contents are hashed in, so a
    /// mask file's location never matters but its indices do.
    fn describe(&self) -> String {
        match self {
            Stage::Project(p) => {
                let s = p.spec();
                format!(
                    "{}:in={},k={},s={},seed={},norm={}",
                    s.kind, s.input_dim, s.target_dim, s.sparsity, s.seed, s.normalize as u8
                )
            }
            Stage::Mask(m) => {
                let mut h = Sha256::new();
                for &i in m.indices() {
                    h.update((i as u64).to_le_bytes());
                }
                let origin = match &m.provenance {
                    MaskProvenance::Random { seed } => format!("random/{seed}"),
                    MaskProvenance::Selective { .. } => "selective".to_string(),
                    MaskProvenance::Identity => "identity".to_string(),
                };
                format!(
                    "mask:in={},k={},origin={origin},indices={}",
                    m.input_dim(),
                    m.len(),
                    hex::encode(h.finalize())
                )
            }
        }
    }
}

/// A built, dimension-checked pipeline.
#[derive(Debug, Clone)]
pub struct Compressor {
    input_dim: usize,
    stages: Vec<Stage>,
    fingerprint: [u8; 32],
}

impl Compressor {
    pub fn from_stages(p: usize, stages: Vec<Stage>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::invalid("a compressor needs at least one stage"));
        }
        let mut dim = p;
        for stage in &stages {
            check_dim(dim, stage.input_dim())?;
            dim = stage.output_dim();
        }
        let canonical: Vec<String> = stages.iter().map(Stage::describe).collect();
        let fingerprint = Sha256::digest(canonical.join("+").as_bytes()).into();
        Ok(Compressor {
            input_dim: p,
            stages,
            fingerprint,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().expect("non-empty").output_dim()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    pub fn compress<T: Scalar>(&self, g: &GradientVector<T>) -> Result<Vec<T>> {
        self.compress_counted(g, &mut OpCount::default())
    }

    /// Applies the stages in order. Intermediate vectors are carried in f64
    /// and rounded to `T` once at the end.
    pub fn compress_counted<T: Scalar>(&self, g: &GradientVector<T>, ops: &mut OpCount) -> Result<Vec<T>> {
        check_dim(self.input_dim, g.dim())?;
        let (first, rest) = self.stages.split_first().expect("non-empty");
        if rest.is_empty() {
            return first.apply(g, ops);
        }
        let mut current: GradientVector<f64> = match first {
            // A gather is exact, so it can run in the caller's precision.
            Stage::Mask(m) => GradientVector::Dense(m.apply_counted(g, ops)?.iter().map(|v| v.to_f64()).collect()),
            Stage::Project(_) => GradientVector::Dense(first.apply(&g.cast::<f64>(), ops)?),
        };
        for stage in rest {
            current = GradientVector::Dense(stage.apply(&current, ops)?);
        }
        Ok(current.to_dense().into_iter().map(T::from_f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_stage_parses() {
        let spec = parse_compressor("sjlt:k=1024,s=1,seed=7").unwrap();
        assert_eq!(
            spec.stages,
            vec![StageSpec::Sketch {
                kind: SketchKind::Sjlt,
                k: 1024,
                sparsity: 1,
                seed: 7,
                normalize: false
            }]
        );
        assert_eq!(spec.to_string(), "sjlt:k=1024,s=1,seed=7");
    }

    #[test]
    fn grass_form_parses_and_round_trips() {
        let spec = parse_compressor("mask:k=4096,seed=1+sjlt:k=1024,seed=2").unwrap();
        assert!(!spec.is_noncanonical());
        assert_eq!(spec.output_dim(), Some(1024));
        assert_eq!(spec, CompressorSpec::grass(4096, 1024, 1, 1, 2));
        assert_eq!(parse_compressor(&spec.to_string()).unwrap(), spec);
    }

    #[test]
    fn broken_chain_reports_dims() {
        let err = parse_compressor("mask:k=10+sjlt:k=20").unwrap_err();
        match err {
            Error::Parse { position, message } => {
                assert_eq!(message, "k (20) exceeds stage input dim (10)");
                assert_eq!(position, 10);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_positions() {
        let pos = |s: &str| match parse_compressor(s).unwrap_err() {
            Error::Parse { position, .. } => position,
            e => panic!("{e:?}"),
        };
        assert_eq!(pos("sjlt:k=4+blah:k=2"), 9);
        assert_eq!(pos("sjlt:seed=3"), 0);
        assert_eq!(pos("sjlt:k=4,bogus=1"), 9);
        assert_eq!(pos("mask:k=x"), 5);
        assert_eq!(pos("mask:k=8+sjlt:in=8,k=4"), 14);
        assert_eq!(pos(""), 0);
    }

    #[test]
    fn declared_input_dim_round_trips_and_is_checked() {
        let spec = parse_compressor("gaussian:in=64,k=8,seed=3,norm=1").unwrap();
        assert_eq!(spec.input_dim, Some(64));
        assert_eq!(spec.to_string(), "gaussian:in=64,k=8,seed=3,norm=1");
        assert!(spec.build(63, None).is_err());
        assert_eq!(spec.build(64, None).unwrap().output_dim(), 8);
        assert!(parse_compressor("mask:in=8,k=9").is_err());
    }

    #[test]
    fn noncanonical_chains_flagged() {
        assert!(parse_compressor("sjlt:k=64+mask:k=8").unwrap().is_noncanonical());
        assert!(parse_compressor("mask:k=64+gaussian:k=8").unwrap().is_noncanonical());
        assert!(!parse_compressor("mask:k=64").unwrap().is_noncanonical());
    }

    #[test]
    fn fingerprint_tracks_every_parameter() {
        let fp = |s: &str| parse_compressor(s).unwrap().build(256, None).unwrap().fingerprint();
        let base = fp("mask:k=64,seed=1+sjlt:k=16,seed=2");
        assert_eq!(base, fp("mask:k=64,seed=1+sjlt:k=16,s=1,seed=2"));
        assert_ne!(base, fp("mask:k=64,seed=9+sjlt:k=16,seed=2"));
        assert_ne!(base, fp("mask:k=64,seed=1+sjlt:k=16,seed=3"));
        assert_ne!(base, fp("mask:k=64,seed=1+sjlt:k=16,s=2,seed=2"));
        assert_ne!(base, fp("mask:k=64,seed=1+sjlt:k=8,seed=2"));
    }

    #[test]
    fn full_mask_grass_equals_plain_sjlt() {
        let g = GradientVector::dense((0..128).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let grass = parse_compressor("mask:k=128,seed=4+sjlt:k=32,s=2,seed=5").unwrap().build(128, None).unwrap();
        let sjlt = parse_compressor("sjlt:k=32,s=2,seed=5").unwrap().build(128, None).unwrap();
        assert_eq!(grass.compress(&g).unwrap(), sjlt.compress(&g).unwrap());
    }

    #[test]
    fn grass_op_count_is_mask_plus_sjlt() {
        let c = parse_compressor("mask:k=64,seed=1+sjlt:k=16,s=2,seed=2").unwrap().build(4096, None).unwrap();
        let g = GradientVector::dense(vec![1.0f32; 4096]);
        let mut ops = OpCount::default();
        c.compress_counted(&g, &mut ops).unwrap();
        assert_eq!(ops.madds, 64 + 2 * 64);
    }

    #[test]
    fn selective_mask_stage_loads_file() {
        let dir = tempfile::tempdir().unwrap();
        let mask = MaskSpec::new(
            10,
            vec![1, 3, 5],
            MaskProvenance::Selective {
                fingerprint: "x".into(),
            },
        )
        .unwrap();
        crate::mask::write_mask_file(&dir.path().join("m.gmsk"), &mask, None).unwrap();
        let spec = parse_compressor("smask:path=m.gmsk,k=3").unwrap();
        let c = spec.build(10, Some(dir.path())).unwrap();
        let g = GradientVector::dense((0..10).map(|i| i as f32).collect::<Vec<_>>());
        assert_eq!(c.compress(&g).unwrap(), vec![1.0, 3.0, 5.0]);
        assert!(parse_compressor("smask:path=m.gmsk,k=4").unwrap().build(10, Some(dir.path())).is_err());
    }
}
