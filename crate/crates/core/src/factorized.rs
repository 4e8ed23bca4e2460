//! Factorized compression of linear-layer gradients.
//!
//! A linear layer's per-sample gradient is `sum_t z_in[t] (x) dz_out[t]`
//! (column-major vec, flat index `a * d_out + b`). Every mode here maps
//! each factor to a small vector per token, accumulates the Kronecker
//! products of the small factors, and optionally finishes with one SJLT:
//!
//! - LoGra: Gaussian factor projections, no final stage.
//! - FactGraSS: factor masks, then SJLT from `k'_in * k'_out` down to `k_l`.
//! - FactMask: factor masks only.
//! - FactSJLT: SJLT factor projections, no final stage.
//!
//! The `p_l`-length gradient is never formed outside
//! [`materialize_layer_grad`], which exists as an oracle.

use std::fmt;
use std::mem::size_of;

use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::gradient::{OpCount, Scalar};
use crate::mask::{random_mask, MaskProvenance, MaskSpec};
use crate::model::{kron_sum, LinearLayerTrace};
use crate::prf;
use crate::sketch::{Projector, SketchKind, SketchSpec};

/// Largest layer the oracle will materialize.
pub const LAYER_MATERIALIZE_LIMIT: usize = 10_000_000;

const SEED_SALT: u64 = 0x4641_4354;

/// Exact `sum_t z_in[:, t] (x) dz_out[:, t]`. Oracle and baseline only.
pub fn materialize_layer_grad(trace: &LinearLayerTrace) -> Result<Vec<f64>> {
    let p = trace.param_count();
    if p > LAYER_MATERIALIZE_LIMIT {
        return Err(Error::MaterializeGuard {
            entries: p as u128,
            limit: LAYER_MATERIALIZE_LIMIT as u128,
        });
    }
    Ok(kron_sum(trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorizedMode {
    LoGra,
    FactGrass,
    FactMask,
    FactSjlt,
}

impl FactorizedMode {
    pub fn name(self) -> &'static str {
        match self {
            FactorizedMode::LoGra => "logra",
            FactorizedMode::FactGrass => "factgrass",
            FactorizedMode::FactMask => "factmask",
            FactorizedMode::FactSjlt => "factsjlt",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "logra" => FactorizedMode::LoGra,
            "factgrass" => FactorizedMode::FactGrass,
            "factmask" => FactorizedMode::FactMask,
            "factsjlt" => FactorizedMode::FactSjlt,
            _ => return None,
        })
    }

    fn uses_masks(self) -> bool {
        matches!(self, FactorizedMode::FactGrass | FactorizedMode::FactMask)
    }
}

impl fmt::Display for FactorizedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Map applied to one factor of every token.
#[derive(Debug, Clone)]
pub enum FactorMap {
    Project(Projector),
    Mask(MaskSpec),
}

impl FactorMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FactorMap::Project(p) => p.input_dim(),
            FactorMap::Mask(m) => m.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FactorMap::Project(p) => p.target_dim(),
            FactorMap::Mask(m) => m.len(),
        }
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64], ops: &mut u64) {
        match self {
            FactorMap::Project(p) => {
                let mut count = OpCount::default();
                p.project_slice_into(x, out, &mut count);
                *ops += count.madds;
            }
            FactorMap::Mask(m) => {
                for (o, &j) in out.iter_mut().zip(m.indices()) {
                    *o = x[j];
                }
                *ops += m.len() as u64;
            }
        }
    }

    /// Scratch bytes one application allocates internally.
    fn scratch_bytes(&self) -> u64 {
        match self {
            FactorMap::Mask(_) => 0,
            FactorMap::Project(p) => match p.spec().kind {
                SketchKind::Sjlt => (p.spec().sparsity * 16) as u64,
                SketchKind::Fjlt => ((p.input_dim().next_power_of_two() + p.input_dim()) * 8) as u64,
                SketchKind::Gaussian | SketchKind::Rademacher => 0,
            },
        }
    }

    fn describe(&self) -> String {
        match self {
            FactorMap::Project(p) => {
                let s = p.spec();
                format!(
                    "{}:in={},k={},s={},seed={},norm={}",
                    s.kind, s.input_dim, s.target_dim, s.sparsity, s.seed, s.normalize as u8
                )
            }
            FactorMap::Mask(m) => {
                let mut h = Sha256::new();
                for &i in m.indices() {
                    h.update((i as u64).to_le_bytes());
                }
                format!("mask:in={},k={},{}", m.input_dim(), m.len(), hex::encode(h.finalize()))
            }
        }
    }
}

/// Operation counts for one layer and one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerOps {
    /// Factor maps plus Kronecker accumulation, summed over tokens.
    pub per_token: u64,
    /// Final SJLT, run once per sample.
    pub once: u64,
    /// Bytes of buffers allocated by the call, output included.
    pub aux_bytes: u64,
}

impl LayerOps {
    pub fn total(&self) -> u64 {
        self.per_token + self.once
    }

    pub fn as_op_count(&self) -> OpCount {
        OpCount {
            madds: self.total(),
            aux_bytes: self.aux_bytes,
        }
    }
}

/// Compressor for a single linear layer.
#[derive(Debug, Clone)]
pub struct LayerCompressor {
    pub layer: usize,
    pub mode: FactorizedMode,
    in_map: FactorMap,
    out_map: FactorMap,
    final_sjlt: Option<Projector>,
}

impl LayerCompressor {
    pub fn from_parts(
        layer: usize,
        mode: FactorizedMode,
        in_map: FactorMap,
        out_map: FactorMap,
        final_sjlt: Option<Projector>,
    ) -> Result<Self> {
        if let Some(f) = &final_sjlt {
            check_dim(in_map.output_dim() * out_map.output_dim(), f.input_dim())?;
            if f.spec().kind != SketchKind::Sjlt {
                return Err(Error::invalid("the final factorized stage must be an SJLT"));
            }
        }
        Ok(LayerCompressor {
            layer,
            mode,
            in_map,
            out_map,
            final_sjlt,
        })
    }

    /// Gaussian factor projections `d_in -> k_in`, `d_out -> k_out`.
    pub fn logra(layer: usize, d_in: usize, d_out: usize, k_in: usize, k_out: usize, seed: u64) -> Result<Self> {
        let project = |d, k, side| -> Result<FactorMap> {
            let spec = SketchSpec::new(SketchKind::Gaussian, d, k, side_seed(seed, side));
            Ok(FactorMap::Project(Projector::new(spec)?.with_cached_matrix()?))
        };
        Self::from_parts(
            layer,
            FactorizedMode::LoGra,
            project(d_in, k_in, 1)?,
            project(d_out, k_out, 2)?,
            None,
        )
    }

    /// SJLT factor projections with `s` nonzeros per column.
    pub fn fact_sjlt(
        layer: usize,
        d_in: usize,
        d_out: usize,
        k_in: usize,
        k_out: usize,
        sparsity: usize,
        seed: u64,
    ) -> Result<Self> {
        let project = |d, k, side| -> Result<FactorMap> {
            let spec = SketchSpec::sjlt(d, k, sparsity.min(k), side_seed(seed, side));
            Ok(FactorMap::Project(Projector::new(spec)?))
        };
        Self::from_parts(
            layer,
            FactorizedMode::FactSjlt,
            project(d_in, k_in, 1)?,
            project(d_out, k_out, 2)?,
            None,
        )
    }

    /// Factor masks followed by `SJLT_{k_l}` on the `k'_in * k'_out` buffer.
    pub fn factgrass(
        layer: usize,
        mask_in: MaskSpec,
        mask_out: MaskSpec,
        k_l: usize,
        sparsity: usize,
        seed: u64,
    ) -> Result<Self> {
        let k_prime = mask_in.len() * mask_out.len();
        if k_l > k_prime {
            return Err(Error::invalid(format!(
                "k_l ({k_l}) exceeds the masked dimension k'_l ({k_prime})"
            )));
        }
        let sjlt = Projector::new(SketchSpec::sjlt(k_prime, k_l, sparsity.min(k_l), side_seed(seed, 3)))?;
        Self::from_parts(
            layer,
            FactorizedMode::FactGrass,
            FactorMap::Mask(mask_in),
            FactorMap::Mask(mask_out),
            Some(sjlt),
        )
    }

    pub fn factmask(layer: usize, mask_in: MaskSpec, mask_out: MaskSpec) -> Result<Self> {
        Self::from_parts(
            layer,
            FactorizedMode::FactMask,
            FactorMap::Mask(mask_in),
            FactorMap::Mask(mask_out),
            None,
        )
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.in_map.input_dim(), self.out_map.input_dim())
    }

    pub fn factor_dims(&self) -> (usize, usize) {
        (self.in_map.output_dim(), self.out_map.output_dim())
    }

    /// Size of the Kronecker buffer, `k'_l` for masked modes.
    pub fn intermediate_dim(&self) -> usize {
        self.in_map.output_dim() * self.out_map.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.final_sjlt
            .as_ref()
            .map_or(self.intermediate_dim(), Projector::target_dim)
    }

    pub fn in_map(&self) -> &FactorMap {
        &self.in_map
    }

    pub fn out_map(&self) -> &FactorMap {
        &self.out_map
    }

    pub fn final_sjlt(&self) -> Option<&Projector> {
        self.final_sjlt.as_ref()
    }

    pub fn compress<T: Scalar>(&self, trace: &LinearLayerTrace) -> Result<Vec<T>> {
        self.compress_counted(trace, &mut LayerOps::default())
    }

    /// Per token: map both factors, add their Kronecker product into the
    /// buffer (ascending token, then ascending `(in, out)`). Then the
    /// optional final SJLT over the buffer's nonzeros.
    pub fn compress_counted<T: Scalar>(&self, trace: &LinearLayerTrace, ops: &mut LayerOps) -> Result<Vec<T>> {
        check_dim(self.in_map.input_dim(), trace.d_in)?;
        check_dim(self.out_map.input_dim(), trace.d_out)?;
        let (k1, k2) = self.factor_dims();
        let kp = k1 * k2;
        let mut zin = vec![0.0f64; k1];
        let mut dz = vec![0.0f64; k2];
        let mut buf = vec![0.0f64; kp];
        let mut aux = ((k1 + k2 + kp) * size_of::<f64>()) as u64
            + self.in_map.scratch_bytes().max(self.out_map.scratch_bytes());
        let mut per_token = 0u64;
        for t in 0..trace.tokens {
            self.in_map.apply_into(trace.z_in_token(t), &mut zin, &mut per_token);
            self.out_map.apply_into(trace.dz_out_token(t), &mut dz, &mut per_token);
            for (a, &za) in zin.iter().enumerate() {
                let block = &mut buf[a * k2..(a + 1) * k2];
                for (o, &d) in block.iter_mut().zip(&dz) {
                    *o += za * d;
                }
            }
            per_token += kp as u64;
        }
        ops.per_token += per_token;
        let out: Vec<T> = match &self.final_sjlt {
            None => {
                aux += (kp * size_of::<T>()) as u64;
                buf.iter().map(|&v| T::from_f64(v)).collect()
            }
            Some(sjlt) => {
                let k_l = sjlt.target_dim();
                let s = sjlt.spec().sparsity;
                let mut acc = vec![0.0f64; k_l];
                let mut rows = vec![0usize; s];
                let mut signs = vec![0.0f64; s];
                aux += (k_l * size_of::<f64>() + s * 16 + k_l * size_of::<T>()) as u64;
                let mut nnz = 0u64;
                for (j, &v) in buf.iter().enumerate() {
                    if v != 0.0 {
                        sjlt.sjlt_scatter(j, v, &mut rows, &mut signs, &mut acc);
                        nnz += 1;
                    }
                }
                ops.once += s as u64 * nnz;
                let scale = sjlt.output_scale();
                acc.iter().map(|&v| T::from_f64(v * scale)).collect()
            }
        };
        ops.aux_bytes = ops.aux_bytes.max(aux);
        Ok(out)
    }

    fn describe(&self) -> String {
        let mut s = format!(
            "{}:layer={},in[{}],out[{}]",
            self.mode,
            self.layer,
            self.in_map.describe(),
            self.out_map.describe()
        );
        if let Some(f) = &self.final_sjlt {
            let sp = f.spec();
            s.push_str(&format!(",sjlt[k={},s={},seed={}]", sp.target_dim, sp.sparsity, sp.seed));
        }
        s
    }
}

fn side_seed(seed: u64, side: u64) -> u64 {
    prf::hash3(seed, side, 0, SEED_SALT)
}

/// Compressor for every linear layer of a model, blocks in layer order.
#[derive(Debug, Clone)]
pub struct FactorizedCompressor {
    layers: Vec<LayerCompressor>,
    fingerprint: [u8; 32],
}

impl FactorizedCompressor {
    pub fn from_layers(layers: Vec<LayerCompressor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a factorized compressor needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.layer != i {
                return Err(Error::invalid(format!(
                    "layer compressors must be in layer order; found layer {} at position {i}",
                    l.layer
                )));
            }
        }
        let text: Vec<String> = layers.iter().map(LayerCompressor::describe).collect();
        let fingerprint = Sha256::digest(text.join(";").as_bytes()).into();
        Ok(FactorizedCompressor { layers, fingerprint })
    }

    pub fn layers(&self) -> &[LayerCompressor] {
        &self.layers
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCompressor::output_dim).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.block_dims().iter().sum()
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    /// Concatenated per-layer blocks and the per-layer op counts.
    pub fn compress_model<T: Scalar>(&self, traces: &[LinearLayerTrace]) -> Result<(Vec<T>, Vec<LayerOps>)> {
        let mut out = Vec::with_capacity(self.output_dim());
        let mut ops = Vec::with_capacity(self.layers.len());
        for lc in &self.layers {
            let trace = traces
                .iter()
                .find(|t| t.layer == lc.layer)
                .ok_or_else(|| Error::invalid(format!("no trace for layer {}", lc.layer)))?;
            let mut op = LayerOps::default();
            out.extend(lc.compress_counted::<T>(trace, &mut op)?);
            ops.push(op);
        }
        Ok((out, ops))
    }
}

/// A dimension in a factorized spec: a literal or a multiple of the
/// resolved projection dim on the same side (`2*kin`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimExpr {
    Literal(usize),
    TimesIn(usize),
    TimesOut(usize),
}

impl fmt::Display for DimExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimExpr::Literal(v) => write!(f, "{v}"),
            DimExpr::TimesIn(c) => write!(f, "{c}*kin"),
            DimExpr::TimesOut(c) => write!(f, "{c}*kout"),
        }
    }
}

impl DimExpr {
    fn eval(self, kin: usize, kout: usize) -> usize {
        match self {
            DimExpr::Literal(v) => v,
            DimExpr::TimesIn(c) => c * kin,
            DimExpr::TimesOut(c) => c * kout,
        }
    }
}

/// One `mode:layer=...,key=val` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorizedEntry {
    pub mode: FactorizedMode,
    /// `None` means every layer.
    pub layer: Option<usize>,
    /// Total target dimension, split uniformly over the layers it covers.
    pub k: Option<usize>,
    /// Per-layer target dimension.
    pub k_layer: Option<usize>,
    pub kin: Option<DimExpr>,
    pub kout: Option<DimExpr>,
    pub kin_mask: Option<DimExpr>,
    pub kout_mask: Option<DimExpr>,
    pub sparsity: usize,
    pub seed: u64,
}

/// `;`-separated entries, e.g.
/// `factgrass:layer=*,kin'=2*kin,kout'=2*kout,k=4096,seed=9`. Explicit
/// layer entries override a `*` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorizedCompressorSpec {
    pub entries: Vec<FactorizedEntry>,
}

/// Per-layer dimensions after resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub layer: usize,
    pub mode: FactorizedMode,
    pub d_in: usize,
    pub d_out: usize,
    /// Factor output dims: projection dims, or mask sizes for masked modes.
    pub k_in: usize,
    pub k_out: usize,
    pub k_layer: usize,
    pub sparsity: usize,
    pub seed: u64,
}

impl fmt::Display for FactorizedEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:layer=", self.mode)?;
        match self.layer {
            Some(l) => write!(f, "{l}")?,
            None => f.write_str("*")?,
        }
        if let Some(k) = self.k {
            write!(f, ",k={k}")?;
        }
        if let Some(k) = self.k_layer {
            write!(f, ",kl={k}")?;
        }
        for (name, v) in [
            ("kin", self.kin),
            ("kout", self.kout),
            ("kin'", self.kin_mask),
            ("kout'", self.kout_mask),
        ] {
            if let Some(v) = v {
                write!(f, ",{name}={v}")?;
            }
        }
        write!(f, ",s={},seed={}", self.sparsity, self.seed)
    }
}

impl fmt::Display for FactorizedCompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(";")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for FactorizedCompressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_factorized(s)
    }
}

fn perr(position: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        position,
        message: message.into(),
    }
}

fn parse_dim_expr(v: &str, pos: usize) -> Result<DimExpr> {
    if let Some((c, side)) = v.split_once('*') {
        let c: usize = c
            .trim()
            .parse()
            .map_err(|_| perr(pos, format!("invalid multiplier in {v:?}")))?;
        return match side.trim() {
            "kin" => Ok(DimExpr::TimesIn(c)),
            "kout" => Ok(DimExpr::TimesOut(c)),
            other => Err(perr(pos, format!("expected kin or kout after '*', found {other:?}"))),
        };
    }
    v.parse()
        .map(DimExpr::Literal)
        .map_err(|_| perr(pos, format!("invalid dimension {v:?}")))
}

pub fn parse_factorized(text: &str) -> Result<FactorizedCompressorSpec> {
    if text.trim().is_empty() {
        return Err(perr(0, "empty factorized compressor spec"));
    }
    let mut entries = Vec::new();
    let mut offset = 0;
    for chunk in text.split(';') {
        let start = offset;
        offset += chunk.len() + 1;
        let (name, args) = chunk.split_once(':').unwrap_or((chunk, ""));
        let mode = FactorizedMode::from_name(name.trim())
            .ok_or_else(|| perr(start, format!("unknown factorized mode {:?}", name.trim())))?;
        let mut entry = FactorizedEntry {
            mode,
            layer: None,
            k: None,
            k_layer: None,
            kin: None,
            kout: None,
            kin_mask: None,
            kout_mask: None,
            sparsity: 1,
            seed: 0,
        };
        let mut saw_layer = false;
        let mut pos = start + chunk.len() - args.len();
        for field in args.split(',').filter(|f| !f.trim().is_empty()) {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| perr(pos, format!("expected key=value, found {field:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let int = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| perr(pos, format!("invalid value {v:?} for key {k}")))
            };
            match k {
                "layer" => {
                    saw_layer = true;
                    entry.layer = if v == "*" { None } else { Some(int(v)?) };
                }
                "k" => entry.k = Some(int(v)?),
                "kl" => entry.k_layer = Some(int(v)?),
                "kin" => entry.kin = Some(parse_dim_expr(v, pos)?),
                "kout" => entry.kout = Some(parse_dim_expr(v, pos)?),
                "kin'" => entry.kin_mask = Some(parse_dim_expr(v, pos)?),
                "kout'" => entry.kout_mask = Some(parse_dim_expr(v, pos)?),
                "s" => entry.sparsity = int(v)?,
                "seed" => {
                    entry.seed = v
                        .parse()
                        .map_err(|_| perr(pos, format!("invalid value {v:?} for key seed")))?
                }
                other => return Err(perr(pos, format!("unknown key {other:?}"))),
            }
            pos += field.len() + 1;
        }
        if !saw_layer {
            return Err(perr(start, "entry is missing layer= (an index or *)"));
        }
        if entry.k.is_some() && entry.layer.is_some() {
            return Err(perr(start, "k= splits a total over layers; use kl= for a single layer"));
        }
        if entry.sparsity == 0 {
            return Err(perr(start, "s must be positive"));
        }
        if matches!(entry.kin, Some(DimExpr::TimesIn(_) | DimExpr::TimesOut(_)))
            || matches!(entry.kout, Some(DimExpr::TimesIn(_) | DimExpr::TimesOut(_)))
        {
            return Err(perr(start, "kin and kout must be literals"));
        }
        entries.push(entry);
    }
    Ok(FactorizedCompressorSpec { entries })
}

impl FactorizedCompressorSpec {
    /// Resolves every layer's dimensions given the factor dims `(d_in,
    /// d_out)` of each layer (bias column included in `d_in`).
    pub fn resolve(&self, dims: &[(usize, usize)]) -> Result<Vec<LayerPlan>> {
        let wildcard = self.entries.iter().filter(|e| e.layer.is_none()).count();
        if wildcard > 1 {
            return Err(Error::invalid("at most one layer=* entry is allowed"));
        }
        let explicit = self.entries.iter().filter(|e| e.layer.is_some()).count();
        let covered_by_wildcard = dims.len().saturating_sub(explicit).max(1);
        let mut plans = Vec::with_capacity(dims.len());
        for (l, &(d_in, d_out)) in dims.iter().enumerate() {
            let entry = self
                .entries
                .iter()
                .find(|e| e.layer == Some(l))
                .or_else(|| self.entries.iter().find(|e| e.layer.is_none()))
                .ok_or_else(|| Error::invalid(format!("no compressor entry covers layer {l}")))?;
            let seed = if entry.layer.is_none() {
                prf::hash3(entry.seed, l as u64, 7, SEED_SALT)
            } else {
                entry.seed
            };
            plans.push(resolve_entry(entry, l, d_in, d_out, covered_by_wildcard, seed)?);
        }
        for e in &self.entries {
            if let Some(l) = e.layer {
                if l >= dims.len() {
                    return Err(Error::OutOfRange {
                        index: l,
                        dim: dims.len(),
                    });
                }
            }
        }
        Ok(plans)
    }

    pub fn build(&self, dims: &[(usize, usize)]) -> Result<FactorizedCompressor> {
        let layers = self
            .resolve(dims)?
            .into_iter()
            .map(|p| p.build())
            .collect::<Result<Vec<_>>>()?;
        FactorizedCompressor::from_layers(layers)
    }
}

fn resolve_entry(
    e: &FactorizedEntry,
    layer: usize,
    d_in: usize,
    d_out: usize,
    share: usize,
    seed: u64,
) -> Result<LayerPlan> {
    let k_target = match (e.k_layer, e.k) {
        (Some(kl), _) => Some(kl),
        (None, Some(k)) => Some((k / share).max(1)),
        (None, None) => None,
    };
    let root = k_target.map(|k| ((k as f64).sqrt().floor() as usize).max(1));
    let lit = |x: Option<DimExpr>| x.map(|d| d.eval(0, 0));
    let kin = lit(e.kin).or(root).ok_or_else(|| missing(layer))?.min(d_in);
    let kout = lit(e.kout).or(root).ok_or_else(|| missing(layer))?.min(d_out);
    let (k_in, k_out, k_layer) = if e.mode.uses_masks() {
        let kin_m = e.kin_mask.map_or(2 * kin, |d| d.eval(kin, kout)).min(d_in);
        let kout_m = e.kout_mask.map_or(2 * kout, |d| d.eval(kin, kout)).min(d_out);
        let k_prime = kin_m * kout_m;
        let k_layer = match e.mode {
            FactorizedMode::FactMask => k_prime,
            _ => k_target.unwrap_or(kin * kout).min(k_prime),
        };
        (kin_m, kout_m, k_layer)
    } else {
        (kin, kout, kin * kout)
    };
    if k_in == 0 || k_out == 0 || k_layer == 0 {
        return Err(Error::invalid(format!("layer {layer} resolves to an empty compression")));
    }
    Ok(LayerPlan {
        layer,
        mode: e.mode,
        d_in,
        d_out,
        k_in,
        k_out,
        k_layer,
        sparsity: e.sparsity,
        seed,
    })
}

fn missing(layer: usize) -> Error {
    Error::invalid(format!(
        "layer {layer}: give k (total), kl (per layer) or explicit kin/kout"
    ))
}

impl LayerPlan {
    pub fn build(&self) -> Result<LayerCompressor> {
        let mask = |d, k, side| -> Result<MaskSpec> { random_mask(d, k, side_seed(self.seed, side)) };
        match self.mode {
            FactorizedMode::LoGra => {
                LayerCompressor::logra(self.layer, self.d_in, self.d_out, self.k_in, self.k_out, self.seed)
            }
            FactorizedMode::FactSjlt => LayerCompressor::fact_sjlt(
                self.layer,
                self.d_in,
                self.d_out,
                self.k_in,
                self.k_out,
                self.sparsity,
                self.seed,
            ),
            FactorizedMode::FactGrass => LayerCompressor::factgrass(
                self.layer,
                mask(self.d_in, self.k_in, 1)?,
                mask(self.d_out, self.k_out, 2)?,
                self.k_layer,
                self.sparsity,
                self.seed,
            ),
            FactorizedMode::FactMask => LayerCompressor::factmask(
                self.layer,
                mask(self.d_in, self.k_in, 1)?,
                mask(self.d_out, self.k_out, 2)?,
            ),
        }
    }

    /// Analytic multiply-add count for one sample of `tokens` tokens with
    /// dense factors.
    pub fn op_model(&self, tokens: u64) -> u64 {
        let (d_in, d_out, k_in, k_out) = (self.d_in as u64, self.d_out as u64, self.k_in as u64, self.k_out as u64);
        let kp = k_in * k_out;
        let s = self.sparsity as u64;
        match self.mode {
            FactorizedMode::LoGra => tokens * (k_in * d_in + k_out * d_out + kp),
            FactorizedMode::FactSjlt => tokens * (s.min(k_in) * d_in + s.min(k_out) * d_out + kp),
            FactorizedMode::FactMask => tokens * (k_in + k_out + kp),
            FactorizedMode::FactGrass => tokens * (k_in + k_out + kp) + s.min(self.k_layer as u64) * kp,
        }
    }
}

/// Identity factor map, for limiting-case checks.
pub fn identity_factor(d: usize) -> FactorMap {
    FactorMap::Mask(MaskSpec::identity(d))
}

/// Factor mask from explicit indices.
pub fn factor_mask(d: usize, indices: Vec<usize>) -> Result<FactorMap> {
    Ok(FactorMap::Mask(MaskSpec::new(d, indices, MaskProvenance::Identity)?))
}
