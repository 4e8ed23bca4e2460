//! `GMSK` mask files and their text sidecars.
//!
//! Binary layout (little-endian): magic `GMSK`, `u32` version, `u64` input
//! dimension, `u64` kept count, then the sorted `u64` indices. The sidecar
//! `<path>.meta` records provenance; `<path>.trace.csv` holds the optional
//! optimization trace.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{MaskProvenance, MaskSpec, TraceRow};
use crate::error::{Error, Result};

pub const MASK_MAGIC: &[u8; 4] = b"GMSK";
pub const MASK_VERSION: u32 = 1;

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn encode_mask(mask: &MaskSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * mask.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&MASK_VERSION.to_le_bytes());
    out.extend_from_slice(&(mask.input_dim() as u64).to_le_bytes());
    out.extend_from_slice(&(mask.len() as u64).to_le_bytes());
    for &i in mask.indices() {
        out.extend_from_slice(&(i as u64).to_le_bytes());
    }
    out
}

pub fn decode_mask(path: &Path, buf: &[u8]) -> Result<(usize, Vec<usize>)> {
    if buf.len() < 24 || &buf[..4] != MASK_MAGIC {
        return Err(Error::format(path, "not a GMSK mask file"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != MASK_VERSION {
        return Err(Error::format(path, format!("unsupported mask version {version}")));
    }
    let p = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let k = u64::from_le_bytes(buf[16..24].try_into().expect("8 bytes")) as usize;
    let expected = k
        .checked_mul(8)
        .and_then(|b| b.checked_add(24))
        .ok_or_else(|| Error::format(path, "mask size overflow"))?;
    if buf.len() != expected {
        return Err(Error::format(
            path,
            format!("mask file has {} bytes, header implies {expected}", buf.len()),
        ));
    }
    let indices = buf[24..]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    Ok((p, indices))
}

fn provenance_line(p: &MaskProvenance) -> String {
    match p {
        MaskProvenance::Random { seed } => format!("provenance=random seed={seed}"),
        MaskProvenance::Selective { fingerprint } => {
            format!("provenance=selective fingerprint={fingerprint}")
        }
        MaskProvenance::Identity => "provenance=identity".to_string(),
    }
}

fn parse_provenance(text: &str) -> Option<MaskProvenance> {
    let line = text.lines().find(|l| l.starts_with("provenance="))?;
    let mut fields = line.split_whitespace();
    let kind = fields.next()?.strip_prefix("provenance=")?;
    let rest: Option<&str> = fields.next().and_then(|f| f.split_once('=')).map(|(_, v)| v);
    match kind {
        "random" => Some(MaskProvenance::Random {
            seed: rest?.parse().ok()?,
        }),
        "selective" => Some(MaskProvenance::Selective {
            fingerprint: rest?.to_string(),
        }),
        "identity" => Some(MaskProvenance::Identity),
        _ => None,
    }
}

/// Writes the binary mask, its provenance sidecar and, when given, the
/// optimization trace.
pub fn write_mask_file(path: &Path, mask: &MaskSpec, trace: Option<&[TraceRow]>) -> Result<()> {
    fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))?;
    let meta = sidecar(path, ".meta");
    let text = format!(
        "{}\ninput_dim={}\nkept={}\n",
        provenance_line(&mask.provenance),
        mask.input_dim(),
        mask.len()
    );
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    if let Some(rows) = trace {
        let csv_path = sidecar(path, ".trace.csv");
        let mut csv = String::from("step,objective,l1\n");
        for r in rows {
            let _ = writeln!(csv, "{},{},{}", r.step, r.objective, r.l1);
        }
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(())
}

/// Reads a mask; provenance comes from the sidecar when present.
pub fn read_mask_file(path: &Path) -> Result<MaskSpec> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (p, indices) = decode_mask(path, &buf)?;
    let provenance = fs::read_to_string(sidecar(path, ".meta"))
        .ok()
        .and_then(|t| parse_provenance(&t))
        .unwrap_or(MaskProvenance::Identity);
    MaskSpec::new(p, indices, provenance).map_err(|e| Error::format(path, e.to_string()))
}
