//! `GMLP` checkpoint files.
//!
//! Little-endian layout: magic `GMLP`, `u32` version, `u32` layer count, then
//! per layer `u32 d_in`, `u32 d_out`, `u8` activation (0 identity, 1 ReLU),
//! `u8` has-bias; then per layer the row-major `f32` weights followed by the
//! `f32` bias when present.

use std::fs;
use std::path::Path;

use super::{Activation, LinearLayer, Mlp};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GMLP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        out.extend_from_slice(&(l.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(l.d_out as u32).to_le_bytes());
        out.push(match l.activation {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
        out.push(u8::from(l.bias.is_some()));
    }
    for l in &model.layers {
        for &w in &l.weight {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        if let Some(b) = &l.bias {
            for &v in b {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &Mlp) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn decode_checkpoint(path: &Path, buf: &[u8]) -> Result<Mlp> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a GMLP checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let d_in = r.u32()? as usize;
        let d_out = r.u32()? as usize;
        let activation = match r.u8()? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            t => return Err(Error::format(path, format!("unknown activation tag {t}"))),
        };
        let bias = r.u8()? != 0;
        shapes.push((d_in, d_out, activation, bias));
    }
    let mut layers = Vec::with_capacity(n);
    for (d_in, d_out, activation, bias) in shapes {
        let weight = r.f32s(d_in.checked_mul(d_out).ok_or_else(|| Error::format(path, "size overflow"))?)?;
        let bias = if bias { Some(r.f32s(d_out)?) } else { None };
        layers.push(LinearLayer {
            d_in,
            d_out,
            weight,
            bias,
            activation,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Mlp::from_layers(layers)
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &buf)
}
