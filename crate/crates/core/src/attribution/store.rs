//! On-disk gradient store: a fixed header and `n` records of `k` f32.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `GGST` |
//! | 4 | version |
//! | 8 | n |
//! | 8 | k |
//! | 1 | dtype (0 = f32) |
//! | 1 | kind (0 = raw, 1 = preconditioned) |
//! | 6 | reserved, zero |
//! | 8 | damping (f64, 0 for raw) |
//! | 32 | compressor fingerprint |
//! | 4·n·k | records |

use std::fs;
use std::path::Path;

use crate::error::{check_dim, Error, Result};

pub const STORE_MAGIC: &[u8; 4] = b"GGST";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 72;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Raw,
    Preconditioned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    k: usize,
    pub kind: StoreKind,
    pub damping: f64,
    pub fingerprint: [u8; 32],
    data: Vec<f32>,
}

impl GradientStore {
    pub fn new(k: usize, kind: StoreKind, damping: f64, fingerprint: [u8; 32]) -> Self {
        GradientStore {
            k,
            kind,
            damping,
            fingerprint,
            data: Vec::new(),
        }
    }

    pub fn from_rows(
        k: usize,
        kind: StoreKind,
        damping: f64,
        fingerprint: [u8; 32],
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let mut s = Self::new(k, kind, damping, fingerprint);
        for r in rows {
            s.push(r)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, record: &[f32]) -> Result<()> {
        check_dim(self.k, record.len())?;
        self.data.extend_from_slice(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.k.max(1)).take(self.len())
    }

    pub fn fingerprint_hex(&self) -> String {
        hex::encode(self.fingerprint)
    }

    /// Hard error unless the store was produced by the compressor with this
    /// fingerprint.
    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.fingerprint == expected {
            Ok(())
        } else {
            Err(Error::FingerprintMismatch {
                stored: self.fingerprint_hex(),
                expected: hex::encode(expected),
            })
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.k as u64).to_le_bytes());
        out.push(0);
        out.push(match self.kind {
            StoreKind::Raw => 0,
            StoreKind::Preconditioned => 1,
        });
        out.extend_from_slice(&[0u8; 6]);
        out.extend_from_slice(&self.damping.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(path: &Path, buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != STORE_MAGIC {
            return Err(Error::format(path, "not a gradient store"));
        }
        if buf.len() < HEADER_LEN {
            return Err(Error::format(path, "truncated gradient store header"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if version != STORE_VERSION {
            return Err(Error::format(path, format!("unsupported gradient store version {version}")));
        }
        let n = u64_at(8) as usize;
        let k = u64_at(16) as usize;
        if buf[24] != 0 {
            return Err(Error::format(path, format!("unsupported dtype tag {}", buf[24])));
        }
        let kind = match buf[25] {
            0 => StoreKind::Raw,
            1 => StoreKind::Preconditioned,
            t => return Err(Error::format(path, format!("unknown store kind {t}"))),
        };
        let damping = f64::from_le_bytes(buf[32..40].try_into().expect("8 bytes"));
        let fingerprint: [u8; 32] = buf[40..72].try_into().expect("32 bytes");
        let payload = n
            .checked_mul(k)
            .and_then(|e| e.checked_mul(4))
            .ok_or_else(|| Error::format(path, "gradient store size overflow"))?;
        let body = buf.len() - HEADER_LEN;
        if body != payload {
            let found = if k == 0 { 0 } else { body / (4 * k) };
            return Err(Error::format(
                path,
                format!("truncated or corrupt: header says {n} records of dim {k}, file holds {found} ({body} bytes)"),
            ));
        }
        let data = buf[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(GradientStore {
            k,
            kind,
            damping,
            fingerprint,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &buf)
    }

    /// Reads and checks the fingerprint in one step.
    pub fn read_checked(path: &Path, expected: &[u8; 32]) -> Result<Self> {
        let s = Self::read(path)?;
        s.check_fingerprint(expected)?;
        Ok(s)
    }
}
