//! Synthetic datasets and IDX-format ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Target;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub dim: usize,
    /// Row-major `n x dim`.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters. With two classes the centers sit at
    /// `-separation` and `+separation` on every coordinate; with more they
    /// are random Gaussian directions scaled by `separation`.
    GaussianBlobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        noise: f64,
    },
    TwoMoons {
        n: usize,
        noise: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        limit: Option<usize>,
    },
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::invalid("a dataset needs at least one row"));
        }
        crate::error::check_dim(n * dim, features.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::OutOfRange {
                index: bad,
                dim: classes,
            });
        }
        Ok(Dataset {
            n,
            dim,
            features,
            labels,
            classes,
            split: vec![Split::Train; n],
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn target(&self, i: usize) -> Target {
        Target::Class(self.labels[i])
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.split[i] == Split::Train).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.split[i] == Split::Test).collect()
    }

    /// Tags a seeded random `test_n` rows as test.
    pub fn with_test_split(mut self, test_n: usize, seed: u64) -> Result<Self> {
        if test_n >= self.n {
            return Err(Error::invalid(format!(
                "test split {test_n} leaves no training rows out of {}",
                self.n
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5350_4c49);
        self.split = vec![Split::Train; self.n];
        for i in rand::seq::index::sample(&mut rng, self.n, test_n) {
            self.split[i] = Split::Test;
        }
        Ok(self)
    }
}

pub fn make_dataset(kind: &DatasetKind, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        DatasetKind::GaussianBlobs {
            n,
            dim,
            classes,
            separation,
            noise,
        } => {
            if *classes < 2 || *dim == 0 {
                return Err(Error::invalid("blobs need >= 2 classes and a positive dimension"));
            }
            let centers: Vec<Vec<f64>> = if *classes == 2 {
                vec![vec![-separation; *dim], vec![*separation; *dim]]
            } else {
                (0..*classes)
                    .map(|_| {
                        (0..*dim)
                            .map(|_| separation * rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect()
            };
            let mut features = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(*n);
            for _ in 0..*n {
                let c = rng.random_range(0..*classes);
                labels.push(c);
                for &mu in &centers[c] {
                    let eps: f64 = rng.sample(StandardNormal);
                    features.push(mu + noise * eps);
                }
            }
            Dataset::new(*dim, features, labels, *classes)
        }
        DatasetKind::TwoMoons { n, noise } => {
            let mut features = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(*n);
            for _ in 0..*n {
                let c = rng.random_range(0..2usize);
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let ex: f64 = rng.sample(StandardNormal);
                let ey: f64 = rng.sample(StandardNormal);
                features.push(x + noise * ex);
                features.push(y + noise * ey);
                labels.push(c);
            }
            Dataset::new(2, features, labels, 2)
        }
        DatasetKind::Idx {
            images,
            labels,
            limit,
        } => {
            let img = read_idx(images)?;
            let lab = read_idx(labels)?;
            if img.dims.is_empty() || lab.dims.len() != 1 || img.dims[0] != lab.dims[0] {
                return Err(Error::format(
                    images,
                    format!("image dims {:?} do not match label dims {:?}", img.dims, lab.dims),
                ));
            }
            let total = img.dims[0];
            let n = limit.map_or(total, |l| l.min(total));
            let dim: usize = img.dims[1..].iter().product();
            let features = img.data[..n * dim].iter().map(|&b| b as f64 / 255.0).collect();
            let labels: Vec<usize> = lab.data[..n].iter().map(|&b| b as usize).collect();
            let classes = labels.iter().max().map_or(1, |m| m + 1);
            Dataset::new(dim, features, labels, classes)
        }
    }
}

/// Decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX buffer: two zero bytes, a type byte (only `0x08`,
/// unsigned byte, is supported), a dimension count, big-endian `u32` sizes,
/// then the data.
pub fn parse_idx(path: &Path, buf: &[u8]) -> Result<IdxTensor> {
    if buf.len() < 4 || buf[0] != 0 || buf[1] != 0 {
        return Err(Error::format(path, "malformed IDX header"));
    }
    if buf[2] != 0x08 {
        return Err(Error::format(
            path,
            format!("unsupported IDX element type 0x{:02x}", buf[2]),
        ));
    }
    let ndims = buf[3] as usize;
    let header = 4 + 4 * ndims;
    if buf.len() < header {
        return Err(Error::format(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = buf[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "IDX dimension overflow"))?;
    if buf.len() - header != count {
        return Err(Error::format(
            path,
            format!("IDX payload has {} bytes, header implies {count}", buf.len() - header),
        ));
    }
    Ok(IdxTensor {
        dims,
        data: buf[header..].to_vec(),
    })
}

fn read_idx(path: &Path) -> Result<IdxTensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_blobs_label_by_sign() {
        let d = make_dataset(
            &DatasetKind::GaussianBlobs {
                n: 10,
                dim: 3,
                classes: 2,
                separation: 1.0,
                noise: 0.0,
            },
            5,
        )
        .unwrap();
        for i in 0..10 {
            let expected = usize::from(d.row(i)[0] > 0.0);
            assert_eq!(d.labels[i], expected);
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        let kind = DatasetKind::GaussianBlobs {
            n: 50,
            dim: 4,
            classes: 3,
            separation: 2.0,
            noise: 1.0,
        };
        assert_eq!(make_dataset(&kind, 1).unwrap(), make_dataset(&kind, 1).unwrap());
        assert_ne!(make_dataset(&kind, 1).unwrap(), make_dataset(&kind, 2).unwrap());
    }

    #[test]
    fn idx_three_dim_parse() {
        let mut buf = vec![0, 0, 0x08, 0x03];
        for d in [2u32, 2, 3] {
            buf.extend_from_slice(&d.to_be_bytes());
        }
        buf.extend((0..12).map(|v| v as u8));
        let t = parse_idx(Path::new("x"), &buf).unwrap();
        assert_eq!(t.dims, vec![2, 2, 3]);
        assert_eq!(t.data.len(), 12);
        assert_eq!(u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]), 0x0000_0803);
    }

    #[test]
    fn idx_rejects_bad_headers() {
        assert!(parse_idx(Path::new("x"), &[1, 0, 8, 1, 0, 0, 0, 1, 5]).is_err());
        assert!(parse_idx(Path::new("x"), &[0, 0, 0x0d, 1, 0, 0, 0, 1, 5]).is_err());
        assert!(parse_idx(Path::new("x"), &[0, 0, 8, 1, 0, 0, 0, 2, 5]).is_err());
        let mut huge = vec![0, 0, 8, 3];
        for _ in 0..3 {
            huge.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        if usize::BITS == 64 {
            // 2^96 elements overflows usize.
            assert!(parse_idx(Path::new("x"), &huge).is_err());
        }
    }

    #[test]
    fn idx_files_become_normalized_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3];
        for d in [3u32, 1, 2] {
            img.extend_from_slice(&d.to_be_bytes());
        }
        img.extend([0u8, 255, 51, 102, 153, 204]);
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend([0u8, 2, 1]);
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        fs::write(&ip, &img).unwrap();
        fs::write(&lp, &lab).unwrap();
        let d = make_dataset(
            &DatasetKind::Idx {
                images: ip,
                labels: lp,
                limit: None,
            },
            0,
        )
        .unwrap();
        assert_eq!((d.n, d.dim, d.classes), (3, 2, 3));
        assert_eq!(d.row(0), &[0.0, 1.0]);
        assert!((d.row(1)[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn split_tags() {
        let d = make_dataset(&DatasetKind::TwoMoons { n: 30, noise: 0.1 }, 0)
            .unwrap()
            .with_test_split(10, 1)
            .unwrap();
        assert_eq!(d.test_indices().len(), 10);
        assert_eq!(d.train_indices().len(), 20);
    }
}
