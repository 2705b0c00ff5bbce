//! Labelled datasets: synthetic Gaussian blobs and the `DRDF` file format.
//!
//! ```text
//! offset  size     field
//! 0       4        magic "DRDF"
//! 4       2        version (u16 LE, currently 1)
//! 6       8        N records (u64 LE)
//! 14      4        D input width (u32 LE)
//! 18      4        K classes (u32 LE)
//! 22      4·N·D    inputs, f32 LE, row-major
//! ..      2·N      labels, u16 LE
//! ..      N        split tag (0 = train, 1 = test)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seeds;

pub const MAGIC: &[u8; 4] = b"DRDF";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Supported on-disk dataset encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Drdf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    splits: Vec<Split>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, splits: Vec<Split>, classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() || labels.len() != splits.len() {
            return Err(Error::shape("dataset", inputs.shape(), &[labels.len(), splits.len()]));
        }
        if !inputs.is_finite() {
            return Err(Error::NonFinite { op: "dataset" });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Dataset {
            inputs,
            labels,
            splits,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Indices of `split` grouped by class.
    pub fn by_class(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for i in 0..self.len() {
            if self.splits[i] == split {
                out[self.labels[i]].push(i);
            }
        }
        out
    }

    /// Inputs and labels for a set of record indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Every class must appear in both splits.
    pub fn check_class_coverage(&self) -> Result<()> {
        for split in [Split::Train, Split::Test] {
            let groups = self.by_class(split);
            if let Some(k) = groups.iter().position(Vec::is_empty) {
                return Err(Error::Config(format!("class {k} has no {split:?} samples")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let d = self.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + n * (4 * d + 3));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for &v in self.inputs.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        out.extend(self.splits.iter().map(|s| match s {
            Split::Train => 0u8,
            Split::Test => 1u8,
        }));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, message: String| Error::Parse { offset, message };
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(parse(0, format!("bad magic {:?}, expected \"DRDF\"", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(parse(4, format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[18..22].try_into().unwrap()) as usize;
        if d == 0 || k == 0 || n == 0 {
            return Err(parse(6, format!("degenerate header N={n} D={d} K={k}")));
        }
        let expected = n
            .checked_mul(4 * d + 3)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| parse(6, "record count overflows".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(parse(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let mut off = HEADER_LEN;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(parse(off, "non-finite input value".into()));
            }
            data.push(v as f64);
            off += 4;
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = u16::from_le_bytes([bytes[off], bytes[off + 1]]) as usize;
            if y >= k {
                return Err(parse(off, format!("label {y} ≥ K={k}")));
            }
            labels.push(y);
            off += 2;
        }
        let mut splits = Vec::with_capacity(n);
        for _ in 0..n {
            splits.push(match bytes[off] {
                0 => Split::Train,
                1 => Split::Test,
                t => return Err(parse(off, format!("split tag {t} is not 0 or 1"))),
            });
            off += 1;
        }
        Dataset::new(Tensor::matrix(n, d, data)?, labels, splits, k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Read a dataset file.
pub fn load_external(path: impl AsRef<Path>, format: Format) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Drdf => Dataset::from_bytes(&bytes),
    }
}

/// `K` unit-variance Gaussian clusters with means at `separation` times a
/// random unit direction. 80% of each class is tagged train.
///
/// Values are rounded to `f32` so the dataset survives a file round trip
/// bit-for-bit.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 || per_class < 2 || classes > u16::MAX as usize {
        return Err(Error::Config(format!(
            "make_blobs needs K ≥ 2, D ≥ 2, per_class ≥ 2; got K={classes}, D={dim}, per_class={per_class}"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::Config(format!("separation must be finite and ≥ 0, got {separation}")));
    }
    let mut rng = seeds::rng(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| separation * x / norm).collect();
            }
        })
        .collect();

    let n_train = (per_class * 4) / 5;
    let mut records: Vec<(Vec<f64>, usize, Split)> = Vec::with_capacity(classes * per_class);
    for (k, c) in centers.iter().enumerate() {
        for i in 0..per_class {
            let x: Vec<f64> = c
                .iter()
                .map(|&m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (m + e) as f32 as f64
                })
                .collect();
            let split = if i < n_train { Split::Train } else { Split::Test };
            records.push((x, k, split));
        }
    }
    records.shuffle(&mut rng);
    let n = records.len();
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut splits = Vec::with_capacity(n);
    for (x, y, s) in records {
        data.extend(x);
        labels.push(y);
        splits.push(s);
    }
    Dataset::new(Tensor::matrix(n, dim, data)?, labels, splits, classes)
}
