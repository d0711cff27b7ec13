//! Image datasets: IDX files, dynamic binarization, synthetic data from a
//! random decoder, and train/valid/test splits.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::gaussian::NoiseStream;
use crate::models::MlpVae;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const BINARIZE_DOMAIN: u64 = 0xb1a5;
const SYNTHETIC_STREAM: u64 = 0x5e7;
const SHUFFLE_STREAM: u64 = 0x5f1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },
    #[error("truncated IDX file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("IDX dimensions overflow")]
    DimensionOverflow,
    #[error("empty {0} split")]
    EmptySplit(SplitId),
    #[error("invalid split fractions {0:?}")]
    Fractions([f64; 3]),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitId::Train => "train",
            SplitId::Valid => "valid",
            SplitId::Test => "test",
        })
    }
}

impl FromStr for SplitId {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "valid" => Ok(SplitId::Valid),
            "test" => Ok(SplitId::Test),
            other => Err(DataError::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Row-major `n x obs_dim` pixel intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    obs_dim: usize,
    pub split: SplitId,
    pub source: String,
}

impl Dataset {
    pub fn new(images: Vec<f64>, obs_dim: usize, split: SplitId, source: impl Into<String>) -> Result<Self> {
        if obs_dim == 0 || images.is_empty() || !images.len().is_multiple_of(obs_dim) {
            return Err(DataError::Invalid(format!(
                "{} values do not form rows of {obs_dim}",
                images.len()
            )));
        }
        if let Some(v) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::Invalid(format!("pixel {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            obs_dim,
            split,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    fn subset(&self, rows: &[usize], split: SplitId) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(DataError::EmptySplit(split));
        }
        let mut images = Vec::with_capacity(rows.len() * self.obs_dim);
        for &r in rows {
            images.extend_from_slice(self.image(r));
        }
        Ok(Dataset {
            images,
            obs_dim: self.obs_dim,
            split,
            source: self.source.clone(),
        })
    }
}

/// Decoded IDX container: big-endian dimensions and a raw `u8` payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let header = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
                .ok_or(DataError::Truncated {
                    expected: at + 4,
                    found: bytes.len(),
                })
        };
        let magic = header(0)?;
        if magic != IDX_IMAGES_MAGIC && magic != IDX_LABELS_MAGIC {
            return Err(DataError::BadMagic {
                found: magic,
                expected: IDX_IMAGES_MAGIC,
            });
        }
        let ndim = (magic & 0xff) as usize;
        let dims = (0..ndim).map(|i| header(4 + 4 * i)).collect::<Result<Vec<u32>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or(DataError::DimensionOverflow)?;
        let start = 4 + 4 * ndim;
        let payload = &bytes[start..];
        if payload.len() < len {
            return Err(DataError::Truncated {
                expected: len,
                found: payload.len(),
            });
        }
        Ok(IdxArray {
            magic,
            dims,
            data: payload[..len].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Images scaled by `1/255`, each flattened row-major.
pub fn images_from_idx(idx: &IdxArray, source: &str) -> Result<Dataset> {
    if idx.magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: idx.magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let obs: usize = idx.dims[1..].iter().map(|&d| d as usize).product();
    if idx.dims[0] == 0 || obs == 0 {
        return Err(DataError::Invalid("IDX file holds no pixels".into()));
    }
    let images = idx.data.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset::new(images, obs, SplitId::Train, source)
}

pub fn load_idx(path: &Path) -> Result<Dataset> {
    let idx = IdxArray::parse(&read_file(path)?)?;
    images_from_idx(&idx, &path.display().to_string())
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let idx = IdxArray::parse(&read_file(path)?)?;
    if idx.magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            found: idx.magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    Ok(idx.data)
}

fn binarize_stream(seed: u64, epoch: u64) -> NoiseStream {
    NoiseStream::new(seed ^ BINARIZE_DOMAIN.rotate_left(48), epoch)
}

/// One Bernoulli draw per pixel of image `index`, keyed by
/// `(seed, epoch, index, pixel)` so batching order is irrelevant.
pub fn binarize_image(d: &Dataset, index: usize, seed: u64, epoch: u64) -> Vec<f64> {
    let s = binarize_stream(seed, epoch);
    let base = (index * d.obs_dim) as u64;
    d.image(index)
        .iter()
        .enumerate()
        .map(|(j, &p)| if s.uniform(base + j as u64) < p { 1.0 } else { 0.0 })
        .collect()
}

/// The whole dataset binarized for one epoch, row-major.
pub fn dynamic_binarize(d: &Dataset, seed: u64, epoch: u64) -> Vec<f64> {
    (0..d.len()).flat_map(|i| binarize_image(d, i, seed, epoch)).collect()
}

/// Pixel probabilities of a randomly initialized decoder at `z ~ N(0, I)`.
/// The decoder weights are scaled up so that images have sharp, correlated
/// structure.
pub fn synthetic_dataset(n: usize, obs_dim: usize, latent_dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || obs_dim == 0 || latent_dim == 0 {
        return Err(DataError::Invalid("synthetic sizes must be positive".into()));
    }
    let model = MlpVae::new(latent_dim, SYNTHETIC_HIDDEN, obs_dim);
    let params = model.init_scaled(seed, SYNTHETIC_GAIN);
    let noise = NoiseStream::new(seed, SYNTHETIC_STREAM);
    let mut z = vec![0.0; latent_dim];
    let mut images = Vec::with_capacity(n * obs_dim);
    for i in 0..n {
        noise.fill_normal((i * latent_dim) as u64, &mut z);
        images.extend(
            model
                .decoder_logits_value(params.flat(), &z)
                .into_iter()
                .map(crate::tape::sigmoid),
        );
    }
    Dataset::new(images, obs_dim, SplitId::Train, format!("synthetic(seed={seed})"))
}

const SYNTHETIC_HIDDEN: usize = 32;
const SYNTHETIC_GAIN: f64 = 2.5;

fn sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f > 0.0)) || total > 1.0 + 1e-12 {
        return Err(DataError::Fractions(fractions));
    }
    Ok(fractions.map(|f| (f * n as f64 + 1e-9).floor() as usize))
}

/// Seeded shuffle, then contiguous blocks of the shuffled order.
pub fn split(d: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = sizes(d.len(), fractions)?;
    let s = NoiseStream::new(seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..d.len()).collect();
    for i in (1..order.len()).rev() {
        let j = ((s.uniform(i as u64) * (i + 1) as f64) as usize).min(i);
        order.swap(i, j);
    }
    Ok((
        d.subset(&order[..a], SplitId::Train)?,
        d.subset(&order[a..a + b], SplitId::Valid)?,
        d.subset(&order[a + b..a + b + c], SplitId::Test)?,
    ))
}

/// The conventional split: the last `valid` training images become the
/// validation set, original order kept.
pub fn standard_split(train_file: &Dataset, test_file: &Dataset, valid: usize) -> Result<(Dataset, Dataset, Dataset)> {
    let n = train_file.len();
    if valid >= n {
        return Err(DataError::EmptySplit(SplitId::Train));
    }
    let rows: Vec<usize> = (0..n).collect();
    let all_test: Vec<usize> = (0..test_file.len()).collect();
    Ok((
        train_file.subset(&rows[..n - valid], SplitId::Train)?,
        train_file.subset(&rows[n - valid..], SplitId::Valid)?,
        test_file.subset(&all_test, SplitId::Test)?,
    ))
}
