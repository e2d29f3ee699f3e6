//! Binary checkpoints of model parameters and optimizer state.
//!
//! Layout, all little-endian: 8-byte magic, `u32` version, then the header
//! (`dim`, `trends` as `u64`; `time_power`, `time_scale`, `neg_weight` as
//! `f64`; `num_items`, Adam step, epochs done as `u64`), then every tensor
//! row-major as `f64`: the four parameter tensors, the four first moments and
//! the four second moments.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, ModelParams};
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"DMRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 8 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub epochs_done: usize,
}

fn shapes(config: &ModelConfig, num_items: usize) -> [(usize, usize); 4] {
    let d = config.dim;
    [(num_items, d), (config.trends, d), (d, d), (2 * d, d)]
}

fn body_len(config: &ModelConfig, num_items: usize) -> Option<u64> {
    let per_set: usize = shapes(config, num_items)
        .iter()
        .try_fold(0usize, |acc, (r, c)| acc.checked_add(r.checked_mul(*c)?))?;
    (per_set as u64).checked_mul(3 * 8)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes()?;
        if !self.adam.matches(&self.params) {
            return Err(Error::Data(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
        let c = &self.params.config;
        let n = self.params.num_items();
        let mut out = Vec::with_capacity((HEADER_LEN + body_len(c, n).unwrap_or(0)) as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [c.dim as u64, c.trends as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [c.time_power, c.time_scale, c.neg_weight] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in [n as u64, self.adam.step, self.epochs_done as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .chain(self.adam.first.iter())
            .chain(self.adam.second.iter());
        for t in tensors {
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let actual = bytes.len() as u64;
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        if actual < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                actual,
            });
        }
        let word =
            |k: usize| -> [u8; 8] { bytes[12 + 8 * k..20 + 8 * k].try_into().expect("8 bytes") };
        let int = |k: usize| u64::from_le_bytes(word(k));
        let float = |k: usize| f64::from_le_bytes(word(k));
        let to_usize = |v: u64| {
            usize::try_from(v).map_err(|_| Error::Corrupt(format!("header value {v} too large")))
        };
        let config = ModelConfig {
            dim: to_usize(int(0))?,
            trends: to_usize(int(1))?,
            time_power: float(2),
            time_scale: float(3),
            neg_weight: float(4),
        };
        config
            .validate()
            .map_err(|e| Error::Corrupt(format!("bad header: {e}")))?;
        let num_items = to_usize(int(5))?;
        let step = int(6);
        let epochs_done = to_usize(int(7))?;
        let expected = body_len(&config, num_items)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::Corrupt("header sizes overflow".into()))?;
        if actual != expected {
            return Err(Error::Truncated { expected, actual });
        }
        let mut pos = HEADER_LEN as usize;
        let mut read_set = || -> Vec<Matrix> {
            shapes(&config, num_items)
                .iter()
                .map(|&(r, c)| {
                    let data = bytes[pos..pos + 8 * r * c]
                        .chunks_exact(8)
                        .map(|w| f64::from_le_bytes(w.try_into().expect("8 bytes")))
                        .collect();
                    pos += 8 * r * c;
                    Matrix::from_vec(r, c, data)
                })
                .collect()
        };
        let mut p = read_set().into_iter();
        let first = read_set();
        let second = read_set();
        let mut next = || p.next().expect("four tensors");
        let params = ModelParams {
            config,
            item_embeddings: next(),
            trend_init: next(),
            coattention: next(),
            fusion: next(),
        };
        Ok(Self {
            params,
            adam: AdamState {
                first,
                second,
                step,
            },
            epochs_done,
        })
    }

    /// Writes the checkpoint and a `.manifest` sidecar recording the config
    /// hash it was produced under.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let manifest = manifest_path(path);
        let mut f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
        writeln!(
            f,
            "format_version = {CHECKPOINT_VERSION}\nconfig_sha256 = {config_hash}\nepochs_done = {}\nadam_step = {}",
            self.epochs_done, self.adam.step
        )
        .map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Config hash recorded next to a checkpoint, if a manifest exists.
pub fn manifest_hash(path: &Path) -> Result<Option<String>> {
    let manifest = manifest_path(path);
    if !manifest.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    Ok(text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == "config_sha256").then(|| v.trim().to_string())
    }))
}
