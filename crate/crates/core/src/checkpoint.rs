//! "SFCK" checkpoints: configuration, vocabulary, parameters and optional
//! optimizer state in one little-endian file.
//!
//! ```text
//! "SFCK" | u32 version=1 | u32 header_len | header JSON
//! u32 n_blocks | per block: u32 name_len | name | u32 rows | u32 cols | rows*cols f64
//! u8 has_state | [u64 adam_step | first moments | second moments]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::manifest::Dataset;
use crate::dataio::vocab::Vocabulary;
use crate::decoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tape::ParamStore;
use crate::tensor::Matrix;
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    run: RunConfig,
    model: ModelConfig,
    vocab: Vocabulary,
    mle_epochs_done: usize,
    rl_epochs_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    /// Optimizer state and epoch counters, for resuming.
    pub state: Option<TrainState>,
}

impl Checkpoint {
    /// Rejects a dataset whose dimensions the model cannot consume.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let dims = &ds.manifest.dims;
        let m = &self.model;
        let mismatch = |what: &str, ckpt: usize, data: usize| {
            Err(Error::Dimension(format!(
                "checkpoint {what}={ckpt} but dataset has {data}"
            )))
        };
        if m.region_dim != dims.region {
            return mismatch("C", m.region_dim, dims.region);
        }
        if m.scenes != dims.s {
            return mismatch("s", m.scenes, dims.s);
        }
        if m.max_concepts < dims.k_max {
            return mismatch("K_max", m.max_concepts, dims.k_max);
        }
        if m.num_concepts < ds.concept_id_bound() {
            return mismatch("concept table rows", m.num_concepts, ds.concept_id_bound());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (mle, rl) = self
            .state
            .as_ref()
            .map_or((0, 0), |s| (s.mle_epochs_done, s.rl_epochs_done));
        let header = Header {
            run: self.run.clone(),
            model: self.model.clone(),
            vocab: self.vocab.clone(),
            mle_epochs_done: mle,
            rl_epochs_done: rl,
        };
        let json = serde_json::to_vec(&header)?;
        let store = &self.params.store;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(&json);
        put_u32(&mut out, store.len() as u32);
        for (name, m) in store.names().iter().zip(store.values()) {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, m.rows() as u32);
            put_u32(&mut out, m.cols() as u32);
            put_f64s(&mut out, m.data());
        }
        match &self.state {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.adam.step.to_le_bytes());
                for m in s.adam.m.iter().chain(&s.adam.v) {
                    put_f64s(&mut out, m.data());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadCheckpointMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                format: "SFCK",
                version,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
        header.model.validate()?;
        let n = r.u32("block count")? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name_len = r.u32("block name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "block name")?)
                .map_err(|_| Error::Invalid("block name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32("block rows")? as usize;
            let cols = r.u32("block cols")? as usize;
            let data = r.f64s(rows * cols, "parameter block")?;
            store.add(name, Matrix::from_vec(rows, cols, data)?);
        }
        let params = ModelParams::from_store(&header.model, store)?;
        let state = match r.take(1, "state flag")?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8, "adam step")?.try_into().unwrap());
                let shapes: Vec<(usize, usize)> =
                    params.store.values().iter().map(|m| m.shape()).collect();
                let mut read_all = |what| -> Result<Vec<Matrix>> {
                    shapes
                        .iter()
                        .map(|&(rows, cols)| Matrix::from_vec(rows, cols, r.f64s(rows * cols, what)?))
                        .collect()
                };
                let m = read_all("adam first moment")?;
                let v = read_all("adam second moment")?;
                Some(TrainState {
                    adam: AdamState { m, v, step },
                    mle_epochs_done: header.mle_epochs_done,
                    rl_epochs_done: header.rl_epochs_done,
                })
            }
            f => return Err(Error::Invalid(format!("bad state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Invalid(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            run: header.run,
            model: header.model,
            vocab: header.vocab,
            params,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::Truncated(what))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
