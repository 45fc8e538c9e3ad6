//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "S4CKPT\n\0"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! data     f64 LE values of every tensor listed in header.tensors, in order
//! ```
//!
//! Tensor names carry a group prefix: `best/`, `current/`, `adam.m/`,
//! `adam.v/`, plus the frozen embedding block `embed.fixed`.

use std::borrow::Cow;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Adam, EpochRecord, Progress, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Hyperparams, Seq2Seq};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vocab::{EmbeddingLayout, Slot, Vocabulary};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"S4CKPT\n\0";

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Everything needed to continue a paused run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub current: ParamStore,
    pub adam: Adam,
    pub rng: RngState,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hyperparams: Hyperparams,
    pub config: TrainConfig,
    pub input_vocab: Vocabulary,
    pub output_vocab: Vocabulary,
    pub layout: Arc<EmbeddingLayout>,
    /// Parameters with the best validation score.
    pub best: ParamStore,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    adam: Adam,
    rng: RngState,
    progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyperparams: Hyperparams,
    config: TrainConfig,
    input_vocab: Vocabulary,
    output_vocab: Vocabulary,
    slots: Vec<Slot>,
    best_score: Option<f64>,
    history: Vec<EpochRecord>,
    state: Option<StateHeader>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// The model holding the best parameters.
    pub fn model(&self) -> Result<Seq2Seq> {
        Seq2Seq::from_params(
            self.hyperparams.clone(),
            self.input_vocab.clone(),
            self.layout.clone(),
            self.output_vocab.clone(),
            self.best.clone(),
        )
    }

    pub fn to_bytes<'a>(&'a self) -> Vec<u8> {
        let mut tensors: Vec<(String, Cow<Tensor>)> = Vec::new();
        let group = |prefix: &str, store: &'a ParamStore, out: &mut Vec<(String, Cow<'a, Tensor>)>| {
            for (name, t) in store.iter() {
                out.push((format!("{prefix}/{name}"), Cow::Borrowed(t)));
            }
        };
        group("best", &self.best, &mut tensors);
        if let Some(state) = &self.state {
            group("current", &state.current, &mut tensors);
            let (m, v) = state.adam.moments();
            for (prefix, bufs) in [("adam.m", m), ("adam.v", v)] {
                for ((name, t), buf) in state.current.iter().zip(bufs) {
                    let moment = Tensor::new(t.shape().to_vec(), buf.clone()).expect("moment shape");
                    tensors.push((format!("{prefix}/{name}"), Cow::Owned(moment)));
                }
            }
        }
        tensors.push(("embed.fixed".into(), Cow::Borrowed(self.layout.fixed())));

        let header = Header {
            hyperparams: self.hyperparams.clone(),
            config: self.config.clone(),
            input_vocab: self.input_vocab.clone(),
            output_vocab: self.output_vocab.clone(),
            slots: self.layout.slots().to_vec(),
            best_score: self.best_score,
            history: self.history.clone(),
            state: self.state.as_ref().map(|s| StateHeader {
                adam: s.adam.clone(),
                rng: s.rng.clone(),
                progress: s.progress.clone(),
            }),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let values: usize = tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let corrupt = |message: String| Error::Corrupt {
            source_name: source_name.to_string(),
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt(format!("header length {hlen} exceeds file size")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let mut data = &body[hlen..];
        let mut read = |entry: &TensorEntry| -> Result<Tensor> {
            let n: usize = entry.shape.iter().product();
            if data.len() < 8 * n {
                return Err(corrupt(format!("truncated tensor {}", entry.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            Ok(Tensor::new(entry.shape.clone(), values)?)
        };
        let mut groups: Vec<(String, ParamStore)> = Vec::new();
        let mut fixed = None;
        for entry in &header.tensors {
            let t = read(entry)?;
            if entry.name == "embed.fixed" {
                fixed = Some(t);
                continue;
            }
            let (prefix, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| corrupt(format!("unexpected tensor {}", entry.name)))?;
            match groups.iter_mut().find(|(p, _)| p == prefix) {
                Some((_, store)) => {
                    if store.find(name).is_some() {
                        return Err(corrupt(format!("duplicate tensor {}", entry.name)));
                    }
                    store.add(name, t);
                }
                None => {
                    let mut store = ParamStore::new();
                    store.add(name, t);
                    groups.push((prefix.to_string(), store));
                }
            }
        }
        if !data.is_empty() {
            return Err(corrupt(format!("{} trailing bytes", data.len())));
        }
        let mut take = |prefix: &str| {
            groups
                .iter()
                .position(|(p, _)| p == prefix)
                .map(|i| groups.remove(i).1)
        };
        let best = take("best").ok_or_else(|| corrupt("no best parameters".into()))?;
        let fixed = fixed.ok_or_else(|| corrupt("no embedding block".into()))?;
        let dim = header.hyperparams.embedding_dim;
        let layout = EmbeddingLayout::new(header.slots, fixed, dim)?;
        let vocab = |v: &Vocabulary| Vocabulary::from_tokens(v.tokens(), v.counts(), v.has_copy());
        let state = match header.state {
            None => None,
            Some(sh) => {
                let current = take("current").ok_or_else(|| corrupt("no current parameters".into()))?;
                let mut moments = |prefix: &str| -> Result<Vec<Vec<f64>>> {
                    let store = take(prefix).ok_or_else(|| corrupt(format!("no {prefix} buffers")))?;
                    if store.len() != current.len() {
                        return Err(corrupt(format!("{prefix} has {} buffers", store.len())));
                    }
                    Ok(store.values().iter().map(|t| t.data().to_vec()).collect())
                };
                let m = moments("adam.m")?;
                let v = moments("adam.v")?;
                Some(TrainState {
                    adam: Adam::from_parts(sh.adam, m, v),
                    current,
                    rng: sh.rng,
                    progress: sh.progress,
                })
            }
        };
        if let Some((p, _)) = groups.first() {
            return Err(corrupt(format!("unexpected tensor group {p}")));
        }
        let ckpt = Checkpoint {
            hyperparams: header.hyperparams,
            config: header.config,
            input_vocab: vocab(&header.input_vocab)?,
            output_vocab: vocab(&header.output_vocab)?,
            layout: Arc::new(layout),
            best,
            best_score: header.best_score,
            history: header.history,
            state,
        };
        // shapes and names must describe a valid model
        ckpt.model()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
