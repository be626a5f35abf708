//! Checkpoint files: a JSON header followed by named little-endian arrays.
//!
//! Layout: the 8-byte magic `VQPCKPT\n`, the header length as a little-endian
//! `u64`, the header JSON, then every array listed in the header, in order,
//! as raw little-endian values of the header's dtype.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, VqPromptModel};
use crate::error::{Error, Result};
use crate::numerics::optim::Moments;
use crate::numerics::{Dtype, Parameter, Scalar, Tensor};
use crate::text::Vocabulary;
use crate::vq::{CodeUsage, Codebook, CODEBOOK_PARAM};

const MAGIC: &[u8; 8] = b"VQPCKPT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    Codebook,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    kind: ArrayKind,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabSection {
    hash: String,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodebookSection {
    current_step: u64,
    usage: Vec<CodeUsage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: Dtype,
    step: u64,
    model: ModelConfig,
    vocab: VocabSection,
    frozen: Vec<String>,
    codebook: Option<CodebookSection>,
    /// Per-parameter Adam step counts; absent when no optimizer state is kept.
    optimizer: Option<BTreeMap<String, u64>>,
    arrays: Vec<ArrayEntry>,
    meta: serde_json::Value,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub model: VqPromptModel<F>,
    pub vocab: Vocabulary,
    pub optimizer: Option<BTreeMap<String, Moments<F>>>,
    pub step: u64,
    /// Free-form provenance: effective config, seed, corpus hash, metrics.
    pub meta: serde_json::Value,
}

fn corrupt(section: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        section: section.to_string(),
        msg: msg.into(),
    }
}

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut body = Vec::new();
        let mut push = |kind, name: &str, t: &Tensor<F>| {
            arrays.push(ArrayEntry {
                kind,
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                v.write_le(&mut body);
            }
        };
        for p in self.model.store.iter() {
            push(ArrayKind::Param, &p.name, &p.tensor);
        }
        if let Some(cb) = &self.model.codebook {
            push(ArrayKind::Codebook, &cb.codes.name, &cb.codes.tensor);
        }
        if let Some(opt) = &self.optimizer {
            for (name, m) in opt {
                push(ArrayKind::AdamM, name, &m.m);
                push(ArrayKind::AdamV, name, &m.v);
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            dtype: F::DTYPE,
            step: self.step,
            model: self.model.config().clone(),
            vocab: VocabSection {
                hash: self.vocab.hash(),
                tokens: self.vocab.words().to_vec(),
            },
            frozen: self
                .model
                .params()
                .filter(|p| !p.trainable)
                .map(|p| p.name.clone())
                .collect(),
            codebook: self.model.codebook.as_ref().map(|cb| CodebookSection {
                current_step: cb.current_step(),
                usage: cb.usage().to_vec(),
            }),
            optimizer: self
                .optimizer
                .as_ref()
                .map(|o| o.iter().map(|(k, m)| (k.clone(), m.steps)).collect()),
            arrays,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("magic", "not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("header", "header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| corrupt("header", e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(corrupt("header", format!("unsupported version {}", header.version)));
        }
        if header.dtype != F::DTYPE {
            return Err(corrupt(
                "header",
                format!("stored as {:?}, requested {:?}", header.dtype, F::DTYPE),
            ));
        }

        let vocab = Vocabulary::from_tokens(header.vocab.tokens.iter().cloned());
        if vocab.hash() != header.vocab.hash {
            return Err(corrupt("vocab", "token list does not match its hash"));
        }
        if vocab.len() != header.model.vocab_size {
            return Err(corrupt(
                "vocab",
                format!("{} tokens for vocab_size {}", vocab.len(), header.model.vocab_size),
            ));
        }

        let mut arrays: BTreeMap<(ArrayKind, String), Tensor<F>> = BTreeMap::new();
        let size = F::DTYPE.size();
        let mut pos = hend;
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let end = pos + n * size;
            if end > bytes.len() {
                return Err(corrupt("arrays", format!("`{}` truncated", a.name)));
            }
            let data = bytes[pos..end].chunks_exact(size).map(F::read_le).collect();
            let t = Tensor::new(a.shape.clone(), data).map_err(|e| corrupt("arrays", e.to_string()))?;
            if !t.is_finite() {
                return Err(corrupt("arrays", format!("`{}` holds non-finite values", a.name)));
            }
            arrays.insert((a.kind, a.name.clone()), t);
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt("arrays", format!("{} trailing bytes", bytes.len() - pos)));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = VqPromptModel::<F>::new(header.model.clone(), &mut rng)
            .map_err(|e| corrupt("model", e.to_string()))?;
        for p in model.store.iter_mut() {
            let t = arrays
                .remove(&(ArrayKind::Param, p.name.clone()))
                .ok_or_else(|| corrupt("params", format!("missing `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(corrupt(
                    "params",
                    format!("`{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape()),
                ));
            }
            p.tensor = t;
            p.trainable = !header.frozen.contains(&p.name);
        }

        model.codebook = match header.codebook {
            None => None,
            Some(cs) => {
                let t = arrays
                    .remove(&(ArrayKind::Codebook, CODEBOOK_PARAM.to_string()))
                    .ok_or_else(|| corrupt("codebook", "codebook values missing"))?;
                if t.shape().len() != 2 || t.shape()[1] != header.model.d_model {
                    return Err(corrupt("codebook", format!("bad shape {:?}", t.shape())));
                }
                let mut codes = Parameter::new(CODEBOOK_PARAM, t);
                codes.trainable = !header.frozen.iter().any(|f| f == CODEBOOK_PARAM);
                Some(
                    Codebook::from_parts(codes, cs.usage, cs.current_step)
                        .map_err(|e| corrupt("codebook", e.to_string()))?,
                )
            }
        };

        let optimizer = match header.optimizer {
            None => None,
            Some(steps) => {
                let mut state = BTreeMap::new();
                for (name, steps) in steps {
                    let m = arrays.remove(&(ArrayKind::AdamM, name.clone()));
                    let v = arrays.remove(&(ArrayKind::AdamV, name.clone()));
                    let (Some(m), Some(v)) = (m, v) else {
                        return Err(corrupt("optimizer", format!("moments for `{name}` missing")));
                    };
                    state.insert(name, Moments { m, v, steps });
                }
                Some(state)
            }
        };
        if let Some(((kind, name), _)) = arrays.into_iter().next() {
            return Err(corrupt("arrays", format!("unexpected {kind:?} array `{name}`")));
        }

        Ok(Self {
            model,
            vocab,
            optimizer,
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the stored element type of a checkpoint file.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("magic", "not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let h = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| corrupt("header", "header length exceeds file"))?;
    #[derive(Deserialize)]
    struct Peek {
        dtype: Dtype,
    }
    let p: Peek = serde_json::from_slice(h).map_err(|e| corrupt("header", e.to_string()))?;
    Ok(p.dtype)
}
