//! The prompt encoder and the generative encoder-decoder it conditions.
//!
//! Parameters of the language model live under the `lm.` prefix and those of
//! the prompt encoder under `prompt.`, so freezing the LM is a prefix
//! operation on the [`ParamStore`]. The codebook is held separately because
//! its usage statistics evolve alongside its values.
//!
//! Encoder input for one sentence is the prompt rows followed by the
//! position-embedded sentence tokens. Prompt rows carry no positional
//! embedding; sentence positions start at zero whether or not a prompt is
//! present.

pub mod checkpoint;
pub mod decode;
pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::ParamSet;
use crate::numerics::{Graph, ParamId, ParamStore, Parameter, Scalar, Tensor, Var};
use crate::text::{BOS, EOS, PAD};
use crate::vq::{quantize_in_graph, Codebook, QuantizedVars};
use layers::{attention_mask, normal, AttnShape, Attention, DecoderLayer, EncoderLayer, Linear, Norm};

pub use checkpoint::Checkpoint;
pub use decode::{DecodeMode, DecodingConfig, Generation};

pub const LM_PREFIX: &str = "lm.";
pub const PROMPT_PREFIX: &str = "prompt.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Number of prompt vectors `M`; zero disables the prompt encoder.
    pub prompt_len: usize,
    pub prompt_layers: usize,
    pub max_positions: usize,
    /// Feed the prompt encoder from the LM's token table instead of its own.
    pub share_embeddings: bool,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            heads: 4,
            ff_hidden: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            prompt_len: 4,
            prompt_layers: 1,
            max_positions: 64,
            share_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size <= PAD.max(BOS).max(EOS) {
            return bad(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.ff_hidden == 0 || self.max_positions < 2 {
            return bad("ff_hidden and max_positions must be positive".into());
        }
        Ok(())
    }
}

/// Padded token ids for a batch of (source, target) pairs.
///
/// Sources become `content EOS`; targets become decoder inputs `BOS content`
/// and outputs `content EOS`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src: Vec<usize>,
    pub src_valid: Vec<bool>,
    pub tgt_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_valid: Vec<bool>,
}

impl Batch {
    /// Builds a batch from content ids (no framing). `targets` may be empty
    /// when only the encoder side is needed.
    pub fn new(sources: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        if !targets.is_empty() && targets.len() != sources.len() {
            return Err(Error::Invalid(format!(
                "{} sources but {} targets",
                sources.len(),
                targets.len()
            )));
        }
        let size = sources.len();
        let src_len = sources.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut src = vec![PAD; size * src_len];
        let mut src_valid = vec![false; size * src_len];
        for (b, s) in sources.iter().enumerate() {
            let row = b * src_len;
            src[row..row + s.len()].copy_from_slice(s);
            src[row + s.len()] = EOS;
            src_valid[row..=row + s.len()].iter_mut().for_each(|v| *v = true);
        }
        let tgt_len = targets.iter().map(|t| t.len() + 1).max().unwrap_or(0);
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        let mut tgt_valid = vec![false; size * tgt_len];
        for (b, t) in targets.iter().enumerate() {
            let row = b * tgt_len;
            tgt_in[row] = BOS;
            tgt_in[row + 1..row + 1 + t.len()].copy_from_slice(t);
            tgt_out[row..row + t.len()].copy_from_slice(t);
            tgt_out[row + t.len()] = EOS;
            tgt_valid[row..=row + t.len()].iter_mut().for_each(|v| *v = true);
        }
        Ok(Self {
            size,
            src_len,
            src,
            src_valid,
            tgt_len,
            tgt_in,
            tgt_out,
            tgt_valid,
        })
    }
}

/// How the prompt slot of the encoder input is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSource {
    /// No prompt rows; plain sequence-to-sequence.
    None,
    /// Continuous encoder output `r` fed directly (warm-up).
    Continuous,
    /// Nearest codebook rows, with usage recorded when `track_usage`.
    Quantized { track_usage: bool },
}

/// Graph nodes of one teacher-forced forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[batch * tgt_len, vocab]`.
    pub logits: Var,
    /// Continuous prompt `[batch * M, D]`, when a prompt was computed.
    pub r: Option<Var>,
    pub vq: Option<QuantizedVars>,
}

#[derive(Debug, Clone, PartialEq)]
struct PromptEncoder {
    embed: Option<ParamId>,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    queries: ParamId,
    query_norm: Norm,
    memory_norm: Norm,
    attn: Attention,
    out_norm: Norm,
    proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Lm {
    embed: ParamId,
    pos: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    out: Linear,
}

/// Prompt encoder, codebook, and generative LM.
#[derive(Debug, Clone, PartialEq)]
pub struct VqPromptModel<F> {
    config: ModelConfig,
    pub store: ParamStore<F>,
    pub codebook: Option<Codebook<F>>,
    lm: Lm,
    prompt: Option<PromptEncoder>,
}

impl<F: Scalar> VqPromptModel<F> {
    /// Fresh model; every parameter is trainable and no codebook is attached.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, h, ff) = (c.d_model, c.heads, c.ff_hidden);
        let mut store = ParamStore::new();
        let lm = Lm {
            embed: store.add("lm.embed", normal(&[c.vocab_size, d], 1.0, rng)),
            pos: store.add("lm.pos", normal(&[c.max_positions, d], 0.1, rng)),
            encoder: (0..c.encoder_layers)
                .map(|i| EncoderLayer::new(&mut store, &format!("lm.enc.{i}"), d, h, ff, rng))
                .collect(),
            enc_norm: Norm::new(&mut store, "lm.enc_norm", d),
            decoder: (0..c.decoder_layers)
                .map(|i| DecoderLayer::new(&mut store, &format!("lm.dec.{i}"), d, h, ff, rng))
                .collect(),
            dec_norm: Norm::new(&mut store, "lm.dec_norm", d),
            out: Linear::new(&mut store, "lm.out", d, c.vocab_size, rng),
        };
        let prompt = (c.prompt_len > 0).then(|| PromptEncoder {
            embed: (!c.share_embeddings)
                .then(|| store.add("prompt.embed", normal(&[c.vocab_size, d], 1.0, rng))),
            pos: store.add("prompt.pos", normal(&[c.max_positions, d], 0.1, rng)),
            layers: (0..c.prompt_layers)
                .map(|i| EncoderLayer::new(&mut store, &format!("prompt.layer.{i}"), d, h, ff, rng))
                .collect(),
            queries: store.add("prompt.queries", normal(&[c.prompt_len, d], 1.0, rng)),
            query_norm: Norm::new(&mut store, "prompt.query_norm", d),
            memory_norm: Norm::new(&mut store, "prompt.memory_norm", d),
            attn: Attention::new(&mut store, "prompt.attn", d, h, rng),
            out_norm: Norm::new(&mut store, "prompt.out_norm", d),
            proj: Linear::new(&mut store, "prompt.proj", d, d, rng),
        });
        Ok(Self {
            config,
            store,
            codebook: None,
            lm,
            prompt,
        })
    }

    /// A model with this model's LM weights and a freshly initialized prompt
    /// encoder of `prompt_len` vectors (none when zero). The codebook is not
    /// carried over.
    pub fn with_prompt(&self, prompt_len: usize, prompt_layers: usize, share_embeddings: bool, rng: &mut impl Rng) -> Result<Self> {
        let config = ModelConfig {
            prompt_len,
            prompt_layers,
            share_embeddings,
            ..self.config.clone()
        };
        let mut out = Self::new(config, rng)?;
        for p in out.store.iter_mut().filter(|p| p.name.starts_with(LM_PREFIX)) {
            let src = self
                .store
                .by_name(&p.name)
                .ok_or_else(|| Error::Invalid(format!("source model lacks `{}`", p.name)))?;
            p.tensor = src.tensor.clone();
            p.trainable = src.trainable;
        }
        Ok(out)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn prompt_len(&self) -> usize {
        self.config.prompt_len
    }

    /// Freezes or unfreezes every LM parameter.
    pub fn set_lm_frozen(&mut self, frozen: bool) {
        self.store.set_trainable_prefix(LM_PREFIX, !frozen);
    }

    pub fn lm_frozen(&self) -> bool {
        self.store
            .iter()
            .filter(|p| p.name.starts_with(LM_PREFIX))
            .all(|p| !p.trainable)
    }

    /// The prompt source used at inference: quantized when a codebook is
    /// attached, continuous when only the encoder exists.
    pub fn default_prompt_source(&self) -> PromptSource {
        match (&self.prompt, &self.codebook) {
            (None, _) => PromptSource::None,
            (Some(_), Some(_)) => PromptSource::Quantized { track_usage: false },
            (Some(_), None) => PromptSource::Continuous,
        }
    }

    fn check_positions(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::OutOfRange {
                what: "position table",
                index: len - 1,
                size: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Token-embedding lookup in the LM table: `[ids.len(), D]`.
    pub fn embed(&self, g: &mut Graph<F>, ids: &[usize]) -> Result<Var> {
        let table = g.param(self.store.get(self.lm.embed))?;
        g.embedding(table, ids)
    }

    /// Token plus position embeddings for `batch` rows of length `len`.
    fn embed_positioned(
        &self,
        g: &mut Graph<F>,
        table: ParamId,
        pos: ParamId,
        ids: &[usize],
        len: usize,
    ) -> Result<Var> {
        self.check_positions(len)?;
        let t = g.param(self.store.get(table))?;
        let tok = g.embedding(t, ids)?;
        let p = g.param(self.store.get(pos))?;
        let positions: Vec<usize> = (0..ids.len()).map(|i| i % len).collect();
        let pe = g.embedding(p, &positions)?;
        g.add(tok, pe)
    }

    /// Continuous prompts `r` for every source in the batch: `[batch * M, D]`.
    pub fn encode_prompt_continuous(&self, g: &mut Graph<F>, batch: &Batch) -> Result<Var> {
        let pe = self
            .prompt
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no prompt encoder (M = 0)".into()))?;
        if batch.src_len == 0 {
            return Err(Error::Invalid("empty input sequence".into()));
        }
        let c = &self.config;
        let (b, t, m, d) = (batch.size, batch.src_len, c.prompt_len, c.d_model);
        let table = pe.embed.unwrap_or(self.lm.embed);
        let mut x = self.embed_positioned(g, table, pe.pos, &batch.src, t)?;
        let self_mask = g.leaf(attention_mask(&batch.src_valid, b, c.heads, t, t, false))?;
        for layer in &pe.layers {
            x = layer.forward(g, &self.store, x, b, t, Some(self_mask))?;
        }
        let memory = pe.memory_norm.forward(g, &self.store, x)?;
        let queries = g.param(self.store.get(pe.queries))?;
        let queries = g.repeat(queries, b)?;
        let queries = g.reshape(queries, &[b * m, d])?;
        let qn = pe.query_norm.forward(g, &self.store, queries)?;
        let cross = g.leaf(attention_mask(&batch.src_valid, b, c.heads, m, t, false))?;
        let a = pe
            .attn
            .forward(g, &self.store, qn, memory, AttnShape { batch: b, tq: m, tk: t }, Some(cross))?;
        let h = g.add(queries, a)?;
        let h = pe.out_norm.forward(g, &self.store, h)?;
        pe.proj.forward(g, &self.store, h)
    }

    /// Runs the LM encoder over `prompt ⊕ e`. Returns the memory
    /// `[batch * (M + src_len), D]`, its key validity, and its length.
    pub fn encode(&self, g: &mut Graph<F>, prompt: Option<Var>, batch: &Batch) -> Result<(Var, Vec<bool>, usize)> {
        let c = &self.config;
        let (b, t, d) = (batch.size, batch.src_len, c.d_model);
        let e = self.embed_positioned(g, self.lm.embed, self.lm.pos, &batch.src, t)?;
        let (x, len, valid) = match prompt {
            None => (e, t, batch.src_valid.clone()),
            Some(p) => {
                let ps = g.shape(p).to_vec();
                if ps.len() != 2 || ps[1] != d || ps[0] % b != 0 {
                    return Err(Error::shape(
                        "glm_forward",
                        format!("prompt {ps:?} for batch {b} and width {d}"),
                    ));
                }
                let m = ps[0] / b;
                let p3 = g.reshape(p, &[b, m, d])?;
                let e3 = g.reshape(e, &[b, t, d])?;
                let x = g.concat(&[p3, e3], 1)?;
                let x = g.reshape(x, &[b * (m + t), d])?;
                let mut valid = Vec::with_capacity(b * (m + t));
                for row in batch.src_valid.chunks(t) {
                    valid.extend(std::iter::repeat_n(true, m));
                    valid.extend_from_slice(row);
                }
                (x, m + t, valid)
            }
        };
        let mask = g.leaf(attention_mask(&valid, b, c.heads, len, len, false))?;
        let mut x = x;
        for layer in &self.lm.encoder {
            x = layer.forward(g, &self.store, x, b, len, Some(mask))?;
        }
        let memory = self.lm.enc_norm.forward(g, &self.store, x)?;
        Ok((memory, valid, len))
    }

    /// Decoder logits `[batch * ty, vocab]` for decoder inputs `tgt_in`
    /// (`batch` rows of length `ty`) against an encoded memory.
    pub fn decode_logits(
        &self,
        g: &mut Graph<F>,
        memory: Var,
        memory_valid: &[bool],
        memory_len: usize,
        tgt_in: &[usize],
        ty: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let b = tgt_in.len() / ty;
        let mut y = self.embed_positioned(g, self.lm.embed, self.lm.pos, tgt_in, ty)?;
        let self_mask = g.leaf(attention_mask(&vec![true; b * ty], b, c.heads, ty, ty, true))?;
        let cross = g.leaf(attention_mask(memory_valid, b, c.heads, ty, memory_len, false))?;
        for layer in &self.lm.decoder {
            y = layer.forward(g, &self.store, y, memory, b, ty, memory_len, self_mask, Some(cross))?;
        }
        let y = self.lm.dec_norm.forward(g, &self.store, y)?;
        self.lm.out.forward(g, &self.store, y)
    }

    /// Teacher-forced logits given an explicit prompt node (or none).
    pub fn glm_forward(&self, g: &mut Graph<F>, prompt: Option<Var>, batch: &Batch) -> Result<Var> {
        if batch.tgt_len == 0 {
            return Err(Error::Invalid("batch has no targets".into()));
        }
        let (memory, valid, len) = self.encode(g, prompt, batch)?;
        self.decode_logits(g, memory, &valid, len, &batch.tgt_in, batch.tgt_len)
    }

    /// Prompt node for `source`, plus the continuous prompt and VQ nodes when
    /// they exist.
    pub fn prompt(
        &mut self,
        g: &mut Graph<F>,
        batch: &Batch,
        source: PromptSource,
    ) -> Result<(Option<Var>, Option<Var>, Option<QuantizedVars>)> {
        match source {
            PromptSource::None => Ok((None, None, None)),
            PromptSource::Continuous => {
                let r = self.encode_prompt_continuous(g, batch)?;
                Ok((Some(r), Some(r), None))
            }
            PromptSource::Quantized { track_usage } => {
                let r = self.encode_prompt_continuous(g, batch)?;
                let cb = self
                    .codebook
                    .as_mut()
                    .ok_or_else(|| Error::Invalid("quantized prompt requested without a codebook".into()))?;
                let vq = quantize_in_graph(g, r, cb, track_usage)?;
                Ok((Some(vq.prompt), Some(r), Some(vq)))
            }
        }
    }

    /// Full teacher-forced forward pass.
    pub fn forward(&mut self, g: &mut Graph<F>, batch: &Batch, source: PromptSource) -> Result<Forward> {
        let (prompt, r, vq) = self.prompt(g, batch, source)?;
        let logits = self.glm_forward(g, prompt, batch)?;
        Ok(Forward { logits, r, vq })
    }

    /// Continuous prompts as a plain tensor, without recording gradients.
    pub fn continuous_prompts(&self, sources: &[Vec<usize>]) -> Result<Tensor<F>> {
        let batch = Batch::new(sources, &[])?;
        let mut g = Graph::new();
        let r = self.encode_prompt_continuous(&mut g, &batch)?;
        Ok(g.value(r).clone())
    }

    /// Codebook indices (`M` per source) chosen for each source.
    pub fn prompt_indices(&self, sources: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        let cb = self
            .codebook
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no codebook".into()))?;
        let r = self.continuous_prompts(sources)?;
        let q = cb.quantize_untracked(&r)?;
        Ok(q.indices.chunks(self.config.prompt_len).map(<[usize]>::to_vec).collect())
    }

    /// Parameters of the model followed by the codebook.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.store
            .iter_mut()
            .chain(self.codebook.as_mut().map(|c| &mut c.codes))
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.store.iter().chain(self.codebook.as_ref().map(|c| &c.codes))
    }

    /// SHA-256 over the LM parameter bytes, for conservation checks.
    pub fn lm_hash(&self) -> String {
        hash_params(self.store.iter().filter(|p| p.name.starts_with(LM_PREFIX)))
    }

    /// Same model with values converted to another element type.
    pub fn cast<G: Scalar>(&self) -> Result<VqPromptModel<G>> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            let id = store.add(p.name.clone(), p.tensor.cast());
            store.get_mut(id).trainable = p.trainable;
        }
        let codebook = match &self.codebook {
            None => None,
            Some(cb) => {
                let mut codes = Parameter::new(cb.codes.name.clone(), cb.codes.tensor.cast());
                codes.trainable = cb.codes.trainable;
                Some(Codebook::from_parts(codes, cb.usage().to_vec(), cb.current_step())?)
            }
        };
        Ok(VqPromptModel {
            config: self.config.clone(),
            store,
            codebook,
            lm: self.lm.clone(),
            prompt: self.prompt.clone(),
        })
    }
}

impl<F: Scalar> ParamSet<F> for VqPromptModel<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        VqPromptModel::params(self).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        VqPromptModel::params_mut(self).collect()
    }
}

pub(crate) fn hash_params<'a, F: Scalar>(params: impl Iterator<Item = &'a Parameter<F>>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    let mut buf = Vec::new();
    for p in params {
        h.update(p.name.as_bytes());
        buf.clear();
        for &v in p.tensor.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests;
