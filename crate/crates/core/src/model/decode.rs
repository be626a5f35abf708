//! Autoregressive decoding: batched greedy search and per-sentence beam search.

use serde::{Deserialize, Serialize};

use super::{Batch, PromptSource, VqPromptModel};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::text::{BOS, DEFAULT_MAX_LEN, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_output_len: usize,
    /// Sources decoded together in one greedy pass.
    pub chunk: usize,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 1,
            max_output_len: DEFAULT_MAX_LEN,
            chunk: 64,
        }
    }
}

/// One decoded sequence (content ids, no BOS/EOS) and the prompt codes that
/// steered it, when the model is quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub prompt_indices: Option<Vec<usize>>,
}

/// Log-softmax of one logit row, in `f64`.
fn log_probs<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Encoder output held as plain values between decoding steps.
struct Memory<F> {
    values: Tensor<F>,
    valid: Vec<bool>,
    len: usize,
    indices: Option<Vec<Vec<usize>>>,
}

impl<F: Scalar> Memory<F> {
    /// Rows of the memory for the selected sequences, in order.
    fn select(&self, rows: &[usize]) -> Result<Self> {
        let width = self.values.cols();
        let per = self.len * width;
        let mut data = Vec::with_capacity(rows.len() * per);
        let mut valid = Vec::with_capacity(rows.len() * self.len);
        for &r in rows {
            data.extend_from_slice(&self.values.data()[r * per..(r + 1) * per]);
            valid.extend_from_slice(&self.valid[r * self.len..(r + 1) * self.len]);
        }
        Ok(Self {
            values: Tensor::new(vec![rows.len() * self.len, width], data)?,
            valid,
            len: self.len,
            indices: None,
        })
    }
}

impl<F: Scalar> VqPromptModel<F> {
    fn memory(&self, sources: &[Vec<usize>], source: PromptSource) -> Result<Memory<F>> {
        let batch = Batch::new(sources, &[])?;
        let mut g = Graph::new();
        let (prompt, indices) = match source {
            PromptSource::None => (None, None),
            PromptSource::Continuous => (Some(self.encode_prompt_continuous(&mut g, &batch)?), None),
            PromptSource::Quantized { .. } => {
                let cb = self
                    .codebook
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("quantized prompt requested without a codebook".into()))?;
                let r = self.encode_prompt_continuous(&mut g, &batch)?;
                let q = cb.quantize_untracked(g.value(r))?;
                let m = self.prompt_len();
                let idx = q.indices.chunks(m).map(<[usize]>::to_vec).collect();
                (Some(g.leaf(q.vectors)?), Some(idx))
            }
        };
        let (mem, valid, len) = self.encode(&mut g, prompt, &batch)?;
        Ok(Memory {
            values: g.value(mem).clone(),
            valid,
            len,
            indices,
        })
    }

    /// Last-position log-probabilities for each prefix row.
    fn step_log_probs(&self, memory: &Memory<F>, prefixes: &[usize], t: usize) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let mem: Var = g.leaf(memory.values.clone())?;
        let logits = self.decode_logits(&mut g, mem, &memory.valid, memory.len, prefixes, t)?;
        let l = g.value(logits);
        let rows = prefixes.len() / t;
        Ok((0..rows).map(|b| log_probs(l.row(b * t + t - 1))).collect())
    }

    /// Decodes every source with the model's default prompt source.
    pub fn generate(&self, sources: &[Vec<usize>], config: &DecodingConfig) -> Result<Vec<Generation>> {
        self.generate_with(sources, config, self.default_prompt_source())
    }

    pub fn generate_with(
        &self,
        sources: &[Vec<usize>],
        config: &DecodingConfig,
        source: PromptSource,
    ) -> Result<Vec<Generation>> {
        if config.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if config.max_output_len + 1 > self.config().max_positions {
            return Err(Error::Config(format!(
                "max_output_len {} exceeds the position table",
                config.max_output_len
            )));
        }
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(config.chunk.max(1)) {
            let memory = self.memory(chunk, source)?;
            let ids = match config.mode {
                DecodeMode::Greedy => self.greedy(&memory, config.max_output_len)?,
                DecodeMode::Beam => (0..chunk.len())
                    .map(|i| self.beam(&memory.select(&[i])?, config.beam_width, config.max_output_len))
                    .collect::<Result<Vec<_>>>()?,
            };
            for (i, ids) in ids.into_iter().enumerate() {
                out.push(Generation {
                    ids,
                    prompt_indices: memory.indices.as_ref().map(|x| x[i].clone()),
                });
            }
        }
        Ok(out)
    }

    fn greedy(&self, memory: &Memory<F>, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let n = memory.valid.len() / memory.len;
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            let live: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
            if live.is_empty() {
                break;
            }
            let t = seqs[live[0]].len();
            let prefixes: Vec<usize> = live.iter().flat_map(|&i| seqs[i].iter().copied()).collect();
            let mem = if live.len() == n { None } else { Some(memory.select(&live)?) };
            let lp = self.step_log_probs(mem.as_ref().unwrap_or(memory), &prefixes, t)?;
            for (row, &i) in live.iter().enumerate() {
                let tok = argmax(&lp[row]);
                seqs[i].push(tok);
                if tok == EOS {
                    done[i] = true;
                }
            }
        }
        Ok(seqs.into_iter().map(strip).collect())
    }

    fn beam(&self, memory: &Memory<F>, width: usize, max_len: usize) -> Result<Vec<usize>> {
        // (tokens including BOS, cumulative log-probability, finished)
        let mut beams: Vec<(Vec<usize>, f64, bool)> = vec![(vec![BOS], 0.0, false)];
        for _ in 0..max_len {
            let live: Vec<usize> = (0..beams.len()).filter(|&i| !beams[i].2).collect();
            if live.is_empty() {
                break;
            }
            let t = beams[live[0]].0.len();
            let prefixes: Vec<usize> = live.iter().flat_map(|&i| beams[i].0.iter().copied()).collect();
            let mem = memory.select(&vec![0; live.len()])?;
            let lp = self.step_log_probs(&mem, &prefixes, t)?;
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            for (i, b) in beams.iter().enumerate() {
                if b.2 {
                    cands.push((b.1, i, usize::MAX));
                }
            }
            for (row, &i) in live.iter().enumerate() {
                for (tok, &p) in lp[row].iter().enumerate() {
                    cands.push((beams[i].1 + p, i, tok));
                }
            }
            // Highest score first; ties by parent order, then lowest token id.
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(width);
            beams = cands
                .into_iter()
                .map(|(score, parent, tok)| {
                    let mut seq = beams[parent].0.clone();
                    if tok == usize::MAX {
                        return (seq, score, true);
                    }
                    seq.push(tok);
                    (seq, score, tok == EOS)
                })
                .collect();
        }
        Ok(strip(beams.swap_remove(0).0))
    }
}

/// Drops the leading BOS and everything from the first EOS on.
fn strip(seq: Vec<usize>) -> Vec<usize> {
    seq.into_iter().skip(1).take_while(|&t| t != EOS).collect()
}
