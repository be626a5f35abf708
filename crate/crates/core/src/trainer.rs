//! Staged training: LM pretraining, continuous-prompt warm-up, K-means
//! codebook initialization, and quantized training with dead-code revival.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParaphraseCluster;
use crate::error::{Error, Result};
use crate::kmeans::{init_codebook, revive_dead_codes, CodeBuffer, Revival, DEFAULT_BUFFER_CAPACITY};
use crate::metrics::{evaluate, EvalReport, MetricConfig};
use crate::model::{Batch, Checkpoint, DecodingConfig, PromptSource, VqPromptModel};
use crate::numerics::{Adam, AdamConfig, Graph, Scalar, Var};
use crate::rng::{substream, Stream};
use crate::text::{Vocabulary, DEFAULT_MAX_LEN, UNK};
use crate::vq::{Codebook, CODEBOOK_PARAM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No prompt; the LM itself is fine-tuned.
    LmOnly,
    /// Quantized prompts from a random codebook, no warm-up, no revival.
    VqNaive,
    /// Warm-up, K-means initialization, and revival.
    VqPrompt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::LmOnly, Variant::VqNaive, Variant::VqPrompt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LmOnly => "lm_only",
            Variant::VqNaive => "vq_naive",
            Variant::VqPrompt => "vq_prompt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    /// LM fine-tuning without prompts.
    Lm,
    Warmup,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub variant: Variant,
    pub seed: u64,
    pub prompt_len: usize,
    pub prompt_layers: usize,
    pub share_embeddings: bool,
    pub codebook_size: usize,
    /// Revival triggers when fewer codes than this are active.
    pub threshold: usize,
    pub staleness: u64,
    pub window: u64,
    pub revival_every: u64,
    pub buffer_capacity: usize,
    /// Training inputs encoded to seed the codebook.
    pub kmeans_sample: usize,
    /// Standard deviation of the random codebook used by `vq_naive`.
    pub naive_codebook_std: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub commitment_weight: f64,
    pub max_len: usize,
    pub max_output_len: usize,
    pub alpha: f64,
    /// Validation inputs decoded after each epoch; 0 means all.
    pub val_limit: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            variant: Variant::VqPrompt,
            seed: 0,
            prompt_len: 4,
            prompt_layers: 1,
            share_embeddings: true,
            codebook_size: 64,
            threshold: 32,
            staleness: 200,
            window: 200,
            revival_every: 50,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            kmeans_sample: 1024,
            naive_codebook_std: 1.0,
            lr: 3e-4,
            batch_size: 32,
            warmup_epochs: 2,
            epochs: 20,
            commitment_weight: 1.0,
            max_len: DEFAULT_MAX_LEN,
            max_output_len: DEFAULT_MAX_LEN,
            alpha: 0.8,
            val_limit: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.variant != Variant::LmOnly {
            if self.prompt_len == 0 {
                return bad("quantized variants need prompt_len >= 1".into());
            }
            if self.codebook_size < 2 {
                return bad("codebook_size must be at least 2".into());
            }
            if self.threshold > self.codebook_size {
                return bad(format!(
                    "threshold {} exceeds codebook_size {}",
                    self.threshold, self.codebook_size
                ));
            }
        }
        if self.variant == Variant::VqPrompt && self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.staleness == 0 || self.window == 0 || self.revival_every == 0 {
            return bad("staleness, window and revival_every must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.commitment_weight >= 0.0) {
            return bad("lr must be positive and commitment_weight non-negative".into());
        }
        Ok(())
    }

    /// Prompt length actually used by the variant.
    pub fn effective_prompt_len(&self) -> usize {
        match self.variant {
            Variant::LmOnly => 0,
            _ => self.prompt_len,
        }
    }

    fn warmup(&self) -> usize {
        match self.variant {
            Variant::VqPrompt => self.warmup_epochs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Probability of replacing each input token with UNK.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 1e-3,
            batch_size: 32,
            noise: 0.15,
            seed: 0,
        }
    }
}

/// Loss terms of one optimizer step; also the training-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub epoch: usize,
    pub stage: Stage,
    pub j_ml: f64,
    pub j_vq: f64,
    pub j_total: f64,
    pub active_fraction: Option<f64>,
    pub revived: usize,
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub mean_j_total: f64,
    pub active_fraction: Option<f64>,
    pub val_bleu: Option<f64>,
    pub val_self_bleu: Option<f64>,
    pub val_ibleu: Option<f64>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevivalEvent {
    pub step: u64,
    pub active: usize,
    pub dead: usize,
    pub replaced: usize,
}

/// Content ids of (input, reference) pairs, one per reference.
pub fn pairs(clusters: &[ParaphraseCluster], vocab: &Vocabulary, max_len: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for c in clusters {
        let x = vocab.encode_with_max(&c.input, false, max_len).ids;
        for r in &c.refs {
            out.push((x.clone(), vocab.encode_with_max(r, false, max_len).ids));
        }
    }
    out
}

fn make_batch(data: &[(Vec<usize>, Vec<usize>)], idx: &[usize]) -> Result<Batch> {
    let src: Vec<Vec<usize>> = idx.iter().map(|&i| data[i].0.clone()).collect();
    let tgt: Vec<Vec<usize>> = idx.iter().map(|&i| data[i].1.clone()).collect();
    Batch::new(&src, &tgt)
}

/// Mean negative log-likelihood over the non-PAD target positions.
pub fn ml_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, batch: &Batch) -> Result<Var> {
    g.cross_entropy(logits, &batch.tgt_out, &batch.tgt_valid)
}

/// Graph nodes of the full objective.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub j_ml: Var,
    pub j_vq: Option<Var>,
    pub j_total: Var,
    pub r: Option<Var>,
    pub indices: Option<Vec<usize>>,
}

/// `J = J_ml + J_vq`, with `J_vq` the codebook term plus the weighted
/// commitment term, each summed over prompt rows and averaged over the batch.
pub fn total_loss<F: Scalar>(
    model: &mut VqPromptModel<F>,
    g: &mut Graph<F>,
    batch: &Batch,
    source: PromptSource,
    commitment_weight: f64,
) -> Result<LossVars> {
    let f = model.forward(g, batch, source)?;
    let j_ml = ml_loss(g, f.logits, batch)?;
    let (j_vq, j_total, indices) = match f.vq {
        None => (None, j_ml, None),
        Some(vq) => {
            let c = g.scale(vq.commitment_term, commitment_weight)?;
            let s = g.add(vq.codebook_term, c)?;
            let j_vq = g.scale(s, 1.0 / batch.size as f64)?;
            let total = g.add(j_ml, j_vq)?;
            (Some(j_vq), total, Some(vq.indices))
        }
    };
    Ok(LossVars {
        j_ml,
        j_vq,
        j_total,
        r: f.r,
        indices,
    })
}

/// Teacher-forced next-token accuracy of the bare LM on clean pairs.
pub fn token_accuracy<F: Scalar>(model: &mut VqPromptModel<F>, data: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let b = make_batch(data, chunk)?;
        let mut g = Graph::new();
        let f = model.forward(&mut g, &b, PromptSource::None)?;
        let l = g.value(f.logits);
        for (pos, (&t, &ok)) in b.tgt_out.iter().zip(&b.tgt_valid).enumerate() {
            if !ok {
                continue;
            }
            let row = l.row(pos);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            hit += usize::from(best == t);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Denoising reconstruction: each input token is replaced by UNK with
/// probability `noise`, and the target is the clean sentence. The model is
/// trained without prompts and left unfrozen.
pub fn pretrain_lm<F: Scalar>(
    model: &mut VqPromptModel<F>,
    sentences: &[Vec<usize>],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    model.set_lm_frozen(false);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order_rng = substream(config.seed, Stream::Training);
    let mut noise_rng = substream(config.seed, Stream::Noise);
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        steps: 0,
    };
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut n = 0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|&i| sentences[i].clone()).collect();
            let src: Vec<Vec<usize>> = tgt
                .iter()
                .map(|s| {
                    s.iter()
                        .map(|&t| if noise_rng.random::<f64>() < config.noise { UNK } else { t })
                        .collect()
                })
                .collect();
            let b = Batch::new(&src, &tgt)?;
            let mut g = Graph::new();
            let mut step = || -> Result<f64> {
                let f = model.forward(&mut g, &b, PromptSource::None)?;
                let loss = ml_loss(&mut g, f.logits, &b)?;
                let grads = g.backward(loss)?;
                adam.step(model.store.iter_mut(), &grads)?;
                Ok(g.value(loss).item().as_f64())
            };
            let loss = step().map_err(|e| Error::Diverged {
                step: report.steps,
                what: e.to_string(),
            })?;
            report.steps += 1;
            sum += loss;
            n += 1;
        }
        let mean = sum / n as f64;
        info!("pretrain epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Optimizer state and step bookkeeping for prompt (or LM) training.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub model: VqPromptModel<F>,
    pub adam: Adam<F>,
    pub buffer: CodeBuffer,
    pub config: TrainingConfig,
    /// Optimizer steps taken so far, all stages.
    pub step: u64,
    /// Quantized steps taken so far; revival is scheduled on this count.
    pub quantized_steps: u64,
    pub revivals: Vec<RevivalEvent>,
}

impl<F: Scalar> Trainer<F> {
    /// Freezes or unfreezes the LM according to the variant.
    pub fn new(mut model: VqPromptModel<F>, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        if model.prompt_len() != config.effective_prompt_len() {
            return Err(Error::Config(format!(
                "model has {} prompt vectors, {} expects {}",
                model.prompt_len(),
                config.variant.name(),
                config.effective_prompt_len()
            )));
        }
        model.set_lm_frozen(config.variant != Variant::LmOnly);
        let buffer = CodeBuffer::new(config.buffer_capacity, model.config().d_model);
        Ok(Self {
            adam: Adam::new(AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            }),
            model,
            buffer,
            config,
            step: 0,
            quantized_steps: 0,
            revivals: Vec::new(),
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint<F>, config: TrainingConfig) -> Result<Self> {
        let frozen: Vec<(String, bool)> = ck.model.params().map(|p| (p.name.clone(), p.trainable)).collect();
        let mut t = Self::new(ck.model, config)?;
        for p in t.model.params_mut() {
            if let Some((_, tr)) = frozen.iter().find(|(n, _)| *n == p.name) {
                p.trainable = *tr;
            }
        }
        if let Some(state) = ck.optimizer {
            t.adam.set_state(state);
        }
        t.step = ck.step;
        t.quantized_steps = ck
            .meta
            .get("quantized_steps")
            .and_then(serde_json::Value::as_u64)
            .unwrap_or(0);
        Ok(t)
    }

    pub fn checkpoint(&self, vocab: &Vocabulary, mut meta: serde_json::Value) -> Checkpoint<F> {
        if let serde_json::Value::Object(m) = &mut meta {
            m.insert("quantized_steps".into(), self.quantized_steps.into());
        }
        Checkpoint {
            model: self.model.clone(),
            vocab: vocab.clone(),
            optimizer: Some(self.adam.state().clone()),
            step: self.step,
            meta,
        }
    }

    fn source(&self, stage: Stage) -> PromptSource {
        match stage {
            Stage::Pretrain | Stage::Lm => PromptSource::None,
            Stage::Warmup => PromptSource::Continuous,
            Stage::Quantized => PromptSource::Quantized { track_usage: true },
        }
    }

    /// Puts a codebook in place for the quantized stage: K-means centers of
    /// warmed-up prompts for `vq_prompt`, Gaussian codes for `vq_naive`.
    pub fn init_codebook(&mut self, sample: &[Vec<usize>]) -> Result<()> {
        let c = &self.config;
        let cb = match c.variant {
            Variant::VqPrompt => {
                let n = sample.len().min(c.kmeans_sample.max(1));
                let mut idx: Vec<usize> = (0..sample.len()).collect();
                idx.shuffle(&mut substream(c.seed, Stream::KMeans));
                let picked: Vec<Vec<usize>> = idx[..n].iter().map(|&i| sample[i].clone()).collect();
                init_codebook(&self.model, &picked, c.codebook_size, c.seed)?
            }
            Variant::VqNaive => {
                let mut rng = substream(c.seed, Stream::Codebook);
                Codebook::random_normal(c.codebook_size, self.model.config().d_model, c.naive_codebook_std, &mut rng)?
            }
            Variant::LmOnly => return Ok(()),
        };
        self.model.codebook = Some(cb);
        Ok(())
    }

    /// One optimizer step on `batch`. Nothing is modified when the step
    /// fails.
    pub fn train_step(&mut self, batch: &Batch, stage: Stage, epoch: usize) -> Result<LossBreakdown> {
        let source = self.source(stage);
        let snapshot = self.model.codebook.as_ref().map(|c| (c.usage().to_vec(), c.current_step()));
        let mut g = Graph::new();
        let attempt = (|| {
            let lv = total_loss(&mut self.model, &mut g, batch, source, self.config.commitment_weight)?;
            let grads = g.backward(lv.j_total)?;
            if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
            Ok((lv, grads))
        })();
        let (lv, grads) = match attempt {
            Ok(x) => x,
            Err(e) => {
                if let (Some(cb), Some((usage, step))) = (self.model.codebook.as_mut(), snapshot) {
                    let codes = cb.codes.clone();
                    *cb = Codebook::from_parts(codes, usage, step)?;
                }
                return Err(Error::Diverged {
                    step: self.step,
                    what: e.to_string(),
                });
            }
        };
        self.adam.step(self.model.params_mut(), &grads)?;
        let j_ml = g.value(lv.j_ml).item().as_f64();
        let j_vq = lv.j_vq.map_or(0.0, |v| g.value(v).item().as_f64());
        let j_total = g.value(lv.j_total).item().as_f64();
        self.step += 1;
        let mut revived = 0;
        let mut active_fraction = None;
        if stage == Stage::Quantized {
            self.quantized_steps += 1;
            if self.config.variant == Variant::VqPrompt {
                if let Some(r) = lv.r {
                    self.buffer.extend(g.value(r));
                }
            }
            let cb = self.model.codebook.as_mut().expect("quantized stage has a codebook");
            cb.advance();
            if self.config.variant == Variant::VqPrompt && self.quantized_steps % self.config.revival_every == 0 {
                let rev = self.revive()?;
                revived = rev.replaced.len();
            }
            active_fraction = self.model.codebook.as_ref().map(|c| c.utilization(self.config.window));
        }
        Ok(LossBreakdown {
            step: self.step,
            epoch,
            stage,
            j_ml,
            j_vq,
            j_total,
            active_fraction,
            revived,
        })
    }

    fn revive(&mut self) -> Result<Revival> {
        let c = &self.config;
        let cb = self.model.codebook.as_mut().expect("codebook present");
        let seed = c.seed ^ self.quantized_steps.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let rev = revive_dead_codes(cb, &self.buffer, c.threshold, c.staleness, c.window, seed)?;
        if !rev.replaced.is_empty() {
            self.revivals.push(RevivalEvent {
                step: self.step,
                active: rev.active_before,
                dead: rev.dead,
                replaced: rev.replaced.len(),
            });
            self.adam.reset_rows(CODEBOOK_PARAM, &rev.replaced);
            debug!(
                "step {}: {} active, revived {} of {} dead codes",
                self.step,
                rev.active_before,
                rev.replaced.len(),
                rev.dead
            );
        }
        Ok(rev)
    }
}

/// Everything produced by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    /// Model at the epoch with the best validation iBLEU (or the last model
    /// when no epoch was eligible).
    pub best: VqPromptModel<F>,
    pub best_epoch: Option<usize>,
    /// Model after the last completed step.
    pub last: Trainer<F>,
    pub history: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// Optional per-run callbacks.
pub trait TrainObserver<F> {
    fn on_step(&mut self, _record: &LossBreakdown) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _trainer: &Trainer<F>) {}
}

impl<F> TrainObserver<F> for () {}

/// Runs the staged schedule of `config.variant` on `train` and selects the
/// checkpoint by validation iBLEU on `val`.
pub fn train<F: Scalar>(
    model: VqPromptModel<F>,
    vocab: &Vocabulary,
    train: &[ParaphraseCluster],
    val: &[ParaphraseCluster],
    config: &TrainingConfig,
    observer: &mut dyn TrainObserver<F>,
) -> Result<TrainOutcome<F>> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let data = pairs(train, vocab, config.max_len);
    let val: Vec<ParaphraseCluster> = if config.val_limit > 0 {
        val.iter().take(config.val_limit).cloned().collect()
    } else {
        val.to_vec()
    };
    let metric = MetricConfig {
        alpha: config.alpha,
        ..MetricConfig::default()
    };
    let decoding = DecodingConfig {
        max_output_len: config.max_output_len,
        ..DecodingConfig::default()
    };
    let mut rng: ChaCha8Rng = substream(config.seed, Stream::Training);
    let mut out = TrainOutcome {
        best: trainer.model.clone(),
        best_epoch: None,
        last: trainer.clone(),
        history: Vec::new(),
        epochs: Vec::new(),
        aborted: None,
    };
    let mut best_score = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let warmup = config.warmup();
    'epochs: for epoch in 0..config.epochs {
        let stage = match config.variant {
            Variant::LmOnly => Stage::Lm,
            _ if epoch < warmup => Stage::Warmup,
            _ => Stage::Quantized,
        };
        if stage == Stage::Quantized && trainer.model.codebook.is_none() {
            let sample: Vec<Vec<usize>> = data.iter().map(|p| p.0.clone()).collect();
            trainer.init_codebook(&sample)?;
        }
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(&data, chunk)?;
            let rec = match trainer.train_step(&batch, stage, epoch) {
                Ok(r) => r,
                Err(e @ Error::Diverged { .. }) => {
                    warn!("{e}; stopping with the last good state");
                    out.aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            sum += rec.j_total;
            n += 1;
            observer.on_step(&rec);
            out.history.push(rec);
        }
        let eligible = stage != Stage::Warmup;
        let report = if eligible && !val.is_empty() {
            Some(evaluate(&trainer.model, vocab, &val, &metric, &decoding)?)
        } else {
            None
        };
        let mut rec = EpochRecord {
            epoch,
            stage,
            mean_j_total: sum / n.max(1) as f64,
            active_fraction: trainer.model.codebook.as_ref().map(|c| c.utilization(config.window)),
            val_bleu: report.as_ref().map(|r| r.bleu),
            val_self_bleu: report.as_ref().map(|r| r.self_bleu),
            val_ibleu: report.as_ref().map(|r| r.ibleu),
            selected: false,
        };
        if eligible {
            let score = report.as_ref().map_or(f64::NEG_INFINITY, |r| r.ibleu);
            if out.best_epoch.is_none() || score >= best_score {
                best_score = score;
                out.best = trainer.model.clone();
                out.best_epoch = Some(epoch);
                rec.selected = true;
            }
        }
        info!(
            "{} epoch {epoch} ({:?}): J {:.4}, active {:?}, val iBLEU {:?}",
            config.variant.name(),
            stage,
            rec.mean_j_total,
            rec.active_fraction,
            rec.val_ibleu
        );
        observer.on_epoch(&rec, &trainer);
        out.epochs.push(rec);
    }
    if out.best_epoch.is_none() {
        out.best = trainer.model.clone();
    }
    out.last = trainer;
    Ok(out)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub bleu: f64,
    pub self_bleu: f64,
    pub ibleu: f64,
    /// Final codebook utilization; absent for `lm_only`.
    pub active_fraction: Option<f64>,
    pub purity: Option<f64>,
}

/// Trains each variant from the same pretrained LM and scores its selected
/// checkpoint on `test`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation<F: Scalar>(
    lm: &VqPromptModel<F>,
    vocab: &Vocabulary,
    train_set: &[ParaphraseCluster],
    val: &[ParaphraseCluster],
    test: &[ParaphraseCluster],
    base: &TrainingConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let cfg = TrainingConfig {
            variant,
            ..base.clone()
        };
        let out = run_variant(lm, vocab, train_set, val, &cfg)?;
        if let Some(msg) = &out.aborted {
            return Err(Error::Diverged {
                step: out.last.step,
                what: format!("{}: {msg}", variant.name()),
            });
        }
        let report = evaluate_test(&out.best, vocab, test, &cfg)?;
        rows.push(AblationRow {
            variant,
            bleu: report.bleu,
            self_bleu: report.self_bleu,
            ibleu: report.ibleu,
            active_fraction: out.last.model.codebook.as_ref().map(|c| c.utilization(cfg.window)),
            purity: report.purity(),
        });
    }
    Ok(rows)
}

/// Attaches a fresh prompt encoder to the pretrained LM and trains it.
pub fn run_variant<F: Scalar>(
    lm: &VqPromptModel<F>,
    vocab: &Vocabulary,
    train_set: &[ParaphraseCluster],
    val: &[ParaphraseCluster],
    cfg: &TrainingConfig,
) -> Result<TrainOutcome<F>> {
    let mut rng = substream(cfg.seed, Stream::Init);
    let model = lm.with_prompt(cfg.effective_prompt_len(), cfg.prompt_layers, cfg.share_embeddings, &mut rng)?;
    train(model, vocab, train_set, val, cfg, &mut ())
}

pub fn evaluate_test<F: Scalar>(
    model: &VqPromptModel<F>,
    vocab: &Vocabulary,
    test: &[ParaphraseCluster],
    cfg: &TrainingConfig,
) -> Result<EvalReport> {
    evaluate(
        model,
        vocab,
        test,
        &MetricConfig {
            alpha: cfg.alpha,
            ..MetricConfig::default()
        },
        &DecodingConfig {
            max_output_len: cfg.max_output_len,
            ..DecodingConfig::default()
        },
    )
}

/// Ablation rows keyed by variant name, for JSON output.
pub fn ablation_json(rows: &[AblationRow]) -> serde_json::Value {
    let m: BTreeMap<&str, &AblationRow> = rows.iter().map(|r| (r.variant.name(), r)).collect();
    serde_json::to_value(m).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::Tensor;
    use rand::SeedableRng;

    const V: usize = 12;

    fn micro(prompt_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: V,
            d_model: 8,
            heads: 2,
            ff_hidden: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            prompt_len,
            prompt_layers: 1,
            max_positions: 16,
            share_embeddings: true,
        }
    }

    fn model(prompt_len: usize) -> VqPromptModel<f64> {
        VqPromptModel::new(micro(prompt_len), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn cfg(variant: Variant) -> TrainingConfig {
        TrainingConfig {
            variant,
            prompt_len: 2,
            codebook_size: 4,
            threshold: 2,
            kmeans_sample: 16,
            batch_size: 4,
            warmup_epochs: 1,
            epochs: 3,
            lr: 1e-2,
            max_len: 12,
            max_output_len: 12,
            ..TrainingConfig::default()
        }
    }

    fn clusters() -> (Vec<ParaphraseCluster>, Vocabulary) {
        let rows = [
            ("how can i swim ?", "what is the best way to swim ?"),
            ("how can i sing ?", "what is the best way to sing ?"),
            ("what causes rain ?", "why does rain happen ?"),
            ("what causes snow ?", "why does snow happen ?"),
            ("how can i cook ?", "what is the best way to cook ?"),
            ("what causes fog ?", "why does fog happen ?"),
        ];
        let clusters: Vec<ParaphraseCluster> = rows
            .iter()
            .enumerate()
            .map(|(i, (x, y))| ParaphraseCluster {
                input: x.to_string(),
                refs: vec![y.to_string()],
                rule_id: Some(if i % 2 == 0 { "a" } else { "b" }.into()),
                filler: None,
            })
            .collect();
        let text: Vec<&str> = rows.iter().flat_map(|(x, y)| [*x, *y]).collect();
        (clusters, Vocabulary::build(&text, 1).unwrap())
    }

    fn sized_model(vocab: &Vocabulary, prompt_len: usize) -> VqPromptModel<f64> {
        let c = ModelConfig {
            vocab_size: vocab.len(),
            ..micro(prompt_len)
        };
        VqPromptModel::new(c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn batch() -> Batch {
        Batch::new(&[vec![4, 5, 6], vec![7, 8]], &[vec![9, 10], vec![11, 4, 5, 6]]).unwrap()
    }

    fn loss_of(m: &mut VqPromptModel<f64>, b: &Batch) -> f64 {
        let mut g = Graph::new();
        let lv = total_loss(m, &mut g, b, PromptSource::None, 1.0).unwrap();
        g.value(lv.j_ml).item()
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let mut m = model(0);
        for p in m.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let l = loss_of(&mut m, &batch());
        assert!((l - (V as f64).ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn padding_does_not_change_the_loss() {
        let mut m = model(0);
        let a = Batch::new(&[vec![4, 5, 6]], &[vec![9, 10]]).unwrap();
        let b = Batch::new(&[vec![7, 8]], &[vec![11, 4, 5, 6]]).unwrap();
        let (la, lb) = (loss_of(&mut m, &a), loss_of(&mut m, &b));
        // 3 and 5 target tokens (EOS included); the batch mean weights by count
        let expected = (3.0 * la + 5.0 * lb) / 8.0;
        let both = loss_of(&mut m, &batch());
        assert!((both - expected).abs() < 1e-10, "{both} vs {expected}");
    }

    #[test]
    fn single_pair_is_memorized() {
        let m = model(0);
        let mut t = Trainer::new(m, TrainingConfig { lr: 1e-2, ..cfg(Variant::LmOnly) }).unwrap();
        let b = Batch::new(&[vec![4, 5, 6]], &[vec![9, 10, 11]]).unwrap();
        let first = t.train_step(&b, Stage::Lm, 0).unwrap().j_ml;
        let mut last = first;
        for _ in 0..199 {
            last = t.train_step(&b, Stage::Lm, 0).unwrap().j_ml;
        }
        assert!(first > 1.0 && last < 0.02, "{first} -> {last}");
    }

    #[test]
    fn lm_only_has_no_vq_term() {
        let mut t = Trainer::new(model(0), cfg(Variant::LmOnly)).unwrap();
        let r = t.train_step(&batch(), Stage::Lm, 0).unwrap();
        assert_eq!(r.j_vq, 0.0);
        assert_eq!(r.j_total, r.j_ml);
        assert_eq!(r.active_fraction, None);
    }

    #[test]
    fn breakdown_adds_up() {
        let mut t = Trainer::new(model(2), cfg(Variant::VqPrompt)).unwrap();
        t.init_codebook(&[vec![4, 5], vec![6, 7, 8], vec![9], vec![10, 11], vec![5, 6, 7]]).unwrap();
        for _ in 0..5 {
            let r = t.train_step(&batch(), Stage::Quantized, 1).unwrap();
            assert!(r.j_vq > 0.0);
            assert!((r.j_total - (r.j_ml + r.j_vq)).abs() <= 1e-6 * r.j_total.abs());
            assert!(r.active_fraction.is_some());
        }
    }

    #[test]
    fn prompts_on_codes_have_zero_vq_loss() {
        let mut m = model(2);
        let b = Batch::new(&[vec![4, 5, 6]], &[vec![9, 10]]).unwrap();
        let r = m.continuous_prompts(&[vec![4, 5, 6]]).unwrap();
        m.codebook = Some(Codebook::new(r).unwrap());
        let mut g = Graph::new();
        let lv = total_loss(&mut m, &mut g, &b, PromptSource::Quantized { track_usage: false }, 1.0).unwrap();
        assert_eq!(g.value(lv.j_vq.unwrap()).item(), 0.0);
        assert_eq!(g.value(lv.j_total).item(), g.value(lv.j_ml).item());
    }

    #[test]
    fn frozen_lm_is_conserved() {
        let (c, vocab) = clusters();
        let m = sized_model(&vocab, 2);
        let before = m.lm_hash();
        let prompt_before: Vec<Tensor<f64>> =
            m.params().filter(|p| p.name.starts_with("prompt.")).map(|p| p.tensor.clone()).collect();
        let out = train(m, &vocab, &c, &c, &cfg(Variant::VqPrompt), &mut ()).unwrap();
        assert_eq!(out.last.model.lm_hash(), before);
        assert_eq!(out.best.lm_hash(), before);
        let prompt_after: Vec<Tensor<f64>> = out
            .last
            .model
            .params()
            .filter(|p| p.name.starts_with("prompt."))
            .map(|p| p.tensor.clone())
            .collect();
        assert_ne!(prompt_before, prompt_after);
        assert!(out.last.model.codebook.is_some());
    }

    #[test]
    fn warmup_leaves_the_codebook_alone() {
        let mut t = Trainer::new(model(2), cfg(Variant::VqPrompt)).unwrap();
        t.init_codebook(&[vec![4, 5], vec![6, 7, 8], vec![9], vec![10, 11]]).unwrap();
        let before = t.model.codebook.clone().unwrap();
        for _ in 0..3 {
            t.train_step(&batch(), Stage::Warmup, 0).unwrap();
        }
        assert_eq!(t.model.codebook.as_ref().unwrap(), &before);
    }

    #[test]
    fn quantized_training_moves_the_codebook() {
        let mut t = Trainer::new(model(2), cfg(Variant::VqPrompt)).unwrap();
        t.init_codebook(&[vec![4, 5], vec![6, 7, 8], vec![9], vec![10, 11]]).unwrap();
        let before = t.model.codebook.clone().unwrap().codes.tensor;
        t.train_step(&batch(), Stage::Quantized, 1).unwrap();
        assert_ne!(t.model.codebook.as_ref().unwrap().codes.tensor, before);
    }

    #[test]
    fn zero_epochs_return_the_initial_model() {
        let (c, vocab) = clusters();
        let m = sized_model(&vocab, 2);
        let config = TrainingConfig {
            warmup_epochs: 0,
            epochs: 0,
            ..cfg(Variant::VqPrompt)
        };
        let out = train(m.clone(), &vocab, &c, &c, &config, &mut ()).unwrap();
        assert!(out.history.is_empty());
        let mut expected = m;
        expected.set_lm_frozen(true);
        assert_eq!(out.best, expected);
    }

    #[test]
    fn same_seed_same_trace() {
        let (c, vocab) = clusters();
        let run = |seed| {
            let m = sized_model(&vocab, 2);
            let config = TrainingConfig { seed, ..cfg(Variant::VqPrompt) };
            train(m, &vocab, &c, &c, &config, &mut ()).unwrap()
        };
        let (a, b, other) = (run(3), run(3), run(4));
        assert_eq!(a.history, b.history);
        assert_eq!(a.epochs, b.epochs);
        assert_ne!(a.history, other.history);
    }

    #[test]
    fn idle_codes_are_revived() {
        let config = TrainingConfig {
            codebook_size: 4,
            threshold: 4,
            staleness: 1,
            window: 1,
            revival_every: 1,
            ..cfg(Variant::VqPrompt)
        };
        let mut t = Trainer::new(model(2), config).unwrap();
        t.init_codebook(&[vec![4, 5], vec![6, 7, 8], vec![9], vec![10, 11]]).unwrap();
        let single = Batch::new(&[vec![4, 5, 6]], &[vec![9, 10]]).unwrap();
        let mut revived = 0;
        for _ in 0..3 {
            revived += t.train_step(&single, Stage::Quantized, 1).unwrap().revived;
        }
        assert!(revived > 0);
        assert_eq!(t.revivals.iter().map(|e| e.replaced).sum::<usize>(), revived);
    }

    #[test]
    fn failed_step_changes_nothing() {
        let mut t = Trainer::new(model(2), cfg(Variant::VqPrompt)).unwrap();
        t.init_codebook(&[vec![4, 5], vec![6, 7, 8], vec![9], vec![10, 11]]).unwrap();
        t.train_step(&batch(), Stage::Quantized, 1).unwrap();
        let p = t.model.params_mut().find(|p| p.name.starts_with("prompt.")).unwrap();
        p.tensor.data_mut()[0] = f64::NAN;
        let snapshot = t.model.clone();
        let step = t.step;
        let err = t.train_step(&batch(), Stage::Quantized, 1).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert_eq!(t.step, step);
        let (a, b) = (t.model.codebook.as_ref().unwrap(), snapshot.codebook.as_ref().unwrap());
        assert_eq!(a.usage(), b.usage());
        assert_eq!(a.current_step(), b.current_step());
    }

    #[test]
    fn resumed_step_matches_uninterrupted_step() {
        let (c, vocab) = clusters();
        let mut t = Trainer::new(sized_model(&vocab, 2), cfg(Variant::VqPrompt)).unwrap();
        let data = pairs(&c, &vocab, 32);
        let sample: Vec<Vec<usize>> = data.iter().map(|p| p.0.clone()).collect();
        t.init_codebook(&sample).unwrap();
        let b = make_batch(&data, &[0, 1, 2, 3]).unwrap();
        t.train_step(&b, Stage::Quantized, 1).unwrap();
        let bytes = t.checkpoint(&vocab, serde_json::json!({})).to_bytes().unwrap();
        let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), t.config.clone()).unwrap();
        let b2 = make_batch(&data, &[2, 3, 4, 5]).unwrap();
        let x = t.train_step(&b2, Stage::Quantized, 1).unwrap();
        let y = resumed.train_step(&b2, Stage::Quantized, 1).unwrap();
        assert_eq!(x, y);
        assert_eq!(t.model, resumed.model);
    }

    #[test]
    fn pretraining_zero_epochs_is_a_no_op() {
        let mut m = model(0);
        let before = m.clone();
        let cfg = PretrainConfig { epochs: 0, ..PretrainConfig::default() };
        let r = pretrain_lm(&mut m, &[vec![4, 5, 6]], &cfg).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(m.lm_hash(), before.lm_hash());
    }

    #[test]
    fn config_invariants() {
        assert!(TrainingConfig { threshold: 65, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { warmup_epochs: 20, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(Trainer::new(model(3), TrainingConfig { prompt_len: 2, ..cfg(Variant::VqPrompt) }).is_err());
    }
}
