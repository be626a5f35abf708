//! BLEU, self-BLEU, iBLEU, and code-to-rule cluster purity.
//!
//! BLEU is the corpus-level variant: clipped n-gram matches and candidate
//! n-gram totals are summed over the whole corpus before the precisions are
//! formed, and the brevity penalty compares the total candidate length with
//! the summed closest-reference lengths. Scores are on a 0 to 100 scale.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::ParaphraseCluster;
use crate::error::{Error, Result};
use crate::model::{DecodingConfig, VqPromptModel};
use crate::numerics::Scalar;
use crate::text::{normalize, Vocabulary};

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Corpus,
    Sentence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub alpha: f64,
    pub max_order: usize,
    /// Added to zero match counts, sentence level only.
    pub smoothing: f64,
    pub level: Level,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            max_order: MAX_ORDER,
            smoothing: 1e-9,
            level: Level::Corpus,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.max_order == 0 {
            return Err(Error::Config("max_order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Sufficient statistics of BLEU for one or more candidates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    /// Clipped matches per order.
    pub matches: Vec<u64>,
    /// Candidate n-grams per order.
    pub totals: Vec<u64>,
    pub cand_len: u64,
    pub ref_len: u64,
}

fn ngrams<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn zero(max_order: usize) -> Self {
        Self {
            matches: vec![0; max_order],
            totals: vec![0; max_order],
            cand_len: 0,
            ref_len: 0,
        }
    }

    /// Statistics of one tokenized candidate against its references.
    pub fn sentence(candidate: &[String], references: &[Vec<String>], max_order: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Invalid("candidate has no references".into()));
        }
        let mut s = Self::zero(max_order);
        for n in 1..=max_order {
            let cand = ngrams(candidate, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in references {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.matches[n - 1] = cand
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1) as u64;
        }
        s.cand_len = candidate.len() as u64;
        // closest reference length, shorter one on ties
        let c = candidate.len() as i64;
        s.ref_len = references
            .iter()
            .map(|r| r.len() as i64)
            .min_by_key(|&l| ((l - c).abs(), l))
            .unwrap_or(0) as u64;
        Ok(s)
    }

    pub fn add(&mut self, other: &Self) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.cand_len += other.cand_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU on the 0 to 100 scale. `smoothing` replaces zero match counts
    /// when positive; with zero smoothing any empty order gives 0.
    pub fn score(&self, smoothing: f64) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            let m = if m == 0 { smoothing } else { m as f64 };
            if m <= 0.0 || t == 0 {
                return 0.0;
            }
            log_sum += (m / t as f64).ln();
        }
        let order = self.matches.len() as f64;
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        (100.0 * bp * (log_sum / order).exp()).clamp(0.0, 100.0)
    }
}

fn tokenize<S: AsRef<str>>(s: S) -> Vec<String> {
    normalize(s.as_ref())
}

/// Summed statistics of a corpus; candidates and references are whitespace
/// tokenized and lowercased.
pub fn corpus_stats<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[Vec<R>],
    max_order: usize,
) -> Result<BleuStats> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to score".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} candidates but {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    let mut total = BleuStats::zero(max_order);
    for (c, refs) in candidates.iter().zip(references) {
        let refs: Vec<Vec<String>> = refs.iter().map(tokenize).collect();
        total.add(&BleuStats::sentence(&tokenize(c), &refs, max_order)?);
    }
    Ok(total)
}

/// BLEU of `candidates` against per-candidate reference lists.
///
/// ```
/// use vqprompt::metrics::{bleu, MetricConfig};
/// let s = bleu(&["a b c d"], &[vec!["a b c d", "e f"]], &MetricConfig::default()).unwrap();
/// assert_eq!(s, 100.0);
/// ```
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[Vec<R>],
    config: &MetricConfig,
) -> Result<f64> {
    config.validate()?;
    match config.level {
        Level::Corpus => Ok(corpus_stats(candidates, references, config.max_order)?.score(0.0)),
        Level::Sentence => {
            if candidates.is_empty() || candidates.len() != references.len() {
                return Err(Error::Invalid("candidate and reference counts differ or are zero".into()));
            }
            let mut sum = 0.0;
            for (c, r) in candidates.iter().zip(references) {
                sum += corpus_stats(&[c], std::slice::from_ref(r), config.max_order)?.score(config.smoothing);
            }
            Ok(sum / candidates.len() as f64)
        }
    }
}

/// BLEU of the outputs against the inputs they were generated from.
pub fn self_bleu<S: AsRef<str>, I: AsRef<str>>(candidates: &[S], inputs: &[I], config: &MetricConfig) -> Result<f64> {
    let refs: Vec<Vec<&str>> = inputs.iter().map(|i| vec![i.as_ref()]).collect();
    bleu(candidates, &refs, config)
}

/// `alpha * bleu - (1 - alpha) * self_bleu`.
///
/// ```
/// let s = vqprompt::metrics::ibleu(35.01, 39.98, 0.8);
/// assert!((s - 20.012).abs() < 1e-9);
/// ```
pub fn ibleu(bleu: f64, self_bleu: f64, alpha: f64) -> f64 {
    alpha * bleu - (1.0 - alpha) * self_bleu
}

/// Counts of labels per prompt-index tuple.
pub type Contingency = BTreeMap<Vec<usize>, BTreeMap<String, usize>>;

pub fn contingency<L: AsRef<str>>(assignments: &[Vec<usize>], labels: &[L]) -> Result<Contingency> {
    if assignments.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} assignments but {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let mut table: Contingency = BTreeMap::new();
    for (a, l) in assignments.iter().zip(labels) {
        *table.entry(a.clone()).or_default().entry(l.as_ref().to_string()).or_insert(0) += 1;
    }
    Ok(table)
}

/// Fraction of samples carrying the majority label of their index tuple.
///
/// ```
/// use vqprompt::metrics::cluster_purity;
/// let a = vec![vec![1, 2]; 4];
/// let p = cluster_purity(&a, &["x", "x", "x", "y"]).unwrap();
/// assert_eq!(p, 0.75);
/// ```
pub fn cluster_purity<L: AsRef<str>>(assignments: &[Vec<usize>], labels: &[L]) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    let table = contingency(assignments, labels)?;
    let majority: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    Ok(majority as f64 / assignments.len() as f64)
}

/// One evaluated input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub input: String,
    pub output: String,
    pub refs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_indices: Option<Vec<usize>>,
    pub bleu_stats: BleuStats,
    pub self_bleu_stats: BleuStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub self_bleu: f64,
    pub ibleu: f64,
    pub alpha: f64,
    pub n: usize,
    #[serde(skip)]
    pub records: Vec<SentenceRecord>,
}

impl EvalReport {
    /// Corpus scores recomputed from per-sentence statistics.
    pub fn from_records(records: Vec<SentenceRecord>, alpha: f64) -> Result<Self> {
        let order = records
            .first()
            .map(|r| r.bleu_stats.matches.len())
            .ok_or_else(|| Error::Invalid("no records".into()))?;
        let mut b = BleuStats::zero(order);
        let mut s = BleuStats::zero(order);
        for r in &records {
            b.add(&r.bleu_stats);
            s.add(&r.self_bleu_stats);
        }
        let (bleu, self_bleu) = (b.score(0.0), s.score(0.0));
        Ok(Self {
            bleu,
            self_bleu,
            ibleu: ibleu(bleu, self_bleu, alpha),
            alpha,
            n: records.len(),
            records,
        })
    }

    /// Purity of prompt tuples against rule labels, over records carrying both.
    pub fn purity(&self) -> Option<f64> {
        let (a, l): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .filter_map(|r| Some((r.prompt_indices.clone()?, r.rule_id.clone()?)))
            .unzip();
        cluster_purity(&a, &l).ok()
    }

    pub fn contingency(&self) -> Option<Contingency> {
        let (a, l): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .filter_map(|r| Some((r.prompt_indices.clone()?, r.rule_id.clone()?)))
            .unzip();
        if a.is_empty() {
            return None;
        }
        contingency(&a, &l).ok()
    }

    pub fn records_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Generates a paraphrase for every cluster input and scores the outputs.
pub fn evaluate<F: Scalar>(
    model: &VqPromptModel<F>,
    vocab: &Vocabulary,
    clusters: &[ParaphraseCluster],
    config: &MetricConfig,
    decoding: &DecodingConfig,
) -> Result<EvalReport> {
    config.validate()?;
    if clusters.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let sources: Vec<Vec<usize>> = clusters
        .iter()
        .map(|c| vocab.encode(&c.input, false).ids)
        .collect();
    let gens = model.generate(&sources, decoding)?;
    let mut records = Vec::with_capacity(clusters.len());
    for (c, g) in clusters.iter().zip(gens) {
        let output = vocab.decode(&g.ids);
        let out_toks = tokenize(&output);
        let refs: Vec<Vec<String>> = c.refs.iter().map(tokenize).collect();
        records.push(SentenceRecord {
            input: c.input.clone(),
            refs: c.refs.clone(),
            rule_id: c.rule_id.clone(),
            prompt_indices: g.prompt_indices,
            bleu_stats: BleuStats::sentence(&out_toks, &refs, config.max_order)?,
            self_bleu_stats: BleuStats::sentence(&out_toks, &[tokenize(&c.input)], config.max_order)?,
            output,
        });
    }
    EvalReport::from_records(records, config.alpha)
}
