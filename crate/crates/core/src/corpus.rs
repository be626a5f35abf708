//! Paraphrase clusters: synthetic generation from rewrite templates, JSONL
//! persistence, and seeded train/val/test splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLOT: &str = "$x";

const DEFAULT_RULES: &str = include_str!("../data/rules.json");
const DEFAULT_FILLERS: &str = include_str!("../data/fillers.json");

/// A one-slot rewrite template pair, e.g. `what causes $x ?` → `why does $x happen ?`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationRule {
    pub rule_id: String,
    pub source: String,
    pub target: String,
    pub slot_type: String,
}

impl TransformationRule {
    pub fn validate(&self) -> Result<()> {
        for (side, t) in [("source", &self.source), ("target", &self.target)] {
            let n = t.split_whitespace().filter(|w| *w == SLOT).count();
            if n != 1 {
                return Err(Error::Invalid(format!(
                    "rule `{}`: {side} template must contain exactly one {SLOT}, found {n}",
                    self.rule_id
                )));
            }
        }
        if self.source == self.target {
            return Err(Error::Invalid(format!(
                "rule `{}`: source and target templates are identical",
                self.rule_id
            )));
        }
        Ok(())
    }

    pub fn instantiate(&self, filler: &str) -> (String, String) {
        (self.source.replace(SLOT, filler), self.target.replace(SLOT, filler))
    }
}

/// An input sentence with one or more reference paraphrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseCluster {
    pub input: String,
    pub refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<String>,
    /// Slot content for synthetic clusters; used to keep fillers out of
    /// more than one split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filler: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub clusters: Vec<ParaphraseCluster>,
    pub split: SplitTag,
    pub seed: Option<u64>,
}

impl Corpus {
    pub fn new(clusters: Vec<ParaphraseCluster>, split: SplitTag) -> Self {
        Self {
            clusters,
            split,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Every input and reference sentence, in order.
    pub fn sentences(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for c in &self.clusters {
            out.push(c.input.as_str());
            out.extend(c.refs.iter().map(String::as_str));
        }
        out
    }

    /// JSONL text: one cluster per line, each line terminated by `\n`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for c in &self.clusters {
            s.push_str(&serde_json::to_string(c)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn default_rules() -> Vec<TransformationRule> {
    serde_json::from_str(DEFAULT_RULES).expect("bundled rule pack parses")
}

pub fn default_fillers() -> BTreeMap<String, Vec<String>> {
    serde_json::from_str(DEFAULT_FILLERS).expect("bundled filler lists parse")
}

pub fn load_rules(path: &Path) -> Result<Vec<TransformationRule>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_fillers(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Instantiates each rule with `n_per_rule` distinct fillers of its slot type.
pub fn generate_synthetic(
    rules: &[TransformationRule],
    fillers: &BTreeMap<String, Vec<String>>,
    n_per_rule: usize,
    seed: u64,
) -> Result<Corpus> {
    let mut seen = HashSet::new();
    for r in rules {
        r.validate()?;
        if !seen.insert(r.rule_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate rule id `{}`", r.rule_id)));
        }
        let available = fillers.get(&r.slot_type).map_or(0, Vec::len);
        if available < n_per_rule {
            return Err(Error::InsufficientFillers {
                slot: r.slot_type.clone(),
                available,
                needed: n_per_rule,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::with_capacity(rules.len() * n_per_rule);
    for r in rules {
        let pool = &fillers[&r.slot_type];
        for i in sample(&mut rng, pool.len(), n_per_rule) {
            let filler = &pool[i];
            let (input, reference) = r.instantiate(filler);
            clusters.push(ParaphraseCluster {
                input,
                refs: vec![reference],
                rule_id: Some(r.rule_id.clone()),
                filler: Some(filler.clone()),
            });
        }
    }
    Ok(Corpus {
        clusters,
        split: SplitTag::Train,
        seed: Some(seed),
    })
}

#[derive(Deserialize)]
struct RawCluster {
    input: String,
    refs: Vec<String>,
    #[serde(default)]
    rule_id: Option<String>,
    #[serde(default)]
    filler: Option<String>,
}

/// Parses JSONL text; `path` is only used for error messages.
pub fn parse_clusters(text: &str, path: &Path, split: SplitTag) -> Result<Corpus> {
    let mut clusters = Vec::new();
    let lines: Vec<&str> = text.split('\n').collect();
    let last = lines.len() - 1;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if i == last {
                break;
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "blank line".into(),
            });
        }
        let raw: RawCluster = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if raw.refs.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty `refs`".into(),
            });
        }
        clusters.push(ParaphraseCluster {
            input: raw.input,
            refs: raw.refs,
            rule_id: raw.rule_id,
            filler: raw.filler,
        });
    }
    log::info!("loaded {} clusters from {}", clusters.len(), path.display());
    Ok(Corpus::new(clusters, split))
}

pub fn load_clusters(path: &Path, split: SplitTag) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clusters(&text, path, split)
}

fn group_key(c: &ParaphraseCluster) -> (String, String) {
    match &c.filler {
        Some(f) => (f.clone(), String::new()),
        None => (c.input.clone(), c.refs[0].clone()),
    }
}

/// Seeded split into train/val/test. Clusters sharing a filler (or, without
/// one, the same input and first reference) always land in the same split.
pub fn split(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    if corpus.len() < 3 {
        return Err(Error::Invalid(format!(
            "cannot split a corpus of {} clusters",
            corpus.len()
        )));
    }
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut order: Vec<(String, String)> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    let mut group_of = Vec::with_capacity(corpus.len());
    for c in &corpus.clusters {
        let key = group_key(c);
        let g = *index.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            order.len() - 1
        });
        group_of.push(g);
    }
    let n_groups = order.len();
    if n_groups < 3 {
        return Err(Error::Invalid(format!(
            "corpus has only {n_groups} distinct groups"
        )));
    }
    let mut perm: Vec<usize> = (0..n_groups).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((ratios[1] * n_groups as f64).round() as usize).max(1);
    let n_test = ((ratios[2] * n_groups as f64).round() as usize).max(1);
    let n_train = n_groups.saturating_sub(n_val + n_test).max(1);
    let mut tag = vec![SplitTag::Test; n_groups];
    for (rank, &g) in perm.iter().enumerate() {
        tag[g] = if rank < n_train {
            SplitTag::Train
        } else if rank < n_train + n_val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    let mut parts = [SplitTag::Train, SplitTag::Val, SplitTag::Test].map(|t| Corpus {
        clusters: Vec::new(),
        split: t,
        seed: Some(seed),
    });
    for (c, &g) in corpus.clusters.iter().zip(&group_of) {
        let slot = match tag[g] {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Test => 2,
        };
        parts[slot].clusters.push(c.clone());
    }
    let [train, val, test] = parts;
    Ok((train, val, test))
}
