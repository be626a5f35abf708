//! Command-line surface: corpus generation, LM pretraining, prompt training,
//! inference, evaluation, codebook inspection and the ablation harness.
//!
//! Every command takes `--config FILE`, `--seed N` and repeatable
//! `--set key=value`; see [`crate::config`] for the file syntax. Each
//! artifact written embeds the seed and the effective config.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::{self, Corpus, SplitTag, TransformationRule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::checkpoint::peek_dtype;
use crate::model::{Checkpoint, VqPromptModel};
use crate::numerics::{Dtype, Scalar};
use crate::rng::{stream_seed, substream, Stream};
use crate::text::Vocabulary;
use crate::trainer::{self, pretrain_lm, run_ablation, token_accuracy, PretrainReport, Variant};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CONFIG_FILE: &str = "run.cfg";
pub const STEPS_FILE: &str = "metrics_history.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

#[derive(Debug, Parser)]
#[command(name = "vqprompt", version, about = "Vector-quantized prompt learning for paraphrase generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` setting.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides one setting; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::merged(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic rule corpus and its train/val/test split.
    GenerateCorpus {
        #[arg(long)]
        out: PathBuf,
        /// Rule file (JSON); the built-in rules when absent.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Filler file (JSON); the built-in fillers when absent.
        #[arg(long)]
        fillers: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrains the seq2seq LM as a denoising autoencoder.
    PretrainLm {
        /// Directory written by `generate-corpus`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Trains one variant on top of a pretrained LM.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Paraphrases one sentence per line from a file or standard input.
    Paraphrase {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Scores a checkpoint on a JSONL split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-sentence JSONL output.
        #[arg(long)]
        records: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Reports codebook usage and, given data, code-tuple/rule alignment.
    InspectCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Trains every variant from one LM and tabulates test scores.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; the configured seed when absent.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` and runs the command, writing results to `out`. Returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenerateCorpus {
            out: dir,
            rules,
            fillers,
            common,
        } => generate_corpus(&common.resolve()?, &dir, rules.as_deref(), fillers.as_deref(), out),
        Command::PretrainLm { data, out: path, common } => {
            let cfg = common.resolve()?;
            match cfg.dtype {
                Dtype::F32 => pretrain::<f32>(&cfg, &data, &path, out),
                Dtype::F64 => pretrain::<f64>(&cfg, &data, &path, out),
            }
        }
        Command::Train {
            data,
            lm,
            out: dir,
            common,
        } => {
            let cfg = common.resolve()?;
            match checked_dtype(&cfg, &lm)? {
                Dtype::F32 => train::<f32>(&cfg, &data, &lm, &dir, out),
                Dtype::F64 => train::<f64>(&cfg, &data, &lm, &dir, out),
            }
        }
        Command::Paraphrase {
            checkpoint,
            input,
            common,
        } => {
            let cfg = common.resolve()?;
            match peek_dtype(&checkpoint)? {
                Dtype::F32 => paraphrase::<f32>(&cfg, &checkpoint, input.as_deref(), out),
                Dtype::F64 => paraphrase::<f64>(&cfg, &checkpoint, input.as_deref(), out),
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            records,
            common,
        } => {
            let cfg = common.resolve()?;
            match peek_dtype(&checkpoint)? {
                Dtype::F32 => evaluate_cmd::<f32>(&cfg, &checkpoint, &data, records.as_deref(), out),
                Dtype::F64 => evaluate_cmd::<f64>(&cfg, &checkpoint, &data, records.as_deref(), out),
            }
        }
        Command::InspectCodebook {
            checkpoint,
            data,
            common,
        } => {
            let cfg = common.resolve()?;
            match peek_dtype(&checkpoint)? {
                Dtype::F32 => inspect::<f32>(&cfg, &checkpoint, data.as_deref(), out),
                Dtype::F64 => inspect::<f64>(&cfg, &checkpoint, data.as_deref(), out),
            }
        }
        Command::Ablate {
            data,
            lm,
            out: path,
            seeds,
            common,
        } => {
            let cfg = common.resolve()?;
            match checked_dtype(&cfg, &lm)? {
                Dtype::F32 => ablate::<f32>(&cfg, &data, &lm, &path, &seeds, out),
                Dtype::F64 => ablate::<f64>(&cfg, &data, &lm, &path, &seeds, out),
            }
        }
    }
}

fn checked_dtype(cfg: &RunConfig, ckpt: &Path) -> Result<Dtype> {
    let d = peek_dtype(ckpt)?;
    if d != cfg.dtype {
        return Err(Error::Config(format!(
            "{} holds {d:?} values but dtype is {:?}",
            ckpt.display(),
            cfg.dtype
        )));
    }
    Ok(d)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn pretty(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Seed, config and command name, embedded in every artifact.
fn provenance(cfg: &RunConfig, command: &str) -> Value {
    json!({
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "version": env!("CARGO_PKG_VERSION"),
    })
}

fn extend(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The full corpus, its three splits and the training vocabulary.
pub fn build_corpus(
    cfg: &RunConfig,
    rules: &[TransformationRule],
    fillers: &BTreeMap<String, Vec<String>>,
) -> Result<(Corpus, Corpus, Corpus, Corpus, Vocabulary)> {
    let full = corpus::generate_synthetic(rules, fillers, cfg.n_per_rule, stream_seed(cfg.seed, Stream::Corpus))?;
    let (train, val, test) = corpus::split(
        &full,
        [cfg.train_ratio, cfg.val_ratio, cfg.test_ratio],
        stream_seed(cfg.seed, Stream::Split),
    )?;
    let vocab = Vocabulary::build(&train.sentences(), cfg.min_count)?;
    Ok((full, train, val, test, vocab))
}

/// A fresh bare LM pretrained on the training sentences.
pub fn pretrain_model<F: Scalar>(
    cfg: &RunConfig,
    train: &Corpus,
    vocab: &Vocabulary,
) -> Result<(VqPromptModel<F>, PretrainReport)> {
    let mut rng = substream(cfg.seed, Stream::Init);
    let mut lm = VqPromptModel::<F>::new(cfg.lm_model(vocab.len()), &mut rng)?;
    let sentences: Vec<Vec<usize>> = train
        .sentences()
        .iter()
        .map(|s| vocab.encode_with_max(s, false, cfg.max_len).ids)
        .collect();
    let report = pretrain_lm(&mut lm, &sentences, &cfg.pretrain())?;
    Ok((lm, report))
}

/// Copy-task token accuracy of `lm` on the sentences of `set`.
pub fn held_out_accuracy<F: Scalar>(cfg: &RunConfig, lm: &mut VqPromptModel<F>, set: &Corpus, vocab: &Vocabulary) -> Result<f64> {
    let copies: Vec<(Vec<usize>, Vec<usize>)> = set
        .sentences()
        .iter()
        .map(|s| {
            let ids = vocab.encode_with_max(s, false, cfg.max_len).ids;
            (ids.clone(), ids)
        })
        .collect();
    token_accuracy(lm, &copies)
}

fn generate_corpus(
    cfg: &RunConfig,
    dir: &Path,
    rules: Option<&Path>,
    fillers: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let rules = match rules {
        Some(p) => corpus::load_rules(p)?,
        None => corpus::default_rules(),
    };
    let fillers = match fillers {
        Some(p) => corpus::load_fillers(p)?,
        None => corpus::default_fillers(),
    };
    let (full, train, val, test, vocab) = build_corpus(cfg, &rules, &fillers)?;
    create_dir(dir)?;
    let mut files = BTreeMap::new();
    for (name, c) in [(CORPUS_FILE, &full), (TRAIN_FILE, &train), (VAL_FILE, &val), (TEST_FILE, &test)] {
        let path = dir.join(name);
        c.save(&path)?;
        files.insert(name, json!({"clusters": c.len(), "sha256": sha256_file(&path)?}));
    }
    let vpath = dir.join(VOCAB_FILE);
    vocab.save(&vpath)?;
    files.insert(VOCAB_FILE, json!({"tokens": vocab.len(), "sha256": sha256_file(&vpath)?}));
    write_file(&dir.join(CONFIG_FILE), cfg.to_text())?;
    let meta = extend(
        provenance(cfg, "generate-corpus"),
        json!({"rules": rules.len(), "files": files}),
    );
    write_file(&dir.join("corpus.meta.json"), pretty(&meta)?)?;
    writeln!(
        out,
        "wrote {} clusters ({} train, {} val, {} test), vocabulary of {} to {}",
        full.len(),
        train.len(),
        val.len(),
        test.len(),
        vocab.len(),
        dir.display()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn load_split(dir: &Path, name: &str, tag: SplitTag) -> Result<Corpus> {
    corpus::load_clusters(&dir.join(name), tag)
}

fn data_hashes(dir: &Path) -> Result<Value> {
    let mut m = serde_json::Map::new();
    for name in [TRAIN_FILE, VAL_FILE, TEST_FILE, VOCAB_FILE] {
        let p = dir.join(name);
        if p.exists() {
            m.insert(name.into(), sha256_file(&p)?.into());
        }
    }
    Ok(Value::Object(m))
}

fn pretrain<F: Scalar>(cfg: &RunConfig, data: &Path, path: &Path, out: &mut dyn Write) -> Result<()> {
    let train = load_split(data, TRAIN_FILE, SplitTag::Train)?;
    let vocab = Vocabulary::load(&data.join(VOCAB_FILE))?;
    let (mut lm, report) = pretrain_model::<F>(cfg, &train, &vocab)?;
    let val_path = data.join(VAL_FILE);
    let held_out = if val_path.exists() {
        let val = corpus::load_clusters(&val_path, SplitTag::Val)?;
        Some(held_out_accuracy(cfg, &mut lm, &val, &vocab)?)
    } else {
        None
    };
    let meta = extend(
        provenance(cfg, "pretrain-lm"),
        json!({
            "data": data_hashes(data)?,
            "epoch_losses": report.epoch_losses,
            "held_out_token_accuracy": held_out,
        }),
    );
    let ck = Checkpoint {
        model: lm,
        vocab,
        optimizer: None,
        step: report.steps,
        meta,
    };
    ck.save(path)?;
    writeln!(
        out,
        "pretrained LM saved to {} (final loss {:.4}, held-out token accuracy {})",
        path.display(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        held_out.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

fn train<F: Scalar>(cfg: &RunConfig, data: &Path, lm_path: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let lm = Checkpoint::<F>::load(lm_path)?;
    let train_set = load_split(data, TRAIN_FILE, SplitTag::Train)?;
    let val = load_split(data, VAL_FILE, SplitTag::Val)?;
    let tc = cfg.training();
    let outcome = trainer::run_variant(&lm.model, &lm.vocab, &train_set.clusters, &val.clusters, &tc)?;
    create_dir(dir)?;
    let base = extend(
        provenance(cfg, "train"),
        json!({"data": data_hashes(data)?, "lm_sha256": sha256_file(lm_path)?}),
    );
    write_file(&dir.join(CONFIG_FILE), cfg.to_text())?;
    write_file(&dir.join(STEPS_FILE), jsonl(&outcome.history)?)?;
    write_file(&dir.join(EPOCHS_FILE), jsonl(&outcome.epochs)?)?;
    let best = Checkpoint {
        model: outcome.best.clone(),
        vocab: lm.vocab.clone(),
        optimizer: None,
        step: outcome.last.step,
        meta: extend(base.clone(), json!({"best_epoch": outcome.best_epoch})),
    };
    best.save(&dir.join(BEST_CKPT))?;
    outcome.last.checkpoint(&lm.vocab, base.clone()).save(&dir.join(LAST_CKPT))?;
    let active = outcome
        .last
        .model
        .codebook
        .as_ref()
        .map(|c| c.utilization(cfg.window));
    let summary = extend(
        base,
        json!({
            "variant": cfg.variant,
            "steps": outcome.last.step,
            "best_epoch": outcome.best_epoch,
            "final_active_fraction": active,
            "revivals": outcome.last.revivals,
            "aborted": outcome.aborted,
        }),
    );
    write_file(&dir.join(SUMMARY_FILE), pretty(&summary)?)?;
    if let Some(msg) = outcome.aborted {
        return Err(Error::Diverged {
            step: outcome.last.step,
            what: format!("{msg} (last good state saved to {})", dir.display()),
        });
    }
    writeln!(
        out,
        "trained {} for {} steps; best epoch {:?}; active fraction {:?}; artifacts in {}",
        cfg.variant.name(),
        outcome.last.step,
        outcome.best_epoch,
        active,
        dir.display()
    )
    .map_err(|e| Error::io("<stdout>", e))
}

fn paraphrase<F: Scalar>(cfg: &RunConfig, ckpt: &Path, input: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::<F>::load(ckpt)?;
    let lines: Vec<String> = match input {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::io(p, e))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => std::io::stdin()
            .lock()
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("<stdin>", e))?,
    };
    let sources: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| ck.vocab.encode_with_max(l, false, cfg.max_len).ids)
        .collect();
    let gens = ck.model.generate(&sources, &cfg.decoding())?;
    for g in gens {
        writeln!(out, "{}", ck.vocab.decode(&g.ids)).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn report_json(report: &EvalReport) -> Value {
    let mut v = serde_json::to_value(report).unwrap_or_default();
    if let Value::Object(m) = &mut v {
        m.insert("purity".into(), json!(report.purity()));
    }
    v
}

fn evaluate_cmd<F: Scalar>(
    cfg: &RunConfig,
    ckpt: &Path,
    data: &Path,
    records: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::<F>::load(ckpt)?;
    let set = corpus::load_clusters(data, SplitTag::Test)?;
    let report = evaluate(&ck.model, &ck.vocab, &set.clusters, &cfg.metric(), &cfg.decoding())?;
    if let Some(p) = records {
        write_file(p, report.records_jsonl()?)?;
    }
    let v = extend(
        report_json(&report),
        extend(
            provenance(cfg, "evaluate"),
            json!({"checkpoint_sha256": sha256_file(ckpt)?, "data_sha256": sha256_file(data)?}),
        ),
    );
    out.write_all(pretty(&v)?.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

/// Rule-major contingency: rule id, then code tuple (joined by `-`), then count.
fn rule_table(report: &EvalReport) -> Option<BTreeMap<String, BTreeMap<String, usize>>> {
    let table = report.contingency()?;
    let mut rows: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (tuple, labels) in table {
        let key = tuple.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        for (label, n) in labels {
            *rows.entry(label).or_default().entry(key.clone()).or_insert(0) += n;
        }
    }
    Some(rows)
}

fn inspect<F: Scalar>(cfg: &RunConfig, ckpt: &Path, data: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::<F>::load(ckpt)?;
    let codebook = ck.model.codebook.as_ref().map(|cb| {
        json!({
            "size": cb.size(),
            "width": cb.width(),
            "current_step": cb.current_step(),
            "window": cfg.window,
            "active_count": cb.active_count(cfg.window),
            "active_fraction": cb.utilization(cfg.window),
            "codes": cb.usage().iter().enumerate().map(|(k, u)| json!({
                "index": k,
                "select_count": u.select_count,
                "last_used_step": u.last_used_step,
                "born_step": u.born_step,
            })).collect::<Vec<_>>(),
        })
    });
    let mut v = extend(
        provenance(cfg, "inspect-codebook"),
        json!({
            "checkpoint_sha256": sha256_file(ckpt)?,
            "codebook": codebook,
            "active_fraction": ck.model.codebook.as_ref().map(|c| c.utilization(cfg.window)),
        }),
    );
    if let Some(path) = data {
        let set = corpus::load_clusters(path, SplitTag::Test)?;
        let report = evaluate(&ck.model, &ck.vocab, &set.clusters, &cfg.metric(), &cfg.decoding())?;
        v = extend(
            v,
            json!({
                "data_sha256": sha256_file(path)?,
                "n": report.n,
                "purity": report.purity(),
                "contingency": rule_table(&report),
            }),
        );
    }
    out.write_all(pretty(&v)?.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn ablate<F: Scalar>(
    cfg: &RunConfig,
    data: &Path,
    lm_path: &Path,
    path: &Path,
    seeds: &[u64],
    out: &mut dyn Write,
) -> Result<()> {
    let lm = Checkpoint::<F>::load(lm_path)?;
    let train_set = load_split(data, TRAIN_FILE, SplitTag::Train)?;
    let val = load_split(data, VAL_FILE, SplitTag::Val)?;
    let test = load_split(data, TEST_FILE, SplitTag::Test)?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let mut per_seed = Vec::new();
    let mut sums: BTreeMap<&str, [f64; 3]> = BTreeMap::new();
    for &seed in &seeds {
        let tc = trainer::TrainingConfig {
            seed,
            ..cfg.training()
        };
        let rows = run_ablation(&lm.model, &lm.vocab, &train_set.clusters, &val.clusters, &test.clusters, &tc, &Variant::ALL)?;
        for r in &rows {
            let s = sums.entry(r.variant.name()).or_insert([0.0; 3]);
            s[0] += r.bleu;
            s[1] += r.self_bleu;
            s[2] += r.ibleu;
        }
        per_seed.push(json!({"seed": seed, "rows": trainer::ablation_json(&rows)}));
    }
    let n = seeds.len() as f64;
    let mean: BTreeMap<&str, Value> = sums
        .iter()
        .map(|(k, s)| (*k, json!({"bleu": s[0] / n, "self_bleu": s[1] / n, "ibleu": s[2] / n})))
        .collect();
    let v = extend(
        provenance(cfg, "ablate"),
        json!({
            "data": data_hashes(data)?,
            "lm_sha256": sha256_file(lm_path)?,
            "seeds": seeds,
            "runs": per_seed,
            "mean": mean,
        }),
    );
    write_file(path, pretty(&v)?)?;
    let io = |e| Error::io("<stdout>", e);
    writeln!(out, "{:<10} {:>8} {:>10} {:>8}", "variant", "BLEU", "self-BLEU", "iBLEU").map_err(io)?;
    for (k, s) in &sums {
        writeln!(out, "{:<10} {:>8.2} {:>10.2} {:>8.2}", k, s[0] / n, s[1] / n, s[2] / n).map_err(io)?;
    }
    Ok(())
}

