//! Property tests for metrics, quantization, revival, configuration and the
//! synthetic corpus.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use vqprompt::config::RunConfig;
use vqprompt::corpus::{default_fillers, default_rules, generate_synthetic, split};
use vqprompt::kmeans::{revive_dead_codes, CodeBuffer};
use vqprompt::metrics::{bleu, cluster_purity, contingency, ibleu, self_bleu, MetricConfig};
use vqprompt::numerics::{Graph, Tensor};
use vqprompt::trainer::Variant;
use vqprompt::vq::{vq_terms, Codebook};

const WORDS: [&str; 8] = ["the", "cat", "sat", "on", "a", "mat", "why", "does"];

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(0usize..WORDS.len(), 1..9).prop_map(|ids| {
        ids.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")
    })
}

fn pairs() -> impl Strategy<Value = Vec<(String, String)>> {
    prop::collection::vec((sentence(), sentence()), 1..8)
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bleu_is_bounded_and_order_free(p in pairs(), rot in 0usize..8) {
        let cfg = MetricConfig::default();
        let cands: Vec<&str> = p.iter().map(|x| x.0.as_str()).collect();
        let refs: Vec<Vec<&str>> = p.iter().map(|x| vec![x.1.as_str()]).collect();
        let s = bleu(&cands, &refs, &cfg).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        let mut c2 = cands.clone();
        let mut r2 = refs.clone();
        let k = rot % c2.len();
        c2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert!((bleu(&c2, &r2, &cfg).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn self_bleu_is_bleu_against_inputs(p in pairs()) {
        let cfg = MetricConfig::default();
        let outs: Vec<&str> = p.iter().map(|x| x.0.as_str()).collect();
        let ins: Vec<&str> = p.iter().map(|x| x.1.as_str()).collect();
        let refs: Vec<Vec<&str>> = ins.iter().map(|&i| vec![i]).collect();
        prop_assert_eq!(self_bleu(&outs, &ins, &cfg).unwrap(), bleu(&outs, &refs, &cfg).unwrap());
    }

    #[test]
    fn copying_references_scores_full_marks(p in pairs()) {
        let cfg = MetricConfig::default();
        let refs: Vec<Vec<&str>> = p.iter().map(|x| vec![x.1.as_str()]).collect();
        let cands: Vec<&str> = p.iter().map(|x| x.1.as_str()).collect();
        // every n-gram order needs at least one candidate n-gram
        prop_assume!(cands.iter().any(|c| c.split(' ').count() >= 4));
        prop_assert!((bleu(&cands, &refs, &cfg).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn ibleu_is_affine_and_bounded(b in 0.0f64..=100.0, s in 0.0f64..=100.0, a in 0.0f64..=1.0, shift in -50.0f64..50.0) {
        let v = ibleu(b, s, a);
        prop_assert!(v >= -(1.0 - a) * 100.0 - 1e-9 && v <= a * 100.0 + 1e-9);
        prop_assert!((ibleu(b + shift, s, a) - v - a * shift).abs() < 1e-9);
        prop_assert!((ibleu(b, s + shift, a) - v + (1.0 - a) * shift).abs() < 1e-9);
    }

    #[test]
    fn best_by_ibleu_ignores_common_shift(rows in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 2..6), shift in -20.0f64..20.0) {
        let argmax = |rs: &[(f64, f64)]| {
            rs.iter()
                .enumerate()
                .max_by(|x, y| ibleu(x.1 .0, x.1 .1, 0.8).total_cmp(&ibleu(y.1 .0, y.1 .1, 0.8)))
                .map(|(i, _)| i)
        };
        let shifted: Vec<(f64, f64)> = rows.iter().map(|&(b, s)| (b + shift, s + shift)).collect();
        let a = argmax(&rows).unwrap();
        let b = argmax(&shifted).unwrap();
        let gap = (ibleu(rows[a].0, rows[a].1, 0.8) - ibleu(rows[b].0, rows[b].1, 0.8)).abs();
        prop_assert!(a == b || gap < 1e-9);
    }

    #[test]
    fn quantized_rows_are_codebook_rows(codes in tensor(5, 3), r in tensor(4, 3)) {
        let book = Codebook::new(codes).unwrap();
        let q = book.quantize_untracked(&r).unwrap();
        for (i, &k) in q.indices.iter().enumerate() {
            prop_assert_eq!(q.vectors.row(i), book.code(k));
        }
    }

    #[test]
    fn both_vq_terms_have_the_same_value(r in tensor(3, 4), q in tensor(3, 4)) {
        let mut g = Graph::<f64>::new();
        let rv = g.variable(r.clone()).unwrap();
        let qv = g.variable(q.clone()).unwrap();
        let (a, b) = vq_terms(&mut g, rv, qv).unwrap();
        prop_assert_eq!(g.value(a), g.value(b));
        let d: f64 = r.data().iter().zip(q.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        prop_assert!((g.value(a).item() - d).abs() <= 1e-12 * d.max(1.0));
    }

    #[test]
    fn revival_touches_only_dead_codes(
        codes in tensor(6, 2),
        batches in prop::collection::vec(tensor(2, 2), 1..12),
        buffered in prop::collection::vec(tensor(1, 2), 1..10),
        threshold in 1usize..7,
        staleness in 1u64..5,
        seed in any::<u64>(),
    ) {
        let mut book = Codebook::new(codes).unwrap();
        for b in &batches {
            book.quantize(b).unwrap();
            book.advance();
        }
        let mut buffer = CodeBuffer::new(16, 2);
        for b in &buffered {
            buffer.extend(b);
        }
        let before = book.codes.tensor.clone();
        let dead = book.dead_codes(staleness);
        let rev = revive_dead_codes(&mut book, &buffer, threshold, staleness, 4, seed).unwrap();
        prop_assert!(rev.replaced.len() <= rev.dead);
        prop_assert!(rev.replaced.iter().all(|k| dead.contains(k)));
        for k in 0..book.size() {
            if !rev.replaced.contains(&k) {
                prop_assert_eq!(book.code(k), before.row(k));
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        lr in 1e-6f64..1.0,
        alpha in 0.0f64..=1.0,
        epochs in 1usize..100,
        naive in any::<bool>(),
    ) {
        let mut c = RunConfig::default();
        c.seed = seed;
        c.lr = lr;
        c.alpha = alpha;
        c.epochs = epochs;
        c.warmup_epochs = c.warmup_epochs.min(epochs - 1);
        if naive {
            c.variant = Variant::VqNaive;
        }
        prop_assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn contingency_rows_count_every_label(
        samples in prop::collection::vec((prop::collection::vec(0usize..3, 2), 0usize..4), 1..40)
    ) {
        let assignments: Vec<Vec<usize>> = samples.iter().map(|s| s.0.clone()).collect();
        let labels: Vec<String> = samples.iter().map(|s| format!("r{}", s.1)).collect();
        let table = contingency(&assignments, &labels).unwrap();
        let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &labels {
            *per_label.entry(l).or_default() += 1;
        }
        for (label, n) in per_label {
            let total: usize = table.values().map(|row| row.get(label).copied().unwrap_or(0)).sum();
            prop_assert_eq!(total, n);
        }
        let p = cluster_purity(&assignments, &labels).unwrap();
        prop_assert!(p > 0.0 && p <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_pairs_share_their_filler(seed in any::<u64>(), n in 3usize..20) {
        let rules = default_rules();
        let corpus = generate_synthetic(&rules, &default_fillers(), n, seed).unwrap();
        prop_assert_eq!(corpus.len(), rules.len() * n);
        for c in &corpus.clusters {
            let filler = c.filler.as_deref().unwrap();
            prop_assert_ne!(&c.input, &c.refs[0]);
            prop_assert!(c.input.contains(filler) && c.refs[0].contains(filler));
        }
        let ids: BTreeSet<&str> = corpus.clusters.iter().filter_map(|c| c.rule_id.as_deref()).collect();
        prop_assert_eq!(ids.len(), rules.len());
    }

    #[test]
    fn splits_partition_and_keep_fillers_apart(seed in any::<u64>(), n in 5usize..20) {
        let corpus = generate_synthetic(&default_rules(), &default_fillers(), n, seed).unwrap();
        let (train, val, test) = split(&corpus, [0.8, 0.1, 0.1], seed).unwrap();
        prop_assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
        prop_assert_eq!(train.len() + val.len() + test.len(), corpus.len());
        let fillers = |c: &vqprompt::corpus::Corpus| -> BTreeSet<String> {
            c.clusters.iter().filter_map(|x| x.filler.clone()).collect()
        };
        let (a, b, t) = (fillers(&train), fillers(&val), fillers(&test));
        prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&t) && b.is_disjoint(&t));
    }
}
