//! Oracles and fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vqprompt::cli::{build_corpus, held_out_accuracy, pretrain_model};
use vqprompt::config::RunConfig;
use vqprompt::corpus::{default_fillers, default_rules, Corpus};
use vqprompt::kmeans::{lloyd_kmeans, KMeansConfig, Points};
use vqprompt::model::{Batch, ModelConfig, PromptSource, VqPromptModel};
use vqprompt::numerics::{finite_difference_check, GradCheckOptions, Graph, Tensor, Var};
use vqprompt::text::Vocabulary;
use vqprompt::trainer::{ml_loss, total_loss, PretrainReport};
use vqprompt::vq::Codebook;

// ---------------------------------------------------------------------------
// nearest-code oracle

/// Exhaustive scan: first index attaining the minimum squared distance.
pub fn brute_nearest(v: &[f64], codes: &[Vec<f64>]) -> usize {
    let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum() };
    let mut best = (0, dist(&codes[0]));
    for (k, c) in codes.iter().enumerate().skip(1) {
        let d = dist(c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let w = rows[0].len();
    Tensor::new(vec![rows.len(), w], rows.concat()).unwrap()
}

/// Quantizer indices vs. the exhaustive scan on one instance; returns the
/// number of disagreeing rows.
pub fn quantizer_mismatches(codes: &[Vec<f64>], prompts: &[Vec<f64>]) -> usize {
    let cb = Codebook::new(tensor(codes)).unwrap();
    let got = cb.quantize_untracked(&tensor(prompts)).unwrap().indices;
    prompts
        .iter()
        .zip(&got)
        .filter(|(p, &k)| brute_nearest(p, codes) != k)
        .count()
}

/// Random instances with K_c and D in 2..=64, followed by crafted ties.
/// Returns (instances, rows checked, mismatches).
pub fn quantizer_oracle(instances: usize, seed: u64) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut rows, mut bad) = (0, 0);
    for _ in 0..instances {
        let k = rng.random_range(2..=64);
        let d = rng.random_range(2..=64);
        let m = rng.random_range(1..=8);
        let codes: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let prompts: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        rows += m;
        bad += quantizer_mismatches(&codes, &prompts);
    }
    for (codes, prompts, expected) in tie_cases() {
        let cb = Codebook::new(tensor(&codes)).unwrap();
        let got = cb.quantize_untracked(&tensor(&prompts)).unwrap().indices;
        rows += prompts.len();
        bad += got.iter().zip(&expected).filter(|(a, b)| a != b).count();
    }
    (instances, rows, bad)
}

/// Exactly equidistant codes; the smallest index must win.
pub fn tie_cases() -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    vec![
        // duplicated code
        (vec![vec![1.0, 1.0], vec![3.0, 0.0], vec![1.0, 1.0]], vec![vec![1.0, 1.0], vec![0.9, 1.2]], vec![0, 0]),
        // midpoint between two codes
        (vec![vec![2.0, 0.0], vec![0.0, 0.0]], vec![vec![1.0, 0.0]], vec![0]),
        // four codes on the axes, prompt at the origin
        (
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, -1.0], vec![-1.0, 0.0]],
            vec![vec![0.0, 0.0], vec![0.5, -0.5]],
            vec![0, 1],
        ),
        // all codes identical
        (vec![vec![0.25; 4]; 5], vec![vec![-1.0; 4]], vec![0]),
    ]
}

// ---------------------------------------------------------------------------
// k-means oracles

/// Optimal 1-D k-means cost by exhaustive search over contiguous partitions
/// of the sorted points.
pub fn optimal_1d(points: &[f64], k: usize) -> f64 {
    let mut xs = points.to_vec();
    xs.sort_by(f64::total_cmp);
    let cost = |a: usize, b: usize| -> f64 {
        let s = &xs[a..b];
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - mean).powi(2)).sum()
    };
    fn go(i: usize, k: usize, n: usize, cost: &dyn Fn(usize, usize) -> f64) -> f64 {
        if k == 1 {
            return cost(i, n);
        }
        (i + 1..=n - (k - 1)).map(|j| cost(i, j) + go(j, k - 1, n, cost)).fold(f64::INFINITY, f64::min)
    }
    go(0, k, xs.len(), &cost)
}

pub fn crafted_1d() -> Vec<(Vec<f64>, usize)> {
    vec![
        (vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0], 2),
        (vec![-5.0, -4.0, 0.0, 4.0, 5.0], 3),
        (vec![1.0, 1.5, 2.0, 20.0, 20.5, 40.0, 41.0, 42.0], 3),
        (vec![3.0, 3.0, 3.0, 7.0], 2),
        (vec![-100.0, -99.0, 0.0, 1.0, 100.0, 101.0, 200.0], 4),
    ]
}

/// Worst gap between Lloyd's WCSS and the exhaustive optimum on the crafted
/// 1-D instances.
pub fn kmeans_1d_gap() -> f64 {
    crafted_1d()
        .into_iter()
        .map(|(xs, k)| {
            let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let res = lloyd_kmeans(&Points::from_rows(&rows).unwrap(), &KMeansConfig::new(k, 0)).unwrap();
            (res.wcss.last().unwrap() - optimal_1d(&xs, k)).abs()
        })
        .fold(0.0, f64::max)
}

/// Random instances whose WCSS history ever increases.
pub fn kmeans_monotonicity_violations(instances: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for i in 0..instances {
        let n = rng.random_range(8..200);
        let d = rng.random_range(1..6);
        let k = rng.random_range(2..8);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = Points::new(data, d).unwrap();
        let res = lloyd_kmeans(&p, &KMeansConfig::new(k, i as u64)).unwrap();
        if res.wcss.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-12) {
            bad += 1;
        }
    }
    bad
}

// ---------------------------------------------------------------------------
// gradient contract on the micro-model

pub fn micro_model(seed: u64) -> VqPromptModel<f64> {
    let config = ModelConfig {
        vocab_size: 20,
        d_model: 8,
        heads: 2,
        ff_hidden: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        prompt_len: 2,
        prompt_layers: 1,
        max_positions: 16,
        share_embeddings: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = VqPromptModel::new(config, &mut rng).unwrap();
    m.codebook = Some(Codebook::random_normal(4, 8, 0.5, &mut rng).unwrap());
    m.set_lm_frozen(true);
    m
}

pub fn micro_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seq = |n: usize| (0..n).map(|_| rng.random_range(4..20)).collect::<Vec<usize>>();
    let src = vec![seq(5), seq(3), seq(4)];
    let tgt = vec![seq(4), seq(6), seq(2)];
    Batch::new(&src, &tgt).unwrap()
}

#[derive(Debug)]
pub struct GradientContract {
    /// Finite differences vs. analytic gradient of the fixed-index objective.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Straight-through gradients vs. the fixed-index objective's gradients.
    pub ste_gap: f64,
    /// Parameters with a nonzero gradient from the codebook term alone.
    pub codebook_term_reaches: Vec<String>,
    /// Parameters with a nonzero gradient from the commitment term alone.
    pub commitment_term_reaches: Vec<String>,
    /// LM parameters given a gradient even though they are frozen.
    pub lm_with_gradient: Vec<String>,
    /// Largest finite-difference slope of the loss along an LM coordinate.
    pub lm_sensitivity: f64,
}

fn nonzero(grads: &vqprompt::numerics::Gradients<f64>) -> Vec<String> {
    grads
        .iter()
        .filter(|(_, t)| t.data().iter().any(|&x| x != 0.0))
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Checks the straight-through objective `J_ml + (codebook + beta *
/// commitment) / B` on the micro-model.
///
/// The straight-through forward value does not depend on `r`, so finite
/// differences are taken on an objective with the same gradient by
/// construction: indices are held fixed, the LM sees `r + (q0 - r0)`, the
/// codebook term compares a constant `r0` with the live codes, and the
/// commitment term compares the live `r` with constant codes `q0`. The
/// analytic straight-through gradient is compared with this objective's
/// gradient, which is in turn checked against central differences.
pub fn gradient_contract(seed: u64, beta: f64) -> GradientContract {
    let base = micro_model(seed);
    let batch = micro_batch(seed);

    let mut m = base.clone();
    let mut g = Graph::new();
    let lv = total_loss(&mut m, &mut g, &batch, PromptSource::Quantized { track_usage: false }, beta).unwrap();
    let ste = g.backward(lv.j_total).unwrap();
    let idx = lv.indices.clone().unwrap();
    let r0 = g.value(lv.r.unwrap()).clone();
    let q0 = {
        let cb = base.codebook.as_ref().unwrap();
        let rows: Vec<f64> = idx.iter().flat_map(|&k| cb.code(k).to_vec()).collect();
        Tensor::new(r0.shape().to_vec(), rows).unwrap()
    };
    let shift = Tensor::new(
        r0.shape().to_vec(),
        q0.data().iter().zip(r0.data()).map(|(q, r)| q - r).collect(),
    )
    .unwrap();

    let (_, _, vq) = m.prompt(&mut g, &batch, PromptSource::Quantized { track_usage: false }).unwrap();
    let vq = vq.unwrap();
    let codebook_term_reaches = nonzero(&g.backward(vq.codebook_term).unwrap());
    let commitment_term_reaches = nonzero(&g.backward(vq.commitment_term).unwrap());
    let lm_with_gradient: Vec<String> = ste.iter().filter(|(n, _)| n.starts_with("lm.")).map(|(n, _)| n.to_string()).collect();

    let b = batch.size as f64;
    let fixed = |s: &VqPromptModel<f64>, g: &mut Graph<f64>| -> vqprompt::Result<Var> {
        let r = s.encode_prompt_continuous(g, &batch)?;
        let c = g.leaf(shift.clone())?;
        let p = g.add(r, c)?;
        let logits = s.glm_forward(g, Some(p), &batch)?;
        let j_ml = ml_loss(g, logits, &batch)?;
        let table = g.param(&s.codebook.as_ref().unwrap().codes)?;
        let q = g.embedding(table, &idx)?;
        let q = g.reshape(q, r0.shape())?;
        let r_const = g.leaf(r0.clone())?;
        let q_const = g.leaf(q0.clone())?;
        let cb = g.sq_dist(r_const, q)?;
        let cm = g.sq_dist(r, q_const)?;
        let cm = g.scale(cm, beta)?;
        let vq = g.add(cb, cm)?;
        let vq = g.scale(vq, 1.0 / b)?;
        g.add(j_ml, vq)
    };

    let mut g2 = Graph::new();
    let root = fixed(&base, &mut g2).unwrap();
    let surrogate = g2.backward(root).unwrap();
    let mut ste_gap: f64 = 0.0;
    for p in base.params().filter(|p| p.trainable) {
        let a = ste.param_or_zeros(p);
        let s = surrogate.param_or_zeros(p);
        for (x, y) in a.data().iter().zip(s.data()) {
            ste_gap = ste_gap.max((x - y).abs() / 1f64.max(x.abs()));
        }
    }

    let report = finite_difference_check(
        &base,
        fixed,
        GradCheckOptions {
            step: 1e-6,
            coords_per_param: usize::MAX,
            seed,
        },
    )
    .unwrap();

    let mut lm_sensitivity: f64 = 0.0;
    for name in base.params().filter(|p| p.name.starts_with("lm.")).map(|p| p.name.clone()).take(6).collect::<Vec<_>>() {
        let eval = |delta: f64| {
            let mut s = base.clone();
            let p = s.store.by_name_mut(&name).unwrap();
            p.tensor.data_mut()[1] += delta;
            let mut g = Graph::new();
            let root = fixed(&s, &mut g).unwrap();
            g.value(root).item()
        };
        let h = 1e-5;
        lm_sensitivity = lm_sensitivity.max(((eval(h) - eval(-h)) / (2.0 * h)).abs());
    }

    GradientContract {
        max_rel_error: report.max_rel_error,
        coords_checked: report.coords_checked,
        ste_gap,
        codebook_term_reaches,
        commitment_term_reaches,
        lm_with_gradient,
        lm_sensitivity,
    }
}

// ---------------------------------------------------------------------------
// desk-scale pipeline

pub struct Desk {
    pub cfg: RunConfig,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
    pub vocab: Vocabulary,
    pub lm: VqPromptModel<f32>,
    pub pretrain: PretrainReport,
    pub held_out_accuracy: f64,
}

/// Default corpus and a pretrained LM, all from `seed`.
pub fn desk(seed: u64) -> Desk {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let (_, train, val, test, vocab) = build_corpus(&cfg, &default_rules(), &default_fillers()).unwrap();
    let (mut lm, pretrain) = pretrain_model::<f32>(&cfg, &train, &vocab).unwrap();
    let held_out_accuracy = held_out_accuracy(&cfg, &mut lm, &val, &vocab).unwrap();
    Desk {
        cfg,
        train,
        val,
        test,
        vocab,
        lm,
        pretrain,
        held_out_accuracy,
    }
}
