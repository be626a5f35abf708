use super::*;
use crate::numerics::{AdamConfig, Adam};
use crate::text::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn micro(prompt_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
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

fn model(prompt_len: usize, seed: u64) -> VqPromptModel<f64> {
    VqPromptModel::new(micro(prompt_len), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn batch() -> Batch {
    Batch::new(&[vec![4, 5, 6], vec![7, 8]], &[vec![9, 10], vec![11, 4, 5]]).unwrap()
}

#[test]
fn batch_framing() {
    let b = batch();
    assert_eq!(b.src_len, 4);
    assert_eq!(&b.src[..4], &[4, 5, 6, EOS]);
    assert_eq!(&b.src[4..], &[7, 8, EOS, PAD]);
    assert_eq!(&b.src_valid[4..], &[true, true, true, false]);
    assert_eq!(&b.tgt_in[..4], &[BOS, 9, 10, PAD]);
    assert_eq!(&b.tgt_out[..4], &[9, 10, EOS, PAD]);
    assert_eq!(&b.tgt_valid[4..], &[true; 4]);
}

#[test]
fn embed_rows_match_table() {
    let m = model(2, 0);
    let mut g = Graph::new();
    let e = m.embed(&mut g, &[PAD, 5]).unwrap();
    let table = &m.store.by_name("lm.embed").unwrap().tensor;
    assert_eq!(g.value(e).row(0), table.row(PAD));
    assert_eq!(g.value(e).row(1), table.row(5));
    assert!(m.embed(&mut g, &[12]).is_err());
}

#[test]
fn prompt_shape_and_determinism() {
    let m = model(2, 1);
    let a = m.continuous_prompts(&[vec![4, 5, 6], vec![7]]).unwrap();
    assert_eq!(a.shape(), &[4, 8]);
    let b = m.continuous_prompts(&[vec![4, 5, 6], vec![7]]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn desk_prompt_shape() {
    let cfg = ModelConfig::desk(30);
    let m = VqPromptModel::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let r = m.continuous_prompts(&[vec![4, 5, 6]]).unwrap();
    assert_eq!(r.shape(), &[4, 64]);
}

#[test]
fn prompt_encoder_is_order_sensitive() {
    let m = model(2, 2);
    let a = m.continuous_prompts(&[vec![4, 5, 6]]).unwrap();
    let b = m.continuous_prompts(&[vec![6, 5, 4]]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn padding_does_not_change_prompts() {
    let m = model(2, 3);
    let alone = m.continuous_prompts(&[vec![7]]).unwrap();
    let padded = m.continuous_prompts(&[vec![7], vec![4, 5, 6, 8]]).unwrap();
    for (a, b) in alone.data().iter().zip(&padded.data()[..alone.numel()]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn decoder_is_causal() {
    let mut m = model(2, 4);
    let logits = |m: &mut VqPromptModel<f64>, tgt: Vec<usize>| {
        let b = Batch::new(&[vec![4, 5]], &[tgt]).unwrap();
        let mut g = Graph::new();
        let f = m.forward(&mut g, &b, PromptSource::Continuous).unwrap();
        g.value(f.logits).clone()
    };
    let a = logits(&mut m, vec![6, 7, 8, 9]);
    // changing target token 2 alters decoder input position 3 onward
    let b = logits(&mut m, vec![6, 7, 10, 9]);
    let v = 12;
    assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
    assert_ne!(&a.data()[3 * v..], &b.data()[3 * v..]);
}

#[test]
fn frozen_lm_gets_no_gradient_but_prompt_does() {
    let mut m = model(2, 5);
    m.set_lm_frozen(true);
    let b = batch();
    let mut g = Graph::new();
    let r = m.encode_prompt_continuous(&mut g, &b).unwrap();
    let p = g.variable(g.value(r).clone()).unwrap();
    let logits = m.glm_forward(&mut g, Some(p), &b).unwrap();
    let loss = g.cross_entropy(logits, &b.tgt_out, &b.tgt_valid).unwrap();
    let grads = g.backward(loss).unwrap();
    for prm in m.store.iter().filter(|p| p.name.starts_with(LM_PREFIX)) {
        assert!(grads.param(&prm.name).is_none());
        assert!(grads.param_or_zeros(prm).data().iter().all(|&x| x == 0.0));
    }
    assert!(grads.wrt(p).unwrap().data().iter().any(|&x| x != 0.0));
}

#[test]
fn different_prompts_change_logits() {
    let m = model(2, 6);
    let b = batch();
    let run = |fill: f64| {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_f64(&[4, 8], &[fill; 32]).unwrap()).unwrap();
        let l = m.glm_forward(&mut g, Some(p), &b).unwrap();
        g.value(l).clone()
    };
    assert_ne!(run(0.5), run(-0.5));
}

#[test]
fn prompt_width_mismatch_is_an_error() {
    let m = model(2, 7);
    let b = batch();
    let mut g = Graph::new();
    let p = g.leaf(Tensor::zeros(&[4, 5])).unwrap();
    assert!(matches!(m.glm_forward(&mut g, Some(p), &b), Err(Error::Shape { .. })));
}

#[test]
fn zero_prompt_model_is_plain_seq2seq() {
    let mut m = model(0, 8);
    assert_eq!(m.default_prompt_source(), PromptSource::None);
    assert!(!m.store.iter().any(|p| p.name.starts_with(PROMPT_PREFIX)));
    let b = batch();
    let mut g = Graph::new();
    let f = m.forward(&mut g, &b, PromptSource::None).unwrap();
    assert_eq!(g.shape(f.logits), &[2 * b.tgt_len, 12]);
    assert!(m.encode_prompt_continuous(&mut g, &b).is_err());
}

#[test]
fn frozen_parameters_survive_optimizer_steps() {
    let mut m = model(2, 9);
    m.set_lm_frozen(true);
    let before = m.lm_hash();
    let prompt_before = m.store.by_name("prompt.proj.w").unwrap().tensor.clone();
    let b = batch();
    let mut adam = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() });
    for _ in 0..3 {
        let mut g = Graph::new();
        let f = m.forward(&mut g, &b, PromptSource::Continuous).unwrap();
        let loss = g.cross_entropy(f.logits, &b.tgt_out, &b.tgt_valid).unwrap();
        let grads = g.backward(loss).unwrap();
        adam.step(m.params_mut(), &grads).unwrap();
    }
    assert_eq!(before, m.lm_hash());
    assert_ne!(prompt_before, m.store.by_name("prompt.proj.w").unwrap().tensor);
}

#[test]
fn untrained_generation_is_deterministic() {
    let m = model(2, 10);
    let cfg = DecodingConfig { max_output_len: 6, ..DecodingConfig::default() };
    let src = vec![vec![4, 5, 6], vec![7, 8]];
    let a = m.generate(&src, &cfg).unwrap();
    let b = m.generate(&src, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|g| g.ids.len() <= 6));
}

#[test]
fn beam_of_one_equals_greedy() {
    for seed in 0..5 {
        let m = model(2, 20 + seed);
        let src = vec![vec![4, 5, 6], vec![7, 8], vec![9]];
        let greedy = m
            .generate(&src, &DecodingConfig { max_output_len: 8, ..DecodingConfig::default() })
            .unwrap();
        let beam = m
            .generate(
                &src,
                &DecodingConfig {
                    mode: DecodeMode::Beam,
                    beam_width: 1,
                    max_output_len: 8,
                    chunk: 64,
                },
            )
            .unwrap();
        assert_eq!(greedy, beam);
    }
}

#[test]
fn wider_beam_scores_at_least_greedy() {
    let m = model(2, 30);
    let src = vec![vec![4, 5, 6]];
    let cfg = |mode, beam_width| DecodingConfig { mode, beam_width, max_output_len: 5, chunk: 8 };
    let g = m.generate(&src, &cfg(DecodeMode::Greedy, 1)).unwrap();
    let b = m.generate(&src, &cfg(DecodeMode::Beam, 4)).unwrap();
    let score = |ids: &[usize]| {
        let mut tgt = ids.to_vec();
        let finished = tgt.len() < 5;
        let bt = Batch::new(&src, &[tgt.clone()]).unwrap();
        let mut gr = Graph::new();
        let pr = m.encode_prompt_continuous(&mut gr, &bt).unwrap();
        let l = m.glm_forward(&mut gr, Some(pr), &bt).unwrap();
        let l = gr.value(l);
        if !finished {
            tgt.pop();
        }
        let mut s = 0.0;
        for (t, &tok) in bt.tgt_out.iter().enumerate().take(if finished { ids.len() + 1 } else { ids.len() }) {
            let row = l.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            s += row[tok] - lse;
        }
        s
    };
    assert!(score(&b[0].ids) >= score(&g[0].ids) - 1e-9);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = model(2, 11);
    m.set_lm_frozen(true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    m.codebook = Some(Codebook::random_normal(4, 8, 1.0, &mut rng).unwrap());
    m.codebook.as_mut().unwrap().record(&[1, 2, 1]);
    let b = batch();
    let mut adam = Adam::new(AdamConfig::default());
    let mut g = Graph::new();
    let f = m.forward(&mut g, &b, PromptSource::Quantized { track_usage: true }).unwrap();
    let loss = g.cross_entropy(f.logits, &b.tgt_out, &b.tgt_valid).unwrap();
    let grads = g.backward(loss).unwrap();
    adam.step(m.params_mut(), &grads).unwrap();

    let vocab = Vocabulary::from_tokens((0..8).map(|i| format!("w{i}")));
    let ck = Checkpoint {
        model: m,
        vocab,
        optimizer: Some(adam.state().clone()),
        step: 1,
        meta: serde_json::json!({"seed": 3}),
    };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert!(back.model.lm_frozen());
}

#[test]
fn corrupt_checkpoints_name_the_section() {
    let m = model(2, 12);
    let ck = Checkpoint {
        model: m,
        vocab: Vocabulary::from_tokens((0..8).map(|i| format!("w{i}"))),
        optimizer: None,
        step: 0,
        meta: serde_json::Value::Null,
    };
    let bytes = ck.to_bytes().unwrap();
    let section = |bytes: &[u8]| match Checkpoint::<f64>::from_bytes(bytes) {
        Err(Error::Checkpoint { section, .. }) => section,
        other => panic!("expected corrupt checkpoint, got {other:?}"),
    };
    assert_eq!(section(b"garbage"), "magic");
    assert_eq!(section(&bytes[..bytes.len() - 3]), "arrays");
    let mut bad = bytes.clone();
    bad[20] = b'#';
    assert_eq!(section(&bad), "header");
    assert_eq!(
        match Checkpoint::<f32>::from_bytes(&bytes) {
            Err(Error::Checkpoint { section, .. }) => section,
            _ => String::new(),
        },
        "header"
    );
}
