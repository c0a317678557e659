use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backward::masked_cross_entropy;
use super::*;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        visual_patch_size: 2,
        mlp_ratio: 4,
    }
}

/// Mixed token/patch input: tokens, then 4 patches, then tokens.
fn mixed_input(seed: u64, cfg: &ModelConfig) -> (ModelInput, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots = Vec::new();
    let mut tokens = Vec::new();
    for _ in 0..3 {
        let t = rng.gen_range(0..cfg.vocab_size as u32);
        slots.push(Slot::Token(t));
        tokens.push(t);
    }
    for k in 0..4 {
        slots.push(Slot::Patch(k));
        tokens.push(0);
    }
    for _ in 0..4 {
        let t = rng.gen_range(0..cfg.vocab_size as u32);
        slots.push(Slot::Token(t));
        tokens.push(t);
    }
    let patches = (0..4 * cfg.patch_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let positions = (0..slots.len()).collect();
    (ModelInput { slots, positions, patches }, tokens)
}

fn loss(model: &Model, input: &ModelInput, tokens: &[u32], weights: &[f64]) -> f64 {
    let out = model.forward(input).unwrap();
    masked_cross_entropy(&out.logits, model.config.vocab_size, tokens, weights).unwrap().0
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = small();
    let mut model = Model::init(cfg, 1).unwrap();
    // perturb gains/biases away from their init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in model.params.iter_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let (input, tokens) = mixed_input(3, &cfg);
    let weights: Vec<f64> = (0..tokens.len()).map(|p| if p >= 7 { 1.0 } else if p == 3 { 0.0 } else { 0.5 }).collect();
    let (_, grads) = model.loss_and_gradient(&input, &tokens, &weights).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let i = rng.gen_range(0..model.n_params());
        let orig = model.params[i];
        model.params[i] = orig + h;
        let lp = loss(&model, &input, &tokens, &weights);
        model.params[i] = orig - h;
        let lm = loss(&model, &input, &tokens, &weights);
        model.params[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.0[i];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn zero_weights_give_uniform_logits() {
    let cfg = small();
    let model = Model::from_params(cfg, vec![0.0; cfg.n_params()]).unwrap();
    let (input, _) = mixed_input(4, &cfg);
    let out = model.forward(&input).unwrap();
    for row in out.logits.chunks(cfg.vocab_size) {
        assert!(row.iter().all(|&x| x == row[0]));
    }
}

#[test]
fn causal() {
    let cfg = small();
    let model = Model::init(cfg, 5).unwrap();
    let (input, _) = mixed_input(6, &cfg);
    let base = model.forward(&input).unwrap().logits;
    let mut changed = input.clone();
    let last = changed.len() - 1;
    changed.slots[last] = Slot::Token(((match changed.slots[last] {
        Slot::Token(t) => t,
        Slot::Patch(_) => 0,
    }) + 1)
        % cfg.vocab_size as u32);
    let other = model.forward(&changed).unwrap().logits;
    let v = cfg.vocab_size;
    for i in 0..last * v {
        assert!((base[i] - other[i]).abs() <= 1e-12);
    }
    assert!((last * v..(last + 1) * v).any(|i| base[i] != other[i]));
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small();
    let model = Model::init(cfg, 7).unwrap();
    let (input, _) = mixed_input(8, &cfg);
    let out = model.forward(&input).unwrap();
    let n = input.len();
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            let a = out.cache.attention(l, h);
            for t in 0..n {
                let row = &a[t * n..(t + 1) * n];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[t + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }
}

#[test]
fn unmasked_targets_do_not_affect_gradient() {
    let cfg = small();
    let model = Model::init(cfg, 9).unwrap();
    let (input, tokens) = mixed_input(10, &cfg);
    let weights: Vec<f64> = (0..tokens.len()).map(|p| if p >= 8 { 1.0 } else { 0.0 }).collect();
    let (_, g1) = model.loss_and_gradient(&input, &tokens, &weights).unwrap();
    let mut t2 = tokens.clone();
    for t in t2.iter_mut().take(8) {
        *t = (*t + 3) % cfg.vocab_size as u32;
    }
    let (_, g2) = model.loss_and_gradient(&input, &t2, &weights).unwrap();
    assert_eq!(g1, g2);
}

#[test]
fn uniform_logit_gradient_is_softmax_minus_onehot() {
    let cfg = small();
    let mut params = vec![0.0; cfg.n_params()];
    let lay = ParamLayout::new(&cfg);
    // keep the residual nonzero so the head weight gradient is informative
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in &mut params[lay.tok_emb..lay.tok_emb + cfg.vocab_size * cfg.embed_dim] {
        *p = rng.gen_range(-1.0..1.0);
    }
    params[lay.lnf_g..lay.lnf_g + cfg.embed_dim].fill(1.0);
    let model = Model::from_params(cfg, params).unwrap();
    let tokens = [2u32, 5, 7];
    let input = ModelInput {
        slots: tokens.iter().map(|&t| Slot::Token(t)).collect(),
        positions: vec![0, 1, 2],
        patches: vec![],
    };
    let weights = [0.0, 1.0, 1.0];
    let (loss, g) = model.loss_and_gradient(&input, &tokens, &weights).unwrap();
    let v = cfg.vocab_size;
    assert!((loss - 2.0 * (v as f64).ln()).abs() < 1e-12);
    // head bias gradient: sum over supervised rows of (1/V - onehot)
    for j in 0..v {
        let hits = tokens[1..].iter().filter(|&&t| t as usize == j).count() as f64;
        let want = 2.0 / v as f64 - hits;
        assert!((g.0[lay.head_b + j] - want).abs() < 1e-12);
    }
}

#[test]
fn parameter_count_matches_layout() {
    for cfg in [small(), ModelConfig::default()] {
        let m = Model::init(cfg, 0).unwrap();
        assert_eq!(m.n_params(), cfg.n_params());
        assert_eq!(ParamLayout::new(&cfg).total, cfg.n_params());
    }
}

#[test]
fn overlong_input_is_config_error() {
    let cfg = small();
    let model = Model::init(cfg, 0).unwrap();
    let n = cfg.max_seq_len + 1;
    let input = ModelInput {
        slots: vec![Slot::Token(1); n],
        positions: (0..n).collect(),
        patches: vec![],
    };
    assert!(matches!(model.forward(&input), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let cfg = small();
        let mut model = Model::init(cfg, 12).unwrap();
        let mut opt = AdamState::new(model.n_params());
        let acfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        let (input, tokens) = mixed_input(13, &cfg);
        let weights = vec![1.0; tokens.len()];
        let mut losses = Vec::new();
        for _ in 0..100 {
            let (l, g) = model.loss_and_gradient(&input, &tokens, &weights).unwrap();
            opt.step(&mut model.params, &g, &acfg, acfg.lr).unwrap();
            losses.push(l);
        }
        (model.params, losses)
    };
    let (p1, l1) = run();
    let (p2, l2) = run();
    assert_eq!(p1, p2);
    assert_eq!(l1, l2);
    assert!(l1[99] < l1[0] * 0.5, "loss {} -> {}", l1[0], l1[99]);
}

#[test]
fn forward_last_matches_forward() {
    let cfg = small();
    let model = Model::init(cfg, 14).unwrap();
    let (input, _) = mixed_input(15, &cfg);
    let full = model.forward(&input).unwrap();
    let last = model.forward_last(&input).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(&full.logits[(input.len() - 1) * v..], &last.last_logits[..]);
    assert_eq!(full.visual_embeddings, last.visual_embeddings);
    for e in &full.visual_embeddings {
        assert!((e.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
