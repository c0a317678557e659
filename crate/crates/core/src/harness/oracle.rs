//! Brute-force cross-checks run by the `oracle-check` command.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::eval::{evaluate, Policy};
use crate::error::Result;
use crate::gridworld::{expert_action, generate_episode, step, Action, EnvConfig, TaskType};
use crate::nanomodel::{flop_proxy, masked_cross_entropy, Model, ModelConfig, ModelInput, Slot};
use crate::pruning::{apply_pruning, connectivity_scores, top_k_retain, PruneConfig, Retain};
use crate::semantic_grid::{class, pool_semantic_map, ClassHierarchy, ClassId, PoolConfig, SemanticMap};
use crate::sequence::nll_decomposition;

#[derive(Debug, Clone, Serialize)]
pub struct OracleResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> OracleResult {
    OracleResult { name, passed, detail }
}

/// Picks the `k` best classes of one cell by repeated linear scans.
fn pool_cell_bruteforce(pixels: &[ClassId], k: usize, h: &ClassHierarchy) -> Vec<ClassId> {
    let mut counts = [0u32; 256];
    for &p in pixels {
        counts[p as usize] += 1;
    }
    let mut out = Vec::new();
    let mut used = [false; 256];
    for _ in 0..k {
        let mut best: Option<ClassId> = None;
        for c in 0..=255u8 {
            if counts[c as usize] == 0 || used[c as usize] {
                continue;
            }
            best = match best {
                None => Some(c),
                Some(b) => {
                    let (rc, rb) = (h.rank(c).unwrap(), h.rank(b).unwrap());
                    let better = rc > rb || (rc == rb && counts[c as usize] > counts[b as usize]);
                    Some(if better { c } else { b })
                }
            };
        }
        match best {
            Some(b) => {
                used[b as usize] = true;
                out.push(b);
            }
            None => out.push(h.pad_token_id()),
        }
    }
    out
}

pub fn pooling_oracle(n_maps: usize, seed: u64) -> Result<OracleResult> {
    let h = ClassHierarchy::tactical();
    let cfg = PoolConfig {
        grid_rows: 8,
        grid_cols: 8,
        k_per_cell: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..n_maps {
        let side = 32;
        let n_classes = rng.gen_range(1..=class::COUNT as u8);
        let cells: Vec<ClassId> = (0..side * side).map(|_| rng.gen_range(0..n_classes)).collect();
        let map = SemanticMap::new(side, side, cells)?;
        let grid = pool_semantic_map(&map, &h, &cfg)?;
        for r in 0..8 {
            for c in 0..8 {
                let px: Vec<ClassId> = (0..4)
                    .flat_map(|y| (0..4).map(move |x| (x, y)))
                    .map(|(x, y)| map.get(c * 4 + x, r * 4 + y))
                    .collect();
                if grid.cell(r, c) != pool_cell_bruteforce(&px, 2, &h).as_slice() {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(result("pooling_vs_bruteforce", mismatches == 0, format!("{mismatches} mismatched cells over {n_maps} maps")))
}

fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn connectivity_oracle(n_sets: usize, seed: u64) -> Result<OracleResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut rank_ok = true;
    for _ in 0..n_sets {
        let n = rng.gen_range(1..=32);
        let z = unit_vectors(&mut rng, n, 8);
        let tau = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
        let got = connectivity_scores(&z, tau)?;
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..z[i].len() {
                    s += z[i][k] * z[j][k];
                }
            }
            let want = 1.0 / (1.0 + (-s / (n as f64 * tau)).exp());
            worst = worst.max((got[i] - want).abs());
        }
        let k = rng.gen_range(1..=n);
        let cfg = PruneConfig {
            temperature: tau,
            retain: Retain::Count(k),
        };
        let report = top_k_retain(&got, &cfg)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| got[b].partial_cmp(&got[a]).unwrap().then(a.cmp(&b)));
        let mut want: Vec<usize> = order[..k].to_vec();
        want.sort_unstable();
        rank_ok &= want == report.retained;
    }
    Ok(result(
        "connectivity_vs_double_loop",
        worst <= 1e-12 && rank_ok,
        format!("max abs error {worst:e}, top-k agrees with full sort: {rank_ok}"),
    ))
}

fn random_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        vocab_size: 13,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        visual_patch_size: 2,
        mlp_ratio: 4,
    };
    let mut m = Model::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in m.params.iter_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    Ok(m)
}

fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n_tok: usize, n_vis: usize) -> (ModelInput, Vec<u32>) {
    let mut slots = Vec::new();
    let mut tokens = Vec::new();
    for t in 0..n_tok + n_vis {
        if t >= 2 && t < 2 + n_vis {
            slots.push(Slot::Patch(t - 2));
            tokens.push(0);
        } else {
            let id = rng.gen_range(0..cfg.vocab_size as u32);
            slots.push(Slot::Token(id));
            tokens.push(id);
        }
    }
    let patches = (0..n_vis * cfg.patch_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (
        ModelInput {
            positions: (0..slots.len()).collect(),
            slots,
            patches,
        },
        tokens,
    )
}

pub fn gradient_oracle(n_params: usize, seed: u64) -> Result<OracleResult> {
    let mut model = random_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let (input, tokens) = random_input(&mut rng, &model.config, 6, 6);
    let weights: Vec<f64> = (0..tokens.len()).map(|p| if p >= 8 { 1.0 } else { 0.0 }).collect();
    let (_, g) = model.loss_and_gradient(&input, &tokens, &weights)?;
    let loss = |m: &Model| -> Result<f64> {
        let out = m.forward(&input)?;
        Ok(masked_cross_entropy(&out.logits, m.config.vocab_size, &tokens, &weights)?.0)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..n_params {
        let i = rng.gen_range(0..model.n_params());
        let orig = model.params[i];
        model.params[i] = orig + h;
        let lp = loss(&model)?;
        model.params[i] = orig - h;
        let lm = loss(&model)?;
        model.params[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - g.0[i]).abs() / (fd.abs() + g.0[i].abs()).max(1e-6));
    }
    Ok(result("gradient_vs_finite_difference", worst < 1e-4, format!("max relative error {worst:e}")))
}

pub fn causality_oracle(n_trials: usize, seed: u64) -> Result<OracleResult> {
    let model = random_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let v = model.config.vocab_size;
    let mut worst: f64 = 0.0;
    for _ in 0..n_trials {
        let (input, _) = random_input(&mut rng, &model.config, 8, 4);
        let cut = rng.gen_range(1..input.len());
        let mut other = input.clone();
        let pd = model.config.patch_dim();
        for s in other.slots[cut..].iter_mut() {
            match s {
                Slot::Token(t) => *t = rng.gen_range(0..v as u32),
                Slot::Patch(j) => {
                    for x in &mut other.patches[*j * pd..(*j + 1) * pd] {
                        *x = rng.gen_range(-1.0..1.0);
                    }
                }
            }
        }
        let a = model.forward(&input)?.logits;
        let b = model.forward(&other)?.logits;
        for i in 0..cut * v {
            worst = worst.max((a[i] - b[i]).abs());
        }
    }
    Ok(result("causal_prefix", worst <= 1e-12, format!("max prefix change {worst:e}")))
}

pub fn nll_partition_oracle(n_trials: usize, seed: u64) -> Result<OracleResult> {
    use crate::sequence::{SegmentTag, TrainingSequence};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ok = true;
    let v = 11;
    for _ in 0..n_trials {
        let tags: Vec<SegmentTag> = [
            (SegmentTag::Instruction, 3),
            (SegmentTag::Visual, 4),
            (SegmentTag::Marker, 1),
            (SegmentTag::Action, 1),
            (SegmentTag::Intention, 3),
            (SegmentTag::Env, 6),
        ]
        .iter()
        .flat_map(|&(t, n)| std::iter::repeat_n(t, n))
        .collect();
        let n = tags.len();
        let seq = TrainingSequence {
            token_ids: (0..n).map(|_| rng.gen_range(0..v as u32)).collect(),
            loss_mask: tags
                .iter()
                .map(|t| u8::from(matches!(t, SegmentTag::Action | SegmentTag::Intention | SegmentTag::Env)))
                .collect(),
            segment_tags: tags,
            patches: vec![],
        };
        let logits: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b = nll_decomposition(&logits, v, &seq)?;
        let w: Vec<f64> = seq.loss_mask.iter().map(|&m| m as f64).collect();
        let (total, _) = masked_cross_entropy(&logits, v, &seq.token_ids, &w)?;
        ok &= b.action + b.intention + b.env == b.total && (b.total - total).abs() < 1e-9;
    }
    Ok(result("nll_partition", ok, format!("{n_trials} random sequences")))
}

pub fn pruning_identity_oracle(n_trials: usize, seed: u64) -> Result<OracleResult> {
    let model = random_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let mut ok = true;
    for _ in 0..n_trials {
        let (input, _) = random_input(&mut rng, &model.config, 6, 8);
        let out = model.forward_last(&input)?;
        let scores = connectivity_scores(&out.visual_embeddings, 1.0)?;
        let report = top_k_retain(&scores, &PruneConfig::fraction(1.0))?;
        let reduced = apply_pruning(&input, &report)?;
        ok &= model.forward_last(&reduced)?.last_logits == out.last_logits;
    }
    Ok(result("retain_all_identity", ok, format!("{n_trials} random inputs")))
}

pub fn flop_oracle(cfg: &ExperimentConfig) -> Result<OracleResult> {
    let vocab = super::intention_vocabulary();
    let mc = cfg.model_config(&vocab);
    let n_vis = cfg.layout.n_visual_tokens;
    let pre = cfg.layout.n_instruction_tokens;
    let make = |k: usize| {
        let mut slots: Vec<Slot> = (0..pre).map(|_| Slot::Token(0)).collect();
        slots.extend((0..k).map(Slot::Patch));
        slots.push(Slot::Token(2));
        ModelInput {
            positions: (0..slots.len()).collect(),
            slots,
            patches: vec![],
        }
    };
    let full = flop_proxy(&mc, &make(n_vis));
    let k = PruneConfig::fraction(0.25).k_for(n_vis)?;
    let quarter = flop_proxy(&mc, &make(k));
    // closed-form visual-visual pairs: m(m+1)/2 per layer
    let vv = |m: u64| mc.n_layers as u64 * m * (m + 1) / 2 * 2 * mc.embed_dim as u64;
    let exact = full.visual_visual_attention == vv(n_vis as u64) && quarter.visual_visual_attention == vv(k as u64);
    let ratio = quarter.visual_visual_attention as f64 / full.visual_visual_attention as f64;
    let total_ratio = full.total() as f64 / quarter.total() as f64;
    Ok(result(
        "flop_proxy",
        exact && (ratio - 0.0625).abs() < 0.01 && total_ratio >= 2.0,
        format!("visual-visual ratio {ratio:.4}, total speedup {total_ratio:.2}x"),
    ))
}

/// Shortest path lengths by an independent breadth-first search that expands
/// neighbours in a different order from the expert.
fn bfs_steps(state: &crate::gridworld::WorldState, goals: &[(usize, usize)]) -> Option<u32> {
    let n = state.size();
    let mut dist = vec![u32::MAX; n * n];
    let mut q = VecDeque::new();
    let start = state.agent();
    dist[start.0 * n + start.1] = 0;
    q.push_back(start);
    while let Some((r, c)) = q.pop_front() {
        if goals.contains(&(r, c)) {
            return Some(dist[r * n + c]);
        }
        let d = dist[r * n + c];
        let cand = [(r.wrapping_sub(1), c), (r, c + 1), (r + 1, c), (r, c.wrapping_sub(1))];
        for (nr, nc) in cand.into_iter().rev() {
            if nr < n && nc < n && state.at((nr, nc)).passable() && dist[nr * n + nc] == u32::MAX {
                dist[nr * n + nc] = d + 1;
                q.push_back((nr, nc));
            }
        }
    }
    None
}

pub fn expert_oracle(n_episodes: usize, env: &EnvConfig) -> Result<OracleResult> {
    let mut failures = 0;
    let mut suboptimal = 0;
    for seed in 0..n_episodes as u64 {
        let (mut s, task) = generate_episode(seed, env)?;
        let goals = if task.task_type == TaskType::EngageEnemyUsingCover {
            s.firing_cells(task.target)
        } else {
            vec![task.target]
        };
        let want = bfs_steps(&s, &goals).map(|d| d + u32::from(task.task_type == TaskType::EngageEnemyUsingCover));
        let success = loop {
            let a: Action = expert_action(&s, &task)?;
            let out = step(&s, &task, a);
            s = out.state;
            if out.done {
                break out.success;
            }
        };
        if !success {
            failures += 1;
        } else if Some(s.steps) != want {
            suboptimal += 1;
        }
    }
    Ok(result(
        "expert_vs_bfs",
        failures == 0 && suboptimal == 0,
        format!("{failures} failed and {suboptimal} non-shortest of {n_episodes} episodes"),
    ))
}

pub fn expert_eval_oracle(cfg: &ExperimentConfig, n: usize) -> Result<OracleResult> {
    let vocab = super::intention_vocabulary();
    let s = evaluate(&Policy::Expert, cfg, &vocab, n, cfg.eval.seed_start)?;
    Ok(result("expert_policy_sr", s.success_rate == 1.0, format!("SR {}", s.success_rate)))
}

pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<OracleResult>> {
    Ok(vec![
        pooling_oracle(100, 1)?,
        connectivity_oracle(100, 2)?,
        gradient_oracle(200, 3)?,
        causality_oracle(50, 4)?,
        nll_partition_oracle(50, 5)?,
        pruning_identity_oracle(50, 6)?,
        flop_oracle(cfg)?,
        expert_oracle(1000, &cfg.env)?,
        expert_eval_oracle(cfg, 100)?,
    ])
}
