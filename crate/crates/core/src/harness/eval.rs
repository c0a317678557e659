use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::frame_seed;
use super::stats::wilson;
use crate::error::Result;
use crate::gridworld::{expert_action, generate_episode, instruction_text, render, step, Action, TaskType};
use crate::intention::IntentionVocabulary;
use crate::nanomodel::{flop_proxy, Model};
use crate::pruning::{pruned_forward, PruneConfig};
use crate::sequence::{greedy_action, observation_input};

pub enum Policy<'a> {
    Expert,
    /// Uniform over the six actions.
    Random(u64),
    Model { model: &'a Model, prune: Option<PruneConfig> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub task: TaskType,
    pub success: bool,
    pub steps: u32,
    pub budget: u32,
    pub actions: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub sr_ci_low: f64,
    pub sr_ci_high: f64,
    pub mean_steps: f64,
    pub mean_steps_success: f64,
    pub decisions: usize,
    /// Mean over decisions; 1.0 without pruning.
    pub retained_fraction: f64,
    /// Mean per-decision proxy of the pass that produced the action.
    pub flops_per_decision: f64,
    pub visual_visual_flops: f64,
    /// Extra full pass spent computing connectivity scores.
    pub scoring_flops: f64,
    pub mean_alpha: f64,
    pub episodes: Vec<EpisodeResult>,
}

#[derive(Default)]
struct Acc {
    decisions: usize,
    retained: f64,
    flops: f64,
    vv: f64,
    scoring: f64,
    alpha: f64,
}

fn decide(policy: &Policy, cfg: &ExperimentConfig, vocab: &IntentionVocabulary, obs: Obs, rng: &mut ChaCha8Rng, acc: &mut Acc) -> Result<Action> {
    acc.decisions += 1;
    match policy {
        Policy::Expert => expert_action(obs.state, obs.task),
        Policy::Random(_) => Ok(Action::ALL[rng.gen_range(0..Action::ALL.len())]),
        Policy::Model { model, prune } => {
            let space = cfg.token_space(vocab);
            let (_, raster) = render(obs.state, obs.noise_seed, &cfg.env.render);
            let input = observation_input(obs.instruction, &raster, &cfg.layout, &space, cfg.model.visual_patch_size)?;
            let logits = match prune {
                None => {
                    let f = flop_proxy(&model.config, &input);
                    acc.retained += 1.0;
                    acc.flops += f.total() as f64;
                    acc.vv += f.visual_visual_attention as f64;
                    model.forward_last(&input)?.last_logits
                }
                Some(p) => {
                    let d = pruned_forward(model, &input, p)?;
                    let f = flop_proxy(&model.config, &d.reduced);
                    acc.retained += d.report.retained_fraction();
                    acc.flops += f.total() as f64;
                    acc.vv += f.visual_visual_attention as f64;
                    acc.scoring += flop_proxy(&model.config, &input).total() as f64;
                    acc.alpha += d.report.mean_score();
                    d.output.last_logits
                }
            };
            Action::from_id(greedy_action(&logits, &space))
        }
    }
}

struct Obs<'s> {
    state: &'s crate::gridworld::WorldState,
    task: &'s crate::gridworld::TaskDescriptor,
    instruction: &'s [u16],
    noise_seed: u64,
}

/// Rolls the policy out on `n_episodes` episodes with seeds from `seed_start`.
pub fn evaluate(policy: &Policy, cfg: &ExperimentConfig, vocab: &IntentionVocabulary, n_episodes: usize, seed_start: u64) -> Result<EvalSummary> {
    let mut acc = Acc::default();
    let mut episodes = Vec::with_capacity(n_episodes);
    let base_seed = match policy {
        Policy::Random(s) => *s,
        _ => 0,
    };
    for e in 0..n_episodes {
        let seed = seed_start + e as u64;
        let (mut state, task) = generate_episode(seed, &cfg.env)?;
        let instruction = instruction_text(&task, task.verbosity, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed ^ seed);
        let mut actions = Vec::new();
        let success = loop {
            let obs = Obs {
                state: &state,
                task: &task,
                instruction: &instruction,
                noise_seed: frame_seed(seed, state.steps),
            };
            let a = decide(policy, cfg, vocab, obs, &mut rng, &mut acc)?;
            actions.push(a.id());
            let out = step(&state, &task, a);
            state = out.state;
            if out.done {
                break out.success;
            }
        };
        episodes.push(EpisodeResult {
            seed,
            task: task.task_type,
            success,
            steps: state.steps,
            budget: task.budget,
            actions,
        });
    }
    Ok(summarise(episodes, &acc))
}

fn summarise(episodes: Vec<EpisodeResult>, acc: &Acc) -> EvalSummary {
    let n = episodes.len();
    let successes = episodes.iter().filter(|e| e.success).count();
    let (lo, hi) = wilson(successes, n);
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, c) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    };
    let d = acc.decisions.max(1) as f64;
    let is_model = acc.retained > 0.0;
    EvalSummary {
        n_episodes: n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        sr_ci_low: lo,
        sr_ci_high: hi,
        mean_steps: mean(&mut episodes.iter().map(|e| e.steps as f64)),
        mean_steps_success: mean(&mut episodes.iter().filter(|e| e.success).map(|e| e.steps as f64)),
        decisions: acc.decisions,
        retained_fraction: if is_model { acc.retained / d } else { 1.0 },
        flops_per_decision: acc.flops / d,
        visual_visual_flops: acc.vv / d,
        scoring_flops: acc.scoring / d,
        mean_alpha: acc.alpha / d,
        episodes,
    }
}
