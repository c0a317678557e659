use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Toggles};
use super::dataset::StepSource;
use crate::error::{Error, Result};
use crate::intention::IntentionVocabulary;
use crate::nanomodel::checkpoint::{Checkpoint, RngState};
use crate::nanomodel::{masked_cross_entropy, AdamState, Gradients, Model};
use crate::sequence::{assemble_training_sequence, nll_decomposition, LossWeights, TrainingSequence};

/// Batch means at one logged step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    /// Weighted objective that was optimised.
    pub loss: f64,
    pub action_nll: f64,
    pub intention_nll: f64,
    pub env_nll: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    pub rng: ChaCha8Rng,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: RngState::capture(&self.rng),
            meta,
        }
    }
}

/// Loss, per-segment NLL and gradient for one sequence. Only the prefix up to
/// the last supervised target is run.
pub fn sequence_gradient(
    model: &Model,
    seq: &TrainingSequence,
    weights: &LossWeights,
    grads: &mut Gradients,
) -> Result<(f64, crate::sequence::NllBreakdown)> {
    let len = seq.loss_mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1);
    let input = seq.prefix_input(len);
    let out = model.forward(&input)?;
    let v = model.config.vocab_size;
    let w = seq.target_weights(weights);
    let (loss, dlogits) = masked_cross_entropy(&out.logits, v, &seq.token_ids[..len], &w[..len])?;
    let nll = nll_decomposition(&out.logits, v, seq)?;
    model.backward(&input, &out.cache, &dlogits, grads)?;
    Ok((loss, nll))
}

fn meta(cfg: &ExperimentConfig, toggles: &Toggles, seed: u64, step: usize) -> serde_json::Value {
    serde_json::json!({
        "run_id": cfg.run_id,
        "config_digest": cfg.digest(),
        "seed": seed,
        "step": step,
        "intention": toggles.intention,
        "env": toggles.env,
    })
}

/// Deterministic training run. `toggles.pruning` is ignored here.
pub fn train(
    cfg: &ExperimentConfig,
    toggles: &Toggles,
    seed: u64,
    data: &dyn StepSource,
    vocab: &IntentionVocabulary,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.header().check_against(cfg, vocab)?;
    if data.is_empty() {
        return Err(Error::data("training data is empty"));
    }
    let space = cfg.token_space(vocab);
    let mut model = Model::init(cfg.model_config(vocab), seed)?;
    let mut opt = AdamState::new(model.n_params());
    let adam = cfg.train.adam();
    let weights = toggles.weights(&cfg.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut curve = Vec::new();
    let b = cfg.train.batch_size;

    for step in 0..cfg.train.steps {
        let mut grads = Gradients::zeros(model.n_params());
        let mut sums = [0.0f64; 4];
        for _ in 0..b {
            let i = rng.gen_range(0..data.len());
            let seq = assemble_training_sequence(&data.step(i)?, &cfg.layout, &space, vocab, cfg.model.visual_patch_size)?
                .with_supervision(toggles.intention, toggles.env);
            let (loss, nll) = sequence_gradient(&model, &seq, &weights, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss {loss} at step {step}")));
            }
            sums[0] += loss;
            sums[1] += nll.action;
            sums[2] += nll.intention;
            sums[3] += nll.env;
        }
        grads.scale(1.0 / b as f64);
        let lr = cfg.train.lr_at(step);
        let log = cfg.train.log_every > 0 && (step % cfg.train.log_every == 0 || step + 1 == cfg.train.steps);
        let grad_norm = if log { grads.norm() } else { f64::NAN };
        opt.step(&mut model.params, &grads, &adam, lr)
            .map_err(|e| Error::Training(format!("step {step}: {e}")))?;
        if log {
            curve.push(CurvePoint {
                step,
                lr,
                loss: sums[0] / b as f64,
                action_nll: sums[1] / b as f64,
                intention_nll: sums[2] / b as f64,
                env_nll: sums[3] / b as f64,
                grad_norm,
            });
        }
        if let Some(dir) = checkpoint_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 {
                let ck = Checkpoint {
                    model: model.clone(),
                    optimizer: Some(opt.clone()),
                    rng: RngState::capture(&rng),
                    meta: meta(cfg, toggles, seed, step + 1),
                };
                ck.save(&dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    let out = TrainOutcome {
        model,
        optimizer: opt,
        rng,
        curve,
    };
    if let Some(dir) = checkpoint_dir {
        out.checkpoint(meta(cfg, toggles, seed, cfg.train.steps)).save(&dir.join("final.ckpt"))?;
    }
    Ok(out)
}
