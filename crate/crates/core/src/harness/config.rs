use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{EnvConfig, CELL_PX};
use crate::intention::IntentionVocabulary;
use crate::nanomodel::{AdamConfig, ModelConfig};
use crate::semantic_grid::PoolConfig;
use crate::sequence::{LayoutSpec, LossWeights, TokenSpace};

/// Model shape; vocabulary size and context length follow from the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub visual_patch_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            visual_patch_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup, then cosine decay to `lr * min_lr_frac`.
    pub warmup_steps: usize,
    pub min_lr_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainSection {
            steps: 2000,
            batch_size: 8,
            lr: adam.lr,
            warmup_steps: 100,
            min_lr_frac: 0.1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seed_start: u64,
    pub n_episodes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed_start: 0,
            n_episodes: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_episodes: usize,
    /// Disjoint from the training seeds by default.
    pub seed_start: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_episodes: 500,
            seed_start: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub fractions: Vec<f64>,
    pub temperature: f64,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            fractions: vec![1.0, 0.5, 0.25],
            temperature: 1.0,
        }
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub intention: bool,
    pub env: bool,
    pub pruning: bool,
    /// Retained visual fraction when `pruning` is on.
    pub prune_fraction: f64,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            intention: true,
            env: true,
            pruning: false,
            prune_fraction: 0.25,
        }
    }
}

impl Toggles {
    pub fn new(intention: bool, env: bool, pruning: bool) -> Self {
        Toggles {
            intention,
            env,
            pruning,
            ..Toggles::default()
        }
    }

    /// The six rows in table order.
    pub fn ablation_grid() -> [Toggles; 6] {
        [
            Toggles::new(false, false, false),
            Toggles::new(true, false, false),
            Toggles::new(false, true, false),
            Toggles::new(false, false, true),
            Toggles::new(true, true, false),
            Toggles::new(true, true, true),
        ]
    }

    pub fn label(&self) -> String {
        let mark = |on: bool, s: &str| if on { s.to_string() } else { "-".to_string() };
        format!("{}/{}/{}", mark(self.intention, "IA"), mark(self.env, "ESA"), mark(self.pruning, "Prune"))
    }

    /// Loss weights with disabled segments zeroed.
    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        LossWeights {
            action: base.action,
            intention: if self.intention { base.intention } else { 0.0 },
            env: if self.env { base.env } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Training seeds; each experiment repeats once per seed.
    pub seeds: Vec<u64>,
    pub model: ModelSection,
    pub layout: LayoutSpec,
    pub pool: PoolConfig,
    pub env: EnvConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub prune: PruneSection,
    pub ablation: Toggles,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            run_id: "default".into(),
            seeds: vec![0, 1, 2],
            model: ModelSection::default(),
            layout: LayoutSpec::default(),
            pool: PoolConfig::default(),
            env: EnvConfig::default(),
            loss: LossWeights::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            prune: PruneSection::default(),
            ablation: Toggles::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        crate::digest_str(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn raster_side(&self) -> usize {
        self.env.board_size * CELL_PX
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.layout.validate()?;
        let side = self.raster_side();
        let p = self.model.visual_patch_size;
        if p == 0 || !side.is_multiple_of(p) {
            return Err(Error::config(format!("visual_patch_size {p} does not divide raster side {side}")));
        }
        if (side / p).pow(2) != self.layout.n_visual_tokens {
            return Err(Error::config(format!(
                "layout has {} visual tokens but a {side}px raster in {p}px patches gives {}",
                self.layout.n_visual_tokens,
                (side / p).pow(2)
            )));
        }
        if self.pool.n_tokens() != self.layout.n_env_tokens {
            return Err(Error::config(format!(
                "layout has {} env tokens but the pool config emits {}",
                self.layout.n_env_tokens,
                self.pool.n_tokens()
            )));
        }
        if self.layout.n_instruction_tokens < crate::gridworld::max_instruction_len() {
            return Err(Error::config(format!(
                "n_instruction_tokens {} is shorter than the longest instruction ({})",
                self.layout.n_instruction_tokens,
                crate::gridworld::max_instruction_len()
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for &f in &self.prune.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("prune fraction {f} outside (0, 1]")));
            }
        }
        if !(self.prune.temperature > 0.0) {
            return Err(Error::config("prune temperature must be positive"));
        }
        self.model_config(&crate::harness::intention_vocabulary()).validate()
    }

    pub fn token_space(&self, vocab: &IntentionVocabulary) -> TokenSpace {
        TokenSpace::for_vocab(vocab)
    }

    pub fn model_config(&self, vocab: &IntentionVocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: self.token_space(vocab).vocab_size(),
            embed_dim: self.model.embed_dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_seq_len: self.layout.total_len(),
            visual_patch_size: self.model.visual_patch_size,
            mlp_ratio: self.model.mlp_ratio,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("run_id = \"x\"\n[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch_size, TrainSection::default().batch_size);
    }

    #[test]
    fn mismatched_patch_size_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.visual_patch_size = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("visual tokens")));
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn grid_rows_follow_table_order() {
        let g = Toggles::ablation_grid();
        assert_eq!(g[0].label(), "-/-/-");
        assert_eq!(g[3].label(), "-/-/Prune");
        assert_eq!(g[4].label(), "IA/ESA/-");
        assert_eq!(g[5].label(), "IA/ESA/Prune");
    }

    #[test]
    fn schedule() {
        let t = TrainSection { steps: 100, warmup_steps: 10, lr: 1.0, min_lr_frac: 0.1, ..TrainSection::default() };
        assert!((t.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((t.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((t.lr_at(100) - 0.1).abs() < 1e-12);
    }
}
