//! Pruning sweep, ablation grid and the CSV tables they emit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Toggles};
use super::dataset::{Corpus, StepSource};
use super::eval::{evaluate, EvalSummary, Policy};
use super::stats::newcombe_difference;
use super::train::{train, CurvePoint, TrainOutcome};
use crate::error::{Error, Result};
use crate::intention::IntentionVocabulary;
use crate::nanomodel::checkpoint::Checkpoint;
use crate::nanomodel::{AdamState, Model};
use crate::pruning::PruneConfig;

/// One CSV row: a model evaluated at one retained fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub intention: bool,
    pub env: bool,
    pub pruning: bool,
    pub retain_fraction: f64,
    pub n_episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub sr_ci_low: f64,
    pub sr_ci_high: f64,
    pub mean_steps: f64,
    pub mean_steps_success: f64,
    pub retained_fraction: f64,
    pub flops_per_decision: f64,
    pub visual_visual_flops: f64,
    pub scoring_flops: f64,
    pub mean_alpha: f64,
    pub final_action_nll: f64,
    pub final_intention_nll: f64,
    pub final_env_nll: f64,
}

impl MetricsRecord {
    pub fn new(run_id: &str, seed: u64, toggles: &Toggles, fraction: f64, s: &EvalSummary, curve: &[CurvePoint]) -> Self {
        let last = curve.last().copied();
        MetricsRecord {
            run_id: run_id.to_string(),
            seed,
            intention: toggles.intention,
            env: toggles.env,
            pruning: toggles.pruning,
            retain_fraction: fraction,
            n_episodes: s.n_episodes,
            successes: s.successes,
            success_rate: s.success_rate,
            sr_ci_low: s.sr_ci_low,
            sr_ci_high: s.sr_ci_high,
            mean_steps: s.mean_steps,
            mean_steps_success: s.mean_steps_success,
            retained_fraction: s.retained_fraction,
            flops_per_decision: s.flops_per_decision,
            visual_visual_flops: s.visual_visual_flops,
            scoring_flops: s.scoring_flops,
            mean_alpha: s.mean_alpha,
            final_action_nll: last.map_or(f64::NAN, |c| c.action_nll),
            final_intention_nll: last.map_or(f64::NAN, |c| c.intention_nll),
            final_env_nll: last.map_or(f64::NAN, |c| c.env_nll),
        }
    }

    pub fn toggles(&self) -> Toggles {
        Toggles {
            intention: self.intention,
            env: self.env,
            pruning: self.pruning,
            prune_fraction: self.retain_fraction,
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// Prune config for a retained fraction; `None` for retain-all.
pub fn prune_for(fraction: f64, temperature: f64) -> Option<PruneConfig> {
    (fraction < 1.0).then(|| PruneConfig {
        temperature,
        ..PruneConfig::fraction(fraction)
    })
}

/// Shared training data plus trained-model and evaluation caches, so the
/// sweep and the ablation reuse each other's work.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub vocab: IntentionVocabulary,
    pub corpus: Corpus,
    models: BTreeMap<(bool, bool, u64), TrainOutcome>,
    evals: BTreeMap<(bool, bool, u64, u64), EvalSummary>,
    cache: Option<PathBuf>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let vocab = super::intention_vocabulary();
        let corpus = Corpus::generate(&cfg, &vocab)?;
        Ok(Experiment {
            cfg,
            vocab,
            corpus,
            models: BTreeMap::new(),
            evals: BTreeMap::new(),
            cache: None,
        })
    }

    /// Keeps trained models under `dir`, keyed by config digest, so an
    /// interrupted run picks up where it stopped.
    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache = Some(dir.into());
        self
    }

    fn cache_dir(&self, intention: bool, env: bool, seed: u64) -> Option<PathBuf> {
        let digest = self.cfg.digest();
        let name = format!("{}_ia{}_esa{}_seed{seed}", &digest[..16], u8::from(intention), u8::from(env));
        self.cache.as_ref().map(|d| d.join(name))
    }

    fn load_cached(&self, dir: &Path) -> Result<Option<TrainOutcome>> {
        let (ckpt, curve) = (dir.join("final.ckpt"), dir.join("curve.csv"));
        if !(ckpt.exists() && curve.exists()) {
            return Ok(None);
        }
        let vocab = &self.vocab;
        let ck = Checkpoint::load(&ckpt, Some(&self.cfg.model_config(vocab)))?;
        Ok(Some(TrainOutcome {
            model: ck.model,
            optimizer: ck.optimizer.unwrap_or_else(|| AdamState::new(0)),
            rng: ck.rng.restore(),
            curve: read_csv(&curve)?,
        }))
    }

    pub fn n_train_steps(&self) -> usize {
        self.corpus.len()
    }

    pub fn trained(&mut self, intention: bool, env: bool, seed: u64) -> Result<&TrainOutcome> {
        if !self.models.contains_key(&(intention, env, seed)) {
            let t = Toggles::new(intention, env, false);
            let dir = self.cache_dir(intention, env, seed);
            let cached = match &dir {
                Some(d) => self.load_cached(d)?,
                None => None,
            };
            let out = match cached {
                Some(out) => out,
                None => {
                    if let Some(d) = &dir {
                        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                    }
                    let out = train(&self.cfg, &t, seed, &self.corpus as &dyn StepSource, &self.vocab, dir.as_deref())?;
                    if let Some(d) = &dir {
                        // written last; marks the entry complete
                        write_csv(&d.join("curve.csv"), &out.curve)?;
                    }
                    out
                }
            };
            self.models.insert((intention, env, seed), out);
        }
        Ok(&self.models[&(intention, env, seed)])
    }

    /// Inserts an externally trained model (e.g. loaded from a checkpoint).
    pub fn insert_model(&mut self, intention: bool, env: bool, seed: u64, out: TrainOutcome) {
        self.models.insert((intention, env, seed), out);
    }

    pub fn evaluated(&mut self, intention: bool, env: bool, seed: u64, fraction: f64) -> Result<EvalSummary> {
        let key = (intention, env, seed, fraction.to_bits());
        if let Some(s) = self.evals.get(&key) {
            return Ok(s.clone());
        }
        let prune = prune_for(fraction, self.cfg.prune.temperature);
        let model: Model = self.trained(intention, env, seed)?.model.clone();
        let s = evaluate(
            &Policy::Model { model: &model, prune },
            &self.cfg,
            &self.vocab,
            self.cfg.eval.n_episodes,
            self.cfg.eval.seed_start,
        )?;
        self.evals.insert(key, s.clone());
        Ok(s)
    }

    fn record(&mut self, toggles: Toggles, seed: u64, fraction: f64) -> Result<MetricsRecord> {
        let s = self.evaluated(toggles.intention, toggles.env, seed, fraction)?;
        let curve = self.trained(toggles.intention, toggles.env, seed)?.curve.clone();
        Ok(MetricsRecord::new(&self.cfg.run_id, seed, &toggles, fraction, &s, &curve))
    }

    /// One model at every configured retained fraction.
    pub fn prune_sweep(&mut self, intention: bool, env: bool, seed: u64) -> Result<Vec<MetricsRecord>> {
        let fractions = self.cfg.prune.fractions.clone();
        fractions
            .into_iter()
            .map(|f| {
                let t = Toggles {
                    pruning: f < 1.0,
                    prune_fraction: f,
                    ..Toggles::new(intention, env, false)
                };
                self.record(t, seed, f)
            })
            .collect()
    }

    /// The six-row toggle grid for every configured seed, rows in table order.
    pub fn ablate(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            for row in Toggles::ablation_grid() {
                let f = if row.pruning { self.cfg.ablation.prune_fraction } else { 1.0 };
                let t = Toggles { prune_fraction: f, ..row };
                rows.push(self.record(t, seed, f)?);
            }
        }
        Ok(rows)
    }

    /// Baseline and abstraction models swept over the configured fractions.
    pub fn resilience(&mut self) -> Result<Vec<MetricsRecord>> {
        let mut rows = Vec::new();
        for seed in self.cfg.seeds.clone() {
            rows.extend(self.prune_sweep(false, false, seed)?);
            rows.extend(self.prune_sweep(true, true, seed)?);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceSummary {
    pub fraction: f64,
    /// `(seed, baseline ratio, abstraction ratio)`.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub seeds_abstraction_wins: usize,
    pub baseline_drop: (f64, f64, f64),
    pub abstraction_drop: (f64, f64, f64),
}

impl ResilienceSummary {
    /// Drop is at least `margin` smaller and the two drop intervals do not overlap.
    pub fn drop_gap_holds(&self, margin: f64) -> bool {
        self.baseline_drop.0 - self.abstraction_drop.0 >= margin && self.abstraction_drop.2 < self.baseline_drop.1
    }
}

fn ratio(full: &MetricsRecord, pruned: &MetricsRecord) -> f64 {
    if full.success_rate == 0.0 {
        0.0
    } else {
        pruned.success_rate / full.success_rate
    }
}

/// SR ratio and pooled drop from `1.0` to `fraction` for both models.
pub fn resilience_summary(rows: &[MetricsRecord], fraction: f64) -> Result<ResilienceSummary> {
    let find = |seed: u64, abstraction: bool, f: f64| {
        rows.iter()
            .find(|r| r.seed == seed && r.intention == abstraction && r.env == abstraction && r.retain_fraction == f)
            .ok_or_else(|| Error::data(format!("no row for seed {seed}, abstraction {abstraction}, fraction {f}")))
    };
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut per_seed = Vec::new();
    let mut pooled = [[0usize; 4]; 2];
    for &s in &seeds {
        let mut rs = [0.0; 2];
        for (m, abstraction) in [false, true].into_iter().enumerate() {
            let full = find(s, abstraction, 1.0)?;
            let pruned = find(s, abstraction, fraction)?;
            rs[m] = ratio(full, pruned);
            pooled[m][0] += full.successes;
            pooled[m][1] += full.n_episodes;
            pooled[m][2] += pruned.successes;
            pooled[m][3] += pruned.n_episodes;
        }
        per_seed.push((s, rs[0], rs[1]));
    }
    let drop = |p: [usize; 4]| newcombe_difference(p[0], p[1], p[2], p[3]);
    Ok(ResilienceSummary {
        fraction,
        seeds_abstraction_wins: per_seed.iter().filter(|(_, b, a)| a > b).count(),
        per_seed,
        baseline_drop: drop(pooled[0]),
        abstraction_drop: drop(pooled[1]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCheck {
    pub seed: u64,
    /// Full model without pruning has the highest SR and lowest mean steps.
    pub full_model_best: bool,
    /// Pruning-only row has the lowest SR.
    pub prune_only_worst: bool,
}

/// Ordering checks per seed on ablation rows in table order.
pub fn ablation_checks(rows: &[MetricsRecord]) -> Vec<AblationCheck> {
    let mut out = Vec::new();
    for chunk in rows.chunks(6) {
        if chunk.len() != 6 {
            continue;
        }
        let full = &chunk[4];
        let prune_only = &chunk[3];
        let full_model_best = chunk.iter().enumerate().all(|(i, r)| {
            i == 4 || (full.success_rate > r.success_rate && full.mean_steps < r.mean_steps)
        });
        let prune_only_worst = chunk
            .iter()
            .enumerate()
            .all(|(i, r)| i == 3 || prune_only.success_rate < r.success_rate);
        out.push(AblationCheck {
            seed: full.seed,
            full_model_best,
            prune_only_worst,
        });
    }
    out
}

/// Mean of each metric across seeds, grouped by toggles and fraction, as a
/// markdown table.
pub fn report(rows: &[MetricsRecord]) -> String {
    let mut groups: BTreeMap<(String, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in rows {
        let key = (format!("{} {}", r.run_id, r.toggles().label()), r.retain_fraction.to_bits());
        groups.entry(key).or_default().push(r);
    }
    let mut s = String::from("| run / IA ESA Prune | retain | seeds | SR | 95% CI (pooled) | steps | FLOPs/decision |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for ((label, fbits), rs) in groups {
        let n = rs.len() as f64;
        let k: usize = rs.iter().map(|r| r.successes).sum();
        let total: usize = rs.iter().map(|r| r.n_episodes).sum();
        let (lo, hi) = super::stats::wilson(k, total);
        let mean = |f: fn(&MetricsRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        s.push_str(&format!(
            "| {label} | {:.2} | {} | {:.3} | [{lo:.3}, {hi:.3}] | {:.2} | {:.0} |\n",
            f64::from_bits(fbits),
            rs.len(),
            mean(|r| r.success_rate),
            mean(|r| r.mean_steps),
            mean(|r| r.flops_per_decision),
        ));
    }
    s
}
