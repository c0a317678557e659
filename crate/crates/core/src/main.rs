use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vla_core::harness::dataset::DatasetManifest;
use vla_core::harness::experiments::{
    ablation_checks, prune_for, read_csv, report, resilience_summary, write_csv, Experiment, MetricsRecord,
};
use vla_core::harness::{
    evaluate, intention_vocabulary, oracle, read_dataset, train, write_dataset, Corpus, CurvePoint, ExperimentConfig,
    Policy, StepSource, Toggles, TrainOutcome,
};
use vla_core::nanomodel::checkpoint::Checkpoint;

#[derive(Parser)]
#[command(name = "vla", about = "Toy vision-language-action experiments on a gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert demonstrations and write them with a manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes checkpoints and curve.csv into --out.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory written by gen-data; demonstrations are generated in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        intention: bool,
        #[arg(long)]
        env: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, or the expert or random policy.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, required_unless_present_any = ["expert", "random"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        expert: bool,
        #[arg(long)]
        random: bool,
        /// Retained fraction of visual tokens.
        #[arg(long, default_value_t = 1.0)]
        retain: f64,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate one checkpoint at every configured retained fraction.
    PruneSweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the six-row toggle grid for every configured seed.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the baseline/abstraction pruning sweep here.
        #[arg(long)]
        sweep_out: Option<PathBuf>,
        /// Reuse and store trained models here.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Run the brute-force cross-checks; non-zero exit on any failure.
    OracleCheck {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Join metrics CSVs into a markdown summary.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct CheckpointInfo {
    toggles: Toggles,
    seed: u64,
    curve: Vec<CurvePoint>,
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<(Checkpoint, CheckpointInfo)> {
    let vocab = intention_vocabulary();
    let ck = Checkpoint::load(path, Some(&cfg.model_config(&vocab))).with_context(|| format!("loading {}", path.display()))?;
    let flag = |k: &str| ck.meta.get(k).and_then(|v| v.as_bool()).unwrap_or(false);
    let info = CheckpointInfo {
        toggles: Toggles::new(flag("intention"), flag("env"), false),
        seed: ck.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
        curve: match path.parent().map(|d| d.join("curve.csv")) {
            Some(p) if p.exists() => csv::Reader::from_path(&p)?.deserialize().collect::<Result<_, _>>()?,
            _ => Vec::new(),
        },
    };
    Ok((ck, info))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let vocab = intention_vocabulary();
    let corpus = Corpus::generate(cfg, &vocab)?;
    let file = "demos.vlad";
    write_dataset(&out.join(file), &corpus)?;
    let manifest = DatasetManifest {
        header: corpus.header().clone(),
        config_digest: cfg.digest(),
        data_file: file.into(),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    println!("{} episodes, {} steps -> {}", manifest.header.n_episodes, manifest.header.n_steps, out.display());
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, data: Option<&Path>, toggles: Toggles, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let vocab = intention_vocabulary();
    let source: Box<dyn StepSource> = match data {
        Some(dir) => {
            let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
            if manifest.config_digest != cfg.digest() {
                manifest.header.check_against(cfg, &vocab)?;
                eprintln!("note: dataset was generated under a different config; layout and vocabulary match");
            }
            Box::new(read_dataset(&dir.join(&manifest.data_file))?)
        }
        None => Box::new(Corpus::generate(cfg, &vocab)?),
    };
    let outcome: TrainOutcome = train(cfg, &toggles, seed, source.as_ref(), &vocab, Some(out))?;
    write_csv(&out.join("curve.csv"), &outcome.curve)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!("loss {:.4} -> {:.4} over {} steps", first.loss, last.loss, cfg.train.steps);
    }
    Ok(())
}

fn print_rows(rows: &[MetricsRecord]) {
    for r in rows {
        println!(
            "{} seed {} retain {:.2}: SR {:.3} [{:.3}, {:.3}] steps {:.2} FLOPs {:.0}",
            r.toggles().label(),
            r.seed,
            r.retain_fraction,
            r.success_rate,
            r.sr_ci_low,
            r.sr_ci_high,
            r.mean_steps,
            r.flops_per_decision
        );
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config.load()?, &out)?,
        Command::Train {
            config,
            data,
            intention,
            env,
            seed,
            out,
        } => train_cmd(&config.load()?, data.as_deref(), Toggles::new(intention, env, false), seed, &out)?,
        Command::Eval {
            config,
            checkpoint,
            expert,
            random,
            retain,
            episodes,
            out,
        } => {
            let cfg = config.load()?;
            let vocab = intention_vocabulary();
            let n = episodes.unwrap_or(cfg.eval.n_episodes);
            let prune = prune_for(retain, cfg.prune.temperature);
            let loaded = checkpoint.as_deref().map(|p| load_checkpoint(p, &cfg)).transpose()?;
            let (policy, toggles, seed, curve) = match (&loaded, expert, random) {
                (_, true, _) => (Policy::Expert, Toggles::new(false, false, false), 0, vec![]),
                (_, _, true) => (Policy::Random(0), Toggles::new(false, false, false), 0, vec![]),
                (Some((ck, info)), _, _) => (
                    Policy::Model {
                        model: &ck.model,
                        prune,
                    },
                    info.toggles,
                    info.seed,
                    info.curve.clone(),
                ),
                (None, false, false) => bail!("one of --checkpoint, --expert or --random is required"),
            };
            let s = evaluate(&policy, &cfg, &vocab, n, cfg.eval.seed_start)?;
            let t = Toggles {
                pruning: retain < 1.0,
                prune_fraction: retain,
                ..toggles
            };
            let rows = vec![MetricsRecord::new(&cfg.run_id, seed, &t, retain, &s, &curve)];
            print_rows(&rows);
            if let Some(p) = out {
                write_csv(&p, &rows)?;
            }
        }
        Command::PruneSweep { config, checkpoint, out } => {
            let cfg = config.load()?;
            let (ck, info) = load_checkpoint(&checkpoint, &cfg)?;
            let mut exp = Experiment::new(cfg)?;
            let (ia, esa) = (info.toggles.intention, info.toggles.env);
            exp.insert_model(
                ia,
                esa,
                info.seed,
                TrainOutcome {
                    model: ck.model,
                    optimizer: ck.optimizer.unwrap_or_else(|| vla_core::nanomodel::AdamState::new(0)),
                    rng: ck.rng.restore(),
                    curve: info.curve,
                },
            );
            let rows = exp.prune_sweep(ia, esa, info.seed)?;
            print_rows(&rows);
            write_csv(&out, &rows)?;
        }
        Command::Ablate {
            config,
            out,
            sweep_out,
            cache,
        } => {
            let mut exp = Experiment::new(config.load()?)?;
            if let Some(dir) = cache {
                exp = exp.with_cache(dir);
            }
            let rows = exp.ablate()?;
            print_rows(&rows);
            write_csv(&out, &rows)?;
            for c in ablation_checks(&rows) {
                println!(
                    "seed {}: full model best {}, pruning-only worst {}",
                    c.seed, c.full_model_best, c.prune_only_worst
                );
            }
            if let Some(p) = sweep_out {
                let sweep = exp.resilience()?;
                write_csv(&p, &sweep)?;
                let s = resilience_summary(&sweep, exp.cfg.ablation.prune_fraction)?;
                println!("{}", serde_json::to_string_pretty(&s)?);
            }
        }
        Command::OracleCheck { config } => {
            let results = oracle::run_all(&config.load()?)?;
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                eprintln!("{failed} oracle check(s) failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { inputs, out } => {
            if inputs.is_empty() {
                bail!("no input CSVs given");
            }
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_csv(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let table = report(&rows);
            match out {
                Some(p) => fs::write(p, &table)?,
                None => print!("{table}"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
