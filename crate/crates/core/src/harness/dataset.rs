//! Expert demonstrations and their on-disk record format.
//!
//! ```text
//! "VLAD" u32:version u32:len header-json
//! per step:
//!   u16:n u16[n] instruction word ids
//!   SMAP blob, RAST blob
//!   u8 action
//!   u8:n u16[n] intention keyword ids
//!   u32:n u8[n] env class ids
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::gridworld::{expert_action, generate_episode, instruction_text, render, step, RenderConfig, TaskDescriptor, WorldState};
use crate::intention::{oracle_intentions, to_sequence, IntentionSequence, IntentionVocabulary};
use crate::semantic_grid::{flatten_grid, pool_semantic_map, ClassHierarchy, PoolConfig, SemanticMap};
use crate::sequence::{EpisodeStep, LayoutSpec};
use crate::gridworld::TexturedRaster;

const MAGIC: &[u8; 4] = b"VLAD";
const VERSION: u32 = 1;

/// Pins what a dataset was built for; training refuses a mismatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub layout: LayoutSpec,
    pub layout_digest: String,
    pub vocab_digest: String,
    pub pool: PoolConfig,
    pub seed_start: u64,
    pub n_episodes: usize,
    pub n_steps: usize,
}

impl DatasetHeader {
    pub fn check_against(&self, cfg: &ExperimentConfig, vocab: &IntentionVocabulary) -> Result<()> {
        if self.layout_digest != layout_digest(&cfg.layout) {
            return Err(Error::config(format!(
                "dataset layout {:?} does not match config layout {:?}",
                self.layout, cfg.layout
            )));
        }
        if self.vocab_digest != vocab.digest() {
            return Err(Error::config("dataset intention vocabulary does not match config"));
        }
        if self.pool != cfg.pool {
            return Err(Error::config("dataset pool config does not match config"));
        }
        Ok(())
    }
}

pub fn layout_digest(layout: &LayoutSpec) -> String {
    crate::digest_str(&serde_json::to_string(layout).expect("layout serializes"))
}

/// Noise seed for frame `t` of the episode with seed `episode_seed`.
pub fn frame_seed(episode_seed: u64, t: u32) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = episode_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(u64::from(t).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Anything that can hand out training steps by index.
pub trait StepSource {
    fn len(&self) -> usize;
    fn step(&self, i: usize) -> Result<EpisodeStep>;
    fn header(&self) -> &DatasetHeader;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
struct Frame {
    state: WorldState,
    episode: usize,
    action: u8,
    noise_seed: u64,
}

#[derive(Debug, Clone)]
struct EpisodeInfo {
    instruction: Vec<u16>,
    intention: IntentionSequence,
}

/// Expert trajectories kept as states; frames are rendered on demand.
#[derive(Debug, Clone)]
pub struct Corpus {
    header: DatasetHeader,
    frames: Vec<Frame>,
    episodes: Vec<EpisodeInfo>,
    render: RenderConfig,
    hierarchy: ClassHierarchy,
}

/// Expert rollout of one episode: the visited states and the actions taken.
pub fn expert_trajectory(state: &WorldState, task: &TaskDescriptor) -> Result<(Vec<WorldState>, Vec<u8>, bool)> {
    let mut s = state.clone();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    loop {
        let a = expert_action(&s, task)?;
        states.push(s.clone());
        actions.push(a.id());
        let out = step(&s, task, a);
        s = out.state;
        if out.done {
            return Ok((states, actions, out.success));
        }
    }
}

impl Corpus {
    pub fn generate(cfg: &ExperimentConfig, vocab: &IntentionVocabulary) -> Result<Self> {
        Corpus::generate_range(cfg, vocab, cfg.data.seed_start, cfg.data.n_episodes)
    }

    pub fn generate_range(cfg: &ExperimentConfig, vocab: &IntentionVocabulary, seed_start: u64, n_episodes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut frames = Vec::new();
        let mut episodes = Vec::with_capacity(n_episodes);
        for e in 0..n_episodes {
            let seed = seed_start + e as u64;
            let (state, task) = generate_episode(seed, &cfg.env)?;
            let (states, actions, success) = expert_trajectory(&state, &task)?;
            if !success {
                return Err(Error::data(format!("expert failed episode seed {seed}")));
            }
            for (t, (s, a)) in states.into_iter().zip(actions).enumerate() {
                frames.push(Frame {
                    state: s,
                    episode: e,
                    action: a,
                    noise_seed: frame_seed(seed, t as u32),
                });
            }
            episodes.push(EpisodeInfo {
                instruction: instruction_text(&task, task.verbosity, seed),
                intention: to_sequence(&oracle_intentions(&task), vocab)?,
            });
        }
        Ok(Corpus {
            header: DatasetHeader {
                layout: cfg.layout,
                layout_digest: layout_digest(&cfg.layout),
                vocab_digest: vocab.digest(),
                pool: cfg.pool,
                seed_start,
                n_episodes,
                n_steps: frames.len(),
            },
            frames,
            episodes,
            render: cfg.env.render.clone(),
            hierarchy: ClassHierarchy::tactical(),
        })
    }
}

/// Env target tokens for a semantic map.
pub fn env_targets(map: &SemanticMap, hierarchy: &ClassHierarchy, pool: &PoolConfig) -> Result<Vec<u8>> {
    Ok(flatten_grid(&pool_semantic_map(map, hierarchy, pool)?).tokens)
}

impl StepSource for Corpus {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn step(&self, i: usize) -> Result<EpisodeStep> {
        let f = self
            .frames
            .get(i)
            .ok_or_else(|| Error::data(format!("step {i} out of range for {} steps", self.frames.len())))?;
        let info = &self.episodes[f.episode];
        let (semantic_map, raster) = render(&f.state, f.noise_seed, &self.render);
        let env_tokens = env_targets(&semantic_map, &self.hierarchy, &self.header.pool)?;
        Ok(EpisodeStep {
            instruction: info.instruction.clone(),
            semantic_map,
            raster,
            action: f.action,
            intention: info.intention.clone(),
            env_tokens,
        })
    }

    fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

/// Fully materialised steps, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub steps: Vec<EpisodeStep>,
}

impl StepSource for Dataset {
    fn len(&self) -> usize {
        self.steps.len()
    }

    fn step(&self, i: usize) -> Result<EpisodeStep> {
        self.steps
            .get(i)
            .cloned()
            .ok_or_else(|| Error::data(format!("step {i} out of range for {} steps", self.steps.len())))
    }

    fn header(&self) -> &DatasetHeader {
        &self.header
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

pub fn write_dataset(path: &Path, source: &dyn StepSource) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(f);
    write_records(&mut w, source).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(io(path))
}

fn write_records<W: Write>(w: &mut W, source: &dyn StepSource) -> Result<()> {
    let header = serde_json::to_vec(source.header())?;
    let wr = |e| Error::io("<dataset>", e);
    w.write_all(MAGIC).map_err(wr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(wr)?;
    w.write_all(&(header.len() as u32).to_le_bytes()).map_err(wr)?;
    w.write_all(&header).map_err(wr)?;
    for i in 0..source.len() {
        let s = source.step(i)?;
        write_step(w, &s).map_err(wr)?;
    }
    Ok(())
}

fn write_step<W: Write>(w: &mut W, s: &EpisodeStep) -> std::io::Result<()> {
    w.write_all(&(s.instruction.len() as u16).to_le_bytes())?;
    for x in &s.instruction {
        w.write_all(&x.to_le_bytes())?;
    }
    s.semantic_map.write_to(w)?;
    s.raster.write_to(w)?;
    w.write_all(&[s.action])?;
    w.write_all(&[s.intention.keyword_ids.len() as u8])?;
    for x in &s.intention.keyword_ids {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(s.env_tokens.len() as u32).to_le_bytes())?;
    w.write_all(&s.env_tokens)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(io(path))?;
    read_records(&mut BufReader::new(f))
}

fn rd<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::data(format!("truncated dataset: {e}")))?;
    Ok(b)
}

fn read_records<R: Read>(r: &mut R) -> Result<Dataset> {
    if &rd::<_, 4>(r)? != MAGIC {
        return Err(Error::data("not a dataset file (bad magic)"));
    }
    let version = u32::from_le_bytes(rd(r)?);
    if version != VERSION {
        return Err(Error::data(format!("unsupported dataset version {version}")));
    }
    let len = u32::from_le_bytes(rd(r)?) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::data(format!("truncated dataset header: {e}")))?;
    let header: DatasetHeader = serde_json::from_slice(&buf)?;
    let mut steps = Vec::with_capacity(header.n_steps);
    for _ in 0..header.n_steps {
        let n = u16::from_le_bytes(rd(r)?) as usize;
        let instruction = (0..n).map(|_| rd(r).map(u16::from_le_bytes)).collect::<Result<_>>()?;
        let semantic_map = SemanticMap::read_from(r)?;
        let raster = TexturedRaster::read_from(r)?;
        let [action] = rd(r)?;
        let [n] = rd(r)?;
        let keyword_ids = (0..n).map(|_| rd(r).map(u16::from_le_bytes)).collect::<Result<_>>()?;
        let n = u32::from_le_bytes(rd(r)?) as usize;
        let mut env_tokens = vec![0u8; n];
        r.read_exact(&mut env_tokens).map_err(|e| Error::data(format!("truncated dataset: {e}")))?;
        steps.push(EpisodeStep {
            instruction,
            semantic_map,
            raster,
            action,
            intention: IntentionSequence { keyword_ids },
            env_tokens,
        });
    }
    Ok(Dataset { header, steps })
}

/// Sidecar summary written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: DatasetHeader,
    pub config_digest: String,
    pub data_file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::intention_vocabulary;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.n_episodes = 3;
        cfg
    }

    #[test]
    fn corpus_roundtrips_through_disk() {
        let cfg = tiny_cfg();
        let vocab = intention_vocabulary();
        let corpus = Corpus::generate(&cfg, &vocab).unwrap();
        assert!(corpus.len() >= 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &corpus).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.header, *corpus.header());
        for i in 0..corpus.len() {
            assert_eq!(back.step(i).unwrap(), corpus.step(i).unwrap());
        }
        back.header.check_against(&cfg, &vocab).unwrap();
    }

    #[test]
    fn header_mismatch_is_config_error() {
        let cfg = tiny_cfg();
        let vocab = intention_vocabulary();
        let corpus = Corpus::generate(&cfg, &vocab).unwrap();
        let mut other = cfg.clone();
        other.layout.n_instruction_tokens += 1;
        assert!(matches!(corpus.header().check_against(&other, &vocab), Err(Error::Config(_))));
    }

    #[test]
    fn frames_differ_in_noise_only() {
        assert_ne!(frame_seed(1, 0), frame_seed(1, 1));
        assert_ne!(frame_seed(1, 0), frame_seed(2, 0));
    }
}
