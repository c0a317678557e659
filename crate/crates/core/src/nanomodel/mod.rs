//! Decoder-only causal transformer with hand-written backpropagation.
//!
//! Pre-norm blocks (LayerNorm -> causal multi-head attention -> residual,
//! LayerNorm -> GELU MLP -> residual), learned absolute position embeddings,
//! a linear patch embedding for visual slots, and a linear output head.
//! All parameters live in one flat `Vec<f64>`; [`ParamLayout`] gives the
//! structured view.

mod backward;
pub mod checkpoint;
mod flops;
mod forward;
pub mod kernels;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{masked_cross_entropy, Gradients};
pub use flops::{flop_proxy, flop_proxy_for, FlopProxy};
pub use forward::{ForwardCache, ForwardOutput, LastOutput};
pub use optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub visual_patch_size: usize,
    /// Hidden width of the MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 600,
            embed_dim: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 512,
            visual_patch_size: 8,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.visual_patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("vocab_size, max_seq_len, visual_patch_size and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.visual_patch_size * self.visual_patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Closed-form parameter count.
    pub fn n_params(&self) -> usize {
        let (v, d, s, p, h) = (self.vocab_size, self.embed_dim, self.max_seq_len, self.patch_dim(), self.hidden_dim());
        let per_layer = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        v * d + s * d + (p * d + d) + self.n_layers * per_layer + 2 * d + (d * v + v)
    }

    pub fn digest(&self) -> String {
        crate::digest_str(&serde_json::to_string(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Offsets of every tensor inside the flat parameter vector. Matrices are
/// stored row-major as `in x out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(c: &ModelConfig) -> Self {
        let (d, h) = (c.embed_dim, c.hidden_dim());
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_seq_len * d);
        let patch_w = take(c.patch_dim() * d);
        let patch_b = take(d);
        let layers = (0..c.n_layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * h),
                b_fc: take(h),
                w_proj: take(h * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(d * c.vocab_size);
        let head_b = take(c.vocab_size);
        ParamLayout {
            tok_emb,
            pos_emb,
            patch_w,
            patch_b,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: at,
        }
    }

    /// LayerNorm gains; initialised to one.
    fn gain_ranges(&self, d: usize) -> Vec<std::ops::Range<usize>> {
        let mut g: Vec<usize> = self.layers.iter().flat_map(|l| [l.ln1_g, l.ln2_g]).collect();
        g.push(self.lnf_g);
        g.into_iter().map(|o| o..o + d).collect()
    }

    /// Biases and LayerNorm shifts; initialised to zero.
    fn zero_ranges(&self, c: &ModelConfig) -> Vec<std::ops::Range<usize>> {
        let (d, h) = (c.embed_dim, c.hidden_dim());
        let mut z: Vec<std::ops::Range<usize>> = self
            .layers
            .iter()
            .flat_map(|l| {
                [
                    l.ln1_b..l.ln1_b + d,
                    l.b_qkv..l.b_qkv + 3 * d,
                    l.b_o..l.b_o + d,
                    l.ln2_b..l.ln2_b + d,
                    l.b_fc..l.b_fc + h,
                    l.b_proj..l.b_proj + d,
                ]
            })
            .collect();
        z.push(self.patch_b..self.patch_b + d);
        z.push(self.lnf_b..self.lnf_b + d);
        z.push(self.head_b..self.head_b + c.vocab_size);
        z
    }
}

/// One input position: a vocabulary token or an index into the patch buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    Patch(usize),
}

/// A sequence of slots with explicit position ids, so pruned inputs keep the
/// positions they had in the unpruned layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub slots: Vec<Slot>,
    pub positions: Vec<usize>,
    /// `n_patches * patch_dim`, indexed by `Slot::Patch`.
    pub patches: Vec<f64>,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn n_visual(&self) -> usize {
        self.slots.iter().filter(|s| matches!(s, Slot::Patch(_))).count()
    }

    /// Slot indices holding patches, in sequence order.
    pub fn visual_slots(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Slot::Patch(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub params: Vec<f64>,
}

impl Model {
    /// Gaussian(0, 1/embed_dim) weights, zero biases, unit LayerNorm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (config.embed_dim as f64).sqrt()).unwrap();
        let mut params: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
        for r in layout.zero_ranges(&config) {
            params[r].fill(0.0);
        }
        for r in layout.gain_ranges(config.embed_dim) {
            params[r].fill(1.0);
        }
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(Error::data(format!(
                "parameter vector has {} entries, config needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Model { config, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn check_input(&self, input: &ModelInput) -> Result<()> {
        if input.is_empty() {
            return Err(Error::data("empty model input"));
        }
        if input.len() > self.config.max_seq_len {
            return Err(Error::config(format!(
                "sequence of {} exceeds max_seq_len {}",
                input.len(),
                self.config.max_seq_len
            )));
        }
        if input.positions.len() != input.len() {
            return Err(Error::data("positions and slots differ in length"));
        }
        let pd = self.config.patch_dim();
        for (i, (&s, &p)) in input.slots.iter().zip(&input.positions).enumerate() {
            if p >= self.config.max_seq_len {
                return Err(Error::config(format!("position id {p} at slot {i} exceeds max_seq_len")));
            }
            match s {
                Slot::Token(t) if t as usize >= self.config.vocab_size => {
                    return Err(Error::data(format!("token {t} at slot {i} outside vocab")));
                }
                Slot::Patch(k) if (k + 1) * pd > input.patches.len() => {
                    return Err(Error::data(format!("patch {k} at slot {i} outside patch buffer")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
