use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelInput, Slot};

/// Multiply-accumulate counts for one decision forward pass (head applied at the
/// last slot only).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopProxy {
    pub patch_embed: u64,
    pub linear: u64,
    pub attention: u64,
    /// Share of `attention` spent on visual-query/visual-key pairs.
    pub visual_visual_attention: u64,
    pub head: u64,
}

impl FlopProxy {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.linear + self.attention + self.head
    }
}

pub fn flop_proxy(cfg: &ModelConfig, input: &ModelInput) -> FlopProxy {
    let visual: Vec<bool> = input.slots.iter().map(|s| matches!(s, Slot::Patch(_))).collect();
    flop_proxy_for(cfg, &visual)
}

/// Counts from the slot kinds alone: `visual[t]` says whether slot `t` is a patch.
pub fn flop_proxy_for(cfg: &ModelConfig, visual: &[bool]) -> FlopProxy {
    let n = visual.len() as u64;
    let d = cfg.embed_dim as u64;
    let h = cfg.hidden_dim() as u64;
    let layers = cfg.n_layers as u64;
    let n_vis = visual.iter().filter(|&&v| v).count() as u64;

    let causal_pairs = n * (n + 1) / 2;
    let mut vv_pairs = 0u64;
    let mut seen = 0u64;
    for &v in visual {
        if v {
            seen += 1;
            vv_pairs += seen;
        }
    }
    // scores (q.k) and weighted values: 2d MACs per attended pair
    FlopProxy {
        patch_embed: n_vis * cfg.patch_dim() as u64 * d,
        linear: layers * n * (4 * d * d + 2 * d * h),
        attention: layers * causal_pairs * 2 * d,
        visual_visual_attention: layers * vv_pairs * 2 * d,
        head: d * cfg.vocab_size as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contiguous_visual_block() {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 32,
            visual_patch_size: 2,
            mlp_ratio: 4,
        };
        let mut vis = vec![false; 3];
        vis.extend([true; 4]);
        vis.push(false);
        let f = flop_proxy_for(&cfg, &vis);
        assert_eq!(f.visual_visual_attention, 2 * 10 * 2 * 8);
        assert_eq!(f.attention, 2 * 36 * 2 * 8);
        assert_eq!(f.linear, 2 * 8 * (4 * 64 + 2 * 8 * 32));
        assert_eq!(f.patch_embed, 4 * 4 * 8);
        assert_eq!(f.head, 80);
    }
}
