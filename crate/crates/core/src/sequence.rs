//! Hindsight sequence layout, loss masks, NLL partition, and truncated inference.
//!
//! A training sequence is laid out as
//!
//! ```text
//! [instruction | visual | ACT | action | intention | env]
//! ```
//!
//! The `ACT` marker is an unsupervised query position: its logits predict the
//! action. Abstraction tokens come after the action, so at inference the model
//! only has to run `[instruction | visual | ACT]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{TexturedRaster, N_ACTIONS};
use crate::intention::{encode_intention, IntentionSequence, IntentionVocabulary};
use crate::nanomodel::{Model, ModelInput, Slot};
use crate::semantic_grid::{class, ClassId, SemanticMap};

/// Global token id layout shared by every segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub n_actions: u32,
    pub n_classes: u32,
    /// Keyword count, not counting the end token.
    pub n_keywords: u32,
    pub n_words: u32,
}

impl TokenSpace {
    pub const PAD: u32 = 0;
    /// Placeholder id stored at visual positions; never embedded.
    pub const VIS: u32 = 1;
    pub const ACT: u32 = 2;
    const FIRST_ACTION: u32 = 3;

    pub fn new(n_keywords: usize, n_words: usize) -> Self {
        TokenSpace {
            n_actions: N_ACTIONS as u32,
            n_classes: class::COUNT as u32,
            n_keywords: n_keywords as u32,
            n_words: n_words as u32,
        }
    }

    pub fn for_vocab(vocab: &IntentionVocabulary) -> Self {
        TokenSpace::new(vocab.len(), crate::gridworld::word_vocabulary().len())
    }

    pub fn action(&self, a: u8) -> u32 {
        Self::FIRST_ACTION + a as u32
    }

    pub fn action_range(&self) -> std::ops::Range<u32> {
        Self::FIRST_ACTION..Self::FIRST_ACTION + self.n_actions
    }

    fn class_base(&self) -> u32 {
        Self::FIRST_ACTION + self.n_actions
    }

    /// Env token for a local class id; the grid PAD maps to the global PAD.
    pub fn env(&self, c: ClassId) -> u32 {
        if c == class::PAD {
            Self::PAD
        } else {
            self.class_base() + c as u32
        }
    }

    fn keyword_base(&self) -> u32 {
        self.class_base() + self.n_classes
    }

    /// Keyword id, or the end token when `k == n_keywords`.
    pub fn keyword(&self, k: u16) -> u32 {
        self.keyword_base() + k as u32
    }

    fn word_base(&self) -> u32 {
        self.keyword_base() + self.n_keywords + 1
    }

    pub fn word(&self, w: u16) -> u32 {
        self.word_base() + w as u32
    }

    pub fn vocab_size(&self) -> usize {
        (self.word_base() + self.n_words) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentTag {
    Instruction,
    Visual,
    Marker,
    Action,
    Intention,
    Env,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutSpec {
    pub n_instruction_tokens: usize,
    pub n_visual_tokens: usize,
    pub n_action_tokens: usize,
    /// Slots for keywords plus the end token; unused slots hold PAD.
    pub max_intention_tokens: usize,
    pub n_env_tokens: usize,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        LayoutSpec {
            n_instruction_tokens: 16,
            n_visual_tokens: 64,
            n_action_tokens: 1,
            max_intention_tokens: crate::intention::MAX_INTENTION_LEN + 1,
            n_env_tokens: 128,
        }
    }
}

impl LayoutSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("instruction", self.n_instruction_tokens),
            ("visual", self.n_visual_tokens),
            ("action", self.n_action_tokens),
            ("intention", self.max_intention_tokens),
            ("env", self.n_env_tokens),
        ] {
            if n == 0 {
                return Err(Error::config(format!("{name} segment must hold at least one token")));
            }
        }
        if self.n_action_tokens != 1 {
            return Err(Error::config("exactly one action token per step is supported"));
        }
        Ok(())
    }

    /// Segments in order with their lengths.
    pub fn segments(&self) -> [(SegmentTag, usize); 6] {
        [
            (SegmentTag::Instruction, self.n_instruction_tokens),
            (SegmentTag::Visual, self.n_visual_tokens),
            (SegmentTag::Marker, 1),
            (SegmentTag::Action, self.n_action_tokens),
            (SegmentTag::Intention, self.max_intention_tokens),
            (SegmentTag::Env, self.n_env_tokens),
        ]
    }

    pub fn total_len(&self) -> usize {
        self.segments().iter().map(|s| s.1).sum()
    }

    /// Half-open position range of a segment.
    pub fn range(&self, tag: SegmentTag) -> std::ops::Range<usize> {
        let mut start = 0;
        for (t, n) in self.segments() {
            if t == tag {
                return start..start + n;
            }
            start += n;
        }
        unreachable!()
    }

    pub fn marker_position(&self) -> usize {
        self.range(SegmentTag::Marker).start
    }

    /// Tokens the model runs at decision time.
    pub fn inference_len(&self) -> usize {
        self.marker_position() + 1
    }

    pub fn tags(&self) -> Vec<SegmentTag> {
        self.segments()
            .iter()
            .flat_map(|&(t, n)| std::iter::repeat_n(t, n))
            .collect()
    }
}

/// One expert decision with everything needed to build its training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    /// Word ids.
    pub instruction: Vec<u16>,
    pub semantic_map: SemanticMap,
    pub raster: TexturedRaster,
    pub action: u8,
    pub intention: IntentionSequence,
    /// Flattened latent grid in local class ids.
    pub env_tokens: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub token_ids: Vec<u32>,
    /// 1 where the token is a training target.
    pub loss_mask: Vec<u8>,
    pub segment_tags: Vec<SegmentTag>,
    /// Visual patches, `n_visual_tokens * patch_dim`.
    pub patches: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub action: f64,
    pub intention: f64,
    pub env: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            action: 1.0,
            intention: 1.0,
            env: 1.0,
        }
    }
}

impl LossWeights {
    fn of(&self, tag: SegmentTag) -> f64 {
        match tag {
            SegmentTag::Action => self.action,
            SegmentTag::Intention => self.intention,
            SegmentTag::Env => self.env,
            _ => 0.0,
        }
    }
}

pub fn assemble_training_sequence(
    step: &EpisodeStep,
    layout: &LayoutSpec,
    space: &TokenSpace,
    vocab: &IntentionVocabulary,
    patch_size: usize,
) -> Result<TrainingSequence> {
    layout.validate()?;
    let oversize = |seg: &str, got: usize, max: usize| {
        Error::data(format!("{seg} segment has {got} tokens, layout allows {max}"))
    };
    if step.instruction.len() > layout.n_instruction_tokens {
        return Err(oversize("instruction", step.instruction.len(), layout.n_instruction_tokens));
    }
    let patches = step.raster.patches(patch_size)?;
    let n_patches = patches.len() / (patch_size * patch_size);
    if n_patches != layout.n_visual_tokens {
        return Err(Error::data(format!(
            "visual segment has {n_patches} patches, layout expects {}",
            layout.n_visual_tokens
        )));
    }
    let intention = encode_intention(&step.intention, vocab)?;
    if intention.len() > layout.max_intention_tokens {
        return Err(oversize("intention", intention.len(), layout.max_intention_tokens));
    }
    if step.env_tokens.len() != layout.n_env_tokens {
        return Err(Error::data(format!(
            "env segment has {} tokens, layout expects {}",
            step.env_tokens.len(),
            layout.n_env_tokens
        )));
    }
    if step.action as u32 >= space.n_actions {
        return Err(Error::data(format!("action segment holds invalid action id {}", step.action)));
    }

    let mut tokens = Vec::with_capacity(layout.total_len());
    tokens.extend(step.instruction.iter().map(|&w| space.word(w)));
    tokens.resize(layout.n_instruction_tokens, TokenSpace::PAD);
    tokens.extend(std::iter::repeat_n(TokenSpace::VIS, layout.n_visual_tokens));
    tokens.push(TokenSpace::ACT);
    tokens.push(space.action(step.action));
    tokens.extend(intention.iter().map(|&k| space.keyword(k)));
    tokens.extend(std::iter::repeat_n(TokenSpace::PAD, layout.max_intention_tokens - intention.len()));
    tokens.extend(step.env_tokens.iter().map(|&c| space.env(c)));

    let segment_tags = layout.tags();
    let loss_mask = segment_tags
        .iter()
        .map(|t| u8::from(matches!(t, SegmentTag::Action | SegmentTag::Intention | SegmentTag::Env)))
        .collect();
    Ok(TrainingSequence {
        token_ids: tokens,
        loss_mask,
        segment_tags,
        patches,
    })
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Drops supervision on disabled abstraction segments.
    pub fn with_supervision(mut self, intention: bool, env: bool) -> Self {
        for (m, t) in self.loss_mask.iter_mut().zip(&self.segment_tags) {
            if (*t == SegmentTag::Intention && !intention) || (*t == SegmentTag::Env && !env) {
                *m = 0;
            }
        }
        self
    }

    /// Full-length model input with identity position ids.
    pub fn model_input(&self) -> ModelInput {
        self.prefix_input(self.len())
    }

    /// First `len` positions as model input.
    pub fn prefix_input(&self, len: usize) -> ModelInput {
        let mut next_patch = 0;
        let slots = self.token_ids[..len]
            .iter()
            .zip(&self.segment_tags)
            .map(|(&t, &tag)| {
                if tag == SegmentTag::Visual {
                    next_patch += 1;
                    Slot::Patch(next_patch - 1)
                } else {
                    Slot::Token(t)
                }
            })
            .collect();
        ModelInput {
            slots,
            positions: (0..len).collect(),
            patches: self.patches.clone(),
        }
    }

    /// Per-position loss weight on the *target* token (mask times segment weight).
    pub fn target_weights(&self, w: &LossWeights) -> Vec<f64> {
        self.loss_mask
            .iter()
            .zip(&self.segment_tags)
            .map(|(&m, &t)| if m == 1 { w.of(t) } else { 0.0 })
            .collect()
    }

    /// Shortest prefix that still contains every weighted target.
    pub fn supervised_len(&self, w: &LossWeights) -> usize {
        self.target_weights(w)
            .iter()
            .rposition(|&x| x != 0.0)
            .map_or(0, |p| p + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NllBreakdown {
    pub action: f64,
    pub intention: f64,
    pub env: f64,
    /// `action + intention + env`.
    pub total: f64,
}

/// Masked cross-entropy per segment. `logits` is `rows x vocab`, where row `p`
/// predicts token `p + 1`; `rows` may be shorter than the sequence as long as
/// it covers every masked target.
pub fn nll_decomposition(logits: &[f64], vocab: usize, seq: &TrainingSequence) -> Result<NllBreakdown> {
    if vocab == 0 || !logits.len().is_multiple_of(vocab) {
        return Err(Error::data(format!("logit buffer of {} is not a multiple of vocab {vocab}", logits.len())));
    }
    let rows = logits.len() / vocab;
    let mut sums = [0.0f64; 3];
    for p in 1..seq.len() {
        if seq.loss_mask[p] == 0 {
            continue;
        }
        if p > rows {
            return Err(Error::data(format!("no logits for supervised position {p} (have {rows} rows)")));
        }
        let target = seq.token_ids[p] as usize;
        if target >= vocab {
            return Err(Error::data(format!("target token {target} outside vocab {vocab}")));
        }
        let row = &logits[(p - 1) * vocab..p * vocab];
        let nll = -log_softmax_at(row, target);
        let slot = match seq.segment_tags[p] {
            SegmentTag::Action => 0,
            SegmentTag::Intention => 1,
            SegmentTag::Env => 2,
            other => return Err(Error::data(format!("mask set on {other:?} position {p}"))),
        };
        sums[slot] += nll;
    }
    Ok(NllBreakdown {
        action: sums[0],
        intention: sums[1],
        env: sums[2],
        total: sums[0] + sums[1] + sums[2],
    })
}

pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// Greedy action from the marker-position logits; ties go to the lower id.
pub fn greedy_action(logits_row: &[f64], space: &TokenSpace) -> u8 {
    let mut best = 0u8;
    let mut best_v = f64::NEG_INFINITY;
    for (a, t) in space.action_range().enumerate() {
        let v = logits_row[t as usize];
        if v > best_v {
            best_v = v;
            best = a as u8;
        }
    }
    best
}

/// Decision-time input: `[instruction | visual | ACT]`, nothing after.
pub fn inference_input(seq: &TrainingSequence, layout: &LayoutSpec) -> ModelInput {
    seq.prefix_input(layout.inference_len())
}

/// Decision-time input built straight from an observation, without the
/// training targets. Equal to `inference_input` of the assembled sequence.
pub fn observation_input(
    instruction: &[u16],
    raster: &TexturedRaster,
    layout: &LayoutSpec,
    space: &TokenSpace,
    patch_size: usize,
) -> Result<ModelInput> {
    if instruction.len() > layout.n_instruction_tokens {
        return Err(Error::data(format!(
            "instruction segment has {} tokens, layout allows {}",
            instruction.len(),
            layout.n_instruction_tokens
        )));
    }
    let patches = raster.patches(patch_size)?;
    let n_patches = patches.len() / (patch_size * patch_size);
    if n_patches != layout.n_visual_tokens {
        return Err(Error::data(format!(
            "visual segment has {n_patches} patches, layout expects {}",
            layout.n_visual_tokens
        )));
    }
    let mut slots: Vec<Slot> = instruction.iter().map(|&w| Slot::Token(space.word(w))).collect();
    slots.resize(layout.n_instruction_tokens, Slot::Token(TokenSpace::PAD));
    slots.extend((0..n_patches).map(Slot::Patch));
    slots.push(Slot::Token(TokenSpace::ACT));
    Ok(ModelInput {
        positions: (0..slots.len()).collect(),
        slots,
        patches,
    })
}

/// Runs only the prefix through the marker and decodes the action.
pub fn truncate_for_inference(model: &Model, seq: &TrainingSequence, layout: &LayoutSpec, space: &TokenSpace) -> Result<u8> {
    let input = inference_input(seq, layout);
    let out = model.forward_last(&input)?;
    Ok(greedy_action(&out.last_logits, space))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::{render, Entity, RenderConfig, WorldState};
    use crate::intention::build_vocabulary;

    fn vocab() -> IntentionVocabulary {
        build_vocabulary(&[vec!["waypoint", "item", "enemy", "wall"]]).unwrap()
    }

    fn small_step(intention: Vec<u16>) -> EpisodeStep {
        let mut cells = vec![Entity::Empty; 4 * 4];
        cells[5] = Entity::Item;
        let world = WorldState::new(4, cells, (0, 0), 0).unwrap();
        let (map, raster) = render(&world, 3, &RenderConfig::default());
        EpisodeStep {
            instruction: vec![0, 1, 2, 3],
            semantic_map: map,
            raster,
            action: 2,
            intention: IntentionSequence { keyword_ids: intention },
            env_tokens: vec![class::PERSON, class::OTHER, class::ITEM, class::OTHER, class::OTHER, class::PAD, class::OTHER, class::PAD],
        }
    }

    fn small_layout() -> LayoutSpec {
        LayoutSpec {
            n_instruction_tokens: 4,
            n_visual_tokens: 16,
            n_action_tokens: 1,
            max_intention_tokens: 3,
            n_env_tokens: 8,
        }
    }

    #[test]
    fn layout_and_mask() {
        let v = vocab();
        let space = TokenSpace::for_vocab(&v);
        let seq = assemble_training_sequence(&small_step(vec![0, 1]), &small_layout(), &space, &v, 4).unwrap();
        assert_eq!(seq.len(), 4 + 16 + 1 + 1 + 3 + 8);
        let mut expected = vec![0u8; 4 + 16 + 1];
        expected.extend([1u8; 1 + 3 + 8]);
        assert_eq!(seq.loss_mask, expected);
        assert_eq!(seq.token_ids[21], space.action(2));
        assert_eq!(seq.token_ids[20], TokenSpace::ACT);
        assert_eq!(&seq.token_ids[22..25], &[space.keyword(0), space.keyword(1), space.keyword(4)]);
        assert_eq!(seq.token_ids[25], space.env(class::PERSON));
        assert_eq!(seq.token_ids[30], TokenSpace::PAD);
        assert_eq!(seq.patches.len(), 16 * 16);
    }

    #[test]
    fn intention_only_changes_its_segment() {
        let v = vocab();
        let space = TokenSpace::for_vocab(&v);
        let layout = small_layout();
        let a = assemble_training_sequence(&small_step(vec![0, 1]), &layout, &space, &v, 4).unwrap();
        let b = assemble_training_sequence(&small_step(vec![2]), &layout, &space, &v, 4).unwrap();
        let int = layout.range(SegmentTag::Intention);
        for p in 0..a.len() {
            if !int.contains(&p) {
                assert_eq!(a.token_ids[p], b.token_ids[p]);
            }
        }
        assert_ne!(a.token_ids[int.clone()], b.token_ids[int]);
    }

    #[test]
    fn oversized_segments_name_themselves() {
        let v = vocab();
        let space = TokenSpace::for_vocab(&v);
        let mut step = small_step(vec![0, 1]);
        step.instruction = vec![0; 5];
        let err = assemble_training_sequence(&step, &small_layout(), &space, &v, 4).unwrap_err();
        assert!(err.to_string().contains("instruction"), "{err}");
        let step = small_step(vec![0, 1, 2]);
        let err = assemble_training_sequence(&step, &small_layout(), &space, &v, 4).unwrap_err();
        assert!(err.to_string().contains("intention"), "{err}");
        let mut step = small_step(vec![0]);
        step.env_tokens.push(class::OTHER);
        let err = assemble_training_sequence(&step, &small_layout(), &space, &v, 4).unwrap_err();
        assert!(err.to_string().contains("env"), "{err}");
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = vocab();
        let space = TokenSpace::for_vocab(&v);
        let seq = assemble_training_sequence(&small_step(vec![0, 1]), &small_layout(), &space, &v, 4).unwrap();
        let w = space.vocab_size();
        let logits = vec![0.25; seq.len() * w];
        let nll = nll_decomposition(&logits, w, &seq).unwrap();
        let ln_w = (w as f64).ln();
        assert!((nll.action - ln_w).abs() < 1e-12);
        assert!((nll.intention - 3.0 * ln_w).abs() < 1e-12);
        assert!((nll.env - 8.0 * ln_w).abs() < 1e-12);
        assert_eq!(nll.total, nll.action + nll.intention + nll.env);
    }

    #[test]
    fn supervision_toggles() {
        let v = vocab();
        let space = TokenSpace::for_vocab(&v);
        let layout = small_layout();
        let seq = assemble_training_sequence(&small_step(vec![0, 1]), &layout, &space, &v, 4).unwrap();
        let act_only = seq.clone().with_supervision(false, false);
        assert_eq!(act_only.loss_mask.iter().filter(|&&m| m == 1).count(), 1);
        assert_eq!(act_only.supervised_len(&LossWeights::default()), layout.range(SegmentTag::Action).end);
        let lw = LossWeights { action: 1.0, intention: 0.0, env: 0.0 };
        assert_eq!(seq.supervised_len(&lw), layout.range(SegmentTag::Action).end);
        assert_eq!(seq.supervised_len(&LossWeights::default()), seq.len());
    }

    #[test]
    fn nll_shape_errors() {
        let v = vocab();
        let space = TokenSpace::for_vocab(&v);
        let seq = assemble_training_sequence(&small_step(vec![0]), &small_layout(), &space, &v, 4).unwrap();
        let w = space.vocab_size();
        assert!(nll_decomposition(&[0.0; 7], w, &seq).is_err());
        assert!(nll_decomposition(&vec![0.0; 3 * w], w, &seq).is_err());
    }

    #[test]
    fn greedy_action_ties_to_lowest() {
        let space = TokenSpace::new(4, 10);
        let mut row = vec![0.0; space.vocab_size()];
        assert_eq!(greedy_action(&row, &space), 0);
        row[space.action(3) as usize] = 1.0;
        row[space.action(5) as usize] = 1.0;
        assert_eq!(greedy_action(&row, &space), 3);
    }
}
