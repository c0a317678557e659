use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{TaskDescriptor, TaskType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verbosity {
    Terse,
    Verbose,
    DistractorLaden,
}

impl Verbosity {
    pub const ALL: [Verbosity; 3] = [Verbosity::Terse, Verbosity::Verbose, Verbosity::DistractorLaden];

    fn filler_range(self) -> (usize, usize) {
        match self {
            Verbosity::Terse => (0, 0),
            Verbosity::Verbose => (2, 4),
            Verbosity::DistractorLaden => (5, 8),
        }
    }
}

const TEMPLATES: [&[&[&str]]; 4] = [
    &[&["go", "to", "item"], &["pick", "up", "the", "loot"], &["grab", "the", "supply", "crate"]],
    &[&["get", "in", "vehicle"], &["drive", "the", "car"], &["board", "the", "truck"]],
    &[&["go", "to", "safezone"], &["rotate", "into", "the", "zone"], &["reach", "safe", "area"]],
    &[
        &["attack", "enemy", "from", "cover"],
        &["shoot", "the", "opponent", "behind", "wall"],
        &["engage", "hostile", "using", "cover"],
    ],
];

/// Nouns that identify a task target; none of them may appear as filler.
pub const TASK_NOUNS: &[&str] = &[
    "item", "loot", "supply", "crate", "vehicle", "car", "truck", "safezone", "zone", "safe", "area", "enemy",
    "opponent", "hostile", "cover", "wall",
];

/// Semantically idle words inserted into verbose instructions.
pub const DISTRACTOR_POOL: &[&str] = &[
    "please", "quickly", "now", "carefully", "find", "a", "way", "before", "time", "runs", "out", "stay", "alert",
    "and", "watch", "your", "back", "keep", "moving", "team", "is", "waiting", "do", "not", "stop", "hurry", "listen",
    "then", "okay", "it", "looks", "clear", "storm", "closing",
];

pub(super) fn n_templates(t: TaskType) -> usize {
    TEMPLATES[t.index()].len()
}

/// Fixed word list; a word's token id is its index.
pub fn word_vocabulary() -> &'static [&'static str] {
    static WORDS: OnceLock<Vec<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        let mut words: Vec<&'static str> = Vec::new();
        let all = TEMPLATES
            .iter()
            .flat_map(|ts| ts.iter())
            .flat_map(|t| t.iter())
            .chain(DISTRACTOR_POOL.iter());
        for &w in all {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        words
    })
}

fn word_id(w: &str) -> u16 {
    word_vocabulary().iter().position(|&x| x == w).expect("word in vocabulary") as u16
}

/// Instruction words for `task`; deterministic in (task, verbosity, seed).
/// Fillers are inserted around the template, which stays a subsequence.
pub fn instruction_words(task: &TaskDescriptor, verbosity: Verbosity, seed: u64) -> Vec<&'static str> {
    let ts = TEMPLATES[task.task_type.index()];
    let template = ts[task.template_id as usize % ts.len()];
    let mut words: Vec<&'static str> = template.to_vec();
    let (lo, hi) = verbosity.filler_range();
    if hi == 0 {
        return words;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1257_7A11_u64.wrapping_mul(task.task_type.index() as u64 + 1));
    let n = rng.gen_range(lo..=hi);
    for _ in 0..n {
        let w = *DISTRACTOR_POOL.choose(&mut rng).unwrap();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, w);
    }
    words
}

pub fn instruction_text(task: &TaskDescriptor, verbosity: Verbosity, seed: u64) -> Vec<u16> {
    instruction_words(task, verbosity, seed)
        .into_iter()
        .map(word_id)
        .collect()
}

/// Longest instruction any task can produce.
pub fn max_instruction_len() -> usize {
    let longest = TEMPLATES.iter().flat_map(|t| t.iter()).map(|t| t.len()).max().unwrap();
    longest + Verbosity::DistractorLaden.filler_range().1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(t: TaskType, template_id: u8) -> TaskDescriptor {
        TaskDescriptor {
            task_type: t,
            target: (0, 0),
            budget: 10,
            template_id,
            verbosity: Verbosity::Terse,
        }
    }

    fn is_subsequence(short: &[u16], long: &[u16]) -> bool {
        let mut it = long.iter();
        short.iter().all(|s| it.any(|l| l == s))
    }

    #[test]
    fn terse_safezone_template() {
        let words = instruction_words(&task(TaskType::ReachSafezone, 0), Verbosity::Terse, 99);
        assert_eq!(words, vec!["go", "to", "safezone"]);
        let ids = instruction_text(&task(TaskType::ReachSafezone, 0), Verbosity::Terse, 99);
        let vocab = word_vocabulary();
        assert_eq!(ids.iter().map(|&i| vocab[i as usize]).collect::<Vec<_>>(), words);
    }

    #[test]
    fn verbose_contains_terse() {
        for t in TaskType::ALL {
            for tpl in 0..3 {
                for seed in 0..50 {
                    let terse = instruction_text(&task(t, tpl), Verbosity::Terse, seed);
                    for v in [Verbosity::Verbose, Verbosity::DistractorLaden] {
                        let long = instruction_text(&task(t, tpl), v, seed);
                        assert!(long.len() > terse.len());
                        assert!(long.len() <= max_instruction_len());
                        assert!(is_subsequence(&terse, &long));
                        assert_eq!(long, instruction_text(&task(t, tpl), v, seed));
                    }
                }
            }
        }
    }

    #[test]
    fn distractor_pool_has_no_task_nouns() {
        for w in DISTRACTOR_POOL {
            assert!(!TASK_NOUNS.contains(w), "{w} is a task noun");
        }
        // every template mentions at least one noun of its own task only
        for (ti, ts) in TEMPLATES.iter().enumerate() {
            for t in ts.iter() {
                assert!(t.iter().any(|w| TASK_NOUNS.contains(w)), "template {ti} {t:?}");
            }
        }
    }
}
