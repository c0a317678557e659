//! Intention keyword vocabulary and per-task keyword targets.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridworld::{TaskDescriptor, TaskType};

pub const MAX_INTENTION_LEN: usize = 4;

/// Keywords with ids contiguous from 0; `end_token_id` is one past the last keyword.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntentionVocabulary {
    keywords: Vec<String>,
    index: HashMap<String, u16>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    keywords: BTreeMap<String, u16>,
    end_token_id: u16,
}

impl IntentionVocabulary {
    pub fn from_keywords(keywords: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(keywords.len());
        for (i, k) in keywords.iter().enumerate() {
            if index.insert(k.clone(), i as u16).is_some() {
                return Err(Error::config(format!("keyword {k:?} appears twice")));
            }
        }
        Ok(IntentionVocabulary { keywords, index })
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn end_token_id(&self) -> u16 {
        self.keywords.len() as u16
    }

    pub fn id(&self, keyword: &str) -> Option<u16> {
        self.index.get(keyword).copied()
    }

    pub fn keyword(&self, id: u16) -> Option<&str> {
        self.keywords.get(id as usize).map(String::as_str)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabularyFile {
            keywords: self.index.iter().map(|(k, &v)| (k.clone(), v)).collect(),
            end_token_id: self.end_token_id(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        let n = file.keywords.len();
        let mut keywords = vec![None; n];
        for (k, id) in file.keywords {
            let slot = keywords
                .get_mut(id as usize)
                .ok_or_else(|| Error::data(format!("keyword id {id} not contiguous from 0")))?;
            if slot.is_some() {
                return Err(Error::data(format!("keyword id {id} assigned twice")));
            }
            *slot = Some(k);
        }
        if file.end_token_id as usize != n {
            return Err(Error::data(format!("end token id {} should be {n}", file.end_token_id)));
        }
        IntentionVocabulary::from_keywords(keywords.into_iter().map(Option::unwrap).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        IntentionVocabulary::from_json(&text)
    }

    /// Stable digest of the id assignment.
    pub fn digest(&self) -> String {
        crate::digest_str(&self.keywords.join("\n"))
    }
}

/// Keyword ids, without the end token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IntentionSequence {
    pub keyword_ids: Vec<u16>,
}

/// Ids assigned in first-seen order over the corpus.
pub fn build_vocabulary<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<IntentionVocabulary> {
    if corpus.is_empty() {
        return Err(Error::config("cannot build an intention vocabulary from an empty corpus"));
    }
    let mut seen = Vec::new();
    for seq in corpus {
        for kw in seq {
            let kw = kw.as_ref();
            if !seen.iter().any(|s: &String| s == kw) {
                seen.push(kw.to_string());
            }
        }
    }
    IntentionVocabulary::from_keywords(seen)
}

/// Keyword list for a task, goal noun first.
pub fn oracle_intentions(task: &TaskDescriptor) -> Vec<&'static str> {
    task_keywords(task.task_type)
}

pub fn task_keywords(task_type: TaskType) -> Vec<&'static str> {
    match task_type {
        TaskType::ReachItem => vec!["waypoint", "item"],
        TaskType::ReachVehicle => vec!["waypoint", "vehicle"],
        TaskType::ReachSafezone => vec!["waypoint", "safezone"],
        TaskType::EngageEnemyUsingCover => vec!["enemy", "wall"],
    }
}

/// Parses a task-type name and returns its keywords.
pub fn oracle_intentions_by_name(task_type: &str) -> Result<Vec<&'static str>> {
    let t: TaskType = task_type.parse()?;
    Ok(task_keywords(t))
}

pub fn to_sequence<S: AsRef<str>>(keywords: &[S], vocab: &IntentionVocabulary) -> Result<IntentionSequence> {
    if keywords.len() > MAX_INTENTION_LEN {
        return Err(Error::data(format!(
            "intention has {} keywords, maximum is {MAX_INTENTION_LEN}",
            keywords.len()
        )));
    }
    let keyword_ids = keywords
        .iter()
        .map(|k| {
            vocab
                .id(k.as_ref())
                .ok_or_else(|| Error::data(format!("unknown intention keyword {:?}", k.as_ref())))
        })
        .collect::<Result<_>>()?;
    Ok(IntentionSequence { keyword_ids })
}

/// Keyword ids followed by the end token.
pub fn encode_intention(seq: &IntentionSequence, vocab: &IntentionVocabulary) -> Result<Vec<u16>> {
    let mut out = Vec::with_capacity(seq.keyword_ids.len() + 1);
    for &id in &seq.keyword_ids {
        if id as usize >= vocab.len() {
            return Err(Error::data(format!("keyword id {id} outside vocabulary of {}", vocab.len())));
        }
        out.push(id);
    }
    out.push(vocab.end_token_id());
    Ok(out)
}

pub fn decode_intention(ids: &[u16], vocab: &IntentionVocabulary) -> Result<IntentionSequence> {
    let end = vocab.end_token_id();
    let (last, body) = ids
        .split_last()
        .ok_or_else(|| Error::data("empty intention token list"))?;
    if *last != end {
        return Err(Error::data("intention token list is not terminated by the end token"));
    }
    if let Some(bad) = body.iter().find(|&&id| id >= end) {
        return Err(Error::data(format!("token {bad} is not a keyword id")));
    }
    Ok(IntentionSequence {
        keyword_ids: body.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(v: &[&[&str]]) -> Vec<Vec<String>> {
        v.iter().map(|s| s.iter().map(|w| w.to_string()).collect()).collect()
    }

    #[test]
    fn first_seen_ids() {
        let v = build_vocabulary(&words(&[&["enemy", "wall"], &["wall", "item"]])).unwrap();
        assert_eq!(v.id("enemy"), Some(0));
        assert_eq!(v.id("wall"), Some(1));
        assert_eq!(v.id("item"), Some(2));
        assert_eq!(v.end_token_id(), 3);
    }

    #[test]
    fn single_sequence_in_order() {
        let v = build_vocabulary(&words(&[&["waypoint", "safezone", "enemy"]])).unwrap();
        assert_eq!(v.keywords(), &["waypoint", "safezone", "enemy"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<Vec<String>> = vec![];
        assert!(matches!(build_vocabulary(&empty), Err(Error::Config(_))));
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(task_keywords(TaskType::EngageEnemyUsingCover), vec!["enemy", "wall"]);
        assert_eq!(task_keywords(TaskType::ReachSafezone), vec!["waypoint", "safezone"]);
        assert_eq!(oracle_intentions_by_name("reach_item").unwrap(), vec!["waypoint", "item"]);
        assert!(matches!(oracle_intentions_by_name("parachute"), Err(Error::Data(_))));
    }

    #[test]
    fn encode_decode_edges() {
        let v = build_vocabulary(&words(&[&["a", "b", "c"]])).unwrap();
        let empty = IntentionSequence::default();
        assert_eq!(encode_intention(&empty, &v).unwrap(), vec![3]);
        assert_eq!(decode_intention(&[3], &v).unwrap(), empty);
        let single = IntentionSequence { keyword_ids: vec![1] };
        assert_eq!(encode_intention(&single, &v).unwrap(), vec![1, 3]);
        assert_eq!(decode_intention(&[1, 3], &v).unwrap(), single);
        assert!(to_sequence(&["zzz"], &v).is_err());
        assert!(decode_intention(&[1, 2], &v).is_err());
        assert!(decode_intention(&[], &v).is_err());
        assert!(to_sequence(&["a", "b", "c", "a", "b"], &v).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let v = build_vocabulary(&words(&[&["waypoint", "item"], &["enemy", "wall"]])).unwrap();
        let back = IntentionVocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(IntentionVocabulary::from_json(r#"{"keywords":{"a":1},"end_token_id":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn duplicated_corpus_same_vocab(corpus in prop::collection::vec(prop::collection::vec("[a-f]{1,3}", 0..4), 1..6)) {
            let once = build_vocabulary(&corpus).unwrap();
            let mut twice = corpus.clone();
            twice.extend(corpus.iter().cloned());
            prop_assert_eq!(build_vocabulary(&twice).unwrap(), once);
        }

        #[test]
        fn encode_decode_roundtrip(ids in prop::collection::vec(0u16..6, 0..=MAX_INTENTION_LEN)) {
            let v = build_vocabulary(&words(&[&["k0", "k1", "k2", "k3", "k4", "k5"]])).unwrap();
            let seq = IntentionSequence { keyword_ids: ids };
            let enc = encode_intention(&seq, &v).unwrap();
            prop_assert_eq!(enc.last().copied(), Some(v.end_token_id()));
            prop_assert_eq!(decode_intention(&enc, &v).unwrap(), seq);
        }
    }
}
