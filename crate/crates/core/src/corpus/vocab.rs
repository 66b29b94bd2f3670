//! Character-level vocabulary with reserved structural tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, TaskPool};

/// Sequence-start marker (reserved; not emitted by the packer).
pub const BOS: u32 = 0;
/// Emitted before every demonstration input.
pub const SEP_X: u32 = 1;
/// Emitted before every demonstration label.
pub const SEP_Y: u32 = 2;
/// Emitted after every demonstration label; also the generation stop token.
pub const EOD: u32 = 3;

const NUM_SPECIAL: u32 = 4;

/// Bijective char <-> id map. Ids 0..=3 are the special tokens above;
/// characters occupy 4.. in sorted order, so the map is fully determined
/// by the corpus text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, u32>,
}

impl Vocabulary {
    /// Builds the vocabulary from every instruction, input, and label in
    /// the given pools.
    pub fn build(pools: &[&TaskPool]) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for pool in pools {
            set.extend(pool.instruction_text.chars());
            for ex in &pool.examples {
                set.extend(ex.input_text.chars());
                set.extend(ex.label_text.chars());
            }
        }
        Self::from_chars(set.into_iter().collect())
    }

    pub fn from_chars(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + NUM_SPECIAL))
            .collect();
        Self { chars, index }
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + NUM_SPECIAL))
            .collect();
    }

    /// Total id count including the four special tokens.
    pub fn size(&self) -> usize {
        self.chars.len() + NUM_SPECIAL as usize
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode_char(&self, c: char) -> Result<u32, CorpusError> {
        self.index
            .get(&c)
            .copied()
            .ok_or(CorpusError::UnknownChar(c))
    }

    pub fn encode_str(&self, s: &str) -> Result<Vec<u32>, CorpusError> {
        s.chars().map(|c| self.encode_char(c)).collect()
    }

    /// Decodes a run of character tokens. Special tokens render as
    /// bracketed names so they can never collide with corpus text.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let mut out = String::new();
        for &t in tokens {
            match t {
                BOS => out.push_str("<bos>"),
                SEP_X => out.push_str("<sep_x>"),
                SEP_Y => out.push_str("<sep_y>"),
                EOD => out.push_str("<eod>"),
                _ => match self.chars.get((t - NUM_SPECIAL) as usize) {
                    Some(&c) => out.push(c),
                    None => out.push('\u{fffd}'),
                },
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, TaskExample};

    fn pool() -> TaskPool {
        TaskPool {
            task_id: "t".into(),
            instruction_text: "abc".into(),
            split: Split::Train,
            examples: vec![
                TaskExample {
                    task_id: "t".into(),
                    input_text: "ba".into(),
                    label_text: "d".into(),
                },
                TaskExample {
                    task_id: "t".into(),
                    input_text: "c".into(),
                    label_text: "e".into(),
                },
            ],
        }
    }

    #[test]
    fn ids_are_sorted_and_reserved() {
        let v = Vocabulary::build(&[&pool()]);
        assert_eq!(v.chars(), &['a', 'b', 'c', 'd', 'e']);
        assert_eq!(v.size(), 9);
        assert_eq!(v.encode_char('a').unwrap(), 4);
        assert_eq!(v.encode_char('e').unwrap(), 8);
    }

    #[test]
    fn round_trip_and_unknown() {
        let v = Vocabulary::build(&[&pool()]);
        let ids = v.encode_str("cab").unwrap();
        assert_eq!(v.decode(&ids), "cab");
        assert!(matches!(
            v.encode_char('z'),
            Err(CorpusError::UnknownChar('z'))
        ));
    }

    #[test]
    fn serde_round_trip_reindexes() {
        let v = Vocabulary::build(&[&pool()]);
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(v, back);
        assert_eq!(back.encode_char('b').unwrap(), 5);
    }
}
