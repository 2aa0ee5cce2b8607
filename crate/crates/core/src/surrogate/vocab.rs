use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const ITEM: u32 = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<item>"];

/// Word-level vocabulary: the specials followed by the most frequent words
/// (ties broken alphabetically).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    pub fn build<'a, I>(sentences: I, max_words: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for w in s {
                if !SPECIALS.contains(&w.as_str()) {
                    *counts.entry(w.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .take(max_words)
                    .map(|(w, _)| w.to_string()),
            )
            .collect::<Vec<_>>();
        Vocab::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order_and_cap() {
        let s: Vec<Vec<String>> = vec![
            ["b", "a", "a", "c"].iter().map(|s| s.to_string()).collect(),
            ["c", "a", "<item>"].iter().map(|s| s.to_string()).collect(),
        ];
        let v = Vocab::build(s.iter().map(Vec::as_slice), 2);
        assert_eq!(v.len(), 7);
        assert_eq!(v.word(5), "a");
        assert_eq!(v.word(6), "c");
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("<item>"), ITEM);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&json).unwrap(), v);
    }
}
