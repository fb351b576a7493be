use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Placeholder fed to every position of a parallel-fill canvas. Shares the PAD
/// slot, which nothing else uses since sequences are never padded.
pub const MASK: usize = PAD;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word/id table. Ids `0..4` are reserved; corpus words start at 4.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn reserved_only() -> Self {
        Vocab::from_words(Vec::new()).expect("reserved vocab")
    }

    /// Build from the non-reserved words in id order.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        Vocab::from_full_list(all)
    }

    fn from_full_list(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    /// Non-reserved words in id order.
    pub fn corpus_words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.word(i).to_string()).collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocab::from_full_list(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Count words over all captions and keep those seen at least `min_count`
/// times. Ids go to higher counts first, ties broken lexicographically, so
/// the result does not depend on record order.
pub fn build_vocab<'a, I, S>(records: I, min_count: usize) -> Vocab
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for rec in records {
        for w in rec {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !RESERVED.contains(w))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_words(kept.into_iter().map(|(w, _)| w.to_string()).collect())
        .expect("counted words are unique")
}

/// Per-word lookup with UNK fallback. No control tokens are added.
pub fn encode_tokens<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Vec<usize> {
    words.iter().map(|w| vocab.id(w.as_ref())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn threshold_keeps_frequent_words() {
        let mut recs = vec![words("a dog a dog a dog"); 2];
        recs.push(words("zyx"));
        let v = build_vocab(recs.iter().map(|r| r.as_slice()), 5);
        assert_eq!(v.size(), 6);
        assert!(v.contains("a") && v.contains("dog"));
        assert_eq!(v.id("zyx"), UNK);
        // Equal counts: lexicographic order.
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("dog"), 5);
    }

    #[test]
    fn empty_corpus_is_reserved_only() {
        let recs: Vec<Vec<String>> = Vec::new();
        let v = build_vocab(recs.iter().map(|r| r.as_slice()), 5);
        assert_eq!(v.size(), 4);
        assert_eq!(v, Vocab::reserved_only());
    }

    #[test]
    fn frequency_orders_ids() {
        let recs = vec![words("b b b a a c")];
        let v = build_vocab(recs.iter().map(|r| r.as_slice()), 1);
        assert_eq!(v.corpus_words(), ["b", "a", "c"]);
    }

    #[test]
    fn encode_with_fallback() {
        let v = Vocab::from_words(words("a dog")).unwrap();
        assert_eq!(encode_tokens(&["a", "dog"], &v), vec![4, 5]);
        assert_eq!(encode_tokens(&["qqq"], &v), vec![UNK]);
        assert_eq!(v.decode(&encode_tokens(&["a", "dog"], &v)), vec!["a", "dog"]);
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let v = Vocab::from_words(words("x y")).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocab>(&s).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["x"]"#).is_err());
        assert!(Vocab::from_words(words("x x")).is_err());
    }
}
