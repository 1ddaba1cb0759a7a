use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token/id bijection. Ids `0..4` are reserved; the rest are ordered by
/// descending corpus frequency, ties by first occurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    freqs: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from tokens already in id order. Reserved tokens are
    /// prepended and must not appear in `tokens`.
    pub fn from_ranked(tokens: Vec<(String, u64)>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0; RESERVED.len()];
        for (t, f) in tokens {
            all.push(t);
            freqs.push(f);
        }
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens: all,
            freqs,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.freqs.get(id as usize).copied().unwrap_or(0)
    }

    /// Non-reserved `(token, frequency)` pairs in id order.
    pub fn ranked(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens
            .iter()
            .zip(&self.freqs)
            .skip(RESERVED.len())
            .map(|(t, &f)| (t.as_str(), f))
    }

    /// Whitespace tokenization; unknown words map to `UNK`.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence
            .split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined tokens, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Counts whitespace tokens over `lines` and keeps the `max_size - 4` most
/// frequent words.
pub fn build_vocab<'a, I>(lines: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size <= RESERVED.len() {
        return Err(Error::Config(format!(
            "vocabulary size must exceed {} reserved tokens, got {max_size}",
            RESERVED.len()
        )));
    }
    // (count, first occurrence)
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut seen = 0usize;
    for line in lines {
        for w in line.split_whitespace() {
            if RESERVED.contains(&w) {
                continue;
            }
            let e = counts.entry(w).or_insert((0, seen));
            e.0 += 1;
            seen += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64, usize)> =
        counts.into_iter().map(|(w, (c, f))| (w, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_ranked(
        ranked
            .into_iter()
            .map(|(w, c, _)| (w.to_string(), c))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_ranks() {
        let v = build_vocab(["a b a"], 100).unwrap();
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(v.frequency(4), 2);
        assert_eq!(v.frequency(5), 1);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn max_size_keeps_most_frequent() {
        let v = build_vocab(["x y y z y x"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("y"), Some(4));
        assert_eq!(v.id("x"), None);
        assert_eq!(v.encode("x y"), vec![UNK, 4]);
    }

    #[test]
    fn ties_follow_first_occurrence() {
        let v = build_vocab(["q p", "r p q r"], 100).unwrap();
        // all three appear twice
        let order: Vec<&str> = v.ranked().map(|(t, _)| t).collect();
        assert_eq!(order, ["q", "p", "r"]);
        for _ in 0..5 {
            assert_eq!(build_vocab(["q p", "r p q r"], 100).unwrap(), v);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(build_vocab(["a"], 4), Err(Error::Config(_))));
        assert!(matches!(
            build_vocab(["", "  "], 10),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn reserved_ids_and_decode() {
        let v = build_vocab(["hello world"], 10).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<eos>"), Some(EOS));
        let ids = [BOS, 4, 5, UNK, EOS, PAD];
        assert_eq!(v.decode(&ids), "hello world <unk>");
    }
}
