use crate::error::{Error, Result};
use crate::training::vocab::{Vocabulary, PAD};

/// Splits corpus text into documents of sentences. One sentence per line;
/// blank (or whitespace-only) lines separate documents.
pub fn split_documents(text: &str) -> Vec<Vec<&str>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.trim());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// A sentence and its successor from the same document. `previous` is the
/// sentence before `source`, when there is one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub previous: Option<Vec<u32>>,
}

/// One pair per adjacent sentence pair inside each document; pairs never
/// cross a document boundary.
pub fn make_pairs(text: &str, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for doc in split_documents(text) {
        let ids: Vec<Vec<u32>> = doc.iter().map(|s| vocab.encode(s)).collect();
        for i in 0..ids.len().saturating_sub(1) {
            pairs.push(SentencePair {
                source: ids[i].clone(),
                target: ids[i + 1].clone(),
                previous: i.checked_sub(1).map(|p| ids[p].clone()),
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(pairs)
}

/// Fixed-length id row plus the number of real tokens in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<u32>,
    pub valid: usize,
}

impl Padded {
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.valid]
    }
}

/// Keeps the first `max_len` ids, right-padding with PAD when shorter.
pub fn pad_clip(ids: &[u32], max_len: usize) -> Padded {
    let valid = ids.len().min(max_len);
    let mut out = ids[..valid].to_vec();
    out.resize(max_len, PAD);
    Padded { ids: out, valid }
}

/// A batch of pairs padded/clipped to a common length.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub sources: Vec<Padded>,
    pub targets: Vec<Padded>,
    pub previous: Vec<Option<Padded>>,
}

impl PaddedBatch {
    pub fn new(pairs: &[&SentencePair], max_len: usize) -> Self {
        PaddedBatch {
            sources: pairs.iter().map(|p| pad_clip(&p.source, max_len)).collect(),
            targets: pairs.iter().map(|p| pad_clip(&p.target, max_len)).collect(),
            previous: pairs
                .iter()
                .map(|p| p.previous.as_ref().map(|v| pad_clip(v, max_len)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}
