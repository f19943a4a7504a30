//! Corpus ingestion, whitespace tokenization, closed vocabulary, document
//! assembly with sentence boundary tokens, and window packing for training.
//!
//! Corpus file format: UTF-8, one sentence per line, blank line between
//! documents. Vocabulary file format: one token per line; the first three
//! lines are the reserved markers, so the n-th non-reserved token (1-based)
//! carries id n - 1 + 3.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOUNDARY_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const RESERVED_TOKENS: [&str; 3] = ["<pad>", "</s>", "<unk>"];

/// A document before vocabulary lookup: sentences of whitespace tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDocument {
    pub sentences: Vec<Vec<String>>,
}

/// Ordered sentences of token ids; every sentence ends with [`BOUNDARY_ID`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    sentences: Vec<Vec<u32>>,
}

impl Document {
    pub fn new(sentences: Vec<Vec<u32>>) -> Result<Self> {
        for (i, s) in sentences.iter().enumerate() {
            if s.len() < 2 || s.last() != Some(&BOUNDARY_ID) {
                return Err(Error::validation(format!(
                    "sentence {i} must be non-empty and boundary-terminated"
                )));
            }
            if s[..s.len() - 1].contains(&BOUNDARY_ID) {
                return Err(Error::validation(format!(
                    "sentence {i} contains an interior boundary token"
                )));
            }
        }
        Ok(Document { sentences })
    }

    pub fn sentences(&self) -> &[Vec<u32>] {
        &self.sentences
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    /// Total token count, boundary tokens included.
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    /// All token ids concatenated in document order.
    pub fn tokens(&self) -> Vec<u32> {
        self.sentences.iter().flatten().copied().collect()
    }
}

/// Token <-> id bijection with reserved ids 0 (padding), 1 (boundary),
/// 2 (unknown). Reserved ids are never reassigned.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved markers are always present
    }

    pub fn token_id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode_sentence(&self, words: &[&str]) -> Vec<u32> {
        let mut ids: Vec<u32> = words.iter().map(|w| self.token_id(w)).collect();
        ids.push(BOUNDARY_ID);
        ids
    }

    pub fn encode_document(&self, raw: &RawDocument) -> Document {
        let sentences = raw
            .sentences
            .iter()
            .map(|s| {
                let words: Vec<&str> = s.iter().map(|w| w.as_str()).collect();
                self.encode_sentence(&words)
            })
            .collect();
        Document { sentences }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        crate::write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_utf8(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED_TOKENS.len() {
            return Err(Error::validation(format!(
                "vocabulary file {} is missing the reserved marker lines",
                path.display()
            )));
        }
        for (i, marker) in RESERVED_TOKENS.iter().enumerate() {
            if lines[i] != *marker {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected reserved marker {marker}, found {:?}", lines[i]),
                });
            }
        }
        Ok(Vocabulary::from_tokens(
            lines.iter().map(|s| s.to_string()).collect(),
        ))
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    // validate line by line so encoding errors carry a line number
    let mut line = 1usize;
    for chunk in bytes.split(|&b| b == b'\n') {
        if std::str::from_utf8(chunk).is_err() {
            return Err(Error::Encoding { line });
        }
        line += 1;
    }
    Ok(String::from_utf8(bytes).expect("validated above"))
}

/// Parse a corpus file into raw documents: one sentence per line, blank
/// line separates documents, tokens split on whitespace. Empty documents
/// are dropped.
pub fn load_raw_documents(path: &Path) -> Result<Vec<RawDocument>> {
    let text = read_utf8(path)?;
    Ok(parse_raw_documents(&text))
}

pub fn parse_raw_documents(text: &str) -> Vec<RawDocument> {
    let mut docs = Vec::new();
    let mut current: Vec<Vec<String>> = Vec::new();
    for line in text.lines() {
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            if !current.is_empty() {
                docs.push(RawDocument {
                    sentences: std::mem::take(&mut current),
                });
            }
        } else {
            current.push(words);
        }
    }
    if !current.is_empty() {
        docs.push(RawDocument { sentences: current });
    }
    docs
}

/// Load a corpus and encode it against a vocabulary: whitespace tokens,
/// boundary token appended per sentence, unknown words mapped to `<unk>`.
pub fn load_documents(path: &Path, vocab: &Vocabulary) -> Result<Vec<Document>> {
    let raw = load_raw_documents(path)?;
    Ok(raw.iter().map(|d| vocab.encode_document(d)).collect())
}

/// Build a closed vocabulary. Tokens seen fewer than `min_count` times map
/// to unknown. Ids are assigned by count descending, ties broken
/// lexicographically, so rebuilding is deterministic.
pub fn build_vocab(documents: &[RawDocument], min_count: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::validation("build_vocab: min_count must be >= 1"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in documents {
        for sentence in &doc.sentences {
            for word in sentence {
                *counts.entry(word.as_str()).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::validation("build_vocab: empty corpus"));
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !RESERVED_TOKENS.contains(w))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(w, _)| w.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// A packed stretch of whole sentences from one document. `context_only`
/// marks positions that condition the model but receive no loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingWindow {
    pub tokens: Vec<u32>,
    /// Window-local sentence index per position; non-decreasing from 0.
    pub sentence_index: Vec<usize>,
    pub doc_id: usize,
    pub context_only: Vec<bool>,
}

impl TrainingWindow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of positions that receive loss.
    pub fn num_predicted(&self) -> usize {
        self.context_only.iter().filter(|&&c| !c).count()
    }
}

/// Pack a document into windows of at most `l_max` tokens. Whole sentences
/// only; when the document spills over, each continuation window re-includes
/// up to `c_ctx` trailing tokens (whole sentences) marked context-only.
pub fn make_windows(
    doc: &Document,
    doc_id: usize,
    l_max: usize,
    c_ctx: usize,
) -> Result<Vec<TrainingWindow>> {
    for (i, s) in doc.sentences.iter().enumerate() {
        if s.len() > l_max {
            return Err(Error::validation(format!(
                "sentence {i} of document {doc_id} has {} tokens, more than L_max = {l_max}",
                s.len()
            )));
        }
    }
    let mut windows = Vec::new();
    let mut next = 0usize; // first sentence not yet emitted as fresh content
    while next < doc.sentences.len() {
        let mut tokens = Vec::new();
        let mut sentence_index = Vec::new();
        let mut context_only = Vec::new();
        let mut local_sentence = 0usize;

        if next > 0 && c_ctx > 0 {
            // maximal suffix of already-emitted sentences that fits both the
            // context budget and the window alongside the next sentence
            let budget = c_ctx.min(l_max - doc.sentences[next].len());
            let mut start = next;
            let mut used = 0usize;
            while start > 0 && used + doc.sentences[start - 1].len() <= budget {
                used += doc.sentences[start - 1].len();
                start -= 1;
            }
            for s in &doc.sentences[start..next] {
                for &t in s {
                    tokens.push(t);
                    sentence_index.push(local_sentence);
                    context_only.push(true);
                }
                local_sentence += 1;
            }
        }

        // fresh sentences while they fit
        let mut emitted = 0usize;
        while next < doc.sentences.len() && tokens.len() + doc.sentences[next].len() <= l_max {
            for &t in &doc.sentences[next] {
                tokens.push(t);
                sentence_index.push(local_sentence);
                context_only.push(false);
            }
            local_sentence += 1;
            next += 1;
            emitted += 1;
        }
        debug_assert!(emitted > 0, "context budget left no room for a sentence");
        windows.push(TrainingWindow {
            tokens,
            sentence_index,
            doc_id,
            context_only,
        });
    }
    Ok(windows)
}

/// One window per sentence, for the sentence-level model.
pub fn sentence_windows(doc: &Document, doc_id: usize, l_max: usize) -> Result<Vec<TrainingWindow>> {
    doc.sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.len() > l_max {
                return Err(Error::validation(format!(
                    "sentence {i} of document {doc_id} has {} tokens, more than L_max = {l_max}",
                    s.len()
                )));
            }
            Ok(TrainingWindow {
                tokens: s.clone(),
                sentence_index: vec![0; s.len()],
                doc_id,
                context_only: vec![false; s.len()],
            })
        })
        .collect()
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn window_loss_positions_partition_document(
            lens in proptest::collection::vec(2usize..10, 1..12),
            l_max in 10usize..40,
            c_ctx in 0usize..20,
        ) {
            let sentences: Vec<Vec<u32>> = lens
                .iter()
                .enumerate()
                .map(|(i, &n)| {
                    let mut s = vec![3 + (i as u32 % 5); n - 1];
                    s.push(BOUNDARY_ID);
                    s
                })
                .collect();
            let doc = Document::new(sentences).unwrap();
            prop_assume!(lens.iter().all(|&n| n <= l_max));
            let windows = make_windows(&doc, 0, l_max, c_ctx).unwrap();
            let mut covered = Vec::new();
            for w in &windows {
                prop_assert!(w.len() <= l_max);
                // sentence_index non-decreasing from 0
                prop_assert_eq!(w.sentence_index[0], 0);
                for i in 1..w.len() {
                    prop_assert!(w.sentence_index[i] >= w.sentence_index[i - 1]);
                }
                for (i, &ctx) in w.context_only.iter().enumerate() {
                    if !ctx {
                        covered.push(w.tokens[i]);
                    }
                }
            }
            prop_assert_eq!(covered, doc.tokens());
        }
    }
}
