//! Greedy document-level refinement of sentence-level n-best lists.
//!
//! The initial document is the rank-1 hypothesis of every sentence.
//! Sentences are visited once, in ascending order of the gap between their
//! first- and second-best translation scores; for each, every hypothesis
//! whose translation-score gap to rank 1 stays within the threshold is
//! rescored against the full current document, and the best strictly
//! improving candidate is committed before moving on.

use std::path::Path;

use crate::corpus::{Document, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{log_prob, ModelConfig, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub text: String,
    /// Translation score t; higher is better.
    pub score: f64,
}

/// Ranked hypothesis list for one sentence; index 0 is rank 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestSentence {
    pub hyps: Vec<Hypothesis>,
}

/// Per-sentence ranked hypothesis lists for one document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NBestDocument {
    pub sentences: Vec<NBestSentence>,
}

impl NBestDocument {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sentences.iter().enumerate() {
            if s.hyps.is_empty() {
                return Err(Error::validation(format!("sentence {i} has no hypotheses")));
            }
            for w in s.hyps.windows(2) {
                if w[1].score > w[0].score {
                    return Err(Error::validation(format!(
                        "sentence {i}: translation scores increase with rank ({} after {})",
                        w[1].score, w[0].score
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankConfig {
    /// Document-LM interpolation weight.
    pub lambda_lm: f64,
    /// Translation-score threshold for candidate admissibility.
    pub tau: f64,
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_lm.is_finite() || self.lambda_lm < 0.0 {
            return Err(Error::validation("rerank: lambda must be finite and >= 0"));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(Error::validation("rerank: tau must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Anything that can assign a log-probability to a document given as
/// sentence texts.
pub trait DocumentScorer {
    fn score(&self, sentences: &[&str]) -> Result<f64>;
}

/// The trained document LM as a scorer: tokenizes against the vocabulary,
/// inserts boundary tokens, and sums per-token log-probabilities.
pub struct LmScorer<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
    pub vocab: &'a Vocabulary,
}

impl DocumentScorer for LmScorer<'_> {
    fn score(&self, sentences: &[&str]) -> Result<f64> {
        let encoded: Vec<Vec<u32>> = sentences
            .iter()
            .map(|s| {
                let words: Vec<&str> = s.split_whitespace().collect();
                self.vocab.encode_sentence(&words)
            })
            .collect();
        let doc = Document::new(encoded)?;
        Ok(log_prob(self.params, self.config, &doc)?.iter().sum())
    }
}

fn selected_texts<'a>(nbest: &'a NBestDocument, selection: &[usize]) -> Vec<&'a str> {
    selection
        .iter()
        .zip(&nbest.sentences)
        .map(|(&h, s)| s.hyps[h].text.as_str())
        .collect()
}

/// Sum of selected translation scores plus `lambda_lm` times the document
/// LM log-probability of the selected document.
pub fn combined_score(
    selection: &[usize],
    nbest: &NBestDocument,
    scorer: &dyn DocumentScorer,
    lambda_lm: f64,
) -> Result<f64> {
    if selection.len() != nbest.sentences.len() {
        return Err(Error::validation(format!(
            "selection has {} entries for {} sentences",
            selection.len(),
            nbest.sentences.len()
        )));
    }
    let mut total = 0.0;
    for (&h, s) in selection.iter().zip(&nbest.sentences) {
        let hyp = s.hyps.get(h).ok_or(Error::IndexOutOfRange {
            what: "hypothesis",
            index: h,
            bound: s.hyps.len(),
        })?;
        total += hyp.score;
    }
    if lambda_lm != 0.0 {
        total += lambda_lm * scorer.score(&selected_texts(nbest, selection))?;
    }
    Ok(total)
}

/// One committed replacement. Ranks are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub sentence: usize,
    pub old_rank: usize,
    pub new_rank: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    /// Selected hypothesis index (0-based rank) per sentence.
    pub selection: Vec<usize>,
    pub trace: Vec<TraceEntry>,
    pub baseline_score: f64,
    pub final_score: f64,
}

/// Single greedy pass over the document, as described at the top of this
/// module. Deterministic: ties in the visiting order break by sentence
/// index, and only strictly improving candidates are committed.
pub fn greedy_rerank(
    nbest: &NBestDocument,
    scorer: &dyn DocumentScorer,
    config: &RerankConfig,
) -> Result<RerankOutcome> {
    nbest.validate()?;
    config.validate()?;

    let n = nbest.sentences.len();
    let mut selection = vec![0usize; n];
    let baseline_score = combined_score(&selection, nbest, scorer, config.lambda_lm)?;
    let mut current = baseline_score;
    let mut trace = Vec::new();

    // ascending gap between first- and second-best translation scores;
    // sentences with a single hypothesis have nothing to offer
    let mut order: Vec<usize> = (0..n).filter(|&i| nbest.sentences[i].hyps.len() > 1).collect();
    order.sort_by(|&a, &b| {
        let gap = |i: usize| {
            let h = &nbest.sentences[i].hyps;
            h[0].score - h[1].score
        };
        gap(a).partial_cmp(&gap(b)).unwrap().then(a.cmp(&b))
    });

    for &i in &order {
        let hyps = &nbest.sentences[i].hyps;
        let rank1_score = hyps[0].score;
        let mut best: Option<(usize, f64)> = None;
        for (h, hyp) in hyps.iter().enumerate() {
            if h == selection[i] {
                continue;
            }
            if rank1_score - hyp.score > config.tau {
                continue;
            }
            let mut candidate = selection.clone();
            candidate[i] = h;
            let score = combined_score(&candidate, nbest, scorer, config.lambda_lm)?;
            if score > current && best.map_or(true, |(_, s)| score > s) {
                best = Some((h, score));
            }
        }
        if let Some((h, score)) = best {
            trace.push(TraceEntry {
                sentence: i,
                old_rank: selection[i] + 1,
                new_rank: h + 1,
                delta: score - current,
            });
            selection[i] = h;
            current = score;
        }
    }

    Ok(RerankOutcome {
        selection,
        trace,
        baseline_score,
        final_score: current,
    })
}

/// Parse an n-best file: `sentence_id ||| hypothesis text ||| score` per
/// line, sentence ids contiguous from 0, ranks implied by order within an
/// id.
pub fn parse_nbest(path: &Path) -> Result<NBestDocument> {
    let text = std::fs::read_to_string(path)?;
    parse_nbest_str(&text)
}

pub fn parse_nbest_str(text: &str) -> Result<NBestDocument> {
    let mut doc = NBestDocument::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split("|||").collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `id ||| hypothesis ||| score`, found {line:?}"),
            });
        }
        let id: usize = parts[0].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad sentence id {:?}", parts[0].trim()),
        })?;
        let hyp_text = parts[1].trim();
        if hyp_text.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty hypothesis".to_string(),
            });
        }
        let score: f64 = parts[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad score {:?}", parts[2].trim()),
        })?;
        if id == doc.sentences.len() {
            doc.sentences.push(NBestSentence { hyps: Vec::new() });
        } else if id > doc.sentences.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!(
                    "sentence ids must be contiguous from 0; id {id} follows {}",
                    doc.sentences.len().saturating_sub(1)
                ),
            });
        }
        let hyps = &mut doc.sentences[id].hyps;
        if let Some(last) = hyps.last() {
            if score > last.score {
                return Err(Error::validation(format!(
                    "line {line_no}: sentence {id} scores increase with rank ({score} after {})",
                    last.score
                )));
            }
        }
        hyps.push(Hypothesis {
            text: hyp_text.to_string(),
            score,
        });
    }
    doc.validate()?;
    Ok(doc)
}

/// Parse a document grouping file: one `doc_id sentence_id` pair per line.
/// Returns sentence-id lists per document, in first-appearance order of the
/// document ids. Every sentence must be assigned exactly once.
pub fn parse_doc_groups(path: &Path, num_sentences: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut seen = vec![false; num_sentences];
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (doc_id, sent_id) = match (it.next(), it.next(), it.next()) {
            (Some(d), Some(s), None) => (d, s),
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected `doc_id sentence_id`, found {line:?}"),
                })
            }
        };
        let sent: usize = sent_id.parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad sentence id {sent_id:?}"),
        })?;
        if sent >= num_sentences {
            return Err(Error::IndexOutOfRange {
                what: "sentence",
                index: sent,
                bound: num_sentences,
            });
        }
        if seen[sent] {
            return Err(Error::validation(format!(
                "line {line_no}: sentence {sent} assigned to more than one document"
            )));
        }
        seen[sent] = true;
        match groups.last_mut() {
            Some((d, sents)) if d == doc_id => sents.push(sent),
            _ => groups.push((doc_id.to_string(), vec![sent])),
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::validation(format!(
            "sentence {missing} is not assigned to any document"
        )));
    }
    Ok(groups)
}
