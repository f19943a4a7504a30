//! Intra-sentential, inter-sentential, and causal attention masks.
//!
//! Masks are square boolean matrices over window positions. The intra mask
//! enables keys in the query's own sentence up to and including the query
//! position; the inter mask enables every token of previous complete
//! sentences, boundary markers included. Their union per row is exactly the
//! causal prefix.

use crate::error::{Error, Result};

/// Square boolean key mask, row-major: `data[q * t + k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    t: usize,
    data: Vec<bool>,
}

impl Mask {
    fn new(t: usize) -> Self {
        Mask {
            t,
            data: vec![false; t * t],
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.data[q * self.t + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.data[q * self.t..(q + 1) * self.t]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    /// True when row `q` enables at least one key.
    pub fn row_any(&self, q: usize) -> bool {
        self.row(q).iter().any(|&b| b)
    }
}

/// Per-window intra- and inter-sentential key masks.
#[derive(Debug, Clone)]
pub struct AttentionMaskPair {
    pub intra: Mask,
    pub inter: Mask,
}

/// Build the intra/inter mask pair from per-position sentence indices.
///
/// `intra[q,k]` is set iff k and q are in the same sentence and k <= q
/// (the query position attends to itself). `inter[q,k]` is set iff k
/// belongs to an earlier sentence.
pub fn build_masks(sentence_index: &[usize]) -> Result<AttentionMaskPair> {
    let t = sentence_index.len();
    if t == 0 {
        return Err(Error::validation("build_masks: empty sentence_index"));
    }
    for w in sentence_index.windows(2) {
        if w[1] < w[0] {
            return Err(Error::validation(format!(
                "build_masks: sentence_index decreases ({} then {})",
                w[0], w[1]
            )));
        }
    }
    let mut intra = Mask::new(t);
    let mut inter = Mask::new(t);
    for q in 0..t {
        for k in 0..=q {
            if sentence_index[k] == sentence_index[q] {
                intra.data[q * t + k] = true;
            } else {
                inter.data[q * t + k] = true;
            }
        }
    }
    Ok(AttentionMaskPair { intra, inter })
}

/// Standard causal mask: `mask[q,k]` iff k <= q.
pub fn build_causal_mask(t: usize) -> Result<Mask> {
    if t == 0 {
        return Err(Error::validation("build_causal_mask: T must be >= 1"));
    }
    let mut mask = Mask::new(t);
    for q in 0..t {
        for k in 0..=q {
            mask.data[q * t + k] = true;
        }
    }
    Ok(mask)
}
