//! Document-level language modelling toolkit.
//!
//! Three decoder-only LM variants over one parameter framework (sentence
//! level, document level with standard causal attention, and a document
//! model with separate intra-/inter-sentential attention sublayers),
//! together with the machinery around them: delayed-update training,
//! EWC-regularized fine-tuning, checkpoint averaging, greedy document-level
//! n-best reranking, and heuristic parallel-corpus filtering.

pub mod corpus;
pub mod error;
pub mod filter;
pub mod langid;
pub mod masks;
pub mod model;
pub mod rerank;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

use std::path::Path;

/// Write a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation("write_atomic: path has no file name"))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp_name = file_name.to_owned();
    tmp_name.push(".tmp");
    let tmp_path = dir.join(tmp_name);
    std::fs::write(&tmp_path, bytes)?;
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}
