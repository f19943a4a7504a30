//! Decoder-only language models over one parameter framework.
//!
//! Three variants share the embedding, FFN, and output projection layout:
//!
//! * `SentenceLevel` — standard causal attention over single-sentence windows;
//! * `DocStandard` — standard causal attention over concatenated documents;
//! * `IntraInter` — per layer, an intra-sentential attention sublayer
//!   (keys restricted to the query's sentence) followed by an
//!   inter-sentential sublayer (keys restricted to previous complete
//!   sentences), then the FFN. Both attention sublayers read the same
//!   positional encoding; positions continue across sentence boundaries.
//!
//! Residual wiring is pre-norm. The inter sublayer's output is gated to
//! zero for query positions whose inter mask row is empty (every position
//! of a window's first sentence), so on single-sentence input the
//! IntraInter stack computes exactly what the standard stack computes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{self, Document, TrainingWindow, BOUNDARY_ID};
use crate::error::{Error, Result};
use crate::masks::{build_causal_mask, build_masks, Mask};
use crate::tensor::{Tape, Tensor, TensorId};

/// Which LM variant a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SentenceLevel,
    DocStandard,
    IntraInter,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::SentenceLevel => "sentence",
            Mode::DocStandard => "doc-standard",
            Mode::IntraInter => "intra-inter",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentence" => Ok(Mode::SentenceLevel),
            "doc-standard" => Ok(Mode::DocStandard),
            "intra-inter" => Ok(Mode::IntraInter),
            other => Err(Error::validation(format!(
                "unknown mode {other:?} (expected sentence, doc-standard, or intra-inter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub l_max: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.l_max == 0
        {
            return Err(Error::validation("model config: all dimensions must be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "model config: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "model config: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Desk-scale defaults.
    pub fn small(mode: Mode, vocab_size: usize) -> Self {
        ModelConfig {
            mode,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            vocab_size,
            l_max: 256,
            dropout: 0.1,
        }
    }
}

/// Named tensor collection for one LM variant; the unit of checkpointing,
/// averaging, and EWC anchoring. The name set is determined exactly by the
/// config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.tensors.insert(name, t);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    /// Deterministic (sorted-name) iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn same_names(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.keys().zip(other.tensors.keys()).all(|(a, b)| a == b)
    }
}

/// Parameter names and shapes implied by a config, in construction order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut specs = vec![("embed.tok".to_string(), vec![config.vocab_size, d])];
    for layer in 0..config.n_layers {
        let attn_blocks: &[&str] = match config.mode {
            Mode::IntraInter => &["intra", "inter"],
            _ => &["attn"],
        };
        for block in attn_blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push((format!("layer{layer}.{block}.{w}"), vec![d, d]));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                specs.push((format!("layer{layer}.{block}.{b}"), vec![d]));
            }
            specs.push((format!("layer{layer}.norm_{block}.gain"), vec![d]));
            specs.push((format!("layer{layer}.norm_{block}.bias"), vec![d]));
        }
        specs.push((format!("layer{layer}.ffn.w1"), vec![d, config.d_ff]));
        specs.push((format!("layer{layer}.ffn.b1"), vec![config.d_ff]));
        specs.push((format!("layer{layer}.ffn.w2"), vec![config.d_ff, d]));
        specs.push((format!("layer{layer}.ffn.b2"), vec![d]));
        specs.push((format!("layer{layer}.norm_ffn.gain"), vec![d]));
        specs.push((format!("layer{layer}.norm_ffn.bias"), vec![d]));
    }
    specs.push(("final_norm.gain".to_string(), vec![d]));
    specs.push(("final_norm.bias".to_string(), vec![d]));
    specs.push(("out.w".to_string(), vec![d, config.vocab_size]));
    specs.push(("out.b".to_string(), vec![config.vocab_size]));
    specs
}

/// Seeded initialization. Projections are scaled-normal, norms start at
/// identity, and the output projection starts at zero so the initial output
/// distribution is uniform.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape) in param_specs(config) {
        let t = if name.starts_with("out.") {
            Tensor::zeros(shape)
        } else if name.ends_with(".gain") {
            Tensor::filled(shape, 1.0)
        } else if name.ends_with(".bias")
            || name.ends_with(".b1")
            || name.ends_with(".b2")
            || name.ends_with(".bq")
            || name.ends_with(".bk")
            || name.ends_with(".bv")
            || name.ends_with(".bo")
        {
            Tensor::zeros(shape)
        } else {
            let fan_in = shape[0];
            Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), &mut rng)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Check that a parameter set matches the config's expected names/shapes.
pub fn check_params(config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let specs = param_specs(config);
    if specs.len() != params.len() {
        return Err(Error::validation(format!(
            "parameter set has {} tensors, config expects {}",
            params.len(),
            specs.len()
        )));
    }
    for (name, shape) in &specs {
        match params.get(name) {
            None => {
                return Err(Error::validation(format!("missing parameter {name}")));
            }
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::validation(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Sinusoidal encoding table for positions `0..t`.
pub fn sinusoid_table(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for j in 0..d {
            let exponent = 2.0 * (j / 2) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![t, d], data).expect("shape matches data")
}

/// Positional encoding of a window's token positions: row `j` is the
/// encoding of position `j`, counting across sentence boundaries. Both
/// attention layers consume this same encoding.
pub fn positional_encoding(window: &TrainingWindow, d_model: usize) -> Tensor {
    sinusoid_table(window.len(), d_model)
}

/// Per-window dropout RNG context. Streams are keyed by a window ordinal
/// so a training run applies identical masks to identical windows no
/// matter how micro-batches are grouped.
pub struct Dropout {
    rng: ChaCha8Rng,
    rate: f64,
}

impl Dropout {
    pub fn for_window(seed: u64, window_ordinal: u64, rate: f64) -> Self {
        // distinct, deterministic stream per (seed, ordinal)
        let mixed = seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(window_ordinal.wrapping_mul(0xbf58476d1ce4e5b9));
        Dropout {
            rng: ChaCha8Rng::seed_from_u64(mixed),
            rate,
        }
    }

    fn mask(&mut self, len: usize) -> Vec<f64> {
        use rand::Rng;
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// A taped forward pass: parameter leaves plus the logits node, ready for
/// a loss head and a backward sweep.
pub struct ForwardPass {
    pub tape: Tape,
    pub param_ids: BTreeMap<String, TensorId>,
    pub logits: TensorId,
}

/// Record every parameter as a leaf on the tape, keyed by name.
pub fn tape_params(tape: &mut Tape, params: &ModelParams) -> BTreeMap<String, TensorId> {
    params
        .iter()
        .map(|(name, tensor)| (name.to_string(), tape.leaf(tensor)))
        .collect()
}

fn attention_sublayer(
    tape: &mut Tape,
    x: TensorId,
    ids: &BTreeMap<String, TensorId>,
    prefix: &str,
    n_heads: usize,
    mask: &Mask,
) -> Result<TensorId> {
    let d = tape.shape(x)[1];
    let d_head = d / n_heads;
    let proj = |tape: &mut Tape, w: &str, b: &str| -> Result<TensorId> {
        let h = tape.matmul(x, ids[&format!("{prefix}.{w}")])?;
        tape.add_bias(h, ids[&format!("{prefix}.{b}")])
    };
    let q = proj(tape, "wq", "bq")?;
    let k = proj(tape, "wk", "bk")?;
    let v = proj(tape, "wv", "bv")?;

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let probs = tape.masked_softmax(scores, mask.as_slice())?;
        heads.push(tape.matmul(probs, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    let out = tape.matmul(ctx, ids[&format!("{prefix}.wo")])?;
    tape.add_bias(out, ids[&format!("{prefix}.bo")])
}

/// Build the taped forward computation for one window on an existing tape
/// whose parameter leaves are already recorded.
///
/// Input slot 0 holds the boundary marker standing in for "document so
/// far"; slot `s >= 1` holds window token `s - 1`. Logits row `j` is the
/// next-token distribution for window token `j`, so every window token is
/// scored exactly once.
pub fn run_forward_on(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    config: &ModelConfig,
    window: &TrainingWindow,
    mut dropout: Option<&mut Dropout>,
) -> Result<TensorId> {
    let t = window.len();
    if t == 0 {
        return Err(Error::validation("forward: empty window"));
    }
    if t > config.l_max {
        return Err(Error::validation(format!(
            "forward: window length {t} exceeds L_max = {}",
            config.l_max
        )));
    }

    // shifted input ids and their sentence indices
    let mut input_ids = Vec::with_capacity(t);
    input_ids.push(BOUNDARY_ID as usize);
    input_ids.extend(window.tokens[..t - 1].iter().map(|&id| id as usize));
    let mut slot_sentence = Vec::with_capacity(t);
    slot_sentence.push(window.sentence_index[0]);
    slot_sentence.extend_from_slice(&window.sentence_index[..t - 1]);

    // slot s >= 1 holds token s-1 and keeps that token's position encoding
    let table = sinusoid_table(t.max(1), config.d_model);
    let mut pe_data = Vec::with_capacity(t * config.d_model);
    pe_data.extend_from_slice(&table.data()[..config.d_model]);
    pe_data.extend_from_slice(&table.data()[..(t - 1) * config.d_model]);
    let pe = Tensor::from_vec(vec![t, config.d_model], pe_data)?;

    let (intra_mask, inter_mask, causal) = match config.mode {
        Mode::IntraInter => {
            let pair = build_masks(&slot_sentence)?;
            (Some(pair.intra), Some(pair.inter), None)
        }
        _ => (None, None, Some(build_causal_mask(t)?)),
    };

    let emb = tape.embed(ids["embed.tok"], &input_ids)?;
    let emb = tape.scale(emb, (config.d_model as f64).sqrt());
    let pe_id = tape.leaf_owned(pe);
    let mut x = tape.add(emb, pe_id)?;
    if let Some(drop) = dropout.as_deref_mut() {
        let m = drop.mask(t * config.d_model);
        x = tape.mul_mask(x, m)?;
    }

    for layer in 0..config.n_layers {
        match config.mode {
            Mode::IntraInter => {
                let intra = intra_mask.as_ref().expect("built above");
                let inter = inter_mask.as_ref().expect("built above");
                let normed = tape.layer_norm(
                    x,
                    ids[&format!("layer{layer}.norm_intra.gain")],
                    ids[&format!("layer{layer}.norm_intra.bias")],
                )?;
                let mut a = attention_sublayer(
                    tape,
                    normed,
                    &ids,
                    &format!("layer{layer}.intra"),
                    config.n_heads,
                    intra,
                )?;
                if let Some(drop) = dropout.as_deref_mut() {
                    let m = drop.mask(t * config.d_model);
                    a = tape.mul_mask(a, m)?;
                }
                x = tape.add(x, a)?;

                let normed = tape.layer_norm(
                    x,
                    ids[&format!("layer{layer}.norm_inter.gain")],
                    ids[&format!("layer{layer}.norm_inter.bias")],
                )?;
                let mut b = attention_sublayer(
                    tape,
                    normed,
                    &ids,
                    &format!("layer{layer}.inter"),
                    config.n_heads,
                    inter,
                )?;
                // queries with no previous complete sentence contribute nothing
                let keep: Vec<bool> = (0..t).map(|q| inter.row_any(q)).collect();
                b = tape.gate_rows(b, &keep)?;
                if let Some(drop) = dropout.as_deref_mut() {
                    let m = drop.mask(t * config.d_model);
                    b = tape.mul_mask(b, m)?;
                }
                x = tape.add(x, b)?;
            }
            _ => {
                let causal = causal.as_ref().expect("built above");
                let normed = tape.layer_norm(
                    x,
                    ids[&format!("layer{layer}.norm_attn.gain")],
                    ids[&format!("layer{layer}.norm_attn.bias")],
                )?;
                let mut a = attention_sublayer(
                    tape,
                    normed,
                    &ids,
                    &format!("layer{layer}.attn"),
                    config.n_heads,
                    causal,
                )?;
                if let Some(drop) = dropout.as_deref_mut() {
                    let m = drop.mask(t * config.d_model);
                    a = tape.mul_mask(a, m)?;
                }
                x = tape.add(x, a)?;
            }
        }

        let normed = tape.layer_norm(
            x,
            ids[&format!("layer{layer}.norm_ffn.gain")],
            ids[&format!("layer{layer}.norm_ffn.bias")],
        )?;
        let h = tape.matmul(normed, ids[&format!("layer{layer}.ffn.w1")])?;
        let h = tape.add_bias(h, ids[&format!("layer{layer}.ffn.b1")])?;
        let h = tape.relu(h);
        let h = tape.matmul(h, ids[&format!("layer{layer}.ffn.w2")])?;
        let mut f = tape.add_bias(h, ids[&format!("layer{layer}.ffn.b2")])?;
        if let Some(drop) = dropout.as_deref_mut() {
            let m = drop.mask(t * config.d_model);
            f = tape.mul_mask(f, m)?;
        }
        x = tape.add(x, f)?;
    }

    let x = tape.layer_norm(x, ids["final_norm.gain"], ids["final_norm.bias"])?;
    let logits = tape.matmul(x, ids["out.w"])?;
    tape.add_bias(logits, ids["out.b"])
}

/// Fresh-tape forward for one window.
pub fn run_forward(
    params: &ModelParams,
    config: &ModelConfig,
    window: &TrainingWindow,
    dropout: Option<&mut Dropout>,
) -> Result<ForwardPass> {
    let mut tape = Tape::new();
    let param_ids = tape_params(&mut tape, params);
    let logits = run_forward_on(&mut tape, &param_ids, config, window, dropout)?;
    Ok(ForwardPass {
        tape,
        param_ids,
        logits,
    })
}

/// Inference forward: logits `[window length, vocab_size]`, row `j` scoring
/// window token `j`.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    window: &TrainingWindow,
) -> Result<Tensor> {
    let pass = run_forward(params, config, window, None)?;
    Ok(pass.tape.value(pass.logits).clone())
}

/// Sum of negative log-likelihoods over a window's loss positions plus the
/// predicted-token count, as a taped scalar for training.
pub fn window_nll_sum(
    tape: &mut Tape,
    logits: TensorId,
    window: &TrainingWindow,
) -> Result<(TensorId, usize)> {
    let targets: Vec<usize> = window.tokens.iter().map(|&t| t as usize).collect();
    let include: Vec<bool> = window.context_only.iter().map(|&c| !c).collect();
    let count = include.iter().filter(|&&b| b).count();
    let loss = tape.cross_entropy_sum(logits, &targets, &include)?;
    Ok((loss, count))
}

/// Windows for a document under the given mode: one window per sentence for
/// the sentence-level model, packed document windows otherwise.
pub fn windows_for_mode(
    config: &ModelConfig,
    doc: &Document,
    doc_id: usize,
    c_ctx: usize,
) -> Result<Vec<TrainingWindow>> {
    match config.mode {
        Mode::SentenceLevel => corpus::sentence_windows(doc, doc_id, config.l_max),
        _ => corpus::make_windows(doc, doc_id, config.l_max, c_ctx),
    }
}

/// Default trailing-context budget for continuation windows.
pub const DEFAULT_C_CTX: usize = 128;

/// Per-token log-probabilities of a document, in document token order.
/// Context-only positions are excluded; boundary tokens are scored like any
/// other token. Out-of-vocabulary ids must be mapped to unknown upstream.
pub fn log_prob(params: &ModelParams, config: &ModelConfig, doc: &Document) -> Result<Vec<f64>> {
    let windows = windows_for_mode(config, doc, 0, DEFAULT_C_CTX)?;
    let mut out = Vec::with_capacity(doc.num_tokens());
    for window in &windows {
        let logits = forward(params, config, window)?;
        let v = config.vocab_size;
        for (j, (&target, &ctx)) in window
            .tokens
            .iter()
            .zip(&window.context_only)
            .enumerate()
        {
            if ctx {
                continue;
            }
            let row = &logits.data()[j * v..(j + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            out.push(row[target as usize] - lse);
        }
    }
    Ok(out)
}

/// Corpus perplexity: exp of mean NLL per predicted token, boundary tokens
/// counted.
pub fn perplexity(params: &ModelParams, config: &ModelConfig, corpus: &[Document]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::validation("perplexity: empty corpus"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for doc in corpus {
        let lps = log_prob(params, config, doc)?;
        total += lps.iter().sum::<f64>();
        count += lps.len();
    }
    Ok((-total / count as f64).exp())
}
