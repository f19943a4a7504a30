//! Elastic weight consolidation: Fisher estimation and the regularized
//! fine-tuning objective
//!
//!   L(theta) = L_B(theta) + lambda * sum_i F_i (theta_i - anchor_i)^2
//!
//! with the empirical Fisher F_i estimated as the mean squared gradient of
//! the task-A cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::TrainingWindow;
use crate::error::{Error, Result};
use crate::model::{run_forward_on, tape_params, window_nll_sum, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor, TensorId};

/// Anchor parameters, per-parameter Fisher values, and the penalty
/// strength lambda.
#[derive(Debug, Clone)]
pub struct EWCState {
    pub anchor: ModelParams,
    pub fisher: ModelParams,
    pub strength: f64,
}

impl EWCState {
    pub fn new(anchor: ModelParams, fisher: ModelParams, strength: f64) -> Result<Self> {
        if !strength.is_finite() || strength < 0.0 {
            return Err(Error::validation(format!(
                "EWC strength must be finite and >= 0, got {strength}"
            )));
        }
        if !anchor.same_names(&fisher) {
            return Err(Error::validation(
                "EWC fisher name set does not match the anchor",
            ));
        }
        for (name, t) in fisher.iter() {
            if t.data().iter().any(|&f| !f.is_finite() || f < 0.0) {
                return Err(Error::validation(format!(
                    "EWC fisher values for {name} must be finite and >= 0"
                )));
            }
        }
        Ok(EWCState {
            anchor,
            fisher,
            strength,
        })
    }

    /// The state can only regularize a parameter set with the same names.
    pub fn check_compat(&self, params: &ModelParams) -> Result<()> {
        if !self.anchor.same_names(params) {
            return Err(Error::validation(
                "EWC state name set does not match the model parameters",
            ));
        }
        Ok(())
    }
}

/// Empirical Fisher: mean over `n_samples` micro-batches of the squared
/// gradient of the task-A cross-entropy. All outputs are >= 0; parameters
/// with zero gradient on every batch get exactly 0.
pub fn estimate_fisher(
    params: &ModelParams,
    config: &ModelConfig,
    windows: &[TrainingWindow],
    n_samples: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ModelParams> {
    if n_samples < 1 {
        return Err(Error::validation("estimate_fisher: n_samples must be >= 1"));
    }
    if batch_size < 1 {
        return Err(Error::validation("estimate_fisher: batch_size must be >= 1"));
    }
    if windows.is_empty() {
        return Err(Error::validation("estimate_fisher: empty corpus"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut accum: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
        .collect();

    for _ in 0..n_samples {
        let mut tape = Tape::new();
        let ids = tape_params(&mut tape, params);
        let mut batch_loss: Option<TensorId> = None;
        let mut tokens = 0usize;
        for _ in 0..batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let window = &windows[order[cursor]];
            cursor += 1;
            let logits = run_forward_on(&mut tape, &ids, config, window, None)?;
            let (nll, count) = window_nll_sum(&mut tape, logits, window)?;
            tokens += count;
            batch_loss = Some(match batch_loss {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        let loss = tape.scale(batch_loss.expect("batch_size >= 1"), 1.0 / tokens as f64);
        tape.backward(loss)?;
        for (name, acc) in accum.iter_mut() {
            let grad = tape.grad(ids[name]).expect("populated by backward");
            for (slot, &g) in acc.iter_mut().zip(grad) {
                *slot += g * g;
            }
        }
    }

    let mut fisher = ModelParams::new();
    let scale = 1.0 / n_samples as f64;
    for (name, tensor) in params.iter() {
        let data: Vec<f64> = accum[name].iter().map(|&s| s * scale).collect();
        fisher.insert(name.to_string(), Tensor::from_vec(tensor.shape().to_vec(), data)?);
    }
    Ok(fisher)
}

/// A taped EWC objective ready for a backward sweep.
pub struct EwcPass {
    pub tape: Tape,
    pub param_ids: BTreeMap<String, TensorId>,
    pub loss: TensorId,
    /// Mean cross-entropy per predicted token (L_B).
    pub data_loss: f64,
    /// lambda-scaled penalty value.
    pub penalty: f64,
}

impl EwcPass {
    pub fn value(&self) -> f64 {
        self.tape.data(self.loss)[0]
    }
}

/// Build L_B + lambda * sum_i F_i (theta_i - anchor_i)^2 over a micro-batch.
/// The gradient flows through both terms; with lambda = 0 the objective is
/// exactly the plain cross-entropy.
pub fn ewc_loss(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[TrainingWindow],
    ewc: &EWCState,
) -> Result<EwcPass> {
    if batch.is_empty() {
        return Err(Error::validation("ewc_loss: empty batch"));
    }
    ewc.check_compat(params)?;

    let mut tape = Tape::new();
    let param_ids = tape_params(&mut tape, params);
    let mut sum: Option<TensorId> = None;
    let mut tokens = 0usize;
    for window in batch {
        let logits = run_forward_on(&mut tape, &param_ids, config, window, None)?;
        let (nll, count) = window_nll_sum(&mut tape, logits, window)?;
        tokens += count;
        sum = Some(match sum {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    let data = tape.scale(sum.expect("non-empty batch"), 1.0 / tokens as f64);
    let data_loss = tape.data(data)[0];

    if ewc.strength == 0.0 {
        return Ok(EwcPass {
            tape,
            param_ids,
            loss: data,
            data_loss,
            penalty: 0.0,
        });
    }

    let mut penalty_acc: Option<TensorId> = None;
    for (name, _) in params.iter() {
        let anchor = tape.leaf(ewc.anchor.get(name).expect("name-checked"));
        let fisher = tape.leaf(ewc.fisher.get(name).expect("name-checked"));
        let diff = tape.sub(param_ids[name], anchor)?;
        let sq = tape.mul(diff, diff)?;
        let weighted = tape.mul(sq, fisher)?;
        let s = tape.sum(weighted);
        penalty_acc = Some(match penalty_acc {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let penalty = tape.scale(penalty_acc.expect("params non-empty"), ewc.strength);
    let penalty_value = tape.data(penalty)[0];
    let loss = tape.add(data, penalty)?;
    Ok(EwcPass {
        tape,
        param_ids,
        loss,
        data_loss,
        penalty: penalty_value,
    })
}
