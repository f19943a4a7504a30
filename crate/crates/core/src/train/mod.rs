//! Training loop with delayed (gradient-accumulation) updates, EWC
//! fine-tuning, and checkpointing.
//!
//! Gradients are summed over D micro-batches of windows, normalized by the
//! total predicted-token count, and applied in one Adam step on an
//! inverse-sqrt warmup schedule. Accumulation order depends only on the
//! window stream, so a run with delay D and micro-batch b takes exactly
//! the same parameter trajectory as delay 1 with batch D*b.

pub mod checkpoint;
pub mod ewc;

pub use checkpoint::{
    average_checkpoints, load_checkpoint, load_fisher, save_checkpoint, save_fisher, Checkpoint,
};
pub use ewc::{estimate_fisher, ewc_loss, EWCState, EwcPass};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::TrainingWindow;
use crate::error::{Error, Result};
use crate::model::{
    check_params, run_forward_on, tape_params, window_nll_sum, Dropout, ModelConfig, ModelParams,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Base step size multiplying the inverse-sqrt schedule.
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Delay factor D: micro-batches accumulated per parameter update.
    pub delay: usize,
    /// Warmup updates for the inverse-sqrt schedule.
    pub warmup: usize,
    /// Total micro-batch iterations; update count = floor(iterations / D).
    pub iterations: usize,
    /// Windows per micro-batch.
    pub batch_size: usize,
    /// Dump a checkpoint every this many updates (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 2.0,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
            delay: 1,
            warmup: 400,
            iterations: 1000,
            batch_size: 8,
            checkpoint_every: 500,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delay < 1 || self.batch_size < 1 || self.iterations < 1 {
            return Err(Error::validation(
                "optimizer config: delay, batch_size, and iterations must be >= 1",
            ));
        }
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(Error::validation("optimizer config: step size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("optimizer config: betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::validation("optimizer config: epsilon must be positive"));
        }
        Ok(())
    }

    /// Inverse-sqrt schedule with linear warmup, in units of updates
    /// (1-based).
    pub fn learning_rate(&self, update: usize) -> f64 {
        let t = update as f64;
        let decay = 1.0 / t.sqrt();
        if self.warmup == 0 {
            return self.step_size * decay;
        }
        let ramp = t * (self.warmup as f64).powf(-1.5);
        self.step_size * decay.min(ramp)
    }
}

/// Adam first/second moments keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = |i: &ModelParams| -> BTreeMap<String, Vec<f64>> {
            i.iter()
                .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<f64>>,
        opt: &OptimizerConfig,
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - opt.beta1.powi(self.step as i32);
        let bc2 = 1.0 - opt.beta2.powi(self.step as i32);
        for (name, tensor) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("name-checked");
            let v = self.v.get_mut(name).expect("name-checked");
            let data = tensor.data_mut();
            for j in 0..g.len() {
                m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
                v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
            }
        }
    }
}

/// One row of the per-update loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub update: usize,
    pub iteration: usize,
    /// Mean data NLL per predicted token over the accumulated batch.
    pub mean_nll: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    /// Periodic dumps plus the final state, in order.
    pub checkpoints: Vec<Checkpoint>,
    pub loss_log: Vec<LossRecord>,
}

/// Deterministic shuffled cycle over window indices.
struct WindowStream<'a> {
    windows: &'a [TrainingWindow],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> WindowStream<'a> {
    fn new(windows: &'a [TrainingWindow], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        WindowStream {
            windows,
            order,
            cursor: 0,
            rng,
        }
    }

    fn next(&mut self) -> &'a TrainingWindow {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let w = &self.windows[self.order[self.cursor]];
        self.cursor += 1;
        w
    }
}

fn run_training(
    mut params: ModelParams,
    config: &ModelConfig,
    windows: &[TrainingWindow],
    opt: &OptimizerConfig,
    seed: u64,
    ewc: Option<&EWCState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    opt.validate()?;
    check_params(config, &params)?;
    if windows.is_empty() {
        return Err(Error::validation("train: no training windows"));
    }
    if let Some(state) = ewc {
        state.check_compat(&params)?;
    }

    let mut adam = AdamState::new(&params);
    let mut stream = WindowStream::new(windows, seed);
    let mut accum: BTreeMap<String, Vec<f64>> = params
        .iter()
        .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
        .collect();
    let mut accum_tokens = 0usize;
    let mut accum_nll = 0.0f64;
    let mut window_ordinal = 0u64;
    let mut updates = 0usize;
    let mut loss_log = Vec::new();
    let mut checkpoints = Vec::new();

    let snapshot = |params: &ModelParams, adam: &AdamState, iteration: usize, updates: usize| {
        Checkpoint {
            config: config.clone(),
            params: params.clone(),
            optimizer: Some(adam.clone()),
            iteration,
            updates,
        }
    };

    for iteration in 1..=opt.iterations {
        for _ in 0..opt.batch_size {
            let window = stream.next();
            let mut tape = Tape::new();
            let ids = tape_params(&mut tape, &params);
            let mut dropout = (config.dropout > 0.0)
                .then(|| Dropout::for_window(seed, window_ordinal, config.dropout));
            window_ordinal += 1;
            let logits = run_forward_on(&mut tape, &ids, config, window, dropout.as_mut())?;
            let (nll, count) = window_nll_sum(&mut tape, logits, window)?;
            let nll_value = tape.data(nll)[0];
            if !nll_value.is_finite() {
                return Err(Error::NonFinite { iteration });
            }
            tape.backward(nll)?;
            for (name, acc) in accum.iter_mut() {
                let grad = tape.grad(ids[name]).expect("populated by backward");
                for (slot, &g) in acc.iter_mut().zip(grad) {
                    *slot += g;
                }
            }
            accum_tokens += count;
            accum_nll += nll_value;
        }

        if iteration % opt.delay == 0 {
            let inv = 1.0 / accum_tokens as f64;
            for acc in accum.values_mut() {
                for g in acc.iter_mut() {
                    *g *= inv;
                }
            }
            if let Some(state) = ewc {
                if state.strength > 0.0 {
                    for (name, acc) in accum.iter_mut() {
                        let theta = params.get(name).expect("name-checked").data();
                        let anchor = state.anchor.get(name).expect("name-checked").data();
                        let fisher = state.fisher.get(name).expect("name-checked").data();
                        for j in 0..acc.len() {
                            acc[j] += 2.0 * state.strength * fisher[j] * (theta[j] - anchor[j]);
                        }
                    }
                }
            }
            updates += 1;
            let lr = opt.learning_rate(updates);
            adam.apply(&mut params, &accum, opt, lr);
            loss_log.push(LossRecord {
                update: updates,
                iteration,
                mean_nll: accum_nll / accum_tokens as f64,
            });
            for acc in accum.values_mut() {
                acc.iter_mut().for_each(|g| *g = 0.0);
            }
            accum_tokens = 0;
            accum_nll = 0.0;

            if opt.checkpoint_every > 0 && updates % opt.checkpoint_every == 0 {
                checkpoints.push(snapshot(&params, &adam, iteration, updates));
            }
        }
    }

    let already_dumped = checkpoints
        .last()
        .map(|c| c.updates == updates)
        .unwrap_or(false);
    if !already_dumped {
        checkpoints.push(snapshot(&params, &adam, opt.iterations, updates));
    }
    Ok(TrainOutcome {
        params,
        checkpoints,
        loss_log,
    })
}

/// Train from the given parameters. Gradients accumulate over `delay`
/// micro-batches per update; the trajectory is bit-deterministic for a
/// fixed seed.
pub fn train(
    params: ModelParams,
    config: &ModelConfig,
    windows: &[TrainingWindow],
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    run_training(params, config, windows, opt, seed, None)
}

/// Fine-tune from a checkpoint under the EWC objective. The returned
/// checkpoint series starts with the unadapted checkpoint, followed by the
/// fine-tuning dumps. With strength 0 this is exactly continued training.
pub fn finetune_ewc(
    ckpt: &Checkpoint,
    windows: &[TrainingWindow],
    ewc: &EWCState,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut outcome = run_training(
        ckpt.params.clone(),
        &ckpt.config,
        windows,
        opt,
        seed,
        Some(ewc),
    )?;
    outcome.checkpoints.insert(0, ckpt.clone());
    Ok(outcome)
}
