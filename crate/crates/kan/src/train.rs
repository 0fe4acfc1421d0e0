//! Loss, Adadelta optimization and the epoch loop.
//!
//! Each batch member gets its own tape; per-instance gradients are reduced
//! in a fixed order, so runs are reproducible and batch members could fan
//! out across workers without changing the result. The optimizer mutates
//! parameters only between batches.

use std::collections::BTreeMap;

use crate::error::ModelError;
use crate::graph::{GradMap, Graph, ParamStore};
use crate::matrix::Matrix;
use crate::model::{kan_forward, ForwardTrace, ModelConfig, ModelInput};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: 100,
            epochs: 10,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size < 1 {
            return Err(ModelError::Config("batch_size must be at least 1".into()));
        }
        if !(self.adadelta_rho > 0.0 && self.adadelta_rho < 1.0) {
            return Err(ModelError::Config("adadelta_rho must lie strictly between 0 and 1".into()));
        }
        Ok(())
    }
}

/// Per-parameter running averages of squared gradients and squared updates.
#[derive(Clone, Debug, Default)]
pub struct AdadeltaState {
    accum_grad: BTreeMap<String, Matrix>,
    accum_update: BTreeMap<String, Matrix>,
}

impl AdadeltaState {
    pub fn new() -> Self {
        AdadeltaState::default()
    }
}

/// One Adadelta update, coordinate-wise:
/// E[g^2] <- rho E[g^2] + (1-rho) g^2,
/// delta = -(sqrt(E[dx^2]+eps) / sqrt(E[g^2]+eps)) g,
/// E[dx^2] <- rho E[dx^2] + (1-rho) delta^2,
/// p <- p + lr delta.
pub fn adadelta_step(
    params: &mut ParamStore,
    grads: &GradMap,
    state: &mut AdadeltaState,
    cfg: &TrainConfig,
) {
    let rho = cfg.adadelta_rho;
    let eps = cfg.adadelta_eps;
    for (name, grad) in grads {
        let Some(param) = params.get_mut(name) else { continue };
        let eg = state
            .accum_grad
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
        let ed = state
            .accum_update
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
        for i in 0..grad.len() {
            let g = grad.data()[i];
            let eg_i = rho * eg.data()[i] + (1.0 - rho) * g * g;
            let delta = -((ed.data()[i] + eps).sqrt() / (eg_i + eps).sqrt()) * g;
            let ed_i = rho * ed.data()[i] + (1.0 - rho) * delta * delta;
            eg.data_mut()[i] = eg_i;
            ed.data_mut()[i] = ed_i;
            param.data_mut()[i] += cfg.learning_rate * delta;
        }
    }
}

/// Mean loss over the batch plus the summed-then-averaged gradients, each
/// instance on its own tape, reduced in batch order.
pub fn batch_loss_and_grads(
    inputs: &[&ModelInput],
    store: &ParamStore,
    cfg: &ModelConfig,
) -> Result<(f64, GradMap), ModelError> {
    let n = inputs.len();
    let mut total_loss = 0.0;
    let mut acc: GradMap = GradMap::new();
    for input in inputs {
        let label = input.label.ok_or_else(|| ModelError::Config("unlabeled instance in training batch".into()))? as usize;
        let mut g = Graph::new();
        let pass = kan_forward(&mut g, input, store, cfg)?;
        let loss = g.nll_from_logits(pass.logits, &[label])?;
        total_loss += g.value(loss).scalar();
        let grads = g.backward(loss)?;
        for (name, grad) in grads {
            match acc.get_mut(&name) {
                Some(existing) => existing.add_assign(&grad),
                None => {
                    acc.insert(name, grad);
                }
            }
        }
    }
    let scale = 1.0 / n as f64;
    for grad in acc.values_mut() {
        grad.scale_assign(scale);
    }
    Ok((total_loss * scale, acc))
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub dev_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (last, or best by dev loss).
    pub kept_epoch: usize,
}

/// Epoch loop: shuffle under seed+epoch, batch, backprop, Adadelta. With a
/// dev set the checkpoint is the best-dev-loss epoch, otherwise the last.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    inputs: &[ModelInput],
    dev: Option<&[ModelInput]>,
    init: ParamStore,
) -> Result<TrainOutcome, ModelError> {
    train_cfg.validate()?;
    if inputs.is_empty() {
        return Err(ModelError::Config("training set is empty".into()));
    }
    if inputs.iter().any(|i| i.label.is_none()) {
        return Err(ModelError::Config("training instances must be labeled".into()));
    }

    let mut params = init;
    let mut state = AdadeltaState::new();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut rng = Rng::new(train_cfg.seed.wrapping_add(epoch as u64));
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &inputs[i]).collect();
            let (loss, grads) = batch_loss_and_grads(&batch, &params, model_cfg)?;
            loss_sum += loss * batch.len() as f64;
            adadelta_step(&mut params, &grads, &mut state, train_cfg);
        }
        let mean_loss = loss_sum / inputs.len() as f64;

        let mut correct = 0usize;
        for input in inputs {
            let trace = forward_trace(input, &params, model_cfg)?;
            if trace.predicted() == input.label.expect("validated above") {
                correct += 1;
            }
        }
        let train_accuracy = correct as f64 / inputs.len() as f64;

        let dev_loss = match dev {
            Some(dev_inputs) if !dev_inputs.is_empty() => {
                Some(mean_nll(dev_inputs, &params, model_cfg)?)
            }
            _ => None,
        };
        if let Some(dl) = dev_loss {
            let better = best.as_ref().map_or(true, |(b, _, _)| dl < *b);
            if better {
                best = Some((dl, epoch, params.clone()));
            }
        }
        log.push(EpochLog { epoch, mean_loss, train_accuracy, dev_loss });
    }

    let (params, kept_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => {
            let last = train_cfg.epochs.saturating_sub(1);
            (params, last)
        }
    };
    Ok(TrainOutcome { params, log, kept_epoch })
}

/// Forward pass without gradients, returning the trace.
pub fn forward_trace(
    input: &ModelInput,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<ForwardTrace, ModelError> {
    let mut g = Graph::new();
    Ok(kan_forward(&mut g, input, params, cfg)?.trace)
}

/// Mean negative log-likelihood over labeled instances.
pub fn mean_nll(inputs: &[ModelInput], params: &ParamStore, cfg: &ModelConfig) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for input in inputs {
        let label = input.label.ok_or_else(|| ModelError::Config("unlabeled instance in loss".into()))? as usize;
        let mut g = Graph::new();
        let pass = kan_forward(&mut g, input, params, cfg)?;
        let loss = g.nll_from_logits(pass.logits, &[label])?;
        total += g.value(loss).scalar();
    }
    Ok(total / inputs.len() as f64)
}
