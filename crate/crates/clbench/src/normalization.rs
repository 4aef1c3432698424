//! Batch normalization with decoupled control over which statistics
//! normalize a forward pass and when the running (EMA) statistics move.
//!
//! Standard BN couples the two: every training forward normalizes by batch
//! moments *and* folds them into the EMA. Here the two choices are explicit
//! so training strategies can, for example, refresh the EMA from one batch
//! while computing gradients on another without touching it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};

/// Which statistics standardize the incoming activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsSource {
    /// Moments of the batch being forwarded.
    BatchMoments,
    /// The running EMA estimates (inference statistics).
    RunningEma,
}

/// Whether a forward pass folds its batch moments into the EMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmaUpdate {
    Update,
    Frozen,
}

/// Legal combinations of statistics source and EMA update policy.
///
/// `(RunningEma, Update)` is not representable: a pass that normalizes by
/// the EMA has no meaningful batch moments to fold back in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize by batch moments and update the EMA (conventional training).
    BatchUpdate,
    /// Normalize by batch moments, leave the EMA untouched.
    BatchFrozen,
    /// Normalize by the running EMA, leave it untouched (inference).
    RunningFrozen,
}

impl NormMode {
    /// Construct from the two underlying choices, rejecting the illegal pair.
    pub fn from_parts(source: StatsSource, update: EmaUpdate) -> Result<Self> {
        match (source, update) {
            (StatsSource::BatchMoments, EmaUpdate::Update) => Ok(NormMode::BatchUpdate),
            (StatsSource::BatchMoments, EmaUpdate::Frozen) => Ok(NormMode::BatchFrozen),
            (StatsSource::RunningEma, EmaUpdate::Frozen) => Ok(NormMode::RunningFrozen),
            (StatsSource::RunningEma, EmaUpdate::Update) => Err(Error::Contract(
                "running-EMA statistics cannot be combined with an EMA update".into(),
            )),
        }
    }

    pub fn stats_source(self) -> StatsSource {
        match self {
            NormMode::BatchUpdate | NormMode::BatchFrozen => StatsSource::BatchMoments,
            NormMode::RunningFrozen => StatsSource::RunningEma,
        }
    }

    pub fn ema_update(self) -> EmaUpdate {
        match self {
            NormMode::BatchUpdate => EmaUpdate::Update,
            NormMode::BatchFrozen | NormMode::RunningFrozen => EmaUpdate::Frozen,
        }
    }
}

/// Per-feature normalization state of one BN layer.
///
/// The trainable scale and shift live in the model's parameter store and are
/// referenced by id; the running moments are owned here and change *only*
/// through [`BatchNormState::ema_update`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormState {
    pub bn_scale: ParamId,
    pub bn_shift: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPS: f64 = 1e-5;

impl BatchNormState {
    /// Fresh state: running mean 0, running variance 1.
    pub fn new(features: usize, bn_scale: ParamId, bn_shift: ParamId) -> Self {
        Self {
            bn_scale,
            bn_shift,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Fold one batch's moments into the running estimates:
    /// `r <- momentum * r + (1 - momentum) * batch`.
    pub fn ema_update(&mut self, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        if batch_mean.len() != self.features() || batch_var.len() != self.features() {
            return Err(Error::DimensionMismatch {
                op: "ema_update",
                lhs: vec![self.features()],
                rhs: vec![batch_mean.len(), batch_var.len()],
            });
        }
        for (i, (&m, &v)) in batch_mean.iter().zip(batch_var).enumerate() {
            if !m.is_finite() || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite batch moment at feature {i}: mean {m}, var {v}"
                )));
            }
            if v < 0.0 {
                return Err(Error::Domain(format!(
                    "negative batch variance {v} at feature {i}"
                )));
            }
        }
        let a = self.momentum;
        for (r, &m) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = a * *r + (1.0 - a) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(batch_var) {
            *r = a * *r + (1.0 - a) * v;
        }
        Ok(())
    }
}

/// Differentiable BN forward inside a graph, honoring `mode`.
///
/// With batch statistics the batch moments normalize the pass; with running
/// statistics the EMA does, treated as constants by the backward pass. When
/// `mode` requests an update, this batch's moments are folded into the EMA
/// *after* the output is computed — the only code path that mutates
/// `state.running_*` during training.
pub fn bn_forward(
    graph: &mut Graph,
    x: Var,
    state: &mut BatchNormState,
    params: &ParamSet,
    mode: NormMode,
) -> Result<Var> {
    let c = graph.value(x).cols();
    if c != state.features() {
        return Err(Error::DimensionMismatch {
            op: "bn_forward",
            lhs: graph.value(x).shape().to_vec(),
            rhs: vec![state.features()],
        });
    }
    let scale = graph.param(params, state.bn_scale);
    let shift = graph.param(params, state.bn_shift);
    match mode.stats_source() {
        StatsSource::BatchMoments => {
            let (mean, var) = batch_moments(graph.value(x))?;
            let out = graph.batch_norm_with_stats(x, scale, shift, &mean, &var, state.eps, true)?;
            if mode.ema_update() == EmaUpdate::Update {
                state.ema_update(&mean, &var)?;
            }
            Ok(out)
        }
        StatsSource::RunningEma => {
            let mean = state.running_mean.clone();
            let var = state.running_var.clone();
            graph.batch_norm_with_stats(x, scale, shift, &mean, &var, state.eps, false)
        }
    }
}

/// BN forward on plain values (no gradient recording), honoring `mode`.
pub fn bn_forward_values(
    x: &Tensor,
    state: &mut BatchNormState,
    scale: &[f64],
    shift: &[f64],
    mode: NormMode,
) -> Result<Tensor> {
    match mode.stats_source() {
        StatsSource::BatchMoments => {
            let (mean, var) = batch_moments(x)?;
            let out = bn_apply(x, scale, shift, &mean, &var, state.eps);
            if mode.ema_update() == EmaUpdate::Update {
                state.ema_update(&mean, &var)?;
            }
            Ok(out)
        }
        StatsSource::RunningEma => Ok(bn_apply(
            x,
            scale,
            shift,
            &state.running_mean,
            &state.running_var,
            state.eps,
        )),
    }
}

/// Forward a batch through the model purely to move the EMA statistics.
///
/// Every BN layer runs in `(BatchMoments, Update)` mode, so each layer sees
/// activations produced by the preceding layers under batch-moment
/// normalization. Activations are discarded; nothing is recorded for
/// backward and no parameter changes.
pub fn ema_refresh_pass(model: &mut crate::model::MlpModel, batch: &Tensor) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::EmptyBatch("ema_refresh_pass"));
    }
    model.forward_values(batch, NormMode::BatchUpdate)?;
    Ok(())
}

/// Per-feature mean and biased (divide-by-B) variance of a `[B, C]` batch.
pub fn batch_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = x.rows();
    let c = x.cols();
    if b == 0 {
        return Err(Error::EmptyBatch("batch_moments"));
    }
    let mut mean = vec![0.0; c];
    for i in 0..b {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let inv_b = 1.0 / b as f64;
    mean.iter_mut().for_each(|m| *m *= inv_b);

    let mut var = vec![0.0; c];
    for i in 0..b {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv_b);
    Ok((mean, var))
}

/// Standardize-and-affine on plain values: `scale * (x - mean)/sqrt(var + eps) + shift`.
///
/// Shared by the differentiable graph op and the no-gradient forwards.
pub fn bn_apply(
    x: &Tensor,
    scale: &[f64],
    shift: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Tensor {
    let b = x.rows();
    let c = x.cols();
    debug_assert!(scale.len() == c && shift.len() == c && mean.len() == c && var.len() == c);
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = x.row(i);
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..c {
            // Same association as the recorded op so value and graph
            // forwards agree bit-for-bit.
            let xhat = (row[j] - mean[j]) * inv_std[j];
            orow[j] = scale[j] * xhat + shift[j];
        }
    }
    Tensor::new(vec![b, c], out).expect("sized above")
}
