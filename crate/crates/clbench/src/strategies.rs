//! Per-batch training strategies: experience replay and its batch-composition
//! variants, dark experience replay (logit distillation), and the
//! herding/NCM rehearsal family — each expressed as one step contract over
//! `(model, batches, normalization modes)`.
//!
//! The `*_BNT` variants share one discipline: a balanced batch refreshes the
//! BN running statistics, and every parameter-update forward runs with the
//! EMA frozen, so the statistics used at inference are never dragged toward
//! the current task by gradient batches.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::MlpModel;
use crate::normalization::{ema_refresh_pass, NormMode, StatsSource};
use crate::replay::{balance, icarl_rebuild_buffer, BufferEntry, ReplayBuffer};
use crate::scenario::{iterate_offline_mixed, iterate_online, Batch, TaskStream};

/// Every training method in the benchmark, including the pilot and ablation
/// variants that differ only in batch composition and EMA handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Er,
    ErBalanceBatch,
    ErCurBuf,
    ErCurPrev,
    ErBnt,
    ErBalanceJointTrain,
    ErBntNoSimulator,
    ErBntImbalanceTracker,
    Derpp,
    DerppBnt,
    Icarl,
    IcarlConcat,
    IcarlBnt,
    IcarlBntNoSimulator,
    IcarlBntImbalanceTracker,
    SgdOnly,
}

impl Method {
    pub const ALL: [Method; 16] = [
        Method::Er,
        Method::ErBalanceBatch,
        Method::ErCurBuf,
        Method::ErCurPrev,
        Method::ErBnt,
        Method::ErBalanceJointTrain,
        Method::ErBntNoSimulator,
        Method::ErBntImbalanceTracker,
        Method::Derpp,
        Method::DerppBnt,
        Method::Icarl,
        Method::IcarlConcat,
        Method::IcarlBnt,
        Method::IcarlBntNoSimulator,
        Method::IcarlBntImbalanceTracker,
        Method::SgdOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Er => "ER",
            Method::ErBalanceBatch => "ER_BalanceBatch",
            Method::ErCurBuf => "ER_CurBuf",
            Method::ErCurPrev => "ER_CurPrev",
            Method::ErBnt => "ER_BNT",
            Method::ErBalanceJointTrain => "ER_BalanceJointTrain",
            Method::ErBntNoSimulator => "ER_BNT_NoSimulator",
            Method::ErBntImbalanceTracker => "ER_BNT_ImbalanceTracker",
            Method::Derpp => "DERpp",
            Method::DerppBnt => "DERpp_BNT",
            Method::Icarl => "iCaRL",
            Method::IcarlConcat => "iCaRL_Concat",
            Method::IcarlBnt => "iCaRL_BNT",
            Method::IcarlBntNoSimulator => "iCaRL_BNT_NoSimulator",
            Method::IcarlBntImbalanceTracker => "iCaRL_BNT_ImbalanceTracker",
            Method::SgdOnly => "SGD_only",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }

    /// Herding buffer, NCM inference, teacher distillation.
    pub fn is_icarl_family(self) -> bool {
        matches!(
            self,
            Method::Icarl
                | Method::IcarlConcat
                | Method::IcarlBnt
                | Method::IcarlBntNoSimulator
                | Method::IcarlBntImbalanceTracker
        )
    }

    /// Reservoir buffer updated per batch.
    pub fn is_reservoir_family(self) -> bool {
        !self.is_icarl_family() && self != Method::SgdOnly
    }

    pub fn stores_logits(self) -> bool {
        matches!(self, Method::Derpp | Method::DerppBnt)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Method> {
        Method::parse(s)
    }
}

/// Hyperparameters of one training strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub method: Method,
    pub lr: f64,
    pub batch_size: usize,
    /// Distillation weight of the DER++ loss.
    pub derpp_alpha: f64,
    /// Replay cross-entropy weight of the DER++ loss.
    pub derpp_beta: f64,
    /// L2 regularization weight applied by the iCaRL family.
    pub icarl_weight_decay: f64,
    /// Statistics source of the `*_BNT` parameter-update forwards. Batch
    /// moments (with the EMA frozen) are the default; the running EMA is
    /// exposed for study.
    pub bnt_param_stats: StatsSource,
    /// When set, the balanced-batch loss forward of iCaRL-BNT also updates
    /// the EMA (the conventional-tracking reading) instead of running
    /// frozen. Off by default: the balanced refresh is the sole EMA writer.
    pub icarl_lb_ema_update: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            method: Method::Er,
            lr: 0.03,
            batch_size: 32,
            derpp_alpha: 0.2,
            derpp_beta: 0.5,
            icarl_weight_decay: 1e-4,
            bnt_param_stats: StatsSource::BatchMoments,
            icarl_lb_ema_update: false,
        }
    }
}

impl StrategyConfig {
    fn frozen_mode(&self) -> NormMode {
        match self.bnt_param_stats {
            StatsSource::BatchMoments => NormMode::BatchFrozen,
            StatsSource::RunningEma => NormMode::RunningFrozen,
        }
    }
}

/// Frozen copy of model parameters and BN EMA statistics taken at a task
/// boundary; distillation targets come from here for the rest of the task.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    model: MlpModel,
}

impl TeacherSnapshot {
    pub fn capture(model: &MlpModel) -> Self {
        TeacherSnapshot {
            model: model.clone(),
        }
    }

    /// Teacher inference runs on its own frozen running statistics.
    pub fn sigmoid_outputs(&self, inputs: &Tensor) -> Result<Tensor> {
        let (_, logits) = self.model.infer(inputs)?;
        Ok(Tensor::new(
            logits.shape().to_vec(),
            logits.values().iter().map(|&z| sigmoid(z)).collect(),
        )
        .expect("same shape"))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Per-batch steps
// ---------------------------------------------------------------------------

/// Plain single-batch step: forward under conventional BN tracking,
/// cross-entropy, backward, SGD.
pub fn step_sgd_only(model: &mut MlpModel, current: &Batch, lr: f64) -> Result<f64> {
    step_er(model, current, &Batch::empty(model.input_dim), lr)
}

/// Experience replay: one forward of the concatenated current and buffer
/// batches under `(BatchMoments, Update)`, mean cross-entropy over the
/// union. An empty buffer batch degrades to plain cross-entropy on the
/// current batch.
pub fn step_er(
    model: &mut MlpModel,
    current: &Batch,
    buffer_batch: &Batch,
    lr: f64,
) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_er"));
    }
    let union = Batch::concat(&[current, buffer_batch])?;
    let weights = vec![1.0 / union.len() as f64; union.len()];
    step_weighted_union(model, &union, &weights, lr)
}

/// The balanced-batch pilot: forward the current batch plus `t - 1` copies
/// of the buffer batch under conventional tracking, with the copied entries'
/// loss scaled down so their summed weight equals exactly one copy. The
/// duplication therefore changes only the BN statistics the forward sees.
pub fn step_er_balance_batch(
    model: &mut MlpModel,
    current: &Batch,
    buffer_batch: &Batch,
    task_number: usize,
    lr: f64,
) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_er_balance_batch"));
    }
    if task_number <= 1 || buffer_batch.is_empty() {
        return step_er(model, current, &Batch::empty(model.input_dim), lr);
    }
    let copies = task_number - 1;
    let mut parts: Vec<&Batch> = vec![current];
    parts.extend(std::iter::repeat_n(buffer_batch, copies));
    let union = Batch::concat(&parts)?;
    let base = 1.0 / (current.len() + buffer_batch.len()) as f64;
    let copy_weight = base / copies as f64;
    let mut weights = vec![base; current.len()];
    weights.extend(std::iter::repeat_n(copy_weight, copies * buffer_batch.len()));
    step_weighted_union(model, &union, &weights, lr)
}

fn step_weighted_union(
    model: &mut MlpModel,
    union: &Batch,
    weights: &[f64],
    lr: f64,
) -> Result<f64> {
    let mut graph = Graph::new();
    let x = graph.input(union.inputs.clone());
    let (_, logits) = model.forward_graph(&mut graph, x, NormMode::BatchUpdate)?;
    let loss = graph.softmax_ce_weighted(logits, &union.labels, weights)?;
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(lr, 0.0);
    Ok(value)
}

/// Two separate forwards (current batch, then the other batch), each under
/// conventional tracking — the EMA moves twice per step. The two
/// cross-entropies are summed into a single backward. Covers both the
/// buffer-batch and previous-samples-only pilots.
pub fn step_er_cur_x(model: &mut MlpModel, current: &Batch, other: &Batch, lr: f64) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_er_cur_x"));
    }
    let mut graph = Graph::new();
    let x = graph.input(current.inputs.clone());
    let (_, logits_t) = model.forward_graph(&mut graph, x, NormMode::BatchUpdate)?;
    let ce_t = graph.softmax_ce_loss(logits_t, &current.labels)?;
    let loss = if other.is_empty() {
        ce_t
    } else {
        let xo = graph.input(other.inputs.clone());
        let (_, logits_o) = model.forward_graph(&mut graph, xo, NormMode::BatchUpdate)?;
        let ce_o = graph.softmax_ce_loss(logits_o, &other.labels)?;
        graph.weighted_sum(&[(ce_t, 1.0), (ce_o, 1.0)])?
    };
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(lr, 0.0);
    Ok(value)
}

/// The decoupled step: (1) build the balanced batch, (2) refresh the EMA
/// with it — the only EMA mutation of the step — then (3) forward the
/// current and buffer batches separately with the EMA frozen and (4) step on
/// the summed cross-entropies.
pub fn step_er_bnt(
    model: &mut MlpModel,
    current: &Batch,
    buffer_batch: &Batch,
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_er_bnt"));
    }
    let balanced = balance(current, buffer_batch, rng)?;
    ema_refresh_pass(model, &balanced.inputs)?;
    let mode = cfg.frozen_mode();

    let mut graph = Graph::new();
    let x = graph.input(current.inputs.clone());
    let (_, logits_t) = model.forward_graph(&mut graph, x, mode)?;
    let ce_t = graph.softmax_ce_loss(logits_t, &current.labels)?;
    let loss = if buffer_batch.is_empty() {
        ce_t
    } else {
        let xm = graph.input(buffer_batch.inputs.clone());
        let (_, logits_m) = model.forward_graph(&mut graph, xm, mode)?;
        let ce_m = graph.softmax_ce_loss(logits_m, &buffer_batch.labels)?;
        graph.weighted_sum(&[(ce_t, 1.0), (ce_m, 1.0)])?
    };
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(cfg.lr, 0.0);
    Ok(value)
}

/// Ablation: balanced-batch EMA refresh as in the decoupled step, but the
/// feature extractor still trains on the concatenated batch (plus a separate
/// buffer forward), all with the EMA frozen.
pub fn step_er_balance_joint_train(
    model: &mut MlpModel,
    current: &Batch,
    buffer_batch: &Batch,
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_er_balance_joint_train"));
    }
    let balanced = balance(current, buffer_batch, rng)?;
    ema_refresh_pass(model, &balanced.inputs)?;
    let mode = cfg.frozen_mode();

    let union = Batch::concat(&[current, buffer_batch])?;
    let mut graph = Graph::new();
    let xu = graph.input(union.inputs.clone());
    let (_, logits_u) = model.forward_graph(&mut graph, xu, mode)?;
    let ce_u = graph.softmax_ce_loss(logits_u, &union.labels)?;
    let loss = if buffer_batch.is_empty() {
        ce_u
    } else {
        let xm = graph.input(buffer_batch.inputs.clone());
        let (_, logits_m) = model.forward_graph(&mut graph, xm, mode)?;
        let ce_m = graph.softmax_ce_loss(logits_m, &buffer_batch.labels)?;
        graph.weighted_sum(&[(ce_u, 1.0), (ce_m, 1.0)])?
    };
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(cfg.lr, 0.0);
    Ok(value)
}

/// Ablation: the decoupled step with the test-simulator removed — the
/// gradient batches are the current batch and a previous-classes-only batch,
/// and the balanced refresh is built from the latter.
pub fn step_er_bnt_no_simulator(
    model: &mut MlpModel,
    current: &Batch,
    prev_batch: &Batch,
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_er_bnt_no_simulator"));
    }
    let balanced = balance(current, prev_batch, rng)?;
    ema_refresh_pass(model, &balanced.inputs)?;
    let mode = cfg.frozen_mode();

    let mut graph = Graph::new();
    let x = graph.input(current.inputs.clone());
    let (_, logits_t) = model.forward_graph(&mut graph, x, mode)?;
    let ce_t = graph.softmax_ce_loss(logits_t, &current.labels)?;
    let loss = if prev_batch.is_empty() {
        ce_t
    } else {
        let xp = graph.input(prev_batch.inputs.clone());
        let (_, logits_p) = model.forward_graph(&mut graph, xp, mode)?;
        let ce_p = graph.softmax_ce_loss(logits_p, &prev_batch.labels)?;
        graph.weighted_sum(&[(ce_t, 1.0), (ce_p, 1.0)])?
    };
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(cfg.lr, 0.0);
    Ok(value)
}

/// Dark experience replay: three separate forwards under conventional
/// tracking — cross-entropy on the current batch, logit distillation on one
/// buffer batch, cross-entropy on another. Returns the loss and the current
/// batch's observed logits, which the caller stores with the offered
/// entries.
pub fn step_derpp(
    model: &mut MlpModel,
    current: &Batch,
    kd_batch: &Batch,
    ce_batch: &Batch,
    alpha: f64,
    beta: f64,
    lr: f64,
) -> Result<(f64, Tensor)> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_derpp"));
    }
    let mut graph = Graph::new();
    let x = graph.input(current.inputs.clone());
    let (_, logits_t) = model.forward_graph(&mut graph, x, NormMode::BatchUpdate)?;
    let observed = graph.value(logits_t).clone();
    let ce_t = graph.softmax_ce_loss(logits_t, &current.labels)?;

    let mut terms: Vec<(Var, f64)> = vec![(ce_t, 1.0)];
    if !kd_batch.is_empty() {
        let stored = require_logits(kd_batch, "step_derpp distillation batch")?.clone();
        let xk = graph.input(kd_batch.inputs.clone());
        let (_, logits_k) = model.forward_graph(&mut graph, xk, NormMode::BatchUpdate)?;
        let kd = graph.logit_mse_loss(logits_k, &stored)?;
        terms.push((kd, alpha));
    }
    if !ce_batch.is_empty() {
        let xc = graph.input(ce_batch.inputs.clone());
        let (_, logits_c) = model.forward_graph(&mut graph, xc, NormMode::BatchUpdate)?;
        let ce_c = graph.softmax_ce_loss(logits_c, &ce_batch.labels)?;
        terms.push((ce_c, beta));
    }
    let loss = if terms.len() == 1 {
        terms[0].0
    } else {
        graph.weighted_sum(&terms)?
    };
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(lr, 0.0);
    Ok((value, observed))
}

/// Dark experience replay under the decoupled discipline: balanced EMA
/// refresh, then frozen forwards of the current batch (cross-entropy) and a
/// single buffer batch serving both the distillation and replay
/// cross-entropy terms.
pub fn step_derpp_bnt(
    model: &mut MlpModel,
    current: &Batch,
    buffer_batch: &Batch,
    alpha: f64,
    beta: f64,
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Tensor)> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_derpp_bnt"));
    }
    let balanced = balance(current, buffer_batch, rng)?;
    ema_refresh_pass(model, &balanced.inputs)?;
    let mode = cfg.frozen_mode();

    let mut graph = Graph::new();
    let x = graph.input(current.inputs.clone());
    let (_, logits_t) = model.forward_graph(&mut graph, x, mode)?;
    let observed = graph.value(logits_t).clone();
    let ce_t = graph.softmax_ce_loss(logits_t, &current.labels)?;

    let loss = if buffer_batch.is_empty() {
        ce_t
    } else {
        let stored = require_logits(buffer_batch, "step_derpp_bnt buffer batch")?.clone();
        let xm = graph.input(buffer_batch.inputs.clone());
        let (_, logits_m) = model.forward_graph(&mut graph, xm, mode)?;
        let kd = graph.logit_mse_loss(logits_m, &stored)?;
        let ce_m = graph.softmax_ce_loss(logits_m, &buffer_batch.labels)?;
        graph.weighted_sum(&[(ce_t, 1.0), (kd, alpha), (ce_m, beta)])?
    };
    let value = graph.value(loss).scalar_value();
    graph.backward(loss, &mut model.params)?;
    model.params.sgd_step(cfg.lr, 0.0);
    Ok((value, observed))
}

fn require_logits<'a>(batch: &'a Batch, what: &str) -> Result<&'a Tensor> {
    batch.stored_logits.as_ref().ok_or_else(|| {
        Error::Contract(format!(
            "{what}: entry with label {} carries no stored logits",
            batch.labels.first().copied().unwrap_or(0)
        ))
    })
}

/// Which batches the herding-family step trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcarlVariant {
    /// Single forward of a mixed-loader batch, conventional tracking.
    Mixed,
    /// Single forward of current plus previous-only entries, conventional
    /// tracking.
    Concat,
    /// Balanced refresh; frozen forwards of the balanced batch (weighted by
    /// lambda) and the current batch.
    Bnt,
    /// Balanced refresh built from previous-only entries; frozen forwards of
    /// the previous-only batch (weighted) and the current batch.
    BntNoSimulator,
    /// No separate refresh; tracked forwards of the balanced batch
    /// (weighted) and the current batch.
    BntImbalanceTracker,
}

/// Classification-plus-distillation targets over the seen classes: one-hot
/// on the current task's classes, teacher sigmoid outputs on all previously
/// seen classes. Columns are `prev ++ current`, ascending.
fn icarl_targets(
    teacher: Option<&TeacherSnapshot>,
    inputs: &Tensor,
    labels: &[usize],
    prev_classes: &[usize],
    current_classes: &[usize],
) -> Result<(Vec<usize>, Tensor)> {
    let mut columns: Vec<usize> = prev_classes.to_vec();
    columns.extend_from_slice(current_classes);
    columns.sort_unstable();
    let b = inputs.rows();
    let teacher_sig = match (teacher, prev_classes.is_empty()) {
        (Some(t), false) => Some(t.sigmoid_outputs(inputs)?),
        _ => None,
    };
    let mut values = Vec::with_capacity(b * columns.len());
    for i in 0..b {
        for &c in &columns {
            if current_classes.contains(&c) {
                values.push(if labels[i] == c { 1.0 } else { 0.0 });
            } else {
                match &teacher_sig {
                    Some(t) => values.push(t.row(i)[c]),
                    None => values.push(0.0),
                }
            }
        }
    }
    let n = columns.len();
    Ok((columns, Tensor::new(vec![b, n], values).expect("sized")))
}

/// One herding-family step. `current` is the gradient batch from the task
/// loader (for the mixed variant it is the whole forwarded batch); `aux` is
/// the buffer-derived batch the variant calls for, already sampled by the
/// caller.
#[allow(clippy::too_many_arguments)]
pub fn step_icarl(
    model: &mut MlpModel,
    teacher: Option<&TeacherSnapshot>,
    current: &Batch,
    aux: &Batch,
    variant: IcarlVariant,
    lambda: f64,
    prev_classes: &[usize],
    current_classes: &[usize],
    cfg: &StrategyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if current.is_empty() {
        return Err(Error::EmptyBatch("step_icarl"));
    }
    let wd = cfg.icarl_weight_decay;
    match variant {
        IcarlVariant::Mixed | IcarlVariant::Concat => {
            let forwarded = if variant == IcarlVariant::Concat {
                Batch::concat(&[current, aux])?
            } else {
                current.clone()
            };
            let (cols, targets) = icarl_targets(
                teacher,
                &forwarded.inputs,
                &forwarded.labels,
                prev_classes,
                current_classes,
            )?;
            let mut graph = Graph::new();
            let x = graph.input(forwarded.inputs.clone());
            let (_, logits) = model.forward_graph(&mut graph, x, NormMode::BatchUpdate)?;
            let seen = graph.gather_cols(logits, cols)?;
            let loss = graph.sigmoid_bce_loss(seen, &targets)?;
            let value = graph.value(loss).scalar_value();
            graph.backward(loss, &mut model.params)?;
            model.params.sgd_step(cfg.lr, wd);
            Ok(value)
        }
        IcarlVariant::Bnt | IcarlVariant::BntNoSimulator | IcarlVariant::BntImbalanceTracker => {
            let balanced = balance(current, aux, rng)?;
            let weighted_batch = match variant {
                IcarlVariant::BntNoSimulator => aux,
                _ => &balanced,
            };
            let tracked = variant == IcarlVariant::BntImbalanceTracker;
            if !tracked {
                ema_refresh_pass(model, &balanced.inputs)?;
            }
            let base_mode = if tracked {
                NormMode::BatchUpdate
            } else {
                cfg.frozen_mode()
            };
            let lb_mode = if !tracked && cfg.icarl_lb_ema_update {
                NormMode::BatchUpdate
            } else {
                base_mode
            };

            let mut graph = Graph::new();
            let weighted_loss = if weighted_batch.is_empty() {
                None
            } else {
                let (cols, targets) = icarl_targets(
                    teacher,
                    &weighted_batch.inputs,
                    &weighted_batch.labels,
                    prev_classes,
                    current_classes,
                )?;
                let xb = graph.input(weighted_batch.inputs.clone());
                let (_, logits_b) = model.forward_graph(&mut graph, xb, lb_mode)?;
                let seen_b = graph.gather_cols(logits_b, cols)?;
                Some(graph.sigmoid_bce_loss(seen_b, &targets)?)
            };

            let (cols_t, targets_t) = icarl_targets(
                teacher,
                &current.inputs,
                &current.labels,
                prev_classes,
                current_classes,
            )?;
            let xt = graph.input(current.inputs.clone());
            let (_, logits_t) = model.forward_graph(&mut graph, xt, base_mode)?;
            let seen_t = graph.gather_cols(logits_t, cols_t)?;
            let current_loss = graph.sigmoid_bce_loss(seen_t, &targets_t)?;

            let loss = match weighted_loss {
                Some(lb) => graph.weighted_sum(&[(current_loss, 1.0), (lb, lambda)])?,
                None => current_loss,
            };
            let value = graph.value(loss).scalar_value();
            graph.backward(loss, &mut model.params)?;
            model.params.sgd_step(cfg.lr, wd);
            Ok(value)
        }
    }
}

// ---------------------------------------------------------------------------
// Task loop
// ---------------------------------------------------------------------------

/// Per-task bookkeeping returned by [`Strategy::run_task`].
#[derive(Debug, Clone)]
pub struct TaskSummary {
    pub steps: usize,
    pub mean_loss: f64,
}

/// A strategy instance: the per-batch step dispatch plus the state that
/// persists across tasks (the teacher snapshot for the distillation family).
#[derive(Debug, Clone)]
pub struct Strategy {
    pub cfg: StrategyConfig,
    teacher: Option<TeacherSnapshot>,
}

impl Strategy {
    pub fn new(cfg: StrategyConfig) -> Self {
        Strategy { cfg, teacher: None }
    }

    pub fn teacher(&self) -> Option<&TeacherSnapshot> {
        self.teacher.as_ref()
    }

    /// Train one task: iterate batches (online, or the mixed loader for the
    /// offline method), dispatch the per-batch step, and perform buffer
    /// maintenance — reservoir offers after every step for the replay
    /// families, one herding rebuild after the task for the
    /// distillation/NCM family.
    pub fn run_task(
        &mut self,
        model: &mut MlpModel,
        stream: &TaskStream,
        task_idx: usize,
        buffer: &mut ReplayBuffer,
        epochs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TaskSummary> {
        let task = &stream.tasks[task_idx];
        let task_number = task_idx + 1;
        let current_classes = task.classes.clone();
        let prev_classes = stream.classes_before(task_idx);
        let method = self.cfg.method;
        let d = stream.input_dim;

        let lambda = if method.is_icarl_family() {
            if task.train.is_empty() {
                return Err(Error::Config(format!(
                    "task {task_idx} has no training data; the buffer weighting is undefined"
                )));
            }
            self.teacher = if task_idx > 0 {
                Some(TeacherSnapshot::capture(model))
            } else {
                None
            };
            buffer.len() as f64 / task.train.len() as f64
        } else {
            0.0
        };

        let mut steps = 0usize;
        let mut loss_sum = 0.0;
        for _epoch in 0..epochs {
            let batches = if method == Method::Icarl {
                iterate_offline_mixed(task, buffer, self.cfg.batch_size, rng)
            } else {
                iterate_online(task, self.cfg.batch_size, rng)
            };
            for current in &batches {
                let k = current.len();
                let mut offered_logits: Option<Tensor> = None;
                let loss = match method {
                    Method::SgdOnly => step_sgd_only(model, current, self.cfg.lr)?,
                    Method::Er => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_er(model, current, &bm, self.cfg.lr)?
                    }
                    Method::ErBalanceBatch => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_er_balance_batch(model, current, &bm, task_number, self.cfg.lr)?
                    }
                    Method::ErCurBuf | Method::ErBntImbalanceTracker => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_er_cur_x(model, current, &bm, self.cfg.lr)?
                    }
                    Method::ErCurPrev => {
                        let bp = buffer.sample_prev_only(&current_classes, k, d, rng);
                        step_er_cur_x(model, current, &bp, self.cfg.lr)?
                    }
                    Method::ErBnt => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_er_bnt(model, current, &bm, &self.cfg, rng)?
                    }
                    Method::ErBalanceJointTrain => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_er_balance_joint_train(model, current, &bm, &self.cfg, rng)?
                    }
                    Method::ErBntNoSimulator => {
                        let bp = buffer.sample_prev_only(&current_classes, k, d, rng);
                        step_er_bnt_no_simulator(model, current, &bp, &self.cfg, rng)?
                    }
                    Method::Derpp => {
                        let bm1 = buffer.sample_buffer_with_logits(k, d, rng)?;
                        let bm2 = buffer.sample_buffer_with_logits(k, d, rng)?;
                        let (loss, logits) = step_derpp(
                            model,
                            current,
                            &bm1,
                            &bm2,
                            self.cfg.derpp_alpha,
                            self.cfg.derpp_beta,
                            self.cfg.lr,
                        )?;
                        offered_logits = Some(logits);
                        loss
                    }
                    Method::DerppBnt => {
                        let bm = buffer.sample_buffer_with_logits(k, d, rng)?;
                        let (loss, logits) = step_derpp_bnt(
                            model,
                            current,
                            &bm,
                            self.cfg.derpp_alpha,
                            self.cfg.derpp_beta,
                            &self.cfg,
                            rng,
                        )?;
                        offered_logits = Some(logits);
                        loss
                    }
                    Method::Icarl => step_icarl(
                        model,
                        self.teacher.as_ref(),
                        current,
                        &Batch::empty(d),
                        IcarlVariant::Mixed,
                        lambda,
                        &prev_classes,
                        &current_classes,
                        &self.cfg,
                        rng,
                    )?,
                    Method::IcarlConcat => {
                        let bp = buffer.sample_prev_only(&current_classes, k, d, rng);
                        step_icarl(
                            model,
                            self.teacher.as_ref(),
                            current,
                            &bp,
                            IcarlVariant::Concat,
                            lambda,
                            &prev_classes,
                            &current_classes,
                            &self.cfg,
                            rng,
                        )?
                    }
                    Method::IcarlBnt => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_icarl(
                            model,
                            self.teacher.as_ref(),
                            current,
                            &bm,
                            IcarlVariant::Bnt,
                            lambda,
                            &prev_classes,
                            &current_classes,
                            &self.cfg,
                            rng,
                        )?
                    }
                    Method::IcarlBntNoSimulator => {
                        let bp = buffer.sample_prev_only(&current_classes, k, d, rng);
                        step_icarl(
                            model,
                            self.teacher.as_ref(),
                            current,
                            &bp,
                            IcarlVariant::BntNoSimulator,
                            lambda,
                            &prev_classes,
                            &current_classes,
                            &self.cfg,
                            rng,
                        )?
                    }
                    Method::IcarlBntImbalanceTracker => {
                        let bm = buffer.sample_buffer(k, d, rng);
                        step_icarl(
                            model,
                            self.teacher.as_ref(),
                            current,
                            &bm,
                            IcarlVariant::BntImbalanceTracker,
                            lambda,
                            &prev_classes,
                            &current_classes,
                            &self.cfg,
                            rng,
                        )?
                    }
                };
                steps += 1;
                loss_sum += loss;

                if method.is_reservoir_family() {
                    for i in 0..current.len() {
                        let stored_logits = if method.stores_logits() {
                            offered_logits.as_ref().map(|l| l.row(i).to_vec())
                        } else {
                            None
                        };
                        buffer.reservoir_offer(
                            BufferEntry {
                                input: current.inputs.row(i).to_vec(),
                                label: current.labels[i],
                                stored_logits,
                                task_id: task_idx,
                            },
                            rng,
                        );
                    }
                }
            }
        }

        if method.is_icarl_family() {
            icarl_rebuild_buffer(model, task, buffer, buffer.capacity())?;
        }

        Ok(TaskSummary {
            steps,
            mean_loss: if steps > 0 {
                loss_sum / steps as f64
            } else {
                0.0
            },
        })
    }
}
