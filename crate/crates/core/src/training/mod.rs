//! Continual, multi-task and GDumb training loops and the forgetting
//! mitigation strategies that plug into them.

pub mod ewc;
pub mod finetune;
pub mod optim;
pub mod replay;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{
    mse_and_grad, AdapterConfig, GatePlan, GateWeights, Gradients, LayerGrad, MlpLayer, Model, ParamKind,
    SelectionMode,
};
use crate::rng::RngState;
use crate::tasks::RegressionDataset;

pub use ewc::{EwcParams, EwcState};
pub use finetune::{finetune, FinetuneConfig, FinetuneGates, FinetuneTrace, PlateauAction, PlateauSchedule};
pub use optim::{Optimizer, OptimizerKind, ParamFilter};
pub use replay::{ReplayBuffer, ReplayItem};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub validation_fraction: f64,
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Learning rate of the gate weights; defaults to `learning_rate`.
    pub gate_learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Epoch budget per task, adapter warm-up included.
    pub max_epochs: usize,
    pub early_stop: Option<EarlyStop>,
    /// Leading epochs in which only the gate weights are trained.
    pub adapter_warmup_epochs: usize,
    /// Rescale each step's gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            gate_learning_rate: None,
            batch_size: 16,
            max_epochs: 20,
            early_stop: None,
            adapter_warmup_epochs: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and > 0"));
        }
        if let Some(lr) = self.gate_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config("train.gate_learning_rate", "must be finite and > 0"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.adapter_warmup_epochs > self.max_epochs {
            return Err(Error::config(
                "train.adapter_warmup_epochs",
                "cannot exceed max_epochs",
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train.grad_clip", "must be finite and > 0"));
            }
        }
        if let Some(es) = self.early_stop {
            if !(es.validation_fraction > 0.0 && es.validation_fraction < 1.0) {
                return Err(Error::config(
                    "train.early_stop.validation_fraction",
                    "must lie in (0, 1)",
                ));
            }
            if es.patience == 0 {
                return Err(Error::config("train.early_stop.patience", "must be >= 1"));
            }
        }
        Ok(())
    }

    fn gate_lr(&self) -> f64 {
        self.gate_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// The continual-learning method, with its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Vanilla,
    /// `+ coeff * |theta - theta_prev|^2`
    L2 { coeff: f64 },
    /// `+ coeff * sum F (theta - theta*)^2` with `F <- decay F + F_task`.
    OnlineEwc { coeff: f64, decay: f64 },
    /// Each batch of `B` current examples gets `B * ratio / (1 - ratio)`
    /// replayed ones.
    Replay {
        capacity: usize,
        #[serde(default = "half")]
        replay_fraction: f64,
    },
    /// Only fills the buffer; the evaluated model is trained on it from scratch.
    #[serde(rename = "gdumb")]
    GDumb { capacity: usize },
    FixedSelection,
    RandomSelection,
    /// Joint training on every dataset seen so far.
    Multitask,
}

fn half() -> f64 {
    0.5
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Method::L2 { coeff } if !(coeff >= 0.0) => {
                Err(Error::config("strategy.coeff", "must be >= 0"))
            }
            Method::OnlineEwc { coeff, decay } => {
                if !(coeff >= 0.0) {
                    Err(Error::config("strategy.coeff", "must be >= 0"))
                } else if !(decay > 0.0 && decay <= 1.0) {
                    Err(Error::config("strategy.decay", "must lie in (0, 1]"))
                } else {
                    Ok(())
                }
            }
            Method::Replay {
                replay_fraction, ..
            } if !(0.0..1.0).contains(&replay_fraction) => Err(Error::config(
                "strategy.replay_fraction",
                "must lie in [0, 1)",
            )),
            _ => Ok(()),
        }
    }

    fn buffer_capacity(&self) -> Option<usize> {
        match *self {
            Method::Replay { capacity, .. } | Method::GDumb { capacity } => Some(capacity),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub method: Method,
    #[serde(default)]
    pub adapter: AdapterConfig,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.adapter.validate()
    }
}

/// A method plus everything it remembers across task boundaries.
#[derive(Clone, Debug)]
pub struct TrainStrategy {
    pub config: StrategyConfig,
    /// Parameters at the previous task boundary (L2 anchor).
    pub prev_params: Option<Vec<MlpLayer>>,
    pub ewc: Option<EwcState>,
    pub buffer: Option<ReplayBuffer>,
    /// End-of-task gate weights, keyed by task id.
    pub gate_memory: BTreeMap<usize, Vec<GateWeights>>,
    run_rng: RngState,
}

impl TrainStrategy {
    /// `run_rng` seeds run-wide choices such as the fixed selection mask.
    pub fn new(config: StrategyConfig, run_rng: &RngState) -> Result<Self> {
        config.validate()?;
        let buffer = config.method.buffer_capacity().map(ReplayBuffer::new);
        Ok(Self {
            config,
            prev_params: None,
            ewc: None,
            buffer,
            gate_memory: BTreeMap::new(),
            run_rng: run_rng.clone(),
        })
    }

    pub fn method(&self) -> &Method {
        &self.config.method
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskOutcome {
    pub epochs: usize,
    pub final_loss: f64,
    /// Fraction of closed unit gates right after warm-up, if any ran.
    pub closed_after_warmup: Option<f64>,
}

fn closed_fraction(model: &Model) -> f64 {
    let (mut closed, mut total) = (0usize, 0usize);
    for g in model.effective_gates().into_iter().flatten() {
        for &v in g.as_slice() {
            total += 1;
            if v == 0.0 {
                closed += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        closed as f64 / total as f64
    }
}

/// Effective unit gates for the stored weights of one past task.
fn remembered_unit_gates(model: &Model, stored: &[GateWeights]) -> Option<Vec<Array1<f64>>> {
    model
        .adapters
        .iter()
        .zip(stored)
        .map(|(a, g)| match g {
            GateWeights::Unit(v) => {
                let probe = crate::network::AdapterState {
                    mode: a.mode,
                    tau: a.tau,
                    gbar: GateWeights::Unit(v.clone()),
                };
                match probe.effective() {
                    Some(GateWeights::Unit(e)) => Some(e),
                    _ => None,
                }
            }
            GateWeights::Weight(_) => None,
        })
        .collect()
}

struct StepContext<'a> {
    cfg: &'a TrainConfig,
    method: &'a Method,
    prev_params: Option<&'a [MlpLayer]>,
    ewc: Option<&'a EwcState>,
}

/// The output head is per task, so only the shared layers are anchored.
fn add_l2_grad(model: &Model, anchor: &[MlpLayer], coeff: f64, grads: &mut [LayerGrad]) {
    let shared = model.layers.len() - 1;
    for ((g, a), l) in grads.iter_mut().zip(anchor).zip(&model.layers).take(shared) {
        ndarray::Zip::from(&mut g.w)
            .and(&a.w)
            .and(&l.w)
            .for_each(|g, a, p| *g += 2.0 * coeff * (p - a));
        ndarray::Zip::from(&mut g.b)
            .and(&a.b)
            .and(&l.b)
            .for_each(|g, a, p| *g += 2.0 * coeff * (p - a));
    }
}

/// One optimization step on `x, y`. Rows `[n_current..]` are replayed
/// examples gated by `replay_gates` (per hidden layer), when given. Row `r`
/// is answered by the head of `tasks[r]`.
#[allow(clippy::too_many_arguments)]
fn step(
    model: &mut Model,
    opt: &mut Optimizer,
    ctx: &StepContext<'_>,
    x: &Matrix,
    y: &Array1<f64>,
    tasks: &[usize],
    n_current: usize,
    replay_gates: Option<&[Matrix]>,
    filter: ParamFilter,
) -> Result<f64> {
    let mut plan = model.gate_plan();
    let mut gate_rows = None;
    if n_current < y.len() {
        let mut w = Array1::zeros(y.len());
        w.slice_mut(ndarray::s![..n_current]).fill(1.0);
        gate_rows = Some(w);
        if let Some(rows) = replay_gates {
            for (p, replay) in plan.iter_mut().zip(rows) {
                if let GatePlan::Unit(g) = p {
                    let mut full = Array2::zeros((y.len(), g.len()));
                    for mut r in full.rows_mut().into_iter().take(n_current) {
                        r.assign(g);
                    }
                    full.slice_mut(ndarray::s![n_current.., ..]).assign(replay);
                    *p = GatePlan::UnitRows(full);
                }
            }
        }
    }
    let mixed = tasks.iter().any(|&t| Some(t) != model.active_task);
    let rows = if mixed {
        Some(model.row_heads(tasks)?)
    } else {
        None
    };
    let acts = model.forward_rows(x.view(), &plan, rows.as_ref())?;
    let (loss, d_out) = mse_and_grad(acts.prediction(), y)?;
    let heads = rows.as_ref().map(|r| (r, tasks));
    let (mut grads, _) = model.backprop_rows(&acts, &plan, d_out, gate_rows.as_ref(), heads)?;
    if filter == ParamFilter::All {
        match (ctx.method, ctx.prev_params, ctx.ewc) {
            (&Method::L2 { coeff }, Some(anchor), _) if coeff > 0.0 => {
                add_l2_grad(model, anchor, coeff, &mut grads.layers)
            }
            (&Method::OnlineEwc { coeff, .. }, _, Some(state)) if coeff > 0.0 => {
                state.add_penalty_grad(model, coeff, &mut grads.layers)
            }
            _ => {}
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite training loss {loss}")));
    }
    if let Some(max_norm) = ctx.cfg.grad_clip {
        clip_global_norm(&mut grads, max_norm, filter);
    }
    let (lr, gate_lr) = (ctx.cfg.learning_rate, ctx.cfg.gate_lr());
    opt.step(model, &grads, filter, |kind| match kind {
        ParamKind::Gate(_) => gate_lr,
        _ => lr,
    });
    model.clamp_gates();
    Ok(loss)
}

fn clip_global_norm(grads: &mut Gradients, max_norm: f64, filter: ParamFilter) {
    let gates_only = filter == ParamFilter::GatesOnly;
    let mut sq = 0.0;
    if !gates_only {
        for l in grads.layers.iter().chain(grads.heads.values()) {
            sq += l.w.iter().map(|v| v * v).sum::<f64>() + l.b.iter().map(|v| v * v).sum::<f64>();
        }
    }
    for g in grads.gates.iter().flatten() {
        sq += g.as_slice().iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for l in grads.layers.iter_mut().chain(grads.heads.values_mut()) {
            l.w.mapv_inplace(|v| v * scale);
            l.b.mapv_inplace(|v| v * scale);
        }
        for g in grads.gates.iter_mut().flatten() {
            g.as_slice_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
}

fn mean_squared_error(model: &Model, data: &RegressionDataset, tasks: &[usize]) -> Result<f64> {
    let pred = model.predict_rows(data.inputs.view(), tasks)?;
    let r = &pred - &data.targets;
    Ok(r.dot(&r) / data.len() as f64)
}

/// Split off a validation set when early stopping is configured.
fn split_validation(
    data: &RegressionDataset,
    tasks: &[usize],
    cfg: &TrainConfig,
    rng: &RngState,
) -> (Labelled, Option<Labelled>) {
    match cfg.early_stop {
        None => ((data.clone(), tasks.to_vec()), None),
        Some(es) => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            rng.derive_stream("validation-split").shuffle(&mut idx);
            let n_val = ((data.len() as f64) * es.validation_fraction).round() as usize;
            let n_val = n_val.clamp(1, data.len().saturating_sub(1).max(1));
            let (val, train) = idx.split_at(n_val);
            let pick = |ix: &[usize]| (data.subset(ix), ix.iter().map(|&i| tasks[i]).collect());
            (pick(train), Some(pick(val)))
        }
    }
}

/// A dataset with the task of every row.
type Labelled = (RegressionDataset, Vec<usize>);

/// Shuffled mini-batch epochs with optional replay, warm-up and early stop.
/// `row_tasks` gives the task of each row of `data`, otherwise every row
/// belongs to `data.task_id`.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut Model,
    data: &RegressionDataset,
    row_tasks: Option<&[usize]>,
    cfg: &TrainConfig,
    ctx: &StepContext<'_>,
    replay: Option<(&ReplayBuffer, &BTreeMap<usize, Vec<GateWeights>>)>,
    rng: &RngState,
) -> Result<TaskOutcome> {
    let own_tasks;
    let tasks = match row_tasks {
        Some(t) if t.len() == data.len() => t,
        Some(_) => return Err(Error::Shape("row tasks must match dataset".into())),
        None => {
            own_tasks = vec![data.task_id; data.len()];
            &own_tasks[..]
        }
    };
    let ((train, train_tasks), val) = split_validation(data, tasks, cfg, rng);
    if train.len() < cfg.batch_size && train.is_empty() {
        return Err(Error::config("train.data", "dataset is empty"));
    }
    let mut shuffle = rng.derive_stream("shuffle");
    let mut replay_rng = rng.derive_stream("replay");
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let warmup = if model.gates_trainable() {
        cfg.adapter_warmup_epochs
    } else {
        0
    };
    let replay_ratio = match *ctx.method {
        Method::Replay {
            replay_fraction, ..
        } => replay_fraction / (1.0 - replay_fraction),
        _ => 0.0,
    };

    let mut outcome = TaskOutcome::default();
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0;
    for epoch in 0..cfg.max_epochs {
        let filter = if epoch < warmup {
            ParamFilter::GatesOnly
        } else {
            ParamFilter::All
        };
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = train.inputs.select(Axis(0), chunk);
            let mut y = train.targets.select(Axis(0), chunk);
            let mut batch_tasks: Vec<usize> = chunk.iter().map(|&i| train_tasks[i]).collect();
            let mut replay_gates = None;
            if let Some((buf, memory)) = replay.filter(|(b, _)| !b.is_empty() && replay_ratio > 0.0) {
                let k = ((chunk.len() as f64) * replay_ratio).round() as usize;
                let items = buf.sample(k, &mut replay_rng);
                let d = x.ncols();
                let mut rx = Array2::zeros((items.len(), d));
                let mut ry = Array1::zeros(items.len());
                for (i, item) in items.iter().enumerate() {
                    rx.row_mut(i).assign(&item.input);
                    ry[i] = item.target;
                    batch_tasks.push(item.task_id);
                }
                if model.gates_trainable() {
                    replay_gates = replay_gate_rows(model, &items, memory);
                }
                x = ndarray::concatenate![Axis(0), x, rx];
                y = ndarray::concatenate![Axis(0), y, ry];
            }
            let loss = step(
                model,
                &mut opt,
                ctx,
                &x,
                &y,
                &batch_tasks,
                chunk.len(),
                replay_gates.as_deref(),
                filter,
            )?;
            total += loss * chunk.len() as f64;
        }
        outcome.epochs = epoch + 1;
        outcome.final_loss = total / train.len() as f64;
        if warmup > 0 && epoch + 1 == warmup {
            outcome.closed_after_warmup = Some(closed_fraction(model));
        }
        if let (Some((val, val_tasks)), Some(es)) = (&val, cfg.early_stop) {
            if epoch >= warmup {
                let v = mean_squared_error(model, val, val_tasks)?;
                if v < best_val {
                    best_val = v;
                    bad_epochs = 0;
                } else {
                    bad_epochs += 1;
                    if bad_epochs >= es.patience {
                        break;
                    }
                }
            }
        }
    }
    Ok(outcome)
}

/// Per-row unit gates for replayed items, from each item's remembered gates.
/// Items of unknown tasks fall back to the current gates.
fn replay_gate_rows(
    model: &Model,
    items: &[&ReplayItem],
    memory: &BTreeMap<usize, Vec<GateWeights>>,
) -> Option<Vec<Matrix>> {
    let current: Vec<Array1<f64>> = model
        .effective_gates()
        .into_iter()
        .map(|g| match g {
            Some(GateWeights::Unit(v)) => Some(v),
            _ => None,
        })
        .collect::<Option<_>>()?;
    let mut rows: Vec<Matrix> = current
        .iter()
        .map(|g| Array2::zeros((items.len(), g.len())))
        .collect();
    let mut cache: BTreeMap<usize, Vec<Array1<f64>>> = BTreeMap::new();
    for (r, item) in items.iter().enumerate() {
        let gates = match memory.get(&item.task_id) {
            Some(stored) => cache
                .entry(item.task_id)
                .or_insert_with(|| remembered_unit_gates(model, stored).unwrap_or_else(|| current.clone()))
                .clone(),
            None => current.clone(),
        };
        for (layer, g) in rows.iter_mut().zip(&gates) {
            layer.row_mut(r).assign(g);
        }
    }
    Some(rows)
}

/// Train on one task of the sequence, then update the strategy's memory.
pub fn train_task(
    model: &mut Model,
    data: &RegressionDataset,
    cfg: &TrainConfig,
    strategy: &mut TrainStrategy,
    rng: &RngState,
) -> Result<TaskOutcome> {
    if data.is_empty() {
        return Err(Error::config("train.data", "dataset is empty"));
    }
    match strategy.config.method {
        Method::FixedSelection => {
            model.apply_selection_baseline(SelectionMode::Fixed, &strategy.run_rng, rng)
        }
        Method::RandomSelection => {
            model.apply_selection_baseline(SelectionMode::Random, &strategy.run_rng, rng)
        }
        Method::Multitask => {
            return Err(Error::config(
                "strategy.method",
                "multitask runs through train_multitask, not train_task",
            ))
        }
        _ => {}
    }
    model.reset_gates();

    let outcome = if matches!(strategy.config.method, Method::GDumb { .. }) {
        TaskOutcome::default()
    } else {
        model.activate_head(data.task_id, &mut rng.derive_stream("head"))?;
        let ctx = StepContext {
            cfg,
            method: &strategy.config.method,
            prev_params: strategy.prev_params.as_deref(),
            ewc: strategy.ewc.as_ref(),
        };
        let replay = strategy
            .buffer
            .as_ref()
            .map(|b| (b, &strategy.gate_memory));
        run_epochs(model, data, None, cfg, &ctx, replay, rng)?
    };

    match strategy.config.method {
        Method::L2 { .. } => strategy.prev_params = Some(model.layers.clone()),
        Method::OnlineEwc { decay, .. } => {
            strategy.ewc = Some(EwcState::consolidate(strategy.ewc.take(), model, data, decay)?)
        }
        _ => {}
    }
    if let Some(buf) = strategy.buffer.as_mut() {
        buf.update(data, &mut rng.derive_stream("buffer"));
    }
    if model.gates_trainable() {
        strategy
            .gate_memory
            .insert(data.task_id, model.gate_weights());
    }
    Ok(outcome)
}

/// One optimization over the union of `datasets`, batches drawn uniformly
/// from the pool. Each dataset's task gets its own head.
pub fn train_multitask(
    model: &mut Model,
    datasets: &[&RegressionDataset],
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<TaskOutcome> {
    let Some(first) = datasets.first() else {
        return Err(Error::config("train.datasets", "need at least one dataset"));
    };
    let tasks: Vec<usize> = datasets
        .iter()
        .flat_map(|d| std::iter::repeat(d.task_id).take(d.len()))
        .collect();
    let pool = if datasets.len() == 1 {
        (*first).clone()
    } else {
        let inputs: Vec<_> = datasets.iter().map(|d| d.inputs.view()).collect();
        let targets: Vec<_> = datasets.iter().map(|d| d.targets.view()).collect();
        RegressionDataset {
            inputs: ndarray::concatenate(Axis(0), &inputs).map_err(|e| Error::Shape(e.to_string()))?,
            targets: ndarray::concatenate(Axis(0), &targets)
                .map_err(|e| Error::Shape(e.to_string()))?,
            task_id: first.task_id,
            provenance: format!("pool of {} datasets", datasets.len()),
        }
    };
    train_pool(model, &pool, &tasks, cfg, rng)
}

/// Joint training on a pool whose row `r` belongs to `tasks[r]`.
fn train_pool(
    model: &mut Model,
    pool: &RegressionDataset,
    tasks: &[usize],
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<TaskOutcome> {
    let Some(&first) = tasks.first() else {
        return Err(Error::config("train.data", "dataset is empty"));
    };
    model.activate_head(first, &mut rng.derive_stream(&format!("head-{first}")))?;
    let mut seen: Vec<usize> = tasks.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for &t in &seen {
        model.ensure_head(t, &mut rng.derive_stream(&format!("head-{t}")))?;
    }
    model.reset_gates();
    let ctx = StepContext {
        cfg,
        method: &Method::Vanilla,
        prev_params: None,
        ewc: None,
    };
    run_epochs(model, pool, Some(tasks), cfg, &ctx, None, rng)
}

/// GDumb's evaluated model: freshly initialized and trained on the buffer.
pub fn gdumb_model(
    widths: &[usize],
    adapter: AdapterConfig,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<Model> {
    let mut model = Model::new(widths, adapter, &mut rng.derive_stream("init"))?;
    if let Some((data, tasks)) = buffer.to_pool() {
        train_pool(&mut model, &data, &tasks, cfg, &rng.derive_stream("train"))?;
    }
    Ok(model)
}
