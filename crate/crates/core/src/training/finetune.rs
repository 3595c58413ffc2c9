//! Finetuning used by the representation probe: fresh head, all gates open,
//! Adam with a reduce-on-plateau schedule.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{mse_and_grad, Model};
use crate::rng::RngState;
use crate::tasks::RegressionDataset;
use crate::training::optim::{Optimizer, OptimizerKind, ParamFilter};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement that count as a plateau.
    pub patience: usize,
    pub factor: f64,
    pub max_reductions: usize,
    /// Relative improvement needed to reset the plateau counter.
    pub threshold: f64,
    pub gates: FinetuneGates,
}

/// What adapter gates do while finetuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneGates {
    /// Every gate open and frozen.
    #[default]
    Open,
    /// Gates reset to open and trained along with the weights.
    Learn,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 3,
            factor: 0.3,
            max_reductions: 3,
            threshold: 1e-4,
            gates: FinetuneGates::Open,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("finetune.learning_rate", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("finetune.batch_size", "must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("finetune.patience", "must be >= 1"));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::config("finetune.factor", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlateauAction {
    Continue,
    Reduced,
    Stop,
}

/// Multiply the learning rate by `factor` whenever the monitored loss has not
/// improved for `patience` epochs; stop at the plateau after the last allowed
/// reduction.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    threshold: f64,
    max_reductions: usize,
    reductions: usize,
    best: f64,
    bad_epochs: usize,
    history: Vec<f64>,
}

impl PlateauSchedule {
    pub fn new(cfg: &FinetuneConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            factor: cfg.factor,
            patience: cfg.patience,
            threshold: cfg.threshold,
            max_reductions: cfg.max_reductions,
            reductions: 0,
            best: f64::INFINITY,
            bad_epochs: 0,
            history: vec![cfg.learning_rate],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    /// Learning rates used so far, starting with the initial one.
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn observe(&mut self, loss: f64) -> PlateauAction {
        if loss < self.best * (1.0 - self.threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return PlateauAction::Continue;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.patience {
            return PlateauAction::Continue;
        }
        self.bad_epochs = 0;
        if self.reductions == self.max_reductions {
            return PlateauAction::Stop;
        }
        self.reductions += 1;
        self.lr *= self.factor;
        self.history.push(self.lr);
        PlateauAction::Reduced
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneTrace {
    pub epochs: usize,
    pub lr_history: Vec<f64>,
    pub final_loss: f64,
}

/// Finetune a copy of `model` on `data`. The input model is not modified.
pub fn finetune(
    model: &Model,
    data: &RegressionDataset,
    cfg: &FinetuneConfig,
    rng: &RngState,
) -> Result<(Model, FinetuneTrace)> {
    if data.is_empty() {
        return Err(Error::config("finetune.data", "dataset is empty"));
    }
    let mut tuned = model.clone();
    match cfg.gates {
        FinetuneGates::Open => tuned.open_all_gates(),
        FinetuneGates::Learn => {
            tuned.selection_override = None;
            tuned.reset_gates();
        }
    }
    tuned.drop_inactive_heads();
    tuned.reinit_head(&mut rng.derive_stream("head"))?;

    let mut shuffle = rng.derive_stream("shuffle");
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let mut schedule = PlateauSchedule::new(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = 0;
    let mut final_loss = f64::NAN;

    while epochs < cfg.max_epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.inputs.select(Axis(0), chunk);
            let y = data.targets.select(Axis(0), chunk);
            let plan = tuned.gate_plan();
            let acts = tuned.forward_with(x.view(), &plan)?;
            let (loss, d_out) = mse_and_grad(acts.prediction(), &y)?;
            let (grads, _) = tuned.backprop(&acts, &plan, d_out, None)?;
            let lr = schedule.lr();
            opt.step(&mut tuned, &grads, ParamFilter::All, |_| lr);
            tuned.clamp_gates();
            total += loss * chunk.len() as f64;
        }
        epochs += 1;
        final_loss = total / data.len() as f64;
        if schedule.observe(final_loss) == PlateauAction::Stop {
            break;
        }
    }
    Ok((
        tuned,
        FinetuneTrace {
            epochs,
            lr_history: schedule.history().to_vec(),
            final_loss,
        },
    ))
}
