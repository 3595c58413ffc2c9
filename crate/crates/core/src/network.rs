//! ReLU MLP with per-layer gating adapters.
//!
//! Hidden layer `i` computes `h_i = g_i * relu(W_i h_{i-1} + b_i)` for
//! unit-level gates, or `h_i = relu((W_i o G_i) h_{i-1} + b_i)` for
//! weight-level gates. Binary gates are `1[gbar >= tau]`; gradients reach
//! `gbar` through a straight-through estimator (binarization is treated as
//! the identity in the backward pass). The output layer is linear and ungated.
//!
//! Models are multi-head: the output layer in `layers` belongs to the active
//! task and the heads of other tasks are kept aside, keyed by task id.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::rng::{Dist, RngState};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    #[default]
    None,
    BinaryUnit,
    BinaryWeight,
    RealUnit,
    RealWeight,
}

impl AdapterMode {
    pub fn is_weight_level(self) -> bool {
        matches!(self, AdapterMode::BinaryWeight | AdapterMode::RealWeight)
    }

    pub fn is_binary(self) -> bool {
        matches!(self, AdapterMode::BinaryUnit | AdapterMode::BinaryWeight)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub mode: AdapterMode,
    /// Binarization threshold, in (0, 1).
    pub tau: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            mode: AdapterMode::None,
            tau: 0.95,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.is_binary() && !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("adapter.tau", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    /// `out x in`
    pub w: Matrix,
    pub b: Vector,
}

impl MlpLayer {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngState) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w: rng.draw(Dist::Gaussian { mean: 0.0, std }, fan_out, fan_in)?,
            b: Array1::zeros(fan_out),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Learnable gate weights `gbar` of one hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateWeights {
    Unit(Vector),
    Weight(Matrix),
}

impl GateWeights {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            GateWeights::Unit(v) => v.as_slice().expect("contiguous"),
            GateWeights::Weight(m) => m.as_slice().expect("contiguous"),
        }
    }

    pub fn as_slice_mut(&mut self) -> &mut [f64] {
        match self {
            GateWeights::Unit(v) => v.as_slice_mut().expect("contiguous"),
            GateWeights::Weight(m) => m.as_slice_mut().expect("contiguous"),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            GateWeights::Unit(v) => GateWeights::Unit(Array1::zeros(v.len())),
            GateWeights::Weight(m) => GateWeights::Weight(Array2::zeros(m.dim())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub mode: AdapterMode,
    pub tau: f64,
    pub gbar: GateWeights,
}

impl AdapterState {
    fn new(cfg: AdapterConfig, layer: &MlpLayer) -> Self {
        let gbar = if cfg.mode.is_weight_level() {
            GateWeights::Weight(Array2::ones(layer.w.dim()))
        } else {
            GateWeights::Unit(Array1::ones(layer.out_dim()))
        };
        Self {
            mode: cfg.mode,
            tau: cfg.tau,
            gbar,
        }
    }

    fn binarize(&self, v: f64) -> f64 {
        if self.mode.is_binary() {
            if v >= self.tau {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    }

    /// Effective gates `g` (or `G`), `None` when the adapter is disabled.
    pub fn effective(&self) -> Option<GateWeights> {
        if self.mode == AdapterMode::None {
            return None;
        }
        Some(match &self.gbar {
            GateWeights::Unit(v) => GateWeights::Unit(v.mapv(|x| self.binarize(x))),
            GateWeights::Weight(m) => GateWeights::Weight(m.mapv(|x| self.binarize(x))),
        })
    }

    pub fn num_params(&self) -> usize {
        if self.mode == AdapterMode::None {
            0
        } else {
            self.gbar.as_slice().len()
        }
    }

    pub fn reset(&mut self) {
        self.gbar.as_slice_mut().fill(1.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// One 50% unit mask per layer, shared by all tasks.
    Fixed,
    /// A fresh 50% unit mask per layer for every task.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<MlpLayer>,
    /// One per hidden layer.
    pub adapters: Vec<AdapterState>,
    /// Pinned per-layer unit masks that bypass the adapters entirely.
    pub selection_override: Option<Vec<Vector>>,
    /// Task owning the output layer in `layers`, once one has been assigned.
    #[serde(default)]
    pub active_task: Option<usize>,
    /// Output layers of the inactive tasks.
    #[serde(default)]
    pub heads: BTreeMap<usize, MlpLayer>,
}

/// One output head per batch row, for batches that mix tasks.
#[derive(Clone, Debug)]
pub struct RowHeads {
    /// `batch x in`
    pub w: Matrix,
    pub b: Vector,
}

/// How each hidden layer is gated during one forward pass.
#[derive(Clone, Debug)]
pub enum GatePlan {
    Open,
    Unit(Vector),
    /// One row of unit gates per batch row.
    UnitRows(Matrix),
    Weight(Matrix),
}

/// Every intermediate of a forward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    /// `inputs[i]` feeds layer `i`; `inputs[0]` is the batch itself.
    pub inputs: Vec<Matrix>,
    /// Pre-activations of every layer.
    pub pre: Vec<Matrix>,
    /// `relu(pre)` of every hidden layer, before gating.
    pub relu: Vec<Matrix>,
    /// Gated hidden outputs followed by the network output.
    pub outputs: Vec<Matrix>,
}

impl Activations {
    pub fn prediction(&self) -> &Matrix {
        self.outputs.last().expect("at least one layer")
    }

    /// Hidden representation after layer `i` (0-based, gated).
    pub fn hidden(&self, i: usize) -> &Matrix {
        &self.outputs[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub w: Matrix,
    pub b: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// `None` where a layer's gates are not trainable in this pass.
    pub gates: Vec<Option<GateWeights>>,
    /// Inactive heads that received gradient.
    pub heads: BTreeMap<usize, LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    w: Array2::zeros(l.w.dim()),
                    b: Array1::zeros(l.b.len()),
                })
                .collect(),
            gates: model
                .adapters
                .iter()
                .map(|a| (a.mode != AdapterMode::None).then(|| a.gbar.zeros_like()))
                .collect(),
            heads: BTreeMap::new(),
        }
    }
}

/// Which parameter a flat slice belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight(usize),
    Bias(usize),
    Gate(usize),
    /// Inactive head of a task.
    HeadWeight(usize),
    HeadBias(usize),
}

fn relu_mask_inplace(grad: &mut Matrix, pre: &Matrix) {
    Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

impl Model {
    /// `widths = [input, hidden..., output]`.
    pub fn new(widths: &[usize], adapter: AdapterConfig, rng: &mut RngState) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("model.widths", "need at least input and output widths"));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("model.widths", "widths must be >= 1"));
        }
        adapter.validate()?;
        let layers = widths
            .windows(2)
            .map(|w| MlpLayer::init(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        let adapters = layers[..layers.len() - 1]
            .iter()
            .map(|l| AdapterState::new(adapter, l))
            .collect();
        Ok(Self {
            layers,
            adapters,
            selection_override: None,
            active_task: None,
            heads: BTreeMap::new(),
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].in_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn adapter_mode(&self) -> AdapterMode {
        self.adapters.first().map_or(AdapterMode::None, |a| a.mode)
    }

    pub fn num_weight_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn num_gate_params(&self) -> usize {
        self.adapters.iter().map(|a| a.num_params()).sum()
    }

    /// Fresh fan-in Gaussian output layer.
    pub fn reinit_head(&mut self, rng: &mut RngState) -> Result<()> {
        let last = self.layers.last_mut().expect("at least one layer");
        *last = MlpLayer::init(last.in_dim(), last.out_dim(), rng)?;
        Ok(())
    }

    /// Make `task`'s head the output layer. A task without a head adopts
    /// the current output layer if no task owns it yet, otherwise gets a
    /// fresh one drawn from `rng`.
    pub fn activate_head(&mut self, task: usize, rng: &mut RngState) -> Result<()> {
        if self.active_task == Some(task) {
            return Ok(());
        }
        let last = self.layers.len() - 1;
        let incoming = match self.heads.remove(&task) {
            Some(h) => h,
            None if self.active_task.is_none() => {
                self.active_task = Some(task);
                return Ok(());
            }
            None => MlpLayer::init(self.layers[last].in_dim(), self.layers[last].out_dim(), rng)?,
        };
        let outgoing = std::mem::replace(&mut self.layers[last], incoming);
        if let Some(prev) = self.active_task {
            self.heads.insert(prev, outgoing);
        }
        self.active_task = Some(task);
        Ok(())
    }

    /// Make sure `task` has a head, without activating it.
    pub fn ensure_head(&mut self, task: usize, rng: &mut RngState) -> Result<()> {
        if self.active_task.is_none() {
            self.active_task = Some(task);
        } else if self.active_task != Some(task) && !self.heads.contains_key(&task) {
            let last = &self.layers[self.layers.len() - 1];
            let head = MlpLayer::init(last.in_dim(), last.out_dim(), rng)?;
            self.heads.insert(task, head);
        }
        Ok(())
    }

    pub fn has_head(&self, task: usize) -> bool {
        self.active_task == Some(task) || self.heads.contains_key(&task)
    }

    pub fn head(&self, task: usize) -> Option<&MlpLayer> {
        if self.active_task == Some(task) {
            self.layers.last()
        } else {
            self.heads.get(&task)
        }
    }

    /// Per-row heads for a batch whose row `r` belongs to `tasks[r]`.
    pub fn row_heads(&self, tasks: &[usize]) -> Result<RowHeads> {
        let last = self.layers.last().expect("at least one layer");
        if last.out_dim() != 1 {
            return Err(Error::Shape("per-row heads need a scalar output".into()));
        }
        let mut w = Array2::zeros((tasks.len(), last.in_dim()));
        let mut b = Array1::zeros(tasks.len());
        for (r, &t) in tasks.iter().enumerate() {
            let head = self.head(t).ok_or(Error::Lookup {
                index: t,
                len: self.heads.len() + 1,
            })?;
            w.row_mut(r).assign(&head.w.row(0));
            b[r] = head.b[0];
        }
        Ok(RowHeads { w, b })
    }

    /// A copy of the model answering for `task`, if it has a head for it.
    pub fn with_task(&self, task: usize) -> Option<Model> {
        if !self.has_head(task) {
            return None;
        }
        let mut m = self.clone();
        if m.active_task != Some(task) {
            let head = m.heads.remove(&task).expect("checked");
            let last = m.layers.len() - 1;
            let prev = std::mem::replace(&mut m.layers[last], head);
            if let Some(t) = m.active_task {
                m.heads.insert(t, prev);
            }
            m.active_task = Some(task);
        }
        Some(m)
    }

    /// Predictions with row `r` answered by the head of `tasks[r]`.
    pub fn predict_rows(&self, x: ArrayView2<'_, f64>, tasks: &[usize]) -> Result<Vector> {
        let plan = self.gate_plan();
        let acts = if tasks.iter().all(|&t| self.active_task.map_or(true, |a| a == t)) {
            self.forward_with(x, &plan)?
        } else {
            let rows = self.row_heads(tasks)?;
            self.forward_rows(x, &plan, Some(&rows))?
        };
        Ok(acts.prediction().column(0).to_owned())
    }

    /// Forget every head but the active one.
    pub fn drop_inactive_heads(&mut self) {
        self.heads.clear();
        self.active_task = None;
    }

    /// Drop adapters and selection masks so every unit is open.
    pub fn open_all_gates(&mut self) {
        self.selection_override = None;
        for a in &mut self.adapters {
            a.mode = AdapterMode::None;
        }
    }

    pub fn reset_gates(&mut self) {
        for a in &mut self.adapters {
            a.reset();
        }
    }

    /// Gate weights `gbar` of every adapter, in layer order.
    pub fn gate_weights(&self) -> Vec<GateWeights> {
        self.adapters.iter().map(|a| a.gbar.clone()).collect()
    }

    pub fn set_gate_weights(&mut self, gates: &[GateWeights]) {
        for (a, g) in self.adapters.iter_mut().zip(gates) {
            a.gbar = g.clone();
        }
    }

    /// Effective gates per hidden layer; `None` where the layer is ungated.
    pub fn effective_gates(&self) -> Vec<Option<GateWeights>> {
        match &self.selection_override {
            Some(masks) => masks.iter().map(|m| Some(GateWeights::Unit(m.clone()))).collect(),
            None => self.adapters.iter().map(|a| a.effective()).collect(),
        }
    }

    /// Gating used by a plain forward pass.
    pub fn gate_plan(&self) -> Vec<GatePlan> {
        self.effective_gates()
            .into_iter()
            .map(|g| match g {
                None => GatePlan::Open,
                Some(GateWeights::Unit(v)) => GatePlan::Unit(v),
                Some(GateWeights::Weight(m)) => GatePlan::Weight(m),
            })
            .collect()
    }

    /// Whether `gbar` receives gradients (adapters on, no pinned masks).
    pub fn gates_trainable(&self) -> bool {
        self.selection_override.is_none() && self.adapter_mode() != AdapterMode::None
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Activations> {
        self.forward_with(x, &self.gate_plan())
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vector> {
        Ok(self.forward(x)?.prediction().column(0).to_owned())
    }

    pub fn forward_with(&self, x: ArrayView2<'_, f64>, plan: &[GatePlan]) -> Result<Activations> {
        self.forward_rows(x, plan, None)
    }

    /// Forward pass, optionally with one output head per row.
    pub fn forward_rows(
        &self,
        x: ArrayView2<'_, f64>,
        plan: &[GatePlan],
        heads: Option<&RowHeads>,
    ) -> Result<Activations> {
        if let Some(h) = heads {
            if h.w.nrows() != x.nrows() {
                return Err(Error::Shape("per-row heads must match batch".into()));
            }
        }
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model expects inputs of width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let n_layers = self.layers.len();
        let mut acts = Activations {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers),
            relu: Vec::with_capacity(n_layers - 1),
            outputs: Vec::with_capacity(n_layers),
        };
        let mut current = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let is_hidden = i + 1 < n_layers;
            let gate = if is_hidden { &plan[i] } else { &GatePlan::Open };
            let mut z = match (gate, heads) {
                (_, Some(h)) if !is_hidden => {
                    let z = (&current * &h.w).sum_axis(Axis(1)) + &h.b;
                    z.insert_axis(Axis(1))
                }
                (GatePlan::Weight(g), _) => current.dot(&(&layer.w * g).t()),
                _ => current.dot(&layer.w.t()),
            };
            if is_hidden || heads.is_none() {
                z += &layer.b;
            }
            acts.inputs.push(std::mem::replace(&mut current, Matrix::zeros((0, 0))));
            if is_hidden {
                let a = z.mapv(|v| v.max(0.0));
                let h = match gate {
                    GatePlan::Unit(g) => &a * g,
                    GatePlan::UnitRows(g) => {
                        if g.nrows() != a.nrows() {
                            return Err(Error::Shape("per-row gates must match batch".into()));
                        }
                        &a * g
                    }
                    GatePlan::Open | GatePlan::Weight(_) => a.clone(),
                };
                acts.pre.push(z);
                acts.relu.push(a);
                current = h.clone();
                acts.outputs.push(h);
            } else {
                acts.pre.push(z.clone());
                acts.outputs.push(z);
            }
        }
        Ok(acts)
    }

    /// Back-propagate `d_out = dL/d(prediction)` (batch x out).
    ///
    /// `gate_rows` weights each batch row's contribution to the gate
    /// gradients; rows with weight 0 still train `W` and `b`.
    pub fn backprop(
        &self,
        acts: &Activations,
        plan: &[GatePlan],
        d_out: Matrix,
        gate_rows: Option<&Vector>,
    ) -> Result<(Gradients, Vec<Matrix>)> {
        self.backprop_rows(acts, plan, d_out, gate_rows, None)
    }

    /// [`Model::backprop`] for a pass made with per-row heads. Head
    /// gradients go to the active output layer for rows of the active task
    /// and to [`Gradients::heads`] for the others; `row_tasks[r]` names the
    /// task of row `r`.
    pub fn backprop_rows(
        &self,
        acts: &Activations,
        plan: &[GatePlan],
        d_out: Matrix,
        gate_rows: Option<&Vector>,
        heads: Option<(&RowHeads, &[usize])>,
    ) -> Result<(Gradients, Vec<Matrix>)> {
        if d_out.dim() != acts.prediction().dim() {
            return Err(Error::Shape("output gradient does not match prediction".into()));
        }
        let n_layers = self.layers.len();
        let train_gates = self.gates_trainable();
        let mut grads = Gradients::zeros_like(self);
        if !train_gates {
            grads.gates.iter_mut().for_each(|g| *g = None);
        }
        let mut deltas = vec![Matrix::zeros((0, 0)); n_layers];

        // Gradient w.r.t. the output of layer i.
        let mut d_h = d_out;
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let is_hidden = i + 1 < n_layers;
            let d_z = if is_hidden {
                let a = &acts.relu[i];
                let d_a = match &plan[i] {
                    GatePlan::Unit(g) => {
                        if let Some(GateWeights::Unit(dg)) = grads.gates[i].as_mut() {
                            let prod = &d_h * a;
                            *dg = match gate_rows {
                                Some(w) => prod.t().dot(w),
                                None => prod.sum_axis(Axis(0)),
                            };
                        }
                        &d_h * g
                    }
                    GatePlan::UnitRows(g) => {
                        if let Some(GateWeights::Unit(dg)) = grads.gates[i].as_mut() {
                            let prod = &d_h * a;
                            *dg = match gate_rows {
                                Some(w) => prod.t().dot(w),
                                None => prod.sum_axis(Axis(0)),
                            };
                        }
                        &d_h * g
                    }
                    GatePlan::Open | GatePlan::Weight(_) => d_h,
                };
                let mut d_z = d_a;
                relu_mask_inplace(&mut d_z, &acts.pre[i]);
                d_z
            } else {
                d_h
            };

            let input = &acts.inputs[i];
            if let (false, Some((rows, tasks))) = (is_hidden, heads) {
                let mut active = LayerGrad {
                    w: Array2::zeros(layer.w.dim()),
                    b: Array1::zeros(1),
                };
                for (r, &t) in tasks.iter().enumerate() {
                    let dz = d_z[[r, 0]];
                    let g = if self.active_task == Some(t) {
                        &mut active
                    } else {
                        grads.heads.entry(t).or_insert_with(|| LayerGrad {
                            w: Array2::zeros(layer.w.dim()),
                            b: Array1::zeros(1),
                        })
                    };
                    g.w.row_mut(0).scaled_add(dz, &input.row(r));
                    g.b[0] += dz;
                }
                grads.layers[i] = active;
                d_h = &d_z * &rows.w;
                deltas[i] = d_z;
                continue;
            }
            let d_w_eff = d_z.t().dot(input);
            let (d_w, w_eff) = match (is_hidden, &plan.get(i)) {
                (true, Some(GatePlan::Weight(g))) => {
                    if let Some(GateWeights::Weight(dg)) = grads.gates[i].as_mut() {
                        let d_w_eff_gate = match gate_rows {
                            Some(w) => {
                                let weighted = &d_z * &w.view().insert_axis(Axis(1));
                                weighted.t().dot(input)
                            }
                            None => d_w_eff.clone(),
                        };
                        *dg = &d_w_eff_gate * &layer.w;
                    }
                    (&d_w_eff * g, Some(&layer.w * g))
                }
                _ => (d_w_eff, None),
            };
            grads.layers[i].w = d_w;
            grads.layers[i].b = d_z.sum_axis(Axis(0));
            if i > 0 {
                d_h = match &w_eff {
                    Some(we) => d_z.dot(we),
                    None => d_z.dot(&layer.w),
                };
            } else {
                d_h = Matrix::zeros((0, 0));
            }
            deltas[i] = d_z;
        }
        Ok((grads, deltas))
    }

    /// Gradients of the batch-mean squared error.
    pub fn backward(&self, x: ArrayView2<'_, f64>, y: &Vector) -> Result<(f64, Gradients)> {
        let plan = self.gate_plan();
        let acts = self.forward_with(x, &plan)?;
        let (loss, d_out) = mse_and_grad(acts.prediction(), y)?;
        let (grads, _) = self.backprop(&acts, &plan, d_out, None)?;
        Ok((loss, grads))
    }

    /// Flat views of every parameter, in a fixed order matching
    /// [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((ParamKind::Weight(i), l.w.as_slice_mut().expect("contiguous")));
            out.push((ParamKind::Bias(i), l.b.as_slice_mut().expect("contiguous")));
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            if a.mode != AdapterMode::None {
                out.push((ParamKind::Gate(i), a.gbar.as_slice_mut()));
            }
        }
        for (&t, h) in self.heads.iter_mut() {
            out.push((ParamKind::HeadWeight(t), h.w.as_slice_mut().expect("contiguous")));
            out.push((ParamKind::HeadBias(t), h.b.as_slice_mut().expect("contiguous")));
        }
        out
    }

    /// Clamp every `gbar` into `[0, 1]`.
    pub fn clamp_gates(&mut self) {
        for a in &mut self.adapters {
            a.gbar.as_slice_mut().iter_mut().for_each(|g| *g = g.clamp(0.0, 1.0));
        }
    }

    /// Pin 50% unit masks for the selection baselines. `task_rng` only
    /// matters for [`SelectionMode::Random`].
    pub fn apply_selection_baseline(
        &mut self,
        mode: SelectionMode,
        run_rng: &RngState,
        task_rng: &RngState,
    ) {
        let mut rng = match mode {
            SelectionMode::Fixed => run_rng.derive_stream("fixed-selection"),
            SelectionMode::Random => task_rng.derive_stream("random-selection"),
        };
        let masks = self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| {
                let width = l.out_dim();
                let mut mask = Array1::zeros(width);
                for j in rng.choose_indices(width, width / 2) {
                    mask[j] = 1.0;
                }
                mask
            })
            .collect();
        self.selection_override = Some(masks);
    }

    pub fn to_checkpoint(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            widths: self.widths(),
            model: self.clone(),
        })?)
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(
                "checkpoint.version",
                format!("unsupported version {}", ckpt.version),
            ));
        }
        if ckpt.model.widths() != ckpt.widths {
            return Err(Error::Shape("checkpoint widths disagree with parameters".into()));
        }
        Ok(ckpt.model)
    }
}

impl Gradients {
    /// Flat views in the order of [`Model::param_slices_mut`]. Untrained gate
    /// slots are skipped, so callers must only pair these with models whose
    /// trainable set matches.
    pub fn slices(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((ParamKind::Weight(i), l.w.as_slice().expect("contiguous")));
            out.push((ParamKind::Bias(i), l.b.as_slice().expect("contiguous")));
        }
        for (i, g) in self.gates.iter().enumerate() {
            if let Some(g) = g {
                out.push((ParamKind::Gate(i), g.as_slice()));
            }
        }
        for (&t, h) in &self.heads {
            out.push((ParamKind::HeadWeight(t), h.w.as_slice().expect("contiguous")));
            out.push((ParamKind::HeadBias(t), h.b.as_slice().expect("contiguous")));
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    widths: Vec<usize>,
    model: Model,
}

/// Batch-mean squared error and its gradient w.r.t. the predictions.
pub fn mse_and_grad(pred: &Matrix, y: &Vector) -> Result<(f64, Matrix)> {
    if pred.ncols() != 1 || pred.nrows() != y.len() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match {} targets",
            pred.dim(),
            y.len()
        )));
    }
    let n = y.len() as f64;
    let residual = &pred.column(0) - y;
    let loss = residual.dot(&residual) / n;
    let grad = residual.mapv(|r| 2.0 * r / n).insert_axis(Axis(1));
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(mode: AdapterMode, seed: u64) -> Model {
        Model::new(
            &[5, 8, 8, 1],
            AdapterConfig { mode, tau: 0.95 },
            &mut RngState::new(seed),
        )
        .unwrap()
    }

    fn batch(seed: u64, n: usize, d: usize) -> (Matrix, Vector) {
        let mut rng = RngState::new(seed);
        let x = rng.draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, n, d).unwrap();
        let y = rng
            .draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, n, 1)
            .unwrap()
            .column(0)
            .to_owned();
        (x, y)
    }

    /// Scalar-loop forward pass for a single input.
    fn naive_forward(m: &Model, x: &[f64]) -> f64 {
        let gates = m.effective_gates();
        let mut h = x.to_vec();
        for (i, l) in m.layers.iter().enumerate() {
            let mut next = vec![0.0; l.out_dim()];
            for r in 0..l.out_dim() {
                let mut acc = l.b[r];
                for c in 0..l.in_dim() {
                    let gw = match gates.get(i) {
                        Some(Some(GateWeights::Weight(g))) => g[[r, c]],
                        _ => 1.0,
                    };
                    acc += l.w[[r, c]] * gw * h[c];
                }
                next[r] = acc;
            }
            if i + 1 < m.layers.len() {
                for (r, v) in next.iter_mut().enumerate() {
                    *v = v.max(0.0);
                    if let Some(Some(GateWeights::Unit(g))) = gates.get(i) {
                        *v *= g[r];
                    }
                }
            }
            h = next;
        }
        h[0]
    }

    #[test]
    fn init_shapes_and_determinism() {
        let cfg = AdapterConfig {
            mode: AdapterMode::BinaryUnit,
            tau: 0.95,
        };
        let m = Model::new(&[100, 100, 100, 100, 1], cfg, &mut RngState::new(1)).unwrap();
        assert_eq!(m.layers.len(), 4);
        assert_eq!(m.adapters.len(), 3);
        assert!(m.adapters.iter().all(|a| a.gbar.as_slice().len() == 100));
        assert_eq!(m.num_gate_params(), 300);
        let again = Model::new(&[100, 100, 100, 100, 1], cfg, &mut RngState::new(1)).unwrap();
        assert_eq!(m, again);
        assert!(Model::new(&[3, 0, 1], cfg, &mut RngState::new(1)).is_err());
        assert!(Model::new(&[3], cfg, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn open_gates_equal_plain_mlp() {
        let plain = toy(AdapterMode::None, 3);
        let mut gated = plain.clone();
        for a in &mut gated.adapters {
            a.mode = AdapterMode::BinaryUnit;
        }
        let (x, _) = batch(4, 6, 5);
        assert_eq!(plain.predict(x.view()).unwrap(), gated.predict(x.view()).unwrap());
    }

    #[test]
    fn closed_unit_is_silent() {
        let mut m = toy(AdapterMode::BinaryUnit, 3);
        if let GateWeights::Unit(g) = &mut m.adapters[0].gbar {
            g[2] = 0.0;
        }
        let (x, _) = batch(5, 20, 5);
        let acts = m.forward(x.view()).unwrap();
        assert!(acts.hidden(0).column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_naive_loops() {
        for (seed, mode) in [
            (1, AdapterMode::BinaryUnit),
            (2, AdapterMode::BinaryWeight),
            (3, AdapterMode::RealUnit),
            (4, AdapterMode::None),
        ] {
            let mut m = toy(mode, seed);
            let mut rng = RngState::new(seed + 100);
            for a in &mut m.adapters {
                for g in a.gbar.as_slice_mut() {
                    *g = rng.next_unit();
                }
            }
            let (x, _) = batch(seed, 10, 5);
            let fast = m.predict(x.view()).unwrap();
            for (row, y) in x.rows().into_iter().zip(fast.iter()) {
                let slow = naive_forward(&m, row.as_slice().unwrap());
                assert!((slow - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let m = toy(AdapterMode::None, 1);
        let (x, _) = batch(1, 3, 4);
        assert!(matches!(m.forward(x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn gate_gradient_is_straight_through() {
        let m = toy(AdapterMode::BinaryUnit, 7);
        let (x, y) = batch(8, 12, 5);
        let plan = m.gate_plan();
        let acts = m.forward_with(x.view(), &plan).unwrap();
        let (_, d_out) = mse_and_grad(acts.prediction(), &y).unwrap();
        let (grads, _) = m.backprop(&acts, &plan, d_out.clone(), None).unwrap();
        // dL/dh for layer 0 output, recomputed by hand from layer-1 deltas.
        let (_, deltas) = m.backprop(&acts, &plan, d_out, None).unwrap();
        let d_h0 = deltas[1].dot(&m.layers[1].w);
        let expected = (&d_h0 * &acts.relu[0]).sum_axis(Axis(0));
        match &grads.gates[0] {
            Some(GateWeights::Unit(g)) => {
                for (a, b) in g.iter().zip(expected.iter()) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_input_gives_zero_first_layer_grad() {
        let m = toy(AdapterMode::None, 2);
        let x = Matrix::zeros((4, 5));
        let y = Array1::ones(4);
        let (_, g) = m.backward(x.view(), &y).unwrap();
        assert!(g.layers[0].w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_gate_blocks_incoming_weight_grads() {
        let mut m = toy(AdapterMode::BinaryUnit, 9);
        if let GateWeights::Unit(g) = &mut m.adapters[1].gbar {
            g[3] = 0.2;
        }
        let (x, y) = batch(10, 16, 5);
        let (_, g) = m.backward(x.view(), &y).unwrap();
        assert!(g.layers[1].w.row(3).iter().all(|&v| v == 0.0));
        assert_eq!(g.layers[1].b[3], 0.0);
        match &g.gates[1] {
            Some(GateWeights::Unit(dg)) => assert!(dg[3] != 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn thresholding_rule() {
        let mut a = AdapterState {
            mode: AdapterMode::BinaryUnit,
            tau: 0.95,
            gbar: GateWeights::Unit(ndarray::array![0.95, 0.9499]),
        };
        assert_eq!(a.effective(), Some(GateWeights::Unit(ndarray::array![1.0, 0.0])));
        a.tau = 1.0 - 1.0 / 40.0;
        a.gbar = GateWeights::Unit(ndarray::array![0.96]);
        assert_eq!(a.effective(), Some(GateWeights::Unit(ndarray::array![0.0])));
    }

    #[test]
    fn reset_gates_is_idempotent() {
        let mut m = toy(AdapterMode::BinaryUnit, 11);
        for a in &mut m.adapters {
            a.gbar.as_slice_mut().iter_mut().enumerate().for_each(|(i, g)| *g = i as f64 / 10.0);
        }
        let weights = m.layers.clone();
        m.reset_gates();
        assert!(m.effective_gates().iter().all(|g| match g {
            Some(GateWeights::Unit(v)) => v.iter().all(|&x| x == 1.0),
            _ => false,
        }));
        let once = m.clone();
        m.reset_gates();
        assert_eq!(m, once);
        assert_eq!(m.layers, weights);

        let mut plain = toy(AdapterMode::None, 11);
        let before = plain.clone();
        plain.reset_gates();
        assert_eq!(plain.predict(Matrix::ones((2, 5)).view()).unwrap(), before.predict(Matrix::ones((2, 5)).view()).unwrap());
    }

    #[test]
    fn selection_masks() {
        let mut m = toy(AdapterMode::None, 12);
        let run = RngState::new(1);
        let masks: Vec<_> = (0..5)
            .map(|t| {
                m.apply_selection_baseline(
                    SelectionMode::Fixed,
                    &run,
                    &run.derive_stream(&format!("task-{t}")),
                );
                m.selection_override.clone().unwrap()
            })
            .collect();
        assert!(masks.windows(2).all(|w| w[0] == w[1]));
        assert!(masks[0].iter().all(|mk| mk.sum() == 4.0));
        assert!(!m.gates_trainable());
    }

    #[test]
    fn random_selection_overlap_is_half() {
        let mut m = Model::new(&[4, 100, 1], AdapterConfig::default(), &mut RngState::new(0)).unwrap();
        let run = RngState::new(2);
        let mut prev: Option<Vector> = None;
        let mut overlaps = Vec::new();
        for t in 0..100 {
            m.apply_selection_baseline(
                SelectionMode::Random,
                &run,
                &run.derive_stream(&format!("task-{t}")),
            );
            let mask = m.selection_override.as_ref().unwrap()[0].clone();
            assert_eq!(mask.sum(), 50.0);
            if let Some(p) = &prev {
                overlaps.push(p.dot(&mask) / 50.0);
            }
            prev = Some(mask);
        }
        let mean = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = toy(AdapterMode::BinaryWeight, 13);
        m.adapters[0].gbar.as_slice_mut()[0] = 0.123456789012345678;
        let text = m.to_checkpoint().unwrap();
        let back = Model::from_checkpoint(&text).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.layers.iter().zip(&back.layers) {
            assert!(a.w.iter().zip(b.w.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn heads_switch_and_come_back() {
        let mut m = toy(AdapterMode::None, 14);
        let original = m.layers[2].clone();
        let mut rng = RngState::new(1);
        m.activate_head(7, &mut rng).unwrap();
        assert_eq!(m.layers[2], original);
        m.activate_head(8, &mut rng).unwrap();
        assert_ne!(m.layers[2], original);
        let second = m.layers[2].clone();
        m.activate_head(7, &mut rng).unwrap();
        assert_eq!(m.layers[2], original);
        assert_eq!(m.head(8), Some(&second));
        assert_eq!(m.with_task(8).unwrap().layers[2], second);
        assert!(m.with_task(9).is_none());
        let back = Model::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn row_heads_match_per_task_models() {
        let mut m = toy(AdapterMode::BinaryUnit, 15);
        let mut rng = RngState::new(2);
        m.activate_head(0, &mut rng).unwrap();
        m.ensure_head(1, &mut rng).unwrap();
        let (x, _) = batch(3, 6, 5);
        let tasks = [0, 1, 1, 0, 1, 0];
        let mixed = m.predict_rows(x.view(), &tasks).unwrap();
        for (r, &t) in tasks.iter().enumerate() {
            let own = m.with_task(t).unwrap();
            let p = own.predict(x.slice(ndarray::s![r..r + 1, ..])).unwrap()[0];
            assert!((p - mixed[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_batch_gradients_match_finite_differences() {
        let mut m = toy(AdapterMode::None, 16);
        let mut rng = RngState::new(4);
        m.activate_head(0, &mut rng).unwrap();
        m.ensure_head(1, &mut rng).unwrap();
        let (x, y) = batch(5, 7, 5);
        let tasks = [0, 1, 1, 0, 1, 0, 1];
        let loss = |m: &Model| {
            let p = m.predict_rows(x.view(), &tasks).unwrap();
            let r = &p - &y;
            r.dot(&r) / r.len() as f64
        };
        let plan = m.gate_plan();
        let rows = m.row_heads(&tasks).unwrap();
        let acts = m.forward_rows(x.view(), &plan, Some(&rows)).unwrap();
        let (_, d_out) = mse_and_grad(acts.prediction(), &y).unwrap();
        let (g, _) = m
            .backprop_rows(&acts, &plan, d_out, None, Some((&rows, &tasks)))
            .unwrap();
        let h = 1e-6;
        let fd = |m: &Model, edit: &dyn Fn(&mut Model, f64)| {
            let (mut a, mut b) = (m.clone(), m.clone());
            edit(&mut a, h);
            edit(&mut b, -h);
            (loss(&a) - loss(&b)) / (2.0 * h)
        };
        let checks: Vec<(f64, f64)> = vec![
            (g.layers[0].w[[2, 3]], fd(&m, &|m, e| m.layers[0].w[[2, 3]] += e)),
            (g.layers[2].w[[0, 1]], fd(&m, &|m, e| m.layers[2].w[[0, 1]] += e)),
            (g.layers[2].b[0], fd(&m, &|m, e| m.layers[2].b[0] += e)),
            (g.heads[&1].w[[0, 4]], fd(&m, &|m, e| m.heads.get_mut(&1).unwrap().w[[0, 4]] += e)),
            (g.heads[&1].b[0], fd(&m, &|m, e| m.heads.get_mut(&1).unwrap().b[0] += e)),
        ];
        for (a, n) in checks {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }
}
