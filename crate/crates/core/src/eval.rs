//! Representation and continual-learning metrics, plus the feature and
//! gate diagnostics.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, RowspaceProjector};
use crate::network::{GateWeights, Model};
use crate::rng::RngState;
use crate::tasks::{RegressionDataset, SharedFeature, TaskSpec, TaskUniverse};
use crate::training::{finetune, FinetuneConfig};

/// Smallest MSE before the log is taken.
pub const MSE_FLOOR: f64 = 1e-12;

/// Offset keeping held-out task ids apart from training ids.
pub const EVAL_TASK_ID_BASE: usize = 1_000_000;

/// `-ln(MSE)`. The flag is set when the MSE hit [`MSE_FLOOR`].
pub fn performance(model: &Model, data: &RegressionDataset) -> Result<(f64, bool)> {
    if data.is_empty() {
        return Err(Error::config("eval.data", "dataset is empty"));
    }
    let pred = model.predict(data.inputs.view())?;
    let r = &pred - &data.targets;
    let mse = r.dot(&r) / data.len() as f64;
    if !mse.is_finite() {
        return Ok((f64::NEG_INFINITY, false));
    }
    let clamped = mse < MSE_FLOOR;
    Ok((-mse.max(MSE_FLOOR).ln(), clamped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocolConfig {
    /// Number of held-out tasks `m`.
    pub num_tasks: usize,
    pub subsample_sizes: Vec<usize>,
    pub repeats: usize,
    /// Size of the pool each subsample is drawn from.
    pub pool_size: usize,
    pub test_size: usize,
    pub finetune: FinetuneConfig,
}

impl Default for EvalProtocolConfig {
    fn default() -> Self {
        Self {
            num_tasks: 4,
            subsample_sizes: vec![50, 100, 200, 400, 800, 1600],
            repeats: 2,
            pool_size: 2000,
            test_size: 2000,
            finetune: FinetuneConfig::default(),
        }
    }
}

impl EvalProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::config("eval.num_tasks", "must be >= 1"));
        }
        if self.subsample_sizes.is_empty() {
            return Err(Error::config("eval.subsample_sizes", "must not be empty"));
        }
        if self.repeats == 0 {
            return Err(Error::config("eval.repeats", "must be >= 1"));
        }
        if self.test_size == 0 {
            return Err(Error::config("eval.test_size", "must be >= 1"));
        }
        if let Some(&s) = self
            .subsample_sizes
            .iter()
            .find(|&&s| s == 0 || s > self.pool_size)
        {
            return Err(Error::config(
                "eval.subsample_sizes",
                format!("size {s} must lie in [1, pool_size = {}]", self.pool_size),
            ));
        }
        self.finetune.validate()
    }
}

/// One held-out task with its sampling pool and fixed test set.
#[derive(Clone, Debug)]
pub struct HeldOutTask {
    pub spec: TaskSpec,
    pub pool: RegressionDataset,
    pub test: RegressionDataset,
}

/// Draw the `m` held-out tasks of a run, cycling through the features.
pub fn make_eval_tasks(
    universe: &TaskUniverse,
    cfg: &EvalProtocolConfig,
    rng: &RngState,
) -> Result<Vec<HeldOutTask>> {
    cfg.validate()?;
    (0..cfg.num_tasks)
        .map(|j| {
            let task_rng = rng.derive_stream(&format!("eval-task-{j}"));
            let feature = j % universe.features.len();
            let spec = universe.sample_task(
                EVAL_TASK_ID_BASE + j,
                feature,
                &mut task_rng.derive_stream("spec"),
            )?;
            let pool = universe.sample_dataset(
                &spec,
                cfg.pool_size,
                &mut task_rng.derive_stream("pool"),
                format!("eval-task-{j}/pool"),
            )?;
            let test = universe.sample_dataset(
                &spec,
                cfg.test_size,
                &mut task_rng.derive_stream("test"),
                format!("eval-task-{j}/test"),
            )?;
            Ok(HeldOutTask { spec, pool, test })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCell {
    pub task: usize,
    pub size: usize,
    pub repeat: usize,
    pub performance: f64,
    pub epochs: usize,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub p_rep: f64,
    /// `(size, mean performance)` in configured order.
    pub per_size: Vec<(usize, f64)>,
    pub cells: Vec<FinetuneCell>,
}

/// Mean post-finetune performance over held-out tasks, subsample sizes and
/// repeats. The cell streams depend only on `rng` and the cell coordinates,
/// so two models evaluated with the same `rng` see identical subsamples.
pub fn eval_rep(
    model: &Model,
    tasks: &[HeldOutTask],
    cfg: &EvalProtocolConfig,
    rng: &RngState,
) -> Result<RepResult> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::config("eval.num_tasks", "no held-out tasks"));
    }
    let mut coords = Vec::new();
    for task in 0..tasks.len() {
        for &size in &cfg.subsample_sizes {
            for repeat in 0..cfg.repeats {
                coords.push((task, size, repeat));
            }
        }
    }
    let cells = coords
        .par_iter()
        .map(|&(task, size, repeat)| {
            let held = &tasks[task];
            if size > held.pool.len() {
                return Err(Error::config(
                    "eval.subsample_sizes",
                    format!("size {size} exceeds pool of {}", held.pool.len()),
                ));
            }
            let cell_rng = rng.derive_stream(&format!("cell-{task}-{size}-{repeat}"));
            let idx = cell_rng
                .derive_stream("subsample")
                .choose_indices(held.pool.len(), size);
            let train = held.pool.subset(&idx);
            let (tuned, trace) =
                finetune(model, &train, &cfg.finetune, &cell_rng.derive_stream("finetune"))?;
            let (performance, clamped) = performance(&tuned, &held.test)?;
            Ok(FinetuneCell {
                task,
                size,
                repeat,
                performance,
                epochs: trace.epochs,
                clamped,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let per_size: Vec<(usize, f64)> = cfg
        .subsample_sizes
        .iter()
        .map(|&s| {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.size == s)
                .map(|c| c.performance)
                .collect();
            (s, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    let p_rep = per_size.iter().map(|(_, v)| v).sum::<f64>() / per_size.len() as f64;
    Ok(RepResult {
        p_rep,
        per_size,
        cells,
    })
}

/// Fixed test set of a training task; the same for every evaluation point.
pub fn cl_test_set(
    universe: &TaskUniverse,
    task: &TaskSpec,
    size: usize,
    rng: &RngState,
) -> Result<RegressionDataset> {
    universe.sample_dataset(
        task,
        size,
        &mut rng.derive_stream(&format!("cl-test-{}", task.task_id)),
        format!("cl-test-{}", task.task_id),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClResult {
    pub p_cl: f64,
    /// Performance on each seen task, in order.
    pub per_task: Vec<f64>,
}

/// Mean performance over the test sets of seen tasks, without finetuning.
/// Each task is answered by its own head, and adapter models use the gates
/// remembered for it, when present.
pub fn eval_cl(
    model: &Model,
    test_sets: &[RegressionDataset],
    gate_memory: &BTreeMap<usize, Vec<GateWeights>>,
) -> Result<ClResult> {
    if test_sets.is_empty() {
        return Err(Error::config("eval.seen_tasks", "need at least one seen task"));
    }
    let per_task = test_sets
        .iter()
        .map(|test| {
            let mut own = model.with_task(test.task_id).unwrap_or_else(|| model.clone());
            if let Some(gates) = gate_memory.get(&test.task_id) {
                if own.gates_trainable() {
                    own.set_gate_weights(gates);
                }
            }
            Ok(performance(&own, test)?.0)
        })
        .collect::<Result<Vec<f64>>>()?;
    let p_cl = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(ClResult { p_cl, per_task })
}

pub const TOP_UNITS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitSimilarity {
    /// `s` for every first-layer unit.
    pub per_unit: Vec<f64>,
    /// Indices of the [`TOP_UNITS`] most similar units, best first.
    pub top: Vec<usize>,
    /// Units with zero weight norm (reported as `s = 0`).
    pub zero_norm: Vec<usize>,
}

impl UnitSimilarity {
    pub fn max(&self) -> f64 {
        self.top.first().map_or(0.0, |&i| self.per_unit[i])
    }

    pub fn top_values(&self) -> Vec<f64> {
        self.top.iter().map(|&i| self.per_unit[i]).collect()
    }
}

/// Cosine between each first-layer unit and its projection onto the
/// rowspace of `w_gt`, i.e. `|P w| / |w|`.
pub fn unit_similarity(model: &Model, w_gt: &Matrix) -> Result<UnitSimilarity> {
    let first = &model.layers[0].w;
    if first.ncols() != w_gt.ncols() {
        return Err(Error::Dimension(format!(
            "first layer takes {} inputs, feature has {}",
            first.ncols(),
            w_gt.ncols()
        )));
    }
    let proj = RowspaceProjector::new(w_gt.view())?;
    let mut zero_norm = Vec::new();
    let per_unit: Vec<f64> = first
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let norm = w.dot(&w).sqrt();
            if norm == 0.0 {
                zero_norm.push(i);
                return 0.0;
            }
            let p = proj.project(w);
            let s = p.dot(&p).sqrt() / norm;
            if s > 1.0 { 1.0 } else { s }
        })
        .collect();
    let top = top_indices(&per_unit, TOP_UNITS);
    Ok(UnitSimilarity {
        per_unit,
        top,
        zero_norm,
    })
}

/// Indices of the `k` largest values, largest first, ties by index.
pub fn top_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// What activations are compared against.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    /// A ground-truth feature map, compared with every layer.
    Feature(&'a SharedFeature),
    /// Another model, compared layer by layer.
    Model(&'a Model),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub value: f64,
    /// Reference dimensions skipped because they were constant on the probe.
    pub constant_reference_dims: usize,
    /// Units that were constant on the probe and contributed nothing.
    pub constant_units: usize,
}

/// Mean over reference dimensions of the largest |Pearson| with any unit.
fn max_abs_correlation(reference: ArrayView2<'_, f64>, acts: ArrayView2<'_, f64>) -> LayerCorrelation {
    let constant_units = acts
        .axis_iter(Axis(1))
        .filter(|c| c.iter().all(|&v| v == c[0]))
        .count();
    let mut constant_reference_dims = 0;
    let mut total = 0.0;
    let mut used = 0;
    for r in reference.axis_iter(Axis(1)) {
        if r.iter().all(|&v| v == r[0]) {
            constant_reference_dims += 1;
            continue;
        }
        let best = acts
            .axis_iter(Axis(1))
            .filter_map(|a| pearson(r, a))
            .map(f64::abs)
            .fold(0.0, f64::max);
        total += best;
        used += 1;
    }
    LayerCorrelation {
        value: if used == 0 { 0.0 } else { total / used as f64 },
        constant_reference_dims,
        constant_units,
    }
}

/// Per hidden layer activation correlation on `probe` inputs.
pub fn activation_correlation(
    model: &Model,
    reference: Reference<'_>,
    probe: ArrayView2<'_, f64>,
) -> Result<Vec<LayerCorrelation>> {
    if probe.nrows() == 0 {
        return Err(Error::config("eval.probe", "probe set is empty"));
    }
    let acts = model.forward(probe)?;
    match reference {
        Reference::Feature(feature) => {
            let h = feature.apply_batch(probe);
            Ok((0..model.num_hidden())
                .map(|i| max_abs_correlation(h.view(), acts.hidden(i).view()))
                .collect())
        }
        Reference::Model(other) => {
            if other.widths() != model.widths() {
                return Err(Error::Shape("reference model has different widths".into()));
            }
            let ref_acts = other.forward(probe)?;
            Ok((0..model.num_hidden())
                .map(|i| max_abs_correlation(ref_acts.hidden(i).view(), acts.hidden(i).view()))
                .collect())
        }
    }
}

/// Pearson correlation of two tasks' concatenated gate weights. The flag is
/// set (and 0 returned) when either vector is constant.
pub fn gate_correlation(a: &[GateWeights], b: &[GateWeights]) -> Result<(f64, bool)> {
    let flat = |g: &[GateWeights]| -> Vec<f64> {
        g.iter().flat_map(|w| w.as_slice().iter().copied()).collect()
    };
    let (fa, fb) = (flat(a), flat(b));
    if fa.len() != fb.len() {
        return Err(Error::Shape(format!(
            "gate vectors of length {} and {}",
            fa.len(),
            fb.len()
        )));
    }
    let (va, vb) = (ArrayView1::from(&fa), ArrayView1::from(&fb));
    Ok(match pearson(va, vb) {
        Some(r) => (r, false),
        None => (0.0, true),
    })
}
