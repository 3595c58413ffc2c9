//! Online EWC: a decayed running diagonal Fisher estimate and its quadratic
//! penalty.

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{GatePlan, LayerGrad, MlpLayer, Model};
use crate::tasks::RegressionDataset;

#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    /// Per-parameter Fisher estimate, shaped like the model's layers.
    pub fisher: Vec<LayerGrad>,
    /// Parameter snapshot at the last task boundary.
    pub anchor: Vec<MlpLayer>,
    pub decay: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcParams {
    pub coeff: f64,
    pub decay: f64,
}

/// Mean over `data` of squared per-example gradients of the squared error.
pub fn empirical_fisher(model: &Model, data: &RegressionDataset) -> Result<Vec<LayerGrad>> {
    let plan = model.gate_plan();
    let mut sums: Vec<LayerGrad> = model
        .layers
        .iter()
        .map(|l| LayerGrad {
            w: ndarray::Array2::zeros(l.w.dim()),
            b: ndarray::Array1::zeros(l.b.len()),
        })
        .collect();
    let n = data.len();
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let x = data.inputs.slice(s![start..end, ..]);
        let y = data.targets.slice(s![start..end]);
        let acts = model.forward_with(x, &plan)?;
        // Per-example loss (yhat - y)^2 has output gradient 2 (yhat - y).
        let d_out = (&acts.prediction().column(0) - &y)
            .mapv(|r| 2.0 * r)
            .insert_axis(Axis(1));
        let (_, deltas) = model.backprop(&acts, &plan, d_out, None)?;
        for (i, sum) in sums.iter_mut().enumerate() {
            let dz_sq = deltas[i].mapv(|v| v * v);
            let in_sq = acts.inputs[i].mapv(|v| v * v);
            let mut w_sq = dz_sq.t().dot(&in_sq);
            if let Some(GatePlan::Weight(g)) = plan.get(i) {
                w_sq *= &g.mapv(|v| v * v);
            }
            sum.w += &w_sq;
            sum.b += &dz_sq.sum_axis(Axis(0));
        }
        start = end;
    }
    let inv = 1.0 / n as f64;
    for s in &mut sums {
        s.w *= inv;
        s.b *= inv;
    }
    Ok(sums)
}

impl EwcState {
    /// `fisher <- decay * fisher + F(data)`, `anchor <- current parameters`.
    pub fn consolidate(
        state: Option<EwcState>,
        model: &Model,
        data: &RegressionDataset,
        decay: f64,
    ) -> Result<EwcState> {
        let fresh = empirical_fisher(model, data)?;
        let fisher = match state {
            Some(prev) => prev
                .fisher
                .into_iter()
                .zip(fresh)
                .map(|(old, new)| LayerGrad {
                    w: old.w * decay + new.w,
                    b: old.b * decay + new.b,
                })
                .collect(),
            None => fresh,
        };
        Ok(EwcState {
            fisher,
            anchor: model.layers.clone(),
            decay,
        })
    }

    /// `coeff * sum_i F_i (theta_i - anchor_i)^2` over the shared layers;
    /// output heads are per task and left free.
    pub fn penalty(&self, model: &Model, coeff: f64) -> f64 {
        let mut total = 0.0;
        let shared = model.layers.len() - 1;
        for ((f, a), l) in self.fisher.iter().zip(&self.anchor).zip(&model.layers).take(shared) {
            ndarray::Zip::from(&f.w)
                .and(&a.w)
                .and(&l.w)
                .for_each(|f, a, p| total += f * (p - a) * (p - a));
            ndarray::Zip::from(&f.b)
                .and(&a.b)
                .and(&l.b)
                .for_each(|f, a, p| total += f * (p - a) * (p - a));
        }
        coeff * total
    }

    pub fn add_penalty_grad(&self, model: &Model, coeff: f64, grads: &mut [LayerGrad]) {
        let shared = model.layers.len() - 1;
        for (((g, f), a), l) in grads
            .iter_mut()
            .zip(&self.fisher)
            .zip(&self.anchor)
            .zip(&model.layers)
            .take(shared)
        {
            ndarray::Zip::from(&mut g.w)
                .and(&f.w)
                .and(&a.w)
                .and(&l.w)
                .for_each(|g, f, a, p| *g += 2.0 * coeff * f * (p - a));
            ndarray::Zip::from(&mut g.b)
                .and(&f.b)
                .and(&a.b)
                .and(&l.b)
                .for_each(|g, f, a, p| *g += 2.0 * coeff * f * (p - a));
        }
    }
}
