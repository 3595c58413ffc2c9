//! First-order optimizers over the flat parameter views of a [`Model`].

use serde::{Deserialize, Serialize};

use crate::network::{Gradients, Model, ParamKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Which parameters a step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFilter {
    All,
    GatesOnly,
}

impl ParamFilter {
    fn admits(self, kind: ParamKind) -> bool {
        match self {
            ParamFilter::All => true,
            ParamFilter::GatesOnly => matches!(kind, ParamKind::Gate(_)),
        }
    }
}

#[derive(Clone, Debug)]
struct AdamSlot {
    kind: ParamKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: Vec<AdamSlot>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    /// One update. `lr_for` gives the learning rate of each parameter group.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &Gradients,
        filter: ParamFilter,
        lr_for: impl Fn(ParamKind) -> f64,
    ) {
        let grad_slices = grads.slices();
        for (kind, params) in model.param_slices_mut() {
            if !filter.admits(kind) {
                continue;
            }
            let Some((_, grad)) = grad_slices.iter().find(|(k, _)| *k == kind) else {
                continue;
            };
            let lr = lr_for(kind);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in params.iter_mut().zip(grad.iter()) {
                        *p -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let idx = match self.slots.iter().position(|s| s.kind == kind) {
                        Some(i) => i,
                        None => {
                            self.slots.push(AdamSlot {
                                kind,
                                m: vec![0.0; params.len()],
                                v: vec![0.0; params.len()],
                                t: 0,
                            });
                            self.slots.len() - 1
                        }
                    };
                    let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                    let slot = &mut self.slots[idx];
                    slot.t += 1;
                    let c1 = 1.0 - b1.powi(slot.t as i32);
                    let c2 = 1.0 - b2.powi(slot.t as i32);
                    for ((p, g), (m, v)) in params
                        .iter_mut()
                        .zip(grad.iter())
                        .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                    {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::AdapterConfig;
    use crate::rng::RngState;

    fn quadratic_grads(model: &Model) -> Gradients {
        // d/dp of sum p^2 / 2 is p itself.
        let mut g = Gradients::zeros_like(model);
        for (gl, l) in g.layers.iter_mut().zip(&model.layers) {
            gl.w.assign(&l.w);
            gl.b.assign(&l.b);
        }
        g
    }

    #[test]
    fn sgd_and_adam_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut m = Model::new(&[3, 4, 1], AdapterConfig::default(), &mut RngState::new(0)).unwrap();
            let norm = |m: &Model| m.layers.iter().map(|l| l.w.iter().map(|x| x * x).sum::<f64>()).sum::<f64>();
            let start = norm(&m);
            let mut opt = Optimizer::new(kind);
            for _ in 0..200 {
                let g = quadratic_grads(&m);
                opt.step(&mut m, &g, ParamFilter::All, |_| 0.05);
            }
            assert!(norm(&m) < 0.1 * start, "{kind:?}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut m = Model::new(&[2, 1], AdapterConfig::default(), &mut RngState::new(1)).unwrap();
        let before = m.layers[0].w.clone();
        let g = quadratic_grads(&m);
        Optimizer::new(OptimizerKind::Adam).step(&mut m, &g, ParamFilter::All, |_| 1e-3);
        for (a, b) in before.iter().zip(m.layers[0].w.iter()) {
            assert!(((a - b).abs() - 1e-3).abs() < 1e-6);
        }
    }
}
