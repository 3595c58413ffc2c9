//! The synthetic task distribution.
//!
//! A task is a regression problem `y = g(h(x))` on inputs drawn from a random
//! low-dimensional linear manifold of `R^d`. The low-level feature `h` is
//! chosen from a small bank shared by the whole universe; `g` is a random
//! Laplace-kernel interpolant over `p` anchors in feature space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sample_semi_orthogonal, Matrix, Vector};
use crate::rng::{Dist, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `h(x) = W x`
    Linear,
    /// `h(x) = W_b relu(W_a x + b_a) + b_b`
    Rectifier2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    /// Ambient input dimension.
    pub d: usize,
    /// Manifold dimension.
    pub d_prime: usize,
    /// Feature dimension.
    pub d_feature: usize,
    /// Anchor count of the kernel interpolant.
    pub anchors: usize,
    /// Laplace kernel width.
    pub sigma: f64,
    pub num_features: usize,
    pub feature_kind: FeatureKind,
    /// Hidden width of rectifier features; defaults to `10 * d_feature`.
    pub rectifier_hidden: Option<usize>,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            d: 100,
            d_prime: 50,
            d_feature: 2,
            anchors: 100,
            sigma: 2.5,
            num_features: 2,
            feature_kind: FeatureKind::Linear,
            rectifier_hidden: None,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_prime", self.d_prime),
            ("d_feature", self.d_feature),
            ("anchors", self.anchors),
            ("num_features", self.num_features),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("universe.{field}"), "must be >= 1"));
            }
        }
        if self.d_prime >= self.d {
            return Err(Error::config(
                "universe.d_prime",
                format!("manifold dimension {} must be < d = {}", self.d_prime, self.d),
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("universe.sigma", "must be finite and > 0"));
        }
        if self.rectifier_hidden == Some(0) {
            return Err(Error::config("universe.rectifier_hidden", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SharedFeature {
    Linear {
        w: Matrix,
    },
    Rectifier2 {
        w_a: Matrix,
        b_a: Vector,
        w_b: Matrix,
        b_b: Vector,
    },
}

impl SharedFeature {
    /// Feature outputs for a batch of inputs (one per row).
    pub fn apply_batch(&self, x: ArrayView2<'_, f64>) -> Matrix {
        match self {
            SharedFeature::Linear { w } => x.dot(&w.t()),
            SharedFeature::Rectifier2 { w_a, b_a, w_b, b_b } => {
                let mut hidden = x.dot(&w_a.t()) + b_a;
                hidden.mapv_inplace(|v| v.max(0.0));
                hidden.dot(&w_b.t()) + b_b
            }
        }
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>) -> Vector {
        self.apply_batch(x.insert_axis(Axis(0))).row(0).to_owned()
    }

    /// Ground-truth weights for linear features.
    pub fn linear_weights(&self) -> Option<&Matrix> {
        match self {
            SharedFeature::Linear { w } => Some(w),
            SharedFeature::Rectifier2 { .. } => None,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            SharedFeature::Linear { w } => w.nrows(),
            SharedFeature::Rectifier2 { w_b, .. } => w_b.nrows(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskUniverse {
    pub config: UniverseConfig,
    pub features: Vec<SharedFeature>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// `d x d_prime` semi-orthogonal embedding of manifold coordinates.
    pub manifold: Matrix,
    pub feature_index: usize,
    /// One anchor per row, in feature space.
    pub anchors: Matrix,
    /// Interpolation coefficients in {-1, +1}.
    pub alphas: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub inputs: Matrix,
    pub targets: Vector,
    pub task_id: usize,
    /// Stream label the samples were drawn from.
    pub provenance: String,
}

impl RegressionDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> RegressionDataset {
        RegressionDataset {
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.select(Axis(0), idx),
            task_id: self.task_id,
            provenance: format!("{}[subset:{}]", self.provenance, idx.len()),
        }
    }
}

/// Feature-repetition pattern of a task sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// Each feature repeated `k` times before moving to the next.
    Rep { k: usize },
    /// `(h_1, ..., h_|H|)` repeated.
    RoundRobin,
    /// Cycle through an explicit list of feature indices.
    Explicit { indices: Vec<usize> },
}

impl Pattern {
    pub fn feature_indices(&self, num_features: usize, len: usize) -> Result<Vec<usize>> {
        if num_features == 0 {
            return Err(Error::config("sequence.pattern", "feature bank is empty"));
        }
        match self {
            Pattern::Rep { k } => {
                if *k == 0 {
                    return Err(Error::config("sequence.pattern.k", "must be >= 1"));
                }
                Ok((0..len).map(|i| (i / k) % num_features).collect())
            }
            Pattern::RoundRobin => Ok((0..len).map(|i| i % num_features).collect()),
            Pattern::Explicit { indices } => {
                if indices.is_empty() {
                    return Err(Error::config("sequence.pattern.indices", "must be non-empty"));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= num_features) {
                    return Err(Error::config(
                        "sequence.pattern.indices",
                        format!("feature {bad} does not exist (bank has {num_features})"),
                    ));
                }
                Ok((0..len).map(|i| indices[i % indices.len()]).collect())
            }
        }
    }
}

/// Laplace kernel `exp(-|u - v|_2 / sigma)`.
pub fn laplace_kernel(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, sigma: f64) -> f64 {
    let dist = u
        .iter()
        .zip(v.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    (-dist / sigma).exp()
}

pub fn make_universe(cfg: &UniverseConfig, rng: &RngState) -> Result<TaskUniverse> {
    cfg.validate()?;
    let mut features = Vec::with_capacity(cfg.num_features);
    for i in 0..cfg.num_features {
        let mut rng = rng.derive_stream(&format!("feature-{i}"));
        let std_normal = Dist::Gaussian { mean: 0.0, std: 1.0 };
        let feature = match cfg.feature_kind {
            FeatureKind::Linear => SharedFeature::Linear {
                w: rng.draw(std_normal, cfg.d_feature, cfg.d)?,
            },
            FeatureKind::Rectifier2 => {
                let m = cfg.rectifier_hidden.unwrap_or(10 * cfg.d_feature);
                let w_a = rng.draw(std_normal, m, cfg.d)?;
                let b_a = rng.draw(std_normal, m, 1)?.column(0).to_owned();
                let w_b = rng.draw(
                    Dist::Gaussian {
                        mean: 0.0,
                        std: 1.0 / (m as f64).sqrt(),
                    },
                    cfg.d_feature,
                    m,
                )?;
                SharedFeature::Rectifier2 {
                    w_a,
                    b_a,
                    w_b,
                    b_b: Array1::zeros(cfg.d_feature),
                }
            }
        };
        features.push(feature);
    }
    Ok(TaskUniverse {
        config: cfg.clone(),
        features,
    })
}

impl TaskUniverse {
    pub fn feature(&self, index: usize) -> Result<&SharedFeature> {
        self.features.get(index).ok_or(Error::Lookup {
            index,
            len: self.features.len(),
        })
    }

    pub fn sample_task(
        &self,
        task_id: usize,
        feature_index: usize,
        rng: &mut RngState,
    ) -> Result<TaskSpec> {
        self.feature(feature_index)?;
        let cfg = &self.config;
        let manifold = sample_semi_orthogonal(cfg.d, cfg.d_prime, rng)?;
        let anchors = rng.draw(
            Dist::Uniform {
                low: -0.5,
                high: 0.5,
            },
            cfg.anchors,
            cfg.d_feature,
        )?;
        let alphas = rng.draw(Dist::Rademacher, cfg.anchors, 1)?.column(0).to_owned();
        Ok(TaskSpec {
            task_id,
            manifold,
            feature_index,
            anchors,
            alphas,
        })
    }

    /// `f(x) = sum_i alpha_i K(h(x), anchor_i)`.
    pub fn eval_f(&self, task: &TaskSpec, x: ArrayView1<'_, f64>) -> f64 {
        self.eval_f_batch(task, x.insert_axis(Axis(0)))[0]
    }

    pub fn eval_f_batch(&self, task: &TaskSpec, x: ArrayView2<'_, f64>) -> Vector {
        let feats = self.features[task.feature_index].apply_batch(x);
        let sigma = self.config.sigma;
        feats
            .rows()
            .into_iter()
            .map(|h| {
                task.anchors
                    .rows()
                    .into_iter()
                    .zip(task.alphas.iter())
                    .map(|(a, alpha)| alpha * laplace_kernel(h, a, sigma))
                    .sum()
            })
            .collect()
    }

    /// `n` points drawn uniformly on the task's manifold, with exact targets.
    pub fn sample_dataset(
        &self,
        task: &TaskSpec,
        n: usize,
        rng: &mut RngState,
        provenance: impl Into<String>,
    ) -> Result<RegressionDataset> {
        if n == 0 {
            return Err(Error::config("n", "dataset size must be >= 1"));
        }
        let coords = rng.draw(
            Dist::Uniform {
                low: -0.5,
                high: 0.5,
            },
            n,
            self.config.d_prime,
        )?;
        let inputs = coords.dot(&task.manifold.t());
        let targets = self.eval_f_batch(task, inputs.view());
        Ok(RegressionDataset {
            inputs,
            targets,
            task_id: task.task_id,
            provenance: provenance.into(),
        })
    }

    /// Task `i` of the sequence is drawn from the child stream `task-{i}`.
    pub fn make_sequence(
        &self,
        pattern: &Pattern,
        len: usize,
        rng: &RngState,
    ) -> Result<Vec<TaskSpec>> {
        if len == 0 {
            return Err(Error::config("sequence.length", "must be >= 1"));
        }
        pattern
            .feature_indices(self.features.len(), len)?
            .into_iter()
            .enumerate()
            .map(|(i, feature)| {
                let mut task_rng = rng.derive_stream(&format!("task-{i}"));
                self.sample_task(i, feature, &mut task_rng)
            })
            .collect()
    }
}

/// Distance of `x` from the column space of `manifold`: `|(I - M M^T) x|`.
pub fn off_manifold_distance(manifold: &Matrix, x: ArrayView1<'_, f64>) -> f64 {
    let coords = manifold.t().dot(&x);
    let back = manifold.dot(&coords);
    let r: Array1<f64> = &x - &back;
    r.dot(&r).sqrt()
}

/// Convenience used by tests and diagnostics.
pub fn stack_rows(rows: &[Vector]) -> Matrix {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(src);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_universe(seed: u64, anchors: usize) -> TaskUniverse {
        let cfg = UniverseConfig {
            d: 12,
            d_prime: 5,
            anchors,
            ..Default::default()
        };
        make_universe(&cfg, &RngState::new(seed)).unwrap()
    }

    /// Direct double loop over anchors and feature coordinates.
    fn brute_force_f(u: &TaskUniverse, t: &TaskSpec, x: &[f64]) -> f64 {
        let w = u.features[t.feature_index].linear_weights().unwrap();
        let h: Vec<f64> = (0..w.nrows())
            .map(|r| (0..x.len()).map(|c| w[[r, c]] * x[c]).sum())
            .collect();
        let mut total = 0.0;
        for i in 0..t.anchors.nrows() {
            let mut sq = 0.0;
            for k in 0..h.len() {
                sq += (h[k] - t.anchors[[i, k]]).powi(2);
            }
            total += t.alphas[i] * (-sq.sqrt() / u.config.sigma).exp();
        }
        total
    }

    #[test]
    fn default_universe_shapes() {
        let u = make_universe(&UniverseConfig::default(), &RngState::new(0)).unwrap();
        assert_eq!(u.features.len(), 2);
        for f in &u.features {
            assert_eq!(f.linear_weights().unwrap().dim(), (2, 100));
        }
        let t = u.sample_task(0, 0, &mut RngState::new(1)).unwrap();
        assert_eq!(t.anchors.dim(), (100, 2));
        assert!(t.anchors.iter().all(|v| (-0.5..=0.5).contains(v)));
        assert!(t.alphas.iter().all(|a| a.abs() == 1.0));
        let gram = t.manifold.t().dot(&t.manifold);
        let err = (gram - Array2::<f64>::eye(50))
            .iter()
            .fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(err < 1e-10);
    }

    #[test]
    fn three_feature_and_rectifier_banks() {
        let cfg = UniverseConfig {
            num_features: 3,
            ..Default::default()
        };
        let u = make_universe(&cfg, &RngState::new(0)).unwrap();
        assert_eq!(u.features.len(), 3);

        let cfg = UniverseConfig {
            feature_kind: FeatureKind::Rectifier2,
            ..Default::default()
        };
        let u = make_universe(&cfg, &RngState::new(0)).unwrap();
        match &u.features[0] {
            SharedFeature::Rectifier2 { w_a, w_b, .. } => {
                assert_eq!(w_a.dim(), (20, 100));
                assert_eq!(w_b.dim(), (2, 20));
            }
            other => panic!("unexpected {other:?}"),
        }
        let t = u.sample_task(0, 1, &mut RngState::new(3)).unwrap();
        let data = u.sample_dataset(&t, 50, &mut RngState::new(4), "t").unwrap();
        assert!(data.targets.iter().all(|y| y.is_finite()));
    }

    #[test]
    fn config_errors() {
        let cfg = UniverseConfig {
            d_prime: 100,
            ..Default::default()
        };
        assert!(matches!(
            make_universe(&cfg, &RngState::new(0)),
            Err(Error::Config { .. })
        ));
        let u = small_universe(0, 3);
        assert!(matches!(
            u.sample_task(0, 5, &mut RngState::new(0)),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn tasks_share_features_but_not_manifolds() {
        let u = small_universe(2, 4);
        let a = u.sample_task(0, 1, &mut RngState::new(10)).unwrap();
        let b = u.sample_task(1, 1, &mut RngState::new(11)).unwrap();
        assert_eq!(a.feature_index, b.feature_index);
        assert_ne!(a.manifold, b.manifold);
        // Both evaluate through the single bank entry.
        assert!(std::ptr::eq(u.feature(a.feature_index).unwrap(), u.feature(b.feature_index).unwrap()));
    }

    #[test]
    fn single_anchor_kernel_peak() {
        let u = small_universe(3, 1);
        let mut t = u.sample_task(0, 0, &mut RngState::new(1)).unwrap();
        assert_eq!(t.anchors.nrows(), 1);
        // Choose x in the row space of W so that W x hits the anchor exactly.
        let w = u.features[0].linear_weights().unwrap();
        let target = t.anchors.row(0).to_owned();
        let gram = w.dot(&w.t());
        let det = gram[[0, 0]] * gram[[1, 1]] - gram[[0, 1]] * gram[[1, 0]];
        let inv = ndarray::array![
            [gram[[1, 1]] / det, -gram[[0, 1]] / det],
            [-gram[[1, 0]] / det, gram[[0, 0]] / det]
        ];
        let x = w.t().dot(&inv.dot(&target));
        t.alphas[0] = 1.0;
        assert!((u.eval_f(&t, x.view()) - 1.0).abs() < 1e-12);
        t.alphas[0] = -1.0;
        assert!((u.eval_f(&t, x.view()) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn eval_f_matches_brute_force() {
        let u = small_universe(4, 2);
        let mut rng = RngState::new(5);
        let t = u.sample_task(0, 0, &mut rng).unwrap();
        let xs = rng
            .draw(Dist::Gaussian { mean: 0.0, std: 1.0 }, 100, 12)
            .unwrap();
        for x in xs.rows() {
            let fast = u.eval_f(&t, x);
            let slow = brute_force_f(&u, &t, x.as_slice().unwrap());
            assert!((fast - slow).abs() < 1e-12);
        }
    }

    #[test]
    fn datasets_live_on_the_manifold() {
        let u = make_universe(&UniverseConfig::default(), &RngState::new(0)).unwrap();
        let t = u.sample_task(0, 0, &mut RngState::new(1)).unwrap();
        let data = u.sample_dataset(&t, 2000, &mut RngState::new(2), "train").unwrap();
        assert_eq!(data.len(), 2000);
        for (x, y) in data.inputs.rows().into_iter().zip(data.targets.iter()) {
            assert!(off_manifold_distance(&t.manifold, x) < 1e-8);
            assert_eq!(*y, u.eval_f(&t, x));
        }
        let one = u.sample_dataset(&t, 1, &mut RngState::new(3), "one").unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn targets_bounded_by_anchor_count() {
        let u = small_universe(6, 7);
        let t = u.sample_task(0, 1, &mut RngState::new(1)).unwrap();
        let data = u.sample_dataset(&t, 10_000, &mut RngState::new(2), "b").unwrap();
        assert!(data.targets.iter().all(|y| y.abs() <= 7.0));
    }

    #[test]
    fn kernel_symmetry() {
        let u = small_universe(8, 10);
        let t = u.sample_task(0, 0, &mut RngState::new(1)).unwrap();
        for a in t.anchors.rows() {
            assert_eq!(laplace_kernel(a, a, 2.5), 1.0);
            for b in t.anchors.rows() {
                assert_eq!(laplace_kernel(a, b, 2.5), laplace_kernel(b, a, 2.5));
            }
        }
    }

    #[test]
    fn repetition_patterns() {
        let rep = |k| Pattern::Rep { k }.feature_indices(2, 6).unwrap();
        assert_eq!(Pattern::Rep { k: 1 }.feature_indices(2, 4).unwrap(), vec![0, 1, 0, 1]);
        assert_eq!(rep(2), vec![0, 0, 1, 1, 0, 0]);
        assert_eq!(rep(3), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(
            Pattern::RoundRobin.feature_indices(3, 6).unwrap(),
            vec![0, 1, 2, 0, 1, 2]
        );
        assert!(Pattern::Explicit { indices: vec![0, 3] }
            .feature_indices(2, 4)
            .is_err());
    }

    #[test]
    fn sequence_is_deterministic() {
        let u = small_universe(9, 3);
        let rng = RngState::new(100);
        let a = u.make_sequence(&Pattern::Rep { k: 1 }, 4, &rng).unwrap();
        let b = u.make_sequence(&Pattern::Rep { k: 1 }, 4, &rng).unwrap();
        assert_eq!(a, b);
        let idx: Vec<_> = a.iter().map(|t| t.feature_index).collect();
        assert_eq!(idx, vec![0, 1, 0, 1]);
    }

    #[test]
    fn universe_json_round_trip_is_exact() {
        let u = small_universe(10, 3);
        let seq = u.make_sequence(&Pattern::RoundRobin, 3, &RngState::new(1)).unwrap();
        let text = serde_json::to_string(&(&u, &seq)).unwrap();
        let (u2, seq2): (TaskUniverse, Vec<TaskSpec>) = serde_json::from_str(&text).unwrap();
        assert_eq!(u, u2);
        assert_eq!(seq, seq2);
    }
}
