//! Reservoir-sampled replay memory.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};
use crate::rng::RngState;
use crate::tasks::RegressionDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayItem {
    pub input: Vector,
    pub target: f64,
    pub task_id: usize,
}

/// Uniform sample over every example streamed so far, capped at `capacity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub items: Vec<ReplayItem>,
    pub seen: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stream every example of `data` through the reservoir.
    pub fn update(&mut self, data: &RegressionDataset, rng: &mut RngState) {
        for (x, &y) in data.inputs.rows().into_iter().zip(data.targets.iter()) {
            self.seen += 1;
            let item = || ReplayItem {
                input: x.to_owned(),
                target: y,
                task_id: data.task_id,
            };
            if self.items.len() < self.capacity {
                self.items.push(item());
            } else if self.capacity > 0 {
                let j = rng.below(self.seen);
                if j < self.capacity {
                    self.items[j] = item();
                }
            }
        }
    }

    /// `k` distinct items (or all, if fewer are stored).
    pub fn sample(&self, k: usize, rng: &mut RngState) -> Vec<&ReplayItem> {
        rng.choose_indices(self.items.len(), k)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }

    /// The whole buffer as one dataset, with the task of every row. The
    /// dataset carries the first item's task id.
    pub fn to_pool(&self) -> Option<(RegressionDataset, Vec<usize>)> {
        let first = self.items.first()?;
        let d = first.input.len();
        let mut inputs: Matrix = Array2::zeros((self.items.len(), d));
        let mut targets: Vector = Array1::zeros(self.items.len());
        for (i, item) in self.items.iter().enumerate() {
            inputs.row_mut(i).assign(&item.input);
            targets[i] = item.target;
        }
        let data = RegressionDataset {
            inputs,
            targets,
            task_id: first.task_id,
            provenance: "replay-buffer".into(),
        };
        Some((data, self.items.iter().map(|i| i.task_id).collect()))
    }
}
