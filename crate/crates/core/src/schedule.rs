//! Task execution order for the simulated kernels.
//!
//! Tasks are pure over immutable inputs and each returns its own output
//! region, so results are reassembled in task-index order regardless of the
//! order they ran in.

use rayon::prelude::*;

use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TaskOrder {
    #[default]
    Ascending,
    Descending,
    /// Rayon work stealing.
    Parallel,
}

pub(crate) fn run_tasks<T, F>(count: usize, order: TaskOrder, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match order {
        TaskOrder::Ascending => (0..count).map(f).collect(),
        TaskOrder::Descending => {
            let mut slots: Vec<Option<T>> = (0..count).map(|_| None).collect();
            for i in (0..count).rev() {
                slots[i] = Some(f(i)?);
            }
            Ok(slots.into_iter().map(|s| s.expect("every task ran")).collect())
        }
        TaskOrder::Parallel => (0..count).into_par_iter().map(f).collect(),
    }
}

/// Per-head contiguous copies of Q, K, V.
pub(crate) struct HeadMatrices {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl HeadMatrices {
    pub fn new(
        q: &crate::tensor::HeadedTensor,
        k: &crate::tensor::HeadedTensor,
        v: &crate::tensor::HeadedTensor,
    ) -> Self {
        Self {
            q: (0..q.heads()).map(|j| q.head_matrix(j)).collect(),
            k: (0..k.heads()).map(|j| k.head_matrix(j)).collect(),
            v: (0..v.heads()).map(|j| v.head_matrix(j)).collect(),
        }
    }
}
