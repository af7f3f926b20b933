//! Deterministic grid sweeps: every cell owns a seed derived from the base
//! seed and its index, so results do not depend on scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::child_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<f64>,
}

impl SweepAxis {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self { name: name.into(), values }
    }

    /// `n` evenly spaced points on `[lo, hi]`.
    pub fn linspace(name: impl Into<String>, lo: f64, hi: f64, n: usize) -> Self {
        let values = match n {
            0 => vec![],
            1 => vec![lo],
            _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
        };
        Self::new(name, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub axes: Vec<SweepAxis>,
    pub base_seed: u64,
}

/// One grid point. `coords[k]` is the value on axis `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub coords: Vec<f64>,
    pub seed: u64,
}

impl SweepCell {
    pub fn coord(&self, grid: &SweepGrid, axis: &str) -> Option<f64> {
        grid.axes.iter().position(|a| a.name == axis).map(|k| self.coords[k])
    }
}

impl SweepGrid {
    pub fn new(axes: Vec<SweepAxis>, base_seed: u64) -> Self {
        Self { axes, base_seed }
    }

    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            return 0;
        }
        self.axes.iter().map(|a| a.values.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in row-major order (last axis fastest).
    pub fn cells(&self) -> Vec<SweepCell> {
        (0..self.len())
            .map(|index| {
                let mut rem = index;
                let mut coords = vec![0.0; self.axes.len()];
                for (k, axis) in self.axes.iter().enumerate().rev() {
                    coords[k] = axis.values[rem % axis.values.len()];
                    rem /= axis.values.len();
                }
                SweepCell {
                    index,
                    coords,
                    seed: child_seed(self.base_seed, index as u64),
                }
            })
            .collect()
    }
}

/// Outcome of one cell; failures are kept as messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult<T> {
    pub cell: SweepCell,
    pub outcome: std::result::Result<T, String>,
}

/// Runs `cell_fn` on every cell with at most `parallelism` worker threads.
/// Results come back in cell order whatever the scheduling.
pub fn run_sweep<T, F>(grid: &SweepGrid, parallelism: usize, cell_fn: F) -> Result<Vec<CellResult<T>>>
where
    T: Send,
    F: Fn(&SweepCell) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if parallelism == 0 {
        return Err(invalid("parallelism must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    let cells = grid.cells();
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .map(|cell| {
                let outcome = cell_fn(&cell).map_err(|e| e.to_string());
                CellResult { cell, outcome }
            })
            .collect()
    }))
}
