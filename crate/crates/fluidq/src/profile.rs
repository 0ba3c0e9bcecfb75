//! Rate and initial-condition profiles on the unit interval.

use serde::{Deserialize, Serialize};

/// A scalar function on `[0, 1]` used for arrival rates, service rates and
/// initial queue-mass profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Constant { value: f64 },
    /// `intercept + slope * u`.
    Affine { intercept: f64, slope: f64 },
    /// Piecewise constant on the uniform partition with `values.len()` cells.
    Table { values: Vec<f64> },
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Profile::Constant { value }
    }

    /// Evaluate at `u`, clamped into `[0, 1]`.
    ///
    /// Tables use the cell convention of the unit partition: the first cell is
    /// `[0, 1/m]`, later cells are half-open `((i-1)/m, i/m]`.
    pub fn eval(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Profile::Constant { value } => *value,
            Profile::Affine { intercept, slope } => intercept + slope * u,
            Profile::Table { values } => {
                let m = values.len();
                if m == 0 {
                    return 0.0;
                }
                values[unit_cell_index(u, m)]
            }
        }
    }

    /// Samples at the midpoints of the uniform `m`-cell partition.
    pub fn sample_midpoints(&self, m: usize) -> Vec<f64> {
        (0..m)
            .map(|i| self.eval((i as f64 + 0.5) / m as f64))
            .collect()
    }

    /// Samples at the right endpoints `i/m`, `i = 1..=m`.
    pub fn sample_right_endpoints(&self, m: usize) -> Vec<f64> {
        (1..=m).map(|i| self.eval(i as f64 / m as f64)).collect()
    }

    pub fn min_on_grid(&self, m: usize) -> f64 {
        self.sample_midpoints(m)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Index of the cell of the uniform `m`-partition containing `u`.
///
/// Cell `0` is `[0, 1/m]`; cell `i` is `((i)/m, (i+1)/m]` for `i >= 1`.
pub fn unit_cell_index(u: f64, m: usize) -> usize {
    debug_assert!(m > 0);
    let i = (u * m as f64).ceil() as isize;
    (i.max(1) as usize).min(m) - 1
}
