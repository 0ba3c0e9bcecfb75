//! The deterministic fluid system driven by a kernel, the noise-free
//! intermediate system of a finite network, and the lifting and
//! coupling-error functionals connecting simulation, intermediate system and
//! fluid limit.
//!
//! The fluid queue field solves `Q = X + (1 - G^T) Y` with free process
//! `X(t) = q0 + [lambda - (1 - G^T) mu] t`, regulator `Y = diag(mu) I`, and
//! idle field `I` increasing only where the queue is empty. The intermediate
//! system is the same construction for a finite network with the transposed
//! routing matrix, and lifts blockwise onto the unit interval.

use thiserror::Error;

use crate::network::{NetworkError, NetworkSpec};
use crate::operators::{Kernel, KernelError};
use crate::path::{PathError, PathField, TimeGrid};
use crate::profile::Profile;
use crate::skorokhod::{reflect, solve_finite, FiniteSolution, SolveError, SolverConfig};

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("fluid spec invalid: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Ingredients of the fluid system.
#[derive(Debug, Clone)]
pub struct FluidSpec {
    pub kernel: Kernel,
    pub lambda: Profile,
    pub mu: Profile,
    pub q0: Profile,
}

impl FluidSpec {
    /// Check positivity of the rates on the grid and that the transposed
    /// kernel is a reflection operator.
    pub fn validate(&self, cells: usize) -> Result<(), FluidError> {
        if self.mu.min_on_grid(cells) <= 0.0 {
            return Err(FluidError::BadSpec(
                "service profile must be strictly positive".into(),
            ));
        }
        if self
            .lambda
            .sample_midpoints(cells)
            .iter()
            .any(|l| *l < 0.0)
        {
            return Err(FluidError::BadSpec(
                "arrival profile must be nonnegative".into(),
            ));
        }
        if self.q0.sample_midpoints(cells).iter().any(|q| *q < 0.0) {
            return Err(FluidError::BadSpec(
                "initial profile must be nonnegative".into(),
            ));
        }
        let verdict = self.kernel.transpose().reflection_class_check(1e-9);
        if !verdict.in_class_r {
            return Err(FluidError::BadSpec(format!(
                "transposed kernel is not a reflection operator: {}",
                verdict.describe()
            )));
        }
        Ok(())
    }
}

/// Solved fluid system on a grid.
#[derive(Debug, Clone)]
pub struct FluidSolution {
    /// Free process `q0 + [lambda - (1 - G^T) mu] t`.
    pub free: PathField,
    /// Reflected queue field.
    pub queue: PathField,
    /// Regulator `diag(mu) I`.
    pub regulator: PathField,
    /// Idle field, recovered as regulator over service rate per cell.
    pub idle: PathField,
    pub iterations: usize,
    pub fixed_point_residual: f64,
    pub converged: bool,
    pub complementarity: Vec<f64>,
}

/// The linear-drift free process on `cells` space cells.
pub fn build_free_process(
    spec: &FluidSpec,
    cells: usize,
    grid: TimeGrid,
) -> Result<PathField, FluidError> {
    let lambda = spec.lambda.sample_midpoints(cells);
    let mu = spec.mu.sample_midpoints(cells);
    let q0 = spec.q0.sample_midpoints(cells);
    let inbound = spec.kernel.transpose().apply(&mu)?;
    let mut field = PathField::zero(cells, grid);
    for c in 0..cells {
        let drift = lambda[c] - mu[c] + inbound[c];
        let row = field.row_mut(c);
        for (j, t) in grid.times().enumerate() {
            row[j] = q0[c] + drift * t;
        }
    }
    Ok(field)
}

/// Solve the fluid system: reflect the free process under the transposed
/// kernel and recover the idle field.
pub fn fluid_limit(
    spec: &FluidSpec,
    cells: usize,
    grid: TimeGrid,
    cfg: &SolverConfig,
) -> Result<FluidSolution, FluidError> {
    spec.validate(cells)?;
    let free = build_free_process(spec, cells, grid)?;
    let sol = reflect(&free, &spec.kernel.transpose(), cfg)?;
    let mu = spec.mu.sample_midpoints(cells);
    let mut idle = sol.y.clone();
    for c in 0..cells {
        let rate = mu[c];
        for v in idle.row_mut(c) {
            *v /= rate;
        }
    }
    Ok(FluidSolution {
        free,
        queue: sol.z,
        regulator: sol.y,
        idle,
        iterations: sol.iterations,
        fixed_point_residual: sol.fixed_point_residual,
        converged: sol.converged,
        complementarity: sol.complementarity,
    })
}

/// The noise-free finite system: station paths solving the same reflection
/// problem with the transposed routing matrix.
#[derive(Debug, Clone)]
pub struct IntermediateSystem {
    pub grid: TimeGrid,
    /// Linear free paths per station.
    pub free: Vec<Vec<f64>>,
    /// Reflected queue paths.
    pub queue: Vec<Vec<f64>>,
    /// Regulator paths `mu_i * idle_i`.
    pub regulator: Vec<Vec<f64>>,
    /// Idle paths.
    pub idle: Vec<Vec<f64>>,
    pub converged: bool,
    pub fixed_point_residual: f64,
}

/// Build and solve the intermediate system for a finite network from scaled
/// initial queue masses.
pub fn intermediate_process(
    net: &NetworkSpec,
    q0_scaled: &[f64],
    grid: TimeGrid,
    cfg: &SolverConfig,
) -> Result<IntermediateSystem, FluidError> {
    let n = net.stations();
    if q0_scaled.len() != n {
        return Err(FluidError::BadSpec(format!(
            "need {n} initial values, got {}",
            q0_scaled.len()
        )));
    }
    let free: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let inbound: f64 = (0..n).map(|j| net.routing[j][i] * net.mu[j]).sum();
            let drift = net.lambda[i] - net.mu[i] + inbound;
            grid.times().map(|t| q0_scaled[i] + drift * t).collect()
        })
        .collect();
    let sol: FiniteSolution = solve_finite(&free, grid, &net.routing, cfg)?;
    let idle = sol
        .regulator
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().map(|v| v / net.mu[i]).collect())
        .collect();
    Ok(IntermediateSystem {
        grid,
        free,
        queue: sol.queue,
        regulator: sol.regulator,
        idle,
        converged: sol.converged,
        fixed_point_residual: sol.fixed_point_residual,
    })
}

/// Blockwise-constant embedding of station paths into a field with one cell
/// per station. Sampling the result at the block representatives recovers
/// the paths exactly.
pub fn lift(rows: &[Vec<f64>], grid: TimeGrid) -> Result<PathField, FluidError> {
    Ok(PathField::from_rows(rows, grid)?)
}

/// Mean over stations of the time-sup distance between station paths and the
/// matching block averages of a fluid field (`fluid.cells` a multiple of the
/// station count).
pub fn coupling_error(station_paths: &PathField, fluid: &PathField) -> Result<f64, FluidError> {
    let averaged = fluid.block_average(station_paths.cells())?;
    Ok(station_paths.norm_t1_diff(&averaged)?)
}

/// Largest pointwise residual of the queue-field balance identity
/// `Q = q0 + lambda t - mu (t - I) + G^T [mu (t - I)]` over the grid.
pub fn flow_identity_residual(
    spec: &FluidSpec,
    sol: &FluidSolution,
) -> Result<f64, FluidError> {
    let cells = sol.queue.cells();
    let grid = *sol.queue.grid();
    let lambda = spec.lambda.sample_midpoints(cells);
    let mu = spec.mu.sample_midpoints(cells);
    let q0 = spec.q0.sample_midpoints(cells);
    // busy field mu_v (t - I_v(t))
    let mut busy = PathField::zero(cells, grid);
    for c in 0..cells {
        let row = busy.row_mut(c);
        for (j, t) in grid.times().enumerate() {
            row[j] = mu[c] * (t - sol.idle.value(c, j));
        }
    }
    let inbound = spec.kernel.transpose().apply_field(&busy)?;
    let mut worst = 0.0f64;
    for c in 0..cells {
        for (j, t) in grid.times().enumerate() {
            let reassembled =
                q0[c] + lambda[c] * t - busy.value(c, j) + inbound.value(c, j);
            worst = worst.max((sol.queue.value(c, j) - reassembled).abs());
        }
    }
    Ok(worst)
}
