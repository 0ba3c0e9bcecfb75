//! The reflection problem `Z = X + (1 - F) Y` on discretized path fields.
//!
//! Given a free process `X` with `X(0) >= 0` and a reflection-class kernel
//! `F`, the solver iterates the regulator map
//! `W_{n+1}(t) = sup_{s <= t} [-X(s) + (F W_n)(s)]^+`
//! from `W_0 = 0`. The iterates increase monotonically to the minimal
//! regulator `Y`; the reflected process is `Z = X + Y - F Y`. Stopping is
//! certificate-driven: a successive-iterate gap of `g` guarantees the final
//! iterate is within `g * k / (1 - gamma)` of the fixed point.
//!
//! The same iteration with the transposed routing matrix in place of the
//! kernel solves the finite-dimensional problem for station vectors.

use thiserror::Error;

use crate::operators::{ContractionCertificate, DiscreteOp, Kernel, KernelError};
use crate::path::{PathError, PathField, TimeGrid};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("free process must start nonnegative; min X(0) = {0}")]
    NegativeStart(f64),
    #[error("reflected process dipped to {0}, below the feasibility tolerance")]
    InfeasibleReflection(f64),
    #[error("fixed-point iterates lost monotonicity at iteration {iteration} (drop {drop})")]
    MonotonicityLost { iteration: usize, drop: f64 },
    #[error("routing matrix is not a valid substochastic matrix: {0}")]
    BadRouting(String),
}

/// Solver configuration. `gamma` selects the contraction certificate; the
/// fixed-point tolerance and iteration cap default to
/// `1e-10 * (1 + |X|_{T,1})` and `10 k ceil(log(1/tol) / log(1/gamma))`.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub gamma: f64,
    pub tol_fp: Option<f64>,
    pub max_iter: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 0.5,
            tol_fp: None,
            max_iter: None,
        }
    }
}

impl SolverConfig {
    fn resolve(&self, x_norm: f64, cert: &ContractionCertificate) -> (f64, usize) {
        let tol = self
            .tol_fp
            .unwrap_or_else(|| 1e-10 * (1.0 + x_norm));
        let max_iter = self.max_iter.unwrap_or_else(|| {
            let per_cycle = (1.0 / tol.max(1e-300)).ln() / (1.0 / self.gamma).ln();
            10 * cert.k * per_cycle.ceil().max(1.0) as usize
        });
        (tol, max_iter)
    }
}

/// A solved reflection problem.
#[derive(Debug, Clone)]
pub struct ReflectionSolution {
    /// Reflected process, raw solver output (tiny negative values are kept;
    /// see [`ReflectionSolution::clamped_z`]).
    pub z: PathField,
    /// Minimal increasing regulator with `Y(0) = 0`.
    pub y: PathField,
    pub iterations: usize,
    /// Certified bound on the distance of `y` to the exact fixed point.
    pub fixed_point_residual: f64,
    pub converged: bool,
    /// Per-cell left-endpoint Stieltjes sums of `Z dY`.
    pub complementarity: Vec<f64>,
    pub certificate: ContractionCertificate,
}

impl ReflectionSolution {
    /// `Z` with entries in `(-tol, 0)` set to zero, for reporting.
    pub fn clamped_z(&self, tol: f64) -> PathField {
        let mut z = self.z.clone();
        for v in z.values_mut() {
            if *v < 0.0 && *v > -tol {
                *v = 0.0;
            }
        }
        z
    }

    pub fn max_complementarity(&self) -> f64 {
        self.complementarity.iter().fold(0.0f64, |a, v| a.max(*v))
    }
}

/// One application of the regulator map
/// `W -> sup_{s <= t} [-X(s) + (F W)(s)]^+`, computed as a per-cell running
/// maximum over grid times.
pub fn regulator_step(
    x: &PathField,
    kernel: &Kernel,
    w: &PathField,
) -> Result<PathField, SolveError> {
    x.check_same_shape(w)?;
    let op = DiscreteOp::from_kernel(kernel, x.cells())?;
    let mut fw = PathField::zero(x.cells(), *x.grid());
    op.apply_field(w, &mut fw);
    let mut out = PathField::zero(x.cells(), *x.grid());
    regulator_step_into(x, &fw, &mut out);
    Ok(out)
}

/// Core of the regulator map given the already-applied `F W` field.
fn regulator_step_into(x: &PathField, fw: &PathField, out: &mut PathField) {
    let k = x.grid().len();
    for c in 0..x.cells() {
        let x_row = x.row(c);
        let fw_row = fw.row(c);
        let out_row = out.row_mut(c);
        let mut running = 0.0f64;
        for j in 0..k {
            let candidate = fw_row[j] - x_row[j];
            if candidate > running {
                running = candidate;
            }
            out_row[j] = running;
        }
    }
}

/// Solve the reflection problem for a field free process.
pub fn solve_regulator(
    x: &PathField,
    kernel: &Kernel,
    cfg: &SolverConfig,
) -> Result<ReflectionSolution, SolveError> {
    let verdict = kernel.reflection_class_check(1e-9);
    if !verdict.in_class_r {
        return Err(KernelError::NotReflectionClass(verdict.describe()).into());
    }
    let cert = kernel.bounded_parameters(cfg.gamma)?;
    let op = DiscreteOp::from_kernel(kernel, x.cells())?;
    solve_with_op(x, &op, cert, cfg)
}

/// Solve and additionally verify feasibility of the reflected process.
pub fn reflect(
    x: &PathField,
    kernel: &Kernel,
    cfg: &SolverConfig,
) -> Result<ReflectionSolution, SolveError> {
    let sol = solve_regulator(x, kernel, cfg)?;
    let floor = -1e-7 * (1.0 + x.norm_t1());
    let min_z = sol.z.min_value();
    if min_z < floor {
        return Err(SolveError::InfeasibleReflection(min_z));
    }
    Ok(sol)
}

fn solve_with_op(
    x: &PathField,
    op: &DiscreteOp,
    cert: ContractionCertificate,
    cfg: &SolverConfig,
) -> Result<ReflectionSolution, SolveError> {
    let start_min = (0..x.cells())
        .map(|c| x.value(c, 0))
        .fold(f64::INFINITY, f64::min);
    if start_min < -1e-12 {
        return Err(SolveError::NegativeStart(start_min));
    }
    let (tol, max_iter) = cfg.resolve(x.norm_t1(), &cert);

    let cells = x.cells();
    let grid = *x.grid();
    let mut w = PathField::zero(cells, grid);
    let mut fw = PathField::zero(cells, grid);
    let mut next = PathField::zero(cells, grid);
    let mut iterations = 0usize;
    let mut residual = f64::INFINITY;
    let mut converged = false;

    while iterations < max_iter {
        op.apply_field(&w, &mut fw);
        regulator_step_into(x, &fw, &mut next);
        iterations += 1;

        let mut gap = 0.0f64;
        let mut worst_drop = 0.0f64;
        for c in 0..cells {
            let old = w.row(c);
            let new = next.row(c);
            let mut cell_gap = 0.0f64;
            for (o, n) in old.iter().zip(new) {
                let d = n - o;
                if d < worst_drop {
                    worst_drop = d;
                }
                if d.abs() > cell_gap {
                    cell_gap = d.abs();
                }
            }
            gap += cell_gap;
        }
        gap /= cells.max(1) as f64;
        if worst_drop < -1e-12 * (1.0 + x.norm_t1()) {
            return Err(SolveError::MonotonicityLost {
                iteration: iterations,
                drop: worst_drop,
            });
        }
        std::mem::swap(&mut w, &mut next);
        residual = gap * cert.psi_lipschitz;
        if residual <= tol {
            converged = true;
            break;
        }
    }

    let y = w;
    op.apply_field(&y, &mut fw);
    let mut z = x.clone();
    for ((zv, yv), fv) in z
        .values_mut()
        .iter_mut()
        .zip(y.values())
        .zip(fw.values())
    {
        *zv += yv - fv;
    }
    let complementarity = stieltjes_residuals(&z, &y);
    Ok(ReflectionSolution {
        z,
        y,
        iterations,
        fixed_point_residual: residual,
        converged,
        complementarity,
        certificate: cert,
    })
}

/// Per-cell left-endpoint Stieltjes sums `sum_j Z(t_j) (Y(t_{j+1}) - Y(t_j))`.
///
/// Zero (up to solver tolerance) certifies minimality of the regulator; for
/// discretized inputs the sums shrink first-order in the grid step.
pub fn complementarity_residual(sol: &ReflectionSolution) -> Vec<f64> {
    stieltjes_residuals(&sol.z, &sol.y)
}

fn stieltjes_residuals(z: &PathField, y: &PathField) -> Vec<f64> {
    let k = z.grid().len();
    (0..z.cells())
        .map(|c| {
            let z_row = z.row(c);
            let y_row = y.row(c);
            (0..k - 1)
                .map(|j| z_row[j] * (y_row[j + 1] - y_row[j]))
                .sum()
        })
        .collect()
}

/// Solution of the finite-dimensional problem for `n` station paths.
#[derive(Debug, Clone)]
pub struct FiniteSolution {
    pub queue: Vec<Vec<f64>>,
    pub regulator: Vec<Vec<f64>>,
    pub iterations: usize,
    pub fixed_point_residual: f64,
    pub converged: bool,
    pub complementarity: Vec<f64>,
}

/// Solve the finite reflection problem with reflection matrix `P^T` acting in
/// place of the kernel. `x_rows` holds one grid path per station.
pub fn solve_finite(
    x_rows: &[Vec<f64>],
    grid: TimeGrid,
    routing: &[Vec<f64>],
    cfg: &SolverConfig,
) -> Result<FiniteSolution, SolveError> {
    let n = x_rows.len();
    if routing.len() != n || routing.iter().any(|r| r.len() != n) {
        return Err(SolveError::BadRouting(format!(
            "routing must be {n} x {n} to match {n} station paths"
        )));
    }
    for (i, row) in routing.iter().enumerate() {
        let mut sum = 0.0;
        for &v in row {
            if v < 0.0 {
                return Err(SolveError::BadRouting(format!("negative entry in row {i}")));
            }
            sum += v;
        }
        if sum > 1.0 + 1e-12 {
            return Err(SolveError::BadRouting(format!(
                "row {i} sums to {sum} > 1"
            )));
        }
    }
    let cert = matrix_contraction_certificate(routing, cfg.gamma)?;
    let x = PathField::from_rows(x_rows, grid)?;
    let op = DiscreteOp::from_matrix_transposed(routing);
    let sol = solve_with_op(&x, &op, cert, cfg)?;
    Ok(FiniteSolution {
        queue: (0..n).map(|i| sol.z.row(i).to_vec()).collect(),
        regulator: (0..n).map(|i| sol.y.row(i).to_vec()).collect(),
        iterations: sol.iterations,
        fixed_point_residual: sol.fixed_point_residual,
        converged: sol.converged,
        complementarity: sol.complementarity,
    })
}

/// Contraction certificate for the transposed routing matrix, computed from
/// row sums of matrix powers (the operator norm of the lifted kernel power).
fn matrix_contraction_certificate(
    p: &[Vec<f64>],
    gamma: f64,
) -> Result<ContractionCertificate, SolveError> {
    let n = p.len();
    let max_row_sum = |m: &[Vec<f64>]| -> f64 {
        m.iter()
            .map(|r| r.iter().sum::<f64>())
            .fold(0.0, f64::max)
    };
    let mut power = p.to_vec();
    for k in 1..=crate::operators::CONTRACTION_POWER_CAP {
        if max_row_sum(&power) <= gamma {
            return Ok(ContractionCertificate::new(gamma, k));
        }
        let mut next = vec![vec![0.0; n]; n];
        for i in 0..n {
            for l in 0..n {
                let v = power[i][l];
                if v == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i][j] += v * p[l][j];
                }
            }
        }
        power = next;
    }
    Err(SolveError::BadRouting(format!(
        "row sums of matrix powers never reached {gamma}; spectral radius too close to 1"
    )))
}

/// Measured and certified sides of the free-process Lipschitz bounds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LipschitzReport {
    pub x_gap: f64,
    pub regulator_gap: f64,
    pub regulator_bound: f64,
    pub reflected_gap: f64,
    pub reflected_bound: f64,
    pub slack: f64,
    pub satisfied: bool,
}

/// Compare both sides of the regulator and reflection Lipschitz bounds for a
/// common kernel applied to two free processes.
pub fn lipschitz_check(
    kernel: &Kernel,
    cert: &ContractionCertificate,
    x1: &PathField,
    x2: &PathField,
    cfg: &SolverConfig,
) -> Result<LipschitzReport, SolveError> {
    x1.check_same_shape(x2)?;
    let s1 = solve_regulator(x1, kernel, cfg)?;
    let s2 = solve_regulator(x2, kernel, cfg)?;
    let x_gap = x1.norm_t1_diff(x2)?;
    let regulator_gap = s1.y.norm_t1_diff(&s2.y)?;
    let reflected_gap = s1.z.norm_t1_diff(&s2.z)?;
    let regulator_bound = cert.psi_lipschitz * x_gap;
    let reflected_bound = cert.phi_lipschitz * x_gap;
    let slack = 1e-7 * (1.0 + x1.norm_t1() + x2.norm_t1())
        + s1.fixed_point_residual
        + s2.fixed_point_residual;
    Ok(LipschitzReport {
        x_gap,
        regulator_gap,
        regulator_bound,
        reflected_gap,
        reflected_bound,
        slack,
        satisfied: regulator_gap <= regulator_bound + slack
            && reflected_gap <= reflected_bound + slack,
    })
}

/// Measured and certified sides of the operator-perturbation bounds.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PerturbationReport {
    pub x_gap: f64,
    pub op_gap: f64,
    pub regulator_gap: f64,
    pub regulator_bound: f64,
    pub reflected_gap: f64,
    pub reflected_bound: f64,
    pub slack: f64,
    pub satisfied: bool,
}

/// Compare both sides of the perturbation bounds for two kernels and two free
/// processes. With `x1 == x2` the bound reduces to the pure operator term;
/// with `f1 == f2` it reduces to the free-process term.
pub fn operator_perturbation_check(
    f1: &Kernel,
    cert1: &ContractionCertificate,
    x1: &PathField,
    f2: &Kernel,
    cert2: &ContractionCertificate,
    x2: &PathField,
    cfg: &SolverConfig,
) -> Result<PerturbationReport, SolveError> {
    x1.check_same_shape(x2)?;
    let s1 = solve_regulator(x1, f1, cfg)?;
    let s2 = solve_regulator(x2, f2, cfg)?;
    let x_gap = x2.norm_t1_diff(x1)?;
    let op_gap = f2.op_norm_diff(f1)?;
    let regulator_gap = s2.y.norm_t1_diff(&s1.y)?;
    let reflected_gap = s2.z.norm_t1_diff(&s1.z)?;
    let x1_norm = x1.norm_t1();
    let c1 = cert1.psi_lipschitz;
    let c2 = cert2.psi_lipschitz;
    let regulator_bound = c2 * x_gap + c1 * c2 * x1_norm * op_gap;
    let reflected_bound =
        (1.0 + 2.0 * c2) * x_gap + (2.0 * c1 * c2 + c1) * x1_norm * op_gap;
    let slack = 1e-7 * (1.0 + x1_norm + x2.norm_t1())
        + s1.fixed_point_residual
        + s2.fixed_point_residual;
    Ok(PerturbationReport {
        x_gap,
        op_gap,
        regulator_gap,
        regulator_bound,
        reflected_gap,
        reflected_bound,
        slack,
        satisfied: regulator_gap <= regulator_bound + slack
            && reflected_gap <= reflected_bound + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::KernelSpec;
    use approx::assert_abs_diff_eq;

    fn grid(steps: usize) -> TimeGrid {
        TimeGrid::new(1.0, steps).unwrap()
    }

    /// Scalar one-dimensional reflection oracle: Y(t) = sup_{s<=t} (-X(s))^+.
    fn scalar_regulator(x: &[f64]) -> Vec<f64> {
        let mut running = 0.0f64;
        x.iter()
            .map(|v| {
                running = running.max(-v);
                running
            })
            .collect()
    }

    fn swap_half_kernel() -> Kernel {
        Kernel::blockwise(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap()
    }

    #[test]
    fn regulator_step_with_constant_negative_x() {
        // X(0) = 0, X = -1 afterwards: one step of the map from W = 0 gives 1.
        let g = grid(10);
        let x = PathField::from_fn(2, g, |_, t| if t > 0.0 { -1.0 } else { 0.0 });
        let w = PathField::zero(2, g);
        let out = regulator_step(&x, &Kernel::constant(0.3), &w).unwrap();
        assert_eq!(out.value(0, 0), 0.0);
        assert_eq!(out.value(1, 5), 1.0);
    }

    #[test]
    fn regulator_step_explicit_running_max() {
        // X(t) = 1 - 2t, F = 0: the map of 0 is (2t - 1)^+.
        let g = grid(100);
        let x = PathField::from_fn(1, g, |_, t| 1.0 - 2.0 * t);
        let out = regulator_step(&x, &Kernel::constant(0.0), &PathField::zero(1, g)).unwrap();
        for (j, t) in g.times().enumerate() {
            assert_abs_diff_eq!(out.value(0, j), (2.0 * t - 1.0).max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn one_dimensional_reflection_matches_closed_form() {
        let g = grid(100);
        let x = PathField::from_fn(1, g, |_, t| 1.0 - 2.0 * t);
        let sol = reflect(&x, &Kernel::constant(0.0), &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        for (j, t) in g.times().enumerate() {
            assert_abs_diff_eq!(sol.y.value(0, j), (2.0 * t - 1.0).max(0.0), epsilon = 1e-12);
            assert_abs_diff_eq!(sol.z.value(0, j), (1.0 - 2.0 * t).max(0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_two_cell_closed_form() {
        // Oracle: the symmetric fixed point y(t) = (2t - 1 + y(t)/2)^+ solved
        // in closed form gives y = 2 (2t - 1)^+; cross-checked by brute-force
        // scalar iteration below.
        let g = grid(100);
        let x = PathField::from_fn(2, g, |_, t| 1.0 - 2.0 * t);
        let sol = reflect(&x, &swap_half_kernel(), &SolverConfig::default()).unwrap();
        assert!(sol.converged);

        let mut brute = vec![0.0f64; g.len()];
        for _ in 0..200 {
            let mut running = 0.0f64;
            brute = g
                .times()
                .enumerate()
                .map(|(j, t)| {
                    running = running.max(2.0 * t - 1.0 + 0.5 * brute[j]);
                    running.max(0.0)
                })
                .collect();
        }
        for (j, t) in g.times().enumerate() {
            let expected = 2.0 * (2.0 * t - 1.0).max(0.0);
            assert_abs_diff_eq!(sol.y.value(0, j), expected, epsilon = 1e-8);
            assert_abs_diff_eq!(sol.y.value(1, j), expected, epsilon = 1e-8);
            assert_abs_diff_eq!(sol.y.value(0, j), brute[j], epsilon = 1e-8);
            assert_abs_diff_eq!(sol.z.value(0, j), (1.0 - 2.0 * t).max(0.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn nonnegative_increasing_x_needs_no_regulator() {
        let g = grid(50);
        let x = PathField::from_fn(3, g, |u, t| u + t);
        let sol = reflect(&x, &Kernel::constant(0.4), &SolverConfig::default()).unwrap();
        assert_eq!(sol.y.norm_t1(), 0.0);
        assert_eq!(sol.z.norm_t1_diff(&x).unwrap(), 0.0);
    }

    #[test]
    fn regulator_is_increasing_and_feasible() {
        let g = grid(200);
        let x = PathField::from_fn(4, g, |u, t| 1.2 + (3.0 * t + 6.0 * u).sin() - 1.5 * t);
        let sol = reflect(&x, &swap_half_kernel(), &SolverConfig::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.y.is_increasing(1e-12));
        assert!(sol.z.min_value() >= -1e-9);
    }

    #[test]
    fn iterates_contract_at_operator_power_rate() {
        // |pi^n(W1) - pi^n(W2)| <= |F^(n)| |W1 - W2| on random inputs
        let g = grid(40);
        let kernel = Kernel::constant(0.6);
        let x = PathField::from_fn(2, g, |u, t| 0.3 + u - 0.9 * t);
        let w1 = PathField::from_fn(2, g, |u, t| (u + t).abs());
        let w2 = PathField::from_fn(2, g, |u, t| 2.0 * t * (1.0 - u));
        let mut a = w1.clone();
        let mut b = w2.clone();
        let base_gap = w1.norm_t1_diff(&w2).unwrap();
        for n in 1..=4 {
            a = regulator_step(&x, &kernel, &a).unwrap();
            b = regulator_step(&x, &kernel, &b).unwrap();
            let mut power = kernel.clone();
            for _ in 1..n {
                power = power.compose(&kernel).unwrap();
            }
            let bound = power.op_norm() * base_gap;
            assert!(a.norm_t1_diff(&b).unwrap() <= bound + 1e-10);
        }
    }

    #[test]
    fn complementarity_zero_on_grid_aligned_instance() {
        let g = grid(100);
        let x = PathField::from_fn(1, g, |_, t| 1.0 - 2.0 * t);
        let sol = reflect(&x, &Kernel::constant(0.0), &SolverConfig::default()).unwrap();
        assert!(sol.max_complementarity() <= 1e-12);
    }

    #[test]
    fn complementarity_flags_over_reflection() {
        // X = 1 everywhere, so Z > 0; adding mass to Y after t = 0 is
        // feasible but non-minimal and the residual catches it.
        let g = grid(10);
        let x = PathField::from_fn(1, g, |_, _| 1.0);
        let sol = reflect(&x, &Kernel::constant(0.0), &SolverConfig::default()).unwrap();
        assert!(sol.max_complementarity() <= 1e-12);

        let mut bad_y = sol.y.clone();
        for j in 1..g.len() {
            let v = bad_y.value(0, j);
            bad_y.set(0, j, v + 1.0);
        }
        let mut bad_z = x.clone();
        for j in 0..g.len() {
            let v = bad_z.value(0, j) + bad_y.value(0, j);
            bad_z.set(0, j, v);
        }
        let residual = stieltjes_residuals(&bad_z, &bad_y);
        assert!(residual[0] > 0.5);
    }

    #[test]
    fn complementarity_first_order_in_dt() {
        let solve_at = |steps: usize| {
            let g = grid(steps);
            let x = PathField::from_fn(2, g, |u, t| {
                0.4 + 0.3 * (5.0 * t + 3.0 * u).sin() - 0.8 * t
            });
            let sol = reflect(&x, &swap_half_kernel(), &SolverConfig::default()).unwrap();
            sol.max_complementarity()
        };
        let coarse = solve_at(100);
        let fine = solve_at(400);
        assert!(coarse > 0.0);
        assert!(fine <= coarse / 4.0, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn regulator_jumps_vanish_with_dt_on_continuous_input() {
        let increments: Vec<f64> = [50, 100, 200, 400]
            .iter()
            .map(|&steps| {
                let g = grid(steps);
                let x = PathField::from_fn(1, g, |_, t| 0.2 - 1.3 * t + (4.0 * t).sin());
                let sol = reflect(&x, &Kernel::constant(0.0), &SolverConfig::default()).unwrap();
                sol.y.max_step_increment()
            })
            .collect();
        for w in increments.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(increments.last().unwrap() < &0.02);
    }

    #[test]
    fn finite_solver_matches_field_solver_on_lift() {
        let p = vec![vec![0.1, 0.4], vec![0.3, 0.2]];
        let g = grid(80);
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|i| {
                g.times()
                    .map(|t| 0.5 + i as f64 * 0.2 - (1.1 + 0.3 * i as f64) * t)
                    .collect()
            })
            .collect();
        let fin = solve_finite(&rows, g, &p, &SolverConfig::default()).unwrap();
        assert!(fin.converged);

        let lifted = PathField::from_rows(&rows, g).unwrap();
        let kernel = Kernel::from_matrix(&p).unwrap().transpose();
        let field = solve_regulator(&lifted, &kernel, &SolverConfig::default()).unwrap();
        for i in 0..2 {
            for j in 0..g.len() {
                assert_abs_diff_eq!(fin.queue[i][j], field.z.value(i, j), epsilon = 1e-9);
                assert_abs_diff_eq!(fin.regulator[i][j], field.y.value(i, j), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn finite_solver_one_station_closed_form() {
        let g = grid(60);
        let rows = vec![g.times().map(|t| 1.0 - 2.0 * t).collect::<Vec<_>>()];
        let fin = solve_finite(&rows, g, &[vec![0.0]], &SolverConfig::default()).unwrap();
        let oracle = scalar_regulator(&rows[0]);
        for j in 0..g.len() {
            assert_abs_diff_eq!(fin.regulator[0][j], oracle[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn finite_solver_rejects_superstochastic_routing() {
        let g = grid(10);
        let rows = vec![vec![0.0; g.len()]; 2];
        let p = vec![vec![0.9, 0.3], vec![0.0, 0.0]];
        assert!(matches!(
            solve_finite(&rows, g, &p, &SolverConfig::default()),
            Err(SolveError::BadRouting(_))
        ));
    }

    #[test]
    fn lipschitz_identical_inputs() {
        let g = grid(40);
        let kernel = Kernel::constant(0.5);
        let cert = kernel.bounded_parameters(0.5).unwrap();
        let x = PathField::from_fn(2, g, |u, t| u - t);
        let report =
            lipschitz_check(&kernel, &cert, &x, &x, &SolverConfig::default()).unwrap();
        assert!(report.satisfied);
        assert_eq!(report.regulator_gap, 0.0);
    }

    #[test]
    fn one_dimensional_reflection_is_sup_norm_lipschitz() {
        // with F = 0 the per-path map has Lipschitz constant 1
        let g = grid(120);
        let kernel = Kernel::constant(0.0);
        let cert = kernel.bounded_parameters(0.5).unwrap();
        for s in 0..20 {
            let a = 0.1 + 0.04 * s as f64;
            let x1 = PathField::from_fn(1, g, |_, t| 0.5 - a * t + (3.0 * t).sin() * 0.2);
            let x2 = PathField::from_fn(1, g, |_, t| 0.4 - 1.3 * a * t);
            let report =
                lipschitz_check(&kernel, &cert, &x1, &x2, &SolverConfig::default()).unwrap();
            assert!(report.regulator_gap <= report.x_gap + 1e-10);
            assert!(report.satisfied);
        }
    }

    #[test]
    fn perturbation_bound_constant_kernels() {
        let g = grid(60);
        let f1 = Kernel::constant(0.4);
        let f2 = Kernel::constant(0.5);
        let c1 = f1.bounded_parameters(0.5).unwrap();
        let c2 = f2.bounded_parameters(0.5).unwrap();
        let x = PathField::from_fn(1, g, |_, t| 1.0 - 2.0 * t);
        let report = operator_perturbation_check(
            &f1,
            &c1,
            &x,
            &f2,
            &c2,
            &x,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(report.satisfied);
        assert!(report.regulator_gap > 0.0);
        assert_abs_diff_eq!(report.op_gap, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn perturbation_identical_kernels_reduces_to_x_term() {
        let g = grid(60);
        let f = Kernel::constant(0.5);
        let c = f.bounded_parameters(0.5).unwrap();
        let x1 = PathField::from_fn(1, g, |_, t| 1.0 - 2.0 * t);
        let x2 = PathField::from_fn(1, g, |_, t| 0.9 - 1.8 * t);
        let report =
            operator_perturbation_check(&f, &c, &x1, &f, &c, &x2, &SolverConfig::default())
                .unwrap();
        assert_eq!(report.op_gap, 0.0);
        assert!(report.satisfied);
    }
}
