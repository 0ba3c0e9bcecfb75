//! Convergence studies across network sizes: simulation sweeps, rate
//! fitting, bound verification and NDJSON/JSON reporting.
//!
//! A study fixes a kernel and rate profiles, solves the fluid system once at
//! a fine spatial resolution, and then for each network size simulates
//! replications, builds the matching noise-free intermediate system, and
//! measures
//!
//! - the coupling error between scaled simulated queues and the fluid cell
//!   averages,
//! - the simulation-vs-intermediate gap (the martingale contribution) with
//!   its explicit-constant bound,
//! - the deterministic intermediate-vs-fluid gap with its certificate
//!   bound, and
//! - the Wasserstein-1 distance between the empirical path measure and the
//!   fluid path measure, together with Lipschitz functional averages.
//!
//! Identical configurations and seeds produce byte-identical outputs:
//! replications run on dedicated RNG streams and are reduced in a fixed
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fluid::{
    coupling_error, fluid_limit, intermediate_process, lift, FluidError, FluidSolution, FluidSpec,
};
use crate::measures::{
    functional_average, wasserstein1, AtomSet, Functional, MeasureError,
};
use crate::network::{
    empirical_measure, fluid_scale, simulate, spec_from_kernel, scaled_initial, NetworkError,
    NetworkSpec, ScalingConfig, SimLimits, SimSeed,
};
use crate::operators::{Kernel, KernelError, KernelSpec};
use crate::path::{PathError, PathField};
use crate::profile::Profile;
use crate::skorokhod::{SolveError, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Acceptance window half-width around the theoretical slope `-alpha/2`.
pub const SLOPE_TOLERANCE: f64 = 0.15;
/// Replication count needed before the slope window is enforced.
pub const SLOPE_MIN_REPLICATIONS: usize = 30;
/// Errors at or below this floor sit at the solver's fixed-point tolerance
/// and carry no rate information; they are dropped from rate fits.
pub const RATE_FIT_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("study config invalid: {0}")]
    BadConfig(String),
    #[error("rate fit needs at least 3 points with positive errors, got {0}")]
    InsufficientPoints(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Fluid(#[from] FluidError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Full description of a convergence study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyConfig {
    pub schema_version: u32,
    pub kernel: KernelSpec,
    pub lambda: Profile,
    pub mu: Profile,
    pub q0: Profile,
    pub alpha: f64,
    pub t_end: f64,
    pub dt: f64,
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub fluid_cells: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            schema_version: SCHEMA_VERSION,
            kernel: KernelSpec::Constant { c: 0.5 },
            lambda: Profile::constant(0.5),
            mu: Profile::constant(2.0),
            q0: Profile::constant(0.5),
            alpha: 1.0,
            t_end: 2.0,
            dt: 0.01,
            n_values: vec![16, 64, 256],
            replications: 30,
            seed: 7,
            fluid_cells: 256,
        }
    }
}

impl StudyConfig {
    pub fn scaling(&self) -> ScalingConfig {
        ScalingConfig {
            alpha: self.alpha,
            t_end: self.t_end,
            dt: self.dt,
        }
    }

    pub fn validate(&self) -> Result<(), StudyError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(StudyError::BadConfig(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.n_values.is_empty() || self.n_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(StudyError::BadConfig(
                "network sizes must be nonempty and strictly increasing".into(),
            ));
        }
        if self.replications == 0 {
            return Err(StudyError::BadConfig(
                "need at least one replication".into(),
            ));
        }
        if !(self.alpha > 0.0) {
            return Err(StudyError::BadConfig("alpha must be positive".into()));
        }
        for &n in &self.n_values {
            if self.fluid_cells % n != 0 {
                return Err(StudyError::BadConfig(format!(
                    "fluid resolution {} must be a multiple of every network size (violated by {n})",
                    self.fluid_cells
                )));
            }
        }
        self.scaling().grid()?;
        let kernel = Kernel::from_spec(self.kernel.clone())?;
        kernel.matrix(self.fluid_cells)?;
        FluidSpec {
            kernel,
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
            q0: self.q0.clone(),
        }
        .validate(self.fluid_cells)?;
        Ok(())
    }
}

/// One replication's measurements.
#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub n: usize,
    pub rep: usize,
    pub stream: u64,
    pub events: u64,
    /// Mean over stations of sup_t |scaled queue - fluid block average|.
    pub coupling_error: f64,
    /// Mean over stations of sup_t |scaled queue - intermediate queue|.
    pub sim_vs_intermediate: f64,
    /// Same gap for the reconstructed free processes (the martingale part).
    pub free_gap: f64,
    /// Wasserstein-1 distance of the empirical measure to the fluid measure.
    pub w1_to_fluid: f64,
    pub running_max_gap: f64,
    pub path_integral_gap: f64,
    pub decomposition_ok: bool,
    pub dual_bound_ok: bool,
}

/// Deterministic per-size quantities shared by all replications.
#[derive(Debug, Clone, Serialize)]
pub struct DeterministicPoint {
    pub n: usize,
    /// `|lifted intermediate queue - fluid queue|_{T,1}`.
    pub intermediate_vs_fluid: f64,
    /// `|lifted intermediate free - fluid free|_{T,1}`.
    pub free_gap: f64,
    /// Operator-norm gap between the transposed sampled kernel and the
    /// transposed limit kernel on the fluid grid.
    pub kernel_gap: f64,
    /// Certificate-based bound on `intermediate_vs_fluid`.
    pub bound_rhs: f64,
    pub bound_ok: bool,
}

/// Aggregates for one network size.
#[derive(Debug, Clone, Serialize)]
pub struct SizeSummary {
    pub n: usize,
    pub replications: usize,
    pub mean_events: f64,
    pub mean_coupling_error: f64,
    pub coupling_stderr: f64,
    pub mean_sim_vs_intermediate: f64,
    pub mean_free_gap: f64,
    /// Explicit-constant bound on the mean free-process gap.
    pub martingale_rhs: f64,
    /// Certificate bound on the mean queue gap (Lipschitz constant times the
    /// martingale bound).
    pub queue_gap_rhs: f64,
    pub deterministic: DeterministicPoint,
    pub w1_mean: f64,
    pub w1_stderr: f64,
    pub martingale_bound_ok: bool,
    pub queue_bound_ok: bool,
    pub decomposition_ok: bool,
    pub dual_bound_ok: bool,
}

/// Least-squares fit of `log error` against `log N`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub points_used: usize,
    pub points_dropped: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyFlags {
    pub coupling_decreasing: bool,
    pub w1_decreasing: bool,
    /// `None` when the slope is undefined (degenerate errors) or the
    /// replication count is below the enforcement threshold.
    pub slope_in_range: Option<bool>,
    pub bounds_ok: bool,
    pub decomposition_ok: bool,
    pub dual_bounds_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub config: StudyConfig,
    pub per_size: Vec<SizeSummary>,
    pub coupling_fit: Option<RateFit>,
    pub w1_fit: Option<RateFit>,
    pub intermediate_fit: Option<RateFit>,
    pub flags: StudyFlags,
}

impl ConvergenceReport {
    /// True when every enabled check passed.
    pub fn pass(&self) -> bool {
        self.flags.coupling_decreasing
            && self.flags.w1_decreasing
            && self.flags.slope_in_range.unwrap_or(true)
            && self.flags.bounds_ok
            && self.flags.decomposition_ok
            && self.flags.dual_bounds_ok
    }
}

#[derive(Debug)]
pub struct StudyOutcome {
    pub report: ConvergenceReport,
    pub records: Vec<RepRecord>,
}

/// Least squares on `(log N, log error)`. Nonpositive errors are dropped
/// and counted; fewer than three usable points is an error.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateFit, StudyError> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|(n, e)| (n.ln(), e.ln()))
        .collect();
    let dropped = points.len() - usable.len();
    if usable.len() < 3 {
        return Err(StudyError::InsufficientPoints(usable.len()));
    }
    let n = usable.len() as f64;
    let mean_x = usable.iter().map(|(x, _)| x).sum::<f64>() / n;
    let mean_y = usable.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|(x, _)| (x - mean_x).powi(2)).sum();
    let sxy: f64 = usable
        .iter()
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residual: f64 = usable
        .iter()
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        residual,
        points_used: usable.len(),
        points_dropped: dropped,
    })
}

struct SizeContext {
    n: usize,
    net: NetworkSpec,
    q0_counts: Vec<u64>,
    intermediate_queue_lifted: PathField,
    intermediate_free_lifted: PathField,
    deterministic: DeterministicPoint,
}

fn deterministic_point(
    cfg: &StudyConfig,
    kernel: &Kernel,
    fluid: &FluidSolution,
    n: usize,
    solver: &SolverConfig,
) -> Result<SizeContext, StudyError> {
    let net = spec_from_kernel(kernel, &cfg.lambda, &cfg.mu, n)?;
    let q0_counts = scaled_initial(&cfg.q0, n, cfg.alpha);
    let scale = cfg.scaling().time_scale(n);
    let q0_scaled: Vec<f64> = q0_counts.iter().map(|&q| q as f64 / scale).collect();
    let grid = cfg.scaling().grid()?;
    let intermediate = intermediate_process(&net, &q0_scaled, grid, solver)?;

    let queue_lifted = lift(&intermediate.queue, grid)?;
    let free_lifted = lift(&intermediate.free, grid)?;
    let queue_fine = queue_lifted.refine(cfg.fluid_cells)?;
    let free_fine = free_lifted.refine(cfg.fluid_cells)?;
    let intermediate_vs_fluid = queue_fine.norm_t1_diff(&fluid.queue)?;
    let free_gap = free_fine.norm_t1_diff(&fluid.free)?;

    let sampled_t = Kernel::from_matrix(&net.routing)?.transpose();
    let limit_t = kernel.transpose();
    let kernel_gap = sampled_t.op_norm_diff_at(&limit_t, cfg.fluid_cells)?;

    // shared certificate: the larger k certifies both operators since their
    // operator norms are at most one
    let gamma = 0.5;
    let cert_limit = limit_t.bounded_parameters(gamma)?;
    let cert_sampled = sampled_t.bounded_parameters(gamma)?;
    let k = cert_limit.k.max(cert_sampled.k);
    let c = k as f64 / (1.0 - gamma);
    let bound_rhs = (1.0 + 2.0 * c) * free_gap
        + (2.0 * c * c + c) * fluid.free.norm_t1() * kernel_gap;
    let slack = 1e-7 * (1.0 + fluid.free.norm_t1());
    let deterministic = DeterministicPoint {
        n,
        intermediate_vs_fluid,
        free_gap,
        kernel_gap,
        bound_rhs,
        bound_ok: intermediate_vs_fluid <= bound_rhs + slack,
    };
    Ok(SizeContext {
        n,
        net,
        q0_counts,
        intermediate_queue_lifted: queue_lifted,
        intermediate_free_lifted: free_lifted,
        deterministic,
    })
}

/// Deterministic sweep only: intermediate-vs-fluid gaps and their bounds per
/// network size, no simulation.
pub fn deterministic_sweep(cfg: &StudyConfig) -> Result<Vec<DeterministicPoint>, StudyError> {
    cfg.validate()?;
    let kernel = Kernel::from_spec(cfg.kernel.clone())?;
    let spec = FluidSpec {
        kernel: kernel.clone(),
        lambda: cfg.lambda.clone(),
        mu: cfg.mu.clone(),
        q0: cfg.q0.clone(),
    };
    let grid = cfg.scaling().grid()?;
    let solver = SolverConfig::default();
    let fluid = fluid_limit(&spec, cfg.fluid_cells, grid, &solver)?;
    cfg.n_values
        .iter()
        .map(|&n| deterministic_point(cfg, &kernel, &fluid, n, &solver).map(|c| c.deterministic))
        .collect()
}

fn simulate_replication(
    cfg: &StudyConfig,
    ctx: &SizeContext,
    fluid: &FluidSolution,
    fluid_atoms: &AtomSet,
    fluid_running_max: f64,
    fluid_path_integral: f64,
    n_idx: usize,
    rep: usize,
) -> Result<RepRecord, StudyError> {
    let scaling = cfg.scaling();
    let stream = ((n_idx as u64) << 32) | rep as u64;
    let sample = simulate(
        &ctx.net,
        &ctx.q0_counts,
        scaling.sim_horizon(ctx.n),
        SimSeed::new(cfg.seed, stream),
        &SimLimits::default(),
    )?;
    let events = sample.counts.total_events();
    let scaled = fluid_scale(&sample, &scaling, ctx.n)?;

    let coupling = coupling_error(&scaled.queue, &fluid.queue)?;
    let sim_vs_intermediate = scaled
        .queue
        .norm_t1_diff(&ctx.intermediate_queue_lifted)?;

    // reconstruct the free process: X = Q - Y + P^T Y with Y = diag(mu) I
    let grid = *scaled.queue.grid();
    let mut regulator = scaled.idle.clone();
    for i in 0..ctx.n {
        let mu = ctx.net.mu[i];
        for v in regulator.row_mut(i) {
            *v *= mu;
        }
    }
    let routed = crate::operators::DiscreteOp::from_matrix_transposed(&ctx.net.routing);
    let mut routed_reg = PathField::zero(ctx.n, grid);
    routed.apply_field(&regulator, &mut routed_reg);
    let mut free = scaled.queue.clone();
    for ((f, y), ry) in free
        .values_mut()
        .iter_mut()
        .zip(regulator.values())
        .zip(routed_reg.values())
    {
        *f = *f - y + ry;
    }
    let free_gap = free.norm_t1_diff(&ctx.intermediate_free_lifted)?;

    let empirical = empirical_measure(&scaled);
    let w1 = wasserstein1(&empirical, fluid_atoms)?.value;
    let running_max = Functional::RunningMax { threshold: 0.25 };
    let path_integral = Functional::PathIntegral;
    let running_max_gap =
        (functional_average(&empirical, &running_max) - fluid_running_max).abs();
    let path_integral_gap =
        (functional_average(&empirical, &path_integral) - fluid_path_integral).abs();

    let eps = 1e-9 * (1.0 + coupling.abs());
    let decomposition_ok =
        coupling <= sim_vs_intermediate + ctx.deterministic.intermediate_vs_fluid + eps;
    let dual_eps = 1e-9 * (1.0 + w1);
    let dual_bound_ok = running_max_gap
        <= running_max.lipschitz_constant(&grid) * w1 + dual_eps
        && path_integral_gap <= path_integral.lipschitz_constant(&grid) * w1 + dual_eps;

    Ok(RepRecord {
        n: ctx.n,
        rep,
        stream,
        events,
        coupling_error: coupling,
        sim_vs_intermediate,
        free_gap,
        w1_to_fluid: w1,
        running_max_gap,
        path_integral_gap,
        decomposition_ok,
        dual_bound_ok,
    })
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Run the full study: fluid solve, per-size simulation sweeps, rate fits
/// and bound checks.
pub fn run_convergence_study(cfg: &StudyConfig) -> Result<StudyOutcome, StudyError> {
    cfg.validate()?;
    let kernel = Kernel::from_spec(cfg.kernel.clone())?;
    let spec = FluidSpec {
        kernel: kernel.clone(),
        lambda: cfg.lambda.clone(),
        mu: cfg.mu.clone(),
        q0: cfg.q0.clone(),
    };
    let grid = cfg.scaling().grid()?;
    let solver = SolverConfig::default();
    let fluid = fluid_limit(&spec, cfg.fluid_cells, grid, &solver)?;
    let fluid_atoms = AtomSet::from_field(&fluid.queue);
    let fluid_running_max =
        functional_average(&fluid_atoms, &Functional::RunningMax { threshold: 0.25 });
    let fluid_path_integral = functional_average(&fluid_atoms, &Functional::PathIntegral);

    let mut records: Vec<RepRecord> = Vec::new();
    let mut per_size: Vec<SizeSummary> = Vec::new();

    for (n_idx, &n) in cfg.n_values.iter().enumerate() {
        let ctx = deterministic_point(cfg, &kernel, &fluid, n, &solver)?;
        let reps: Vec<RepRecord> = (0..cfg.replications)
            .into_par_iter()
            .map(|rep| {
                simulate_replication(
                    cfg,
                    &ctx,
                    &fluid,
                    &fluid_atoms,
                    fluid_running_max,
                    fluid_path_integral,
                    n_idx,
                    rep,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;

        let couplings: Vec<f64> = reps.iter().map(|r| r.coupling_error).collect();
        let sim_int: Vec<f64> = reps.iter().map(|r| r.sim_vs_intermediate).collect();
        let free_gaps: Vec<f64> = reps.iter().map(|r| r.free_gap).collect();
        let w1s: Vec<f64> = reps.iter().map(|r| r.w1_to_fluid).collect();
        let (mean_coupling, coupling_stderr) = mean_and_stderr(&couplings);
        let (mean_sim_int, _) = mean_and_stderr(&sim_int);
        let (mean_free_gap, _) = mean_and_stderr(&free_gaps);
        let (w1_mean, w1_stderr) = mean_and_stderr(&w1s);
        let mean_events =
            reps.iter().map(|r| r.events as f64).sum::<f64>() / reps.len() as f64;

        // explicit-constant martingale bound on the free-process gap
        let lambda_mass = ctx.net.lambda.iter().sum::<f64>() / n as f64;
        let mu_mass = ctx.net.mu.iter().sum::<f64>() / n as f64;
        let scale = cfg.scaling().time_scale(n);
        let martingale_rhs = 2.0 * cfg.t_end.sqrt() / scale.sqrt()
            * (lambda_mass + 2.0 * mu_mass).sqrt();
        let cert = Kernel::from_matrix(&ctx.net.routing)?
            .transpose()
            .bounded_parameters(0.5)?;
        let queue_gap_rhs = cert.psi_lipschitz * martingale_rhs;

        let summary = SizeSummary {
            n,
            replications: cfg.replications,
            mean_events,
            mean_coupling_error: mean_coupling,
            coupling_stderr,
            mean_sim_vs_intermediate: mean_sim_int,
            mean_free_gap,
            martingale_rhs,
            queue_gap_rhs,
            deterministic: ctx.deterministic.clone(),
            w1_mean,
            w1_stderr,
            martingale_bound_ok: mean_free_gap <= martingale_rhs,
            queue_bound_ok: mean_sim_int <= queue_gap_rhs,
            decomposition_ok: reps.iter().all(|r| r.decomposition_ok),
            dual_bound_ok: reps.iter().all(|r| r.dual_bound_ok),
        };
        per_size.push(summary);
        records.extend(reps);
    }

    let floored = |e: f64| if e <= RATE_FIT_FLOOR { 0.0 } else { e };
    let coupling_points: Vec<(f64, f64)> = per_size
        .iter()
        .map(|s| (s.n as f64, floored(s.mean_coupling_error)))
        .collect();
    let w1_points: Vec<(f64, f64)> = per_size
        .iter()
        .map(|s| (s.n as f64, floored(s.w1_mean)))
        .collect();
    let intermediate_points: Vec<(f64, f64)> = per_size
        .iter()
        .map(|s| (s.n as f64, floored(s.deterministic.intermediate_vs_fluid)))
        .collect();
    let coupling_fit = fit_rate(&coupling_points).ok();
    let w1_fit = fit_rate(&w1_points).ok();
    let intermediate_fit = fit_rate(&intermediate_points).ok();

    let coupling_decreasing = per_size.windows(2).all(|w| {
        w[1].mean_coupling_error < w[0].mean_coupling_error
            || w[1].mean_coupling_error <= RATE_FIT_FLOOR
    });
    let w1_decreasing = per_size
        .windows(2)
        .all(|w| w[1].w1_mean < w[0].w1_mean || w[1].w1_mean <= RATE_FIT_FLOOR);
    let slope_in_range = match coupling_fit {
        Some(fit)
            if cfg.replications >= SLOPE_MIN_REPLICATIONS && cfg.n_values.len() >= 3 =>
        {
            let target = -cfg.alpha / 2.0;
            Some((fit.slope - target).abs() <= SLOPE_TOLERANCE)
        }
        _ => None,
    };
    let flags = StudyFlags {
        coupling_decreasing,
        w1_decreasing,
        slope_in_range,
        bounds_ok: per_size.iter().all(|s| {
            s.martingale_bound_ok && s.queue_bound_ok && s.deterministic.bound_ok
        }),
        decomposition_ok: per_size.iter().all(|s| s.decomposition_ok),
        dual_bounds_ok: per_size.iter().all(|s| s.dual_bound_ok),
    };

    Ok(StudyOutcome {
        report: ConvergenceReport {
            config: cfg.clone(),
            per_size,
            coupling_fit,
            w1_fit,
            intermediate_fit,
            flags,
        },
        records,
    })
}

/// Per-size bound verification rows extracted from a study.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub per_size: Vec<SizeSummary>,
    pub all_ok: bool,
}

/// Run the study and keep only the bound comparisons.
pub fn verify_bounds(cfg: &StudyConfig) -> Result<BoundsReport, StudyError> {
    let outcome = run_convergence_study(cfg)?;
    let all_ok = outcome.report.flags.bounds_ok;
    Ok(BoundsReport {
        per_size: outcome.report.per_size,
        all_ok,
    })
}

/// Write `records.ndjson` (one record per replication) and `summary.json`.
pub fn write_study_outputs(outcome: &StudyOutcome, out_dir: &Path) -> Result<(), StudyError> {
    fs::create_dir_all(out_dir)?;
    let mut ndjson = fs::File::create(out_dir.join("records.ndjson"))?;
    for record in &outcome.records {
        serde_json::to_writer(&mut ndjson, record)?;
        ndjson.write_all(b"\n")?;
    }
    let summary = fs::File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(summary, &outcome.report)?;
    Ok(())
}
