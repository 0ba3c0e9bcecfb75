//! Nonnegative kernels on the unit square acting as integral operators on
//! `L_1[0, 1]`.
//!
//! A kernel is either blockwise constant on the uniform `m x m` partition or
//! one of a small library of closed forms. Blockwise arithmetic (apply,
//! transpose, compose, norms, spectral radius) is exact; closed forms are
//! discretized by midpoint sampling with a documented `O(1/m)` error.
//!
//! The operator norm used throughout is the `L_1 -> L_1` norm
//! `sup_v integral |G(u, v)| du`, and the reflection class consists of
//! nonnegative kernels with operator norm at most one and spectral radius
//! strictly below one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::PathField;

/// Tolerance on nonnegativity and the unit bound of the operator norm.
pub const CLASS_NORM_TOL: f64 = 1e-9;
/// Required margin of the spectral radius below one.
pub const CLASS_RADIUS_MARGIN: f64 = 1e-6;
/// Largest composition power searched for a contraction certificate.
pub const CONTRACTION_POWER_CAP: usize = 64;
/// Default discretization resolution for closed-form kernels.
pub const DEFAULT_RESOLUTION: usize = 512;

const MAX_COMMON_RESOLUTION: usize = 4096;
const POWER_ITER_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel parameter out of range: {0}")]
    BadParameter(String),
    #[error("kernel grid mismatch: {0}")]
    GridMismatch(String),
    #[error("negative kernel value {value} in cell ({row}, {col})")]
    NegativeValue { row: usize, col: usize, value: f64 },
    #[error("routing matrix entry ({row}, {col}) is negative")]
    NegativeMatrixEntry { row: usize, col: usize },
    #[error("routing matrix row {row} sums to {sum} > 1")]
    RowSumExceedsOne { row: usize, sum: f64 },
    #[error("routing matrix must be square and nonempty")]
    BadMatrixShape,
    #[error("operator is not in the reflection class: {0}")]
    NotReflectionClass(String),
    #[error("no power k <= {cap} reaches operator norm {gamma}; spectral radius too close to 1")]
    ContractionCapExceeded { cap: usize, gamma: f64 },
    #[error("series did not meet tolerance {tol} within {iterations} terms")]
    SeriesDidNotConverge { tol: f64, iterations: usize },
}

/// Serializable description of a kernel.
///
/// `blockwise` kernels round-trip losslessly; the closed forms carry their
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `G(u, v) = c`.
    Constant { c: f64 },
    /// Zero on the diagonal blocks of the `split` partition; `upper` on
    /// `[0, split] x (split, 1]`, `lower` on `(split, 1] x [0, split]`.
    Bipartite { split: f64, upper: f64, lower: f64 },
    /// Constant on each rectangle of the row/column partitions defined by
    /// interior edges in `(0, 1)`. `values[i][j]` is the value on the i-th
    /// row band and j-th column band.
    Block {
        row_edges: Vec<f64>,
        col_edges: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// Clusters given by interior `edges`; `within[l]` on the l-th diagonal
    /// block, `cross` elsewhere.
    Clustered {
        edges: Vec<f64>,
        within: Vec<f64>,
        cross: f64,
    },
    /// Circular band: `(1 - eps) / alpha` when the circle distance between
    /// `u` and `v` is at most `alpha / 2`, so each row integrates to
    /// `1 - eps`.
    Ring { eps: f64, alpha: f64 },
    /// `a * u^u_exp * v^v_exp`.
    PowerLaw { a: f64, u_exp: f64, v_exp: f64 },
    /// `a + b sin(2 pi u) + c sin(2 pi v)` with `a > |b| + |c|`.
    Sine { a: f64, b: f64, c: f64 },
    /// Explicit values on the uniform partition, row-major.
    Blockwise { values: Vec<Vec<f64>> },
}

impl KernelSpec {
    /// The spec of the transposed kernel. Exact for every family.
    pub fn transposed(&self) -> KernelSpec {
        match self {
            KernelSpec::Constant { c } => KernelSpec::Constant { c: *c },
            KernelSpec::Bipartite {
                split,
                upper,
                lower,
            } => KernelSpec::Bipartite {
                split: *split,
                upper: *lower,
                lower: *upper,
            },
            KernelSpec::Block {
                row_edges,
                col_edges,
                values,
            } => {
                let rows = values.len();
                let cols = if rows == 0 { 0 } else { values[0].len() };
                let mut t = vec![vec![0.0; rows]; cols];
                for (i, row) in values.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        t[j][i] = *v;
                    }
                }
                KernelSpec::Block {
                    row_edges: col_edges.clone(),
                    col_edges: row_edges.clone(),
                    values: t,
                }
            }
            KernelSpec::Clustered { .. } | KernelSpec::Ring { .. } => self.clone(),
            KernelSpec::PowerLaw { a, u_exp, v_exp } => KernelSpec::PowerLaw {
                a: *a,
                u_exp: *v_exp,
                v_exp: *u_exp,
            },
            KernelSpec::Sine { a, b, c } => KernelSpec::Sine {
                a: *a,
                b: *c,
                c: *b,
            },
            KernelSpec::Blockwise { values } => {
                let m = values.len();
                let mut t = vec![vec![0.0; m]; m];
                for (i, row) in values.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        t[j][i] = *v;
                    }
                }
                KernelSpec::Blockwise { values: t }
            }
        }
    }
}

/// A kernel on the unit square together with its discretization resolution.
///
/// Immutable after construction; all operations are pure.
#[derive(Debug, Clone)]
pub struct Kernel {
    spec: KernelSpec,
    resolution: usize,
}

impl Kernel {
    /// Validate a spec and build the kernel.
    pub fn from_spec(spec: KernelSpec) -> Result<Kernel, KernelError> {
        Self::with_resolution(spec, DEFAULT_RESOLUTION)
    }

    pub fn with_resolution(spec: KernelSpec, resolution: usize) -> Result<Kernel, KernelError> {
        if resolution == 0 {
            return Err(KernelError::BadParameter(
                "discretization resolution must be positive".into(),
            ));
        }
        validate_spec(&spec)?;
        Ok(Kernel { spec, resolution })
    }

    /// Build and additionally require membership in the reflection class.
    pub fn reflection_from_spec(spec: KernelSpec) -> Result<Kernel, KernelError> {
        let k = Self::from_spec(spec)?;
        let verdict = k.reflection_class_check(1e-9);
        if !verdict.in_class_r {
            return Err(KernelError::NotReflectionClass(verdict.describe()));
        }
        Ok(k)
    }

    pub fn constant(c: f64) -> Kernel {
        Kernel::from_spec(KernelSpec::Constant { c }).expect("constant kernels need c >= 0")
    }

    /// Blockwise kernel from explicit uniform-grid values.
    pub fn blockwise(values: Vec<Vec<f64>>) -> Result<Kernel, KernelError> {
        Kernel::from_spec(KernelSpec::Blockwise { values })
    }

    /// Blockwise lift of a routing matrix: value `N * P[i][j]` on the
    /// `(i, j)` cell of the uniform `N`-partition.
    pub fn from_matrix(p: &[Vec<f64>]) -> Result<Kernel, KernelError> {
        let n = p.len();
        if n == 0 || p.iter().any(|row| row.len() != n) {
            return Err(KernelError::BadMatrixShape);
        }
        for (i, row) in p.iter().enumerate() {
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if v < 0.0 {
                    return Err(KernelError::NegativeMatrixEntry { row: i, col: j });
                }
                sum += v;
            }
            if sum > 1.0 + 1e-12 {
                return Err(KernelError::RowSumExceedsOne { row: i, sum });
            }
        }
        let scale = n as f64;
        let values = p
            .iter()
            .map(|row| row.iter().map(|v| scale * v).collect())
            .collect();
        Kernel::blockwise(values)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Pointwise kernel value.
    pub fn value(&self, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let v = v.clamp(0.0, 1.0);
        match &self.spec {
            KernelSpec::Constant { c } => *c,
            KernelSpec::Bipartite {
                split,
                upper,
                lower,
            } => {
                let ul = u <= *split;
                let vl = v <= *split;
                match (ul, vl) {
                    (true, false) => *upper,
                    (false, true) => *lower,
                    _ => 0.0,
                }
            }
            KernelSpec::Block {
                row_edges,
                col_edges,
                values,
            } => {
                let i = band_index(u, row_edges);
                let j = band_index(v, col_edges);
                values[i][j]
            }
            KernelSpec::Clustered {
                edges,
                within,
                cross,
            } => {
                let i = band_index(u, edges);
                let j = band_index(v, edges);
                if i == j {
                    within[i]
                } else {
                    *cross
                }
            }
            KernelSpec::Ring { eps, alpha } => {
                let d = (u - v).abs();
                let circ = d.min(1.0 - d);
                if circ <= alpha / 2.0 {
                    (1.0 - eps) / alpha
                } else {
                    0.0
                }
            }
            KernelSpec::PowerLaw { a, u_exp, v_exp } => a * u.powf(*u_exp) * v.powf(*v_exp),
            KernelSpec::Sine { a, b, c } => {
                a + b * (2.0 * std::f64::consts::PI * u).sin()
                    + c * (2.0 * std::f64::consts::PI * v).sin()
            }
            KernelSpec::Blockwise { values } => {
                let m = values.len();
                let i = crate::profile::unit_cell_index(u, m);
                let j = crate::profile::unit_cell_index(v, m);
                values[i][j]
            }
        }
    }

    /// Smallest uniform grid on which the kernel is exactly blockwise, when
    /// one exists.
    pub fn uniform_resolution(&self) -> Option<usize> {
        match &self.spec {
            KernelSpec::Constant { .. } => Some(1),
            KernelSpec::Bipartite { split, .. } => uniform_grid_for_edges(&[*split]),
            KernelSpec::Block {
                row_edges,
                col_edges,
                ..
            } => {
                let mut edges = row_edges.clone();
                edges.extend_from_slice(col_edges);
                uniform_grid_for_edges(&edges)
            }
            KernelSpec::Clustered { edges, .. } => uniform_grid_for_edges(edges),
            KernelSpec::Blockwise { values } => Some(values.len()),
            _ => None,
        }
    }

    /// Resolution used for grid computations: the exact uniform grid when
    /// available, otherwise the configured discretization resolution.
    pub fn natural_resolution(&self) -> usize {
        self.uniform_resolution().unwrap_or(self.resolution)
    }

    /// Kernel values on the uniform `m x m` grid (midpoint samples).
    ///
    /// Exact when the kernel is blockwise on a grid dividing `m`; errors when
    /// `m` is not a multiple of the kernel's own grid.
    pub fn matrix(&self, m: usize) -> Result<Vec<f64>, KernelError> {
        if m == 0 {
            return Err(KernelError::GridMismatch("zero grid size".into()));
        }
        if let Some(m0) = self.uniform_resolution() {
            if m % m0 != 0 {
                return Err(KernelError::GridMismatch(format!(
                    "kernel lives on a {m0}-cell grid; {m} is not a multiple"
                )));
            }
        }
        let mut vals = Vec::with_capacity(m * m);
        for i in 0..m {
            let u = (i as f64 + 0.5) / m as f64;
            for j in 0..m {
                let v = (j as f64 + 0.5) / m as f64;
                vals.push(self.value(u, v));
            }
        }
        Ok(vals)
    }

    /// Apply the integral operator to a function sampled on `f.len()` cells.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>, KernelError> {
        let m = f.len();
        let vals = self.matrix(m)?;
        let mut out = vec![0.0; m];
        let inv = 1.0 / m as f64;
        for i in 0..m {
            let row = &vals[i * m..(i + 1) * m];
            out[i] = inv * row.iter().zip(f).map(|(a, x)| a * x).sum::<f64>();
        }
        Ok(out)
    }

    /// Apply the operator to the spatial dimension of a field, independently
    /// at every time index.
    pub fn apply_field(&self, x: &PathField) -> Result<PathField, KernelError> {
        let op = DiscreteOp::from_kernel(self, x.cells())?;
        let mut out = PathField::zero(x.cells(), *x.grid());
        op.apply_field(x, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Kernel {
        Kernel {
            spec: self.spec.transposed(),
            resolution: self.resolution,
        }
    }

    /// Operator composition; the result is blockwise on the common grid and
    /// exact when both kernels are blockwise.
    pub fn compose(&self, other: &Kernel) -> Result<Kernel, KernelError> {
        let m = common_resolution(self, other)?;
        let a = self.matrix(m)?;
        let b = other.matrix(m)?;
        let c = kernel_product(&a, &b, m);
        let values = (0..m)
            .map(|i| c[i * m..(i + 1) * m].to_vec())
            .collect::<Vec<_>>();
        Ok(Kernel {
            spec: KernelSpec::Blockwise { values },
            resolution: self.resolution.max(other.resolution),
        })
    }

    /// `sup_v integral |G(u, v)| du`; exact for blockwise kernels, a grid
    /// approximation (refined by raising the resolution) for closed forms.
    pub fn op_norm(&self) -> f64 {
        let m = self.natural_resolution();
        let vals = self.matrix(m).expect("natural resolution always fits");
        op_norm_of_values(&vals, m)
    }

    /// Operator norm of the difference with `other` on their common grid.
    pub fn op_norm_diff(&self, other: &Kernel) -> Result<f64, KernelError> {
        let m = common_resolution(self, other)?;
        self.op_norm_diff_at(other, m)
    }

    pub fn op_norm_diff_at(&self, other: &Kernel, m: usize) -> Result<f64, KernelError> {
        let a = self.matrix(m)?;
        let b = other.matrix(m)?;
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        Ok(op_norm_of_values(&diff, m))
    }

    /// Perron root of the discretized operator via shifted power iteration.
    ///
    /// Exact (up to `tol`) for blockwise kernels by the matrix-operator
    /// correspondence; reported together with the resolution for closed
    /// forms.
    pub fn spectral_radius(&self, tol: f64) -> SpectralEstimate {
        let m = self.natural_resolution();
        let vals = self.matrix(m).expect("natural resolution always fits");
        spectral_radius_of_values(&vals, m, tol)
    }

    /// Membership check for the reflection class.
    pub fn reflection_class_check(&self, spectral_tol: f64) -> ReflectionVerdict {
        let m = self.natural_resolution();
        let vals = self.matrix(m).expect("natural resolution always fits");
        let mut nonnegative = true;
        'outer: for i in 0..m {
            for j in 0..m {
                if vals[i * m + j] < -CLASS_NORM_TOL {
                    nonnegative = false;
                    break 'outer;
                }
            }
        }
        let op_norm = op_norm_of_values(&vals, m);
        let sr = spectral_radius_of_values(&vals, m, spectral_tol);
        ReflectionVerdict {
            nonnegative,
            op_norm,
            spectral_radius_estimate: sr.value,
            spectral_tolerance: spectral_tol,
            in_class_r: nonnegative
                && op_norm <= 1.0 + CLASS_NORM_TOL
                && sr.value < 1.0 - CLASS_RADIUS_MARGIN,
        }
    }

    /// Smallest `k <= cap` with `|F^(k)|_op <= gamma`, with the associated
    /// Lipschitz constants.
    pub fn bounded_parameters(&self, gamma: f64) -> Result<ContractionCertificate, KernelError> {
        if !(0.0 < gamma && gamma < 1.0) {
            return Err(KernelError::BadParameter(format!(
                "gamma must lie in (0, 1), got {gamma}"
            )));
        }
        let verdict = self.reflection_class_check(1e-9);
        if !verdict.in_class_r {
            return Err(KernelError::NotReflectionClass(verdict.describe()));
        }
        let m = self.natural_resolution();
        let base = self.matrix(m)?;
        let mut power = base.clone();
        for k in 1..=CONTRACTION_POWER_CAP {
            if op_norm_of_values(&power, m) <= gamma {
                return Ok(ContractionCertificate::new(gamma, k));
            }
            power = kernel_product(&power, &base, m);
        }
        Err(KernelError::ContractionCapExceeded {
            cap: CONTRACTION_POWER_CAP,
            gamma,
        })
    }

    /// Apply `(1 - F)^{-1}` to `f` by summing the power series until the
    /// certificate tail bound drops below `tol`; the residual
    /// `|(1 - F) s - f|_1` is verified before returning.
    pub fn neumann_apply(&self, f: &[f64], tol: f64) -> Result<Vec<f64>, KernelError> {
        let cert = self.bounded_parameters(0.5)?;
        let tail_factor = cert.inverse_norm_bound;
        let m = f.len();
        let vals = self.matrix(m)?;
        let mut sum = f.to_vec();
        let mut term = f.to_vec();
        let mut next = vec![0.0; m];
        let cap = 100_000usize;
        for _ in 0..cap {
            apply_values(&vals, m, &term, &mut next);
            std::mem::swap(&mut term, &mut next);
            for (s, t) in sum.iter_mut().zip(&term) {
                *s += t;
            }
            if l1_norm(&term) * tail_factor <= 0.5 * tol {
                // residual check: (1 - F) sum - f
                apply_values(&vals, m, &sum, &mut next);
                let resid: f64 = sum
                    .iter()
                    .zip(&next)
                    .zip(f)
                    .map(|((s, fs), x)| (s - fs - x).abs())
                    .sum::<f64>()
                    / m as f64;
                if resid <= tol {
                    return Ok(sum);
                }
            }
        }
        Err(KernelError::SeriesDidNotConverge {
            tol,
            iterations: cap,
        })
    }
}

/// Outcome of a reflection-class membership check.
#[derive(Debug, Clone, Serialize)]
pub struct ReflectionVerdict {
    pub nonnegative: bool,
    pub op_norm: f64,
    pub spectral_radius_estimate: f64,
    pub spectral_tolerance: f64,
    pub in_class_r: bool,
}

impl ReflectionVerdict {
    pub fn describe(&self) -> String {
        format!(
            "nonnegative={}, op_norm={:.6e}, spectral_radius={:.6e}",
            self.nonnegative, self.op_norm, self.spectral_radius_estimate
        )
    }
}

/// Contraction certificate `(gamma, k)` with the derived Lipschitz constants
/// of the regulator and reflection maps.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ContractionCertificate {
    pub gamma: f64,
    pub k: usize,
    /// `k / (1 - gamma)`, the regulator Lipschitz constant.
    pub psi_lipschitz: f64,
    /// `1 + 2k / (1 - gamma)`, the reflected-process Lipschitz constant.
    pub phi_lipschitz: f64,
    /// Bound on `|(1 - F)^{-1}|_op`, equal to `k / (1 - gamma)`.
    pub inverse_norm_bound: f64,
}

impl ContractionCertificate {
    pub fn new(gamma: f64, k: usize) -> Self {
        let ratio = k as f64 / (1.0 - gamma);
        ContractionCertificate {
            gamma,
            k,
            psi_lipschitz: ratio,
            phi_lipschitz: 1.0 + 2.0 * ratio,
            inverse_norm_bound: ratio,
        }
    }

    /// Re-check the certified power bound on the kernel's discretization.
    pub fn verify(&self, kernel: &Kernel) -> Result<bool, KernelError> {
        let m = kernel.natural_resolution();
        let base = kernel.matrix(m)?;
        let mut power = base.clone();
        for _ in 1..self.k {
            power = kernel_product(&power, &base, m);
        }
        Ok(op_norm_of_values(&power, m) <= self.gamma + 1e-12)
    }

    /// A certificate with the same `gamma` valid for any reflection-class
    /// kernel certified at a smaller `k` (operator norm at most one makes
    /// larger powers no worse).
    pub fn relaxed_to(&self, k: usize) -> Self {
        ContractionCertificate::new(self.gamma, k.max(self.k))
    }
}

/// Spectral radius estimate together with convergence metadata.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub resolution: usize,
}

/// Dense kernel-values operator pinned to a fixed grid, for solver inner
/// loops.
#[derive(Debug, Clone)]
pub struct DiscreteOp {
    m: usize,
    values: Vec<f64>,
}

impl DiscreteOp {
    pub fn from_kernel(kernel: &Kernel, m: usize) -> Result<DiscreteOp, KernelError> {
        Ok(DiscreteOp {
            m,
            values: kernel.matrix(m)?,
        })
    }

    /// Matrix acting on station vectors without the cell-measure weight (the
    /// finite-network reflection path).
    pub fn from_matrix_transposed(p: &[Vec<f64>]) -> DiscreteOp {
        let n = p.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                // transposed entry, scaled so that the 1/m quadrature weight
                // in apply() cancels: (1/n) * (n * p[j][i]) = p[j][i]
                values[i * n + j] = n as f64 * p[j][i];
            }
        }
        DiscreteOp { m: n, values }
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        apply_values(&self.values, self.m, x, out);
    }

    pub fn apply_field(&self, x: &PathField, out: &mut PathField) {
        debug_assert_eq!(x.cells(), self.m);
        let k = x.grid().len();
        let inv = 1.0 / self.m as f64;
        for i in 0..self.m {
            let row = &self.values[i * self.m..(i + 1) * self.m];
            let out_row = out.row_mut(i);
            out_row.fill(0.0);
            for (j, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let x_row = x.row(j);
                for t in 0..k {
                    out_row[t] += a * x_row[t];
                }
            }
            for v in out_row.iter_mut() {
                *v *= inv;
            }
        }
    }
}

/// Spectral radius of a plain square matrix (no quadrature weight), used for
/// routing-matrix validation.
pub fn matrix_spectral_radius(p: &[Vec<f64>], tol: f64) -> SpectralEstimate {
    let n = p.len();
    let mut flat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // fold the 1/m quadrature weight away by pre-scaling
            flat[i * n + j] = n as f64 * p[i][j];
        }
    }
    spectral_radius_of_values(&flat, n, tol)
}

fn validate_spec(spec: &KernelSpec) -> Result<(), KernelError> {
    let bad = |msg: String| Err(KernelError::BadParameter(msg));
    match spec {
        KernelSpec::Constant { c } => {
            if !c.is_finite() || *c < 0.0 {
                return bad(format!("constant value must be finite and >= 0, got {c}"));
            }
        }
        KernelSpec::Bipartite {
            split,
            upper,
            lower,
        } => {
            if !(0.0 < *split && *split < 1.0) {
                return bad(format!("bipartite split must lie in (0, 1), got {split}"));
            }
            if *upper < 0.0 || *lower < 0.0 || !upper.is_finite() || !lower.is_finite() {
                return bad("bipartite block values must be finite and >= 0".into());
            }
        }
        KernelSpec::Block {
            row_edges,
            col_edges,
            values,
        } => {
            validate_edges(row_edges)?;
            validate_edges(col_edges)?;
            let rows = row_edges.len() + 1;
            let cols = col_edges.len() + 1;
            if values.len() != rows || values.iter().any(|r| r.len() != cols) {
                return bad(format!(
                    "block values must be {rows} x {cols} to match the partitions"
                ));
            }
            for (i, row) in values.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if !v.is_finite() || *v < 0.0 {
                        return Err(KernelError::NegativeValue {
                            row: i,
                            col: j,
                            value: *v,
                        });
                    }
                }
            }
        }
        KernelSpec::Clustered {
            edges,
            within,
            cross,
        } => {
            validate_edges(edges)?;
            if within.len() != edges.len() + 1 {
                return bad(format!(
                    "need {} within-cluster values, got {}",
                    edges.len() + 1,
                    within.len()
                ));
            }
            if within.iter().any(|v| !v.is_finite() || *v < 0.0)
                || !cross.is_finite()
                || *cross < 0.0
            {
                return bad("cluster values must be finite and >= 0".into());
            }
        }
        KernelSpec::Ring { eps, alpha } => {
            if !(0.0 < *eps && *eps < 1.0) || !(0.0 < *alpha && *alpha < 1.0) {
                return bad(format!(
                    "ring parameters need eps, alpha in (0, 1), got eps={eps}, alpha={alpha}"
                ));
            }
        }
        KernelSpec::PowerLaw { a, u_exp, v_exp } => {
            if !(*a > 0.0) || !(*u_exp > 0.0) || !(*v_exp > 0.0) {
                return bad(format!(
                    "power-law parameters must be positive, got a={a}, u_exp={u_exp}, v_exp={v_exp}"
                ));
            }
        }
        KernelSpec::Sine { a, b, c } => {
            if !(*a <= 1.0 && *a > b.abs() + c.abs()) {
                return bad(format!(
                    "sine family needs 1 >= a > |b| + |c|, got a={a}, b={b}, c={c}"
                ));
            }
        }
        KernelSpec::Blockwise { values } => {
            let m = values.len();
            if m == 0 || values.iter().any(|r| r.len() != m) {
                return bad("blockwise values must form a nonempty square".into());
            }
            for (i, row) in values.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return bad(format!("non-finite value in cell ({i}, {j})"));
                    }
                    if *v < 0.0 {
                        return Err(KernelError::NegativeValue {
                            row: i,
                            col: j,
                            value: *v,
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

fn validate_edges(edges: &[f64]) -> Result<(), KernelError> {
    let mut prev = 0.0;
    for &e in edges {
        if !(e > prev && e < 1.0) {
            return Err(KernelError::BadParameter(format!(
                "partition edges must be strictly increasing inside (0, 1), got {edges:?}"
            )));
        }
        prev = e;
    }
    Ok(())
}

/// Band index of `u` for interior edges: band 0 is `[0, e_1]`, band i is
/// `(e_i, e_{i+1}]`.
fn band_index(u: f64, edges: &[f64]) -> usize {
    edges.partition_point(|e| *e < u)
}

/// Smallest uniform grid (up to a cap) on which all edges are grid points.
fn uniform_grid_for_edges(edges: &[f64]) -> Option<usize> {
    'grid: for m in 1..=MAX_COMMON_RESOLUTION {
        for &e in edges {
            let scaled = e * m as f64;
            if (scaled - scaled.round()).abs() > 1e-9 {
                continue 'grid;
            }
        }
        return Some(m);
    }
    None
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    a / gcd(a, b) * b
}

fn common_resolution(a: &Kernel, b: &Kernel) -> Result<usize, KernelError> {
    let m = match (a.uniform_resolution(), b.uniform_resolution()) {
        (Some(ma), Some(mb)) => lcm(ma, mb),
        (Some(ma), None) => ma * b.resolution.div_ceil(ma),
        (None, Some(mb)) => mb * a.resolution.div_ceil(mb),
        (None, None) => a.resolution.max(b.resolution),
    };
    if m > MAX_COMMON_RESOLUTION {
        return Err(KernelError::GridMismatch(format!(
            "common grid of {m} cells exceeds the {MAX_COMMON_RESOLUTION}-cell cap"
        )));
    }
    Ok(m)
}

fn apply_values(vals: &[f64], m: usize, x: &[f64], out: &mut [f64]) {
    let inv = 1.0 / m as f64;
    for i in 0..m {
        let row = &vals[i * m..(i + 1) * m];
        out[i] = inv * row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Kernel values of the composition: `C = (1/m) A B` entrywise on the grid.
fn kernel_product(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let inv = 1.0 / m as f64;
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        let a_row = &a[i * m..(i + 1) * m];
        let c_row = &mut c[i * m..(i + 1) * m];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * m..(k + 1) * m];
            for (cv, &bkj) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bkj;
            }
        }
        for cv in c_row.iter_mut() {
            *cv *= inv;
        }
    }
    c
}

/// Operator norm from kernel values: max over columns of the cell-measure
/// column sums.
fn op_norm_of_values(vals: &[f64], m: usize) -> f64 {
    let inv = 1.0 / m as f64;
    (0..m)
        .map(|j| (0..m).map(|i| vals[i * m + j].abs()).sum::<f64>() * inv)
        .fold(0.0, f64::max)
}

fn l1_norm(f: &[f64]) -> f64 {
    f.iter().map(|v| v.abs()).sum::<f64>() / f.len() as f64
}

/// Shifted power iteration on the discretized operator. The shift makes
/// periodic (e.g. bipartite) structures converge; for nonnegative kernels the
/// Perron root shifts by exactly the same amount, which is subtracted back.
fn spectral_radius_of_values(vals: &[f64], m: usize, tol: f64) -> SpectralEstimate {
    let norm = op_norm_of_values(vals, m);
    if norm == 0.0 {
        return SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
            resolution: m,
        };
    }
    let shift = 0.5 * norm;
    let inv = 1.0 / m as f64;
    let mut x = vec![1.0; m];
    let mut y = vec![0.0; m];
    let mut lambda_prev = f64::NAN;
    for iter in 1..=POWER_ITER_CAP {
        for i in 0..m {
            let row = &vals[i * m..(i + 1) * m];
            y[i] = inv * row.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + shift * x[i];
        }
        let norm_y: f64 = y.iter().map(|v| v.abs()).sum();
        if norm_y == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                converged: true,
                iterations: iter,
                resolution: m,
            };
        }
        let norm_x: f64 = x.iter().map(|v| v.abs()).sum();
        let lambda = norm_y / norm_x;
        for v in y.iter_mut() {
            *v /= norm_y;
        }
        std::mem::swap(&mut x, &mut y);
        if iter > 4 && (lambda - lambda_prev).abs() <= tol * lambda.max(1e-12) {
            return SpectralEstimate {
                value: (lambda - shift).max(0.0),
                converged: true,
                iterations: iter,
                resolution: m,
            };
        }
        lambda_prev = lambda;
    }
    // Gelfand fallback: |F^(n)|_op^(1/n) by repeated squaring with
    // log-scaling to avoid underflow.
    let mut w = vals.to_vec();
    let mut log_scale = 0.0f64;
    let mut n = 1u64;
    for _ in 0..13 {
        let s = op_norm_of_values(&w, m);
        if s == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                converged: false,
                iterations: POWER_ITER_CAP,
                resolution: m,
            };
        }
        for v in w.iter_mut() {
            *v /= s;
        }
        log_scale = 2.0 * (log_scale + s.ln());
        w = kernel_product(&w.clone(), &w, m);
        n *= 2;
    }
    let final_norm = op_norm_of_values(&w, m).max(f64::MIN_POSITIVE);
    let value = ((log_scale / 2.0 + final_norm.ln()) / n as f64).exp();
    SpectralEstimate {
        value,
        converged: false,
        iterations: POWER_ITER_CAP,
        resolution: m,
    }
}
