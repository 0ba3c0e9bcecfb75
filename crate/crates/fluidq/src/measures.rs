//! Finitely supported measures on path space, the exact Wasserstein-1
//! distance under the uniform path metric, and Lipschitz path functionals.
//!
//! Ground distance between two grid paths is `max_t |p(t) - q(t)|`. The
//! transport problem between two atom sets is solved exactly with a
//! transportation simplex (dense cost matrix, cubic worst case — intended
//! for instances up to roughly 512 x 512 atoms).

use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::path::{PathError, PathField, TimeGrid};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("atom weights must be nonnegative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("atom set needs at least one atom")]
    Empty,
    #[error("atoms disagree with the grid: {0}")]
    GridMismatch(String),
    #[error("transport solver did not terminate within {0} pivots")]
    TransportStalled(usize),
    #[error("malformed atom data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Path(#[from] PathError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A probability measure with finitely many grid-path atoms.
#[derive(Debug, Clone)]
pub struct AtomSet {
    grid: TimeGrid,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl AtomSet {
    pub fn new(
        atoms: Vec<Vec<f64>>,
        weights: Vec<f64>,
        grid: TimeGrid,
    ) -> Result<AtomSet, MeasureError> {
        if atoms.is_empty() || atoms.len() != weights.len() {
            return Err(MeasureError::Empty);
        }
        for a in &atoms {
            if a.len() != grid.len() {
                return Err(MeasureError::GridMismatch(format!(
                    "atom has {} values, grid has {} points",
                    a.len(),
                    grid.len()
                )));
            }
        }
        if weights.iter().any(|w| *w < 0.0) {
            return Err(MeasureError::BadWeights(f64::NAN));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MeasureError::BadWeights(sum));
        }
        Ok(AtomSet {
            grid,
            atoms,
            weights,
        })
    }

    /// Equal-weight atoms.
    pub fn uniform(atoms: Vec<Vec<f64>>, grid: TimeGrid) -> Result<AtomSet, MeasureError> {
        let n = atoms.len();
        if n == 0 {
            return Err(MeasureError::Empty);
        }
        let w = 1.0 / n as f64;
        let mut weights = vec![w; n];
        // make the weights sum to exactly one
        let sum: f64 = weights.iter().sum();
        weights[n - 1] += 1.0 - sum;
        AtomSet::new(atoms, weights, grid)
    }

    /// One equal-weight atom per cell of the field.
    pub fn from_field(field: &PathField) -> AtomSet {
        let atoms = (0..field.cells())
            .map(|c| field.row(c).to_vec())
            .collect();
        AtomSet::uniform(atoms, *field.grid()).expect("fields have at least one cell")
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    /// CSV layout: header `atom,weight,t,value`, rows atom-major.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), MeasureError> {
        writeln!(w, "atom,weight,t,value")?;
        for (i, atom) in self.atoms.iter().enumerate() {
            for (j, v) in atom.iter().enumerate() {
                writeln!(w, "{},{},{},{}", i, self.weights[i], self.grid.time(j), v)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<AtomSet, MeasureError> {
        let mut atoms: Vec<Vec<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("atom")) {
                continue;
            }
            let mut parts = line.split(',');
            let mut field = |name: &str| -> Result<f64, MeasureError> {
                parts
                    .next()
                    .ok_or_else(|| {
                        MeasureError::Malformed(format!("line {}: missing {name}", lineno + 1))
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| MeasureError::Malformed(format!("line {}: {e}", lineno + 1)))
            };
            let idx = field("atom")? as usize;
            let weight = field("weight")?;
            let t = field("t")?;
            let v = field("value")?;
            if idx == atoms.len() {
                atoms.push(Vec::new());
                weights.push(weight);
            } else if idx + 1 != atoms.len() {
                return Err(MeasureError::Malformed(format!(
                    "line {}: atoms must appear in blocks in order",
                    lineno + 1
                )));
            }
            if idx == 0 {
                times.push(t);
            }
            atoms.last_mut().unwrap().push(v);
        }
        if atoms.is_empty() || times.len() < 2 {
            return Err(MeasureError::Malformed(
                "need at least one atom and two grid times".into(),
            ));
        }
        let grid = TimeGrid::from_dt(times[1] - times[0], times.len() - 1)?;
        AtomSet::new(atoms, weights, grid)
    }
}

/// Uniform distance between two grid paths.
pub fn sup_metric(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()))
}

/// An optimal coupling between two atom sets.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub value: f64,
    /// Positive flows `(source_atom, target_atom, mass)`.
    pub flows: Vec<(usize, usize, f64)>,
}

/// Exact Wasserstein-1 distance between two atom sets under the uniform
/// path metric.
pub fn wasserstein1(a: &AtomSet, b: &AtomSet) -> Result<TransportPlan, MeasureError> {
    if !a.grid.compatible(&b.grid) {
        return Err(MeasureError::GridMismatch(
            "atom sets live on different time grids".into(),
        ));
    }
    let n = a.len();
    let m = b.len();
    let cost: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ai = a.atom(i);
            (0..m).map(move |j| sup_metric(ai, b.atom(j)))
        })
        .collect();
    let mut supply = a.weights.clone();
    let mut demand = b.weights.clone();
    // balance exactly: put the rounding slack on the largest entries
    let s: f64 = supply.iter().sum();
    let d: f64 = demand.iter().sum();
    let imax = (0..n)
        .max_by(|&i, &j| supply[i].total_cmp(&supply[j]))
        .unwrap();
    let jmax = (0..m)
        .max_by(|&i, &j| demand[i].total_cmp(&demand[j]))
        .unwrap();
    let target = s.max(d);
    supply[imax] += target - s;
    demand[jmax] += target - d;
    transport_simplex(&cost, &supply, &demand)
}

/// Transportation simplex on a dense cost matrix.
///
/// Northwest-corner start, most-negative entering rule with a switch to
/// Bland's rule after a run of degenerate pivots.
fn transport_simplex(
    cost: &[f64],
    supply: &[f64],
    demand: &[f64],
) -> Result<TransportPlan, MeasureError> {
    let n = supply.len();
    let m = demand.len();
    let c = |i: usize, j: usize| cost[i * m + j];

    // basis as a spanning tree of the bipartite graph (rows 0..n, cols n..n+m)
    #[derive(Clone, Copy)]
    struct BasisCell {
        i: usize,
        j: usize,
        flow: f64,
    }
    let mut basis: Vec<BasisCell> = Vec::with_capacity(n + m - 1);
    {
        let mut rem_s = supply.to_vec();
        let mut rem_d = demand.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        while i < n && j < m {
            let f = rem_s[i].min(rem_d[j]);
            basis.push(BasisCell { i, j, flow: f });
            rem_s[i] -= f;
            rem_d[j] -= f;
            let row_done = rem_s[i] <= 0.0;
            let col_done = rem_d[j] <= 0.0;
            if row_done && col_done {
                // degenerate corner: keep the tree connected with a zero cell
                if i + 1 < n {
                    i += 1;
                } else if j + 1 < m {
                    j += 1;
                } else {
                    break;
                }
            } else if row_done {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let cost_scale = cost.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * cost_scale;
    let max_pivots = 2000 + 40 * (n + m) * (n + m).max(64);
    let mut degenerate_run = 0usize;

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m];
    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; m];
    let mut seen = vec![false; n + m];
    let mut stack: Vec<usize> = Vec::new();
    let mut parent_edge: Vec<usize> = vec![usize::MAX; n + m];

    for _pivot in 0..max_pivots {
        // potentials from the basis tree
        for a in adj.iter_mut() {
            a.clear();
        }
        for (e, cell) in basis.iter().enumerate() {
            adj[cell.i].push(e);
            adj[n + cell.j].push(e);
        }
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(0);
        seen[0] = true;
        u[0] = 0.0;
        while let Some(node) = stack.pop() {
            for &e in &adj[node] {
                let cell = &basis[e];
                let (a, b) = (cell.i, n + cell.j);
                let other = if node == a { b } else { a };
                if !seen[other] {
                    seen[other] = true;
                    if other >= n {
                        v[other - n] = c(cell.i, cell.j) - u[cell.i];
                    } else {
                        u[other] = c(cell.i, cell.j) - v[cell.j];
                    }
                    stack.push(other);
                }
            }
        }

        // entering cell
        let use_bland = degenerate_run > n + m;
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for i in 0..n {
            for j in 0..m {
                let rc = c(i, j) - u[i] - v[j];
                if rc < -tol {
                    match entering {
                        Some((_, _, best)) if rc >= best => {}
                        _ => entering = Some((i, j, rc)),
                    }
                    if use_bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej, _)) = entering else {
            let flows = basis
                .iter()
                .filter(|cell| cell.flow > 0.0)
                .map(|cell| (cell.i, cell.j, cell.flow))
                .collect::<Vec<_>>();
            let value = flows.iter().map(|&(i, j, f)| f * c(i, j)).sum();
            return Ok(TransportPlan { value, flows });
        };

        // unique tree path from row ei to col ej
        parent_edge.iter_mut().for_each(|p| *p = usize::MAX);
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        stack.push(ei);
        seen[ei] = true;
        while let Some(node) = stack.pop() {
            if node == n + ej {
                break;
            }
            for &e in &adj[node] {
                let cell = &basis[e];
                let (a, b) = (cell.i, n + cell.j);
                let other = if node == a { b } else { a };
                if !seen[other] {
                    seen[other] = true;
                    parent_edge[other] = e;
                    stack.push(other);
                }
            }
        }
        // walk back from col ej collecting the alternating cycle;
        // cycle[0] is adjacent to col ej and carries '-'
        let mut cycle: Vec<usize> = Vec::new();
        let mut node = n + ej;
        while node != ei {
            let e = parent_edge[node];
            debug_assert_ne!(e, usize::MAX, "basis must span all touched nodes");
            cycle.push(e);
            let cell = &basis[e];
            node = if node == n + cell.j { cell.i } else { n + cell.j };
        }
        let mut theta = f64::INFINITY;
        let mut leaving: Option<usize> = None;
        for (pos, &e) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                let f = basis[e].flow;
                if f < theta - 1e-18 || (f <= theta && leaving.is_none_or(|l| e < l)) {
                    theta = f;
                    leaving = Some(e);
                }
            }
        }
        let leaving = leaving.expect("cycle always has a minus edge");
        if theta <= 1e-15 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        for (pos, &e) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                basis[e].flow -= theta;
            } else {
                basis[e].flow += theta;
            }
        }
        basis[leaving] = BasisCell {
            i: ei,
            j: ej,
            flow: theta,
        };
    }
    Err(MeasureError::TransportStalled(max_pivots))
}

/// Lipschitz path functionals for empirical averages.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum Functional {
    /// `(sup_t q(t) - threshold)^+`.
    RunningMax { threshold: f64 },
    /// Trapezoid integral of the path over the grid.
    PathIntegral,
    /// `q(t)` at the nearest grid time.
    Projection { t: f64 },
}

impl Functional {
    pub fn evaluate(&self, path: &[f64], grid: &TimeGrid) -> f64 {
        match self {
            Functional::RunningMax { threshold } => {
                let sup = path.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
                (sup - threshold).max(0.0)
            }
            Functional::PathIntegral => {
                let dt = grid.dt();
                let inner: f64 = path[1..path.len() - 1].iter().sum();
                dt * (inner + 0.5 * (path[0] + path[path.len() - 1]))
            }
            Functional::Projection { .. } => path[self.snapped_index(grid).unwrap_or(0)],
        }
    }

    /// Grid index used by a projection.
    pub fn snapped_index(&self, grid: &TimeGrid) -> Option<usize> {
        match self {
            Functional::Projection { t } => {
                let j = (t / grid.dt()).round().max(0.0) as usize;
                Some(j.min(grid.steps()))
            }
            _ => None,
        }
    }

    /// True when a projection time falls off the grid and was snapped.
    pub fn snaps_off_grid(&self, grid: &TimeGrid) -> bool {
        match self {
            Functional::Projection { t } => {
                let j = (t / grid.dt()).round();
                (t - j * grid.dt()).abs() > 1e-9 * (1.0 + t.abs())
            }
            _ => false,
        }
    }

    /// Lipschitz constant with respect to the uniform path metric.
    pub fn lipschitz_constant(&self, grid: &TimeGrid) -> f64 {
        match self {
            Functional::RunningMax { .. } | Functional::Projection { .. } => 1.0,
            Functional::PathIntegral => grid.t_end(),
        }
    }
}

/// Weighted average of the functional over the atoms.
pub fn functional_average(a: &AtomSet, f: &Functional) -> f64 {
    a.atoms
        .iter()
        .zip(&a.weights)
        .map(|(atom, w)| w * f.evaluate(atom, &a.grid))
        .sum()
}
