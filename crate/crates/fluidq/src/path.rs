//! Discretized path fields: values on space cells crossed with a uniform
//! time grid.
//!
//! A [`PathField`] carries one real value per (cell, grid time) pair and is
//! the working representation for free processes, queue fields, regulators
//! and idle-time fields. Space cells follow the unit-partition convention of
//! [`crate::profile::unit_cell_index`].

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("invalid time grid: {0}")]
    BadGrid(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("cell count {cells} does not divide evenly into {target} cells")]
    RefineMismatch { cells: usize, target: usize },
    #[error("malformed field data: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Uniform time grid `0 = t_0 < t_1 < ... < t_K = K * dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Result<Self, PathError> {
        if steps == 0 || !t_end.is_finite() || t_end <= 0.0 {
            return Err(PathError::BadGrid(format!(
                "need positive horizon and at least one step, got t_end={t_end}, steps={steps}"
            )));
        }
        Ok(TimeGrid {
            steps,
            dt: t_end / steps as f64,
        })
    }

    pub fn from_dt(dt: f64, steps: usize) -> Result<Self, PathError> {
        if steps == 0 || !dt.is_finite() || dt <= 0.0 {
            return Err(PathError::BadGrid(format!(
                "need positive dt and at least one step, got dt={dt}, steps={steps}"
            )));
        }
        Ok(TimeGrid { steps, dt })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t_end(&self) -> f64 {
        self.dt * self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        self.dt * j as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|j| self.time(j))
    }

    pub fn compatible(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && (self.dt - other.dt).abs() <= 1e-12 * self.dt.max(other.dt)
    }
}

/// Values on `cells` space cells at every grid time, row-major by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PathField {
    cells: usize,
    grid: TimeGrid,
    values: Vec<f64>,
}

impl PathField {
    pub fn zero(cells: usize, grid: TimeGrid) -> Self {
        PathField {
            cells,
            grid,
            values: vec![0.0; cells * grid.len()],
        }
    }

    /// Build from a function of (cell midpoint, time).
    pub fn from_fn(cells: usize, grid: TimeGrid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(cells * grid.len());
        for c in 0..cells {
            let u = (c as f64 + 0.5) / cells as f64;
            for j in 0..grid.len() {
                values.push(f(u, grid.time(j)));
            }
        }
        PathField {
            cells,
            grid,
            values,
        }
    }

    /// Build from per-cell rows of grid values.
    pub fn from_rows(rows: &[Vec<f64>], grid: TimeGrid) -> Result<Self, PathError> {
        let cells = rows.len();
        let mut values = Vec::with_capacity(cells * grid.len());
        for row in rows {
            if row.len() != grid.len() {
                return Err(PathError::GridMismatch(format!(
                    "row has {} values, grid has {} points",
                    row.len(),
                    grid.len()
                )));
            }
            values.extend_from_slice(row);
        }
        Ok(PathField {
            cells,
            grid,
            values,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn value(&self, cell: usize, j: usize) -> f64 {
        self.values[cell * self.grid.len() + j]
    }

    pub fn set(&mut self, cell: usize, j: usize, v: f64) {
        self.values[cell * self.grid.len() + j] = v;
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        let k = self.grid.len();
        &self.values[cell * k..(cell + 1) * k]
    }

    pub fn row_mut(&mut self, cell: usize) -> &mut [f64] {
        let k = self.grid.len();
        &mut self.values[cell * k..(cell + 1) * k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn check_same_shape(&self, other: &PathField) -> Result<(), PathError> {
        if self.cells != other.cells || !self.grid.compatible(&other.grid) {
            return Err(PathError::GridMismatch(format!(
                "{}x{} field vs {}x{} field",
                self.cells,
                self.grid.len(),
                other.cells,
                other.grid.len()
            )));
        }
        Ok(())
    }

    /// The path norm: mean over cells of the sup over grid times of |value|.
    pub fn norm_t1(&self) -> f64 {
        if self.cells == 0 {
            return 0.0;
        }
        let sum: f64 = (0..self.cells)
            .map(|c| self.row(c).iter().fold(0.0f64, |a, v| a.max(v.abs())))
            .sum();
        sum / self.cells as f64
    }

    /// `norm_t1` of the difference without materializing it.
    pub fn norm_t1_diff(&self, other: &PathField) -> Result<f64, PathError> {
        self.check_same_shape(other)?;
        let k = self.grid.len();
        let sum: f64 = (0..self.cells)
            .map(|c| {
                let a = &self.values[c * k..(c + 1) * k];
                let b = &other.values[c * k..(c + 1) * k];
                a.iter()
                    .zip(b)
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
            })
            .sum();
        Ok(sum / self.cells as f64)
    }

    /// Per-cell sup over grid times of |self - other|.
    pub fn sup_gap_per_cell(&self, other: &PathField) -> Result<Vec<f64>, PathError> {
        self.check_same_shape(other)?;
        Ok((0..self.cells)
            .map(|c| {
                self.row(c)
                    .iter()
                    .zip(other.row(c))
                    .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
            })
            .collect())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |a, v| a.min(*v))
    }

    /// True when every cell path starts nonnegative and is nondecreasing up
    /// to `tol`.
    pub fn is_increasing(&self, tol: f64) -> bool {
        (0..self.cells).all(|c| {
            let row = self.row(c);
            row[0] >= -tol && row.windows(2).all(|w| w[1] >= w[0] - tol)
        })
    }

    /// Largest single-step increment over all cells.
    pub fn max_step_increment(&self) -> f64 {
        (0..self.cells)
            .map(|c| {
                self.row(c)
                    .windows(2)
                    .fold(0.0f64, |a, w| a.max(w[1] - w[0]))
            })
            .fold(0.0, f64::max)
    }

    /// Blockwise refinement to `target` cells (`target` a multiple of the
    /// current cell count). Values are copied, so the refined field equals
    /// the original as a function on `[0, 1]`.
    pub fn refine(&self, target: usize) -> Result<PathField, PathError> {
        if target == 0 || target % self.cells != 0 {
            return Err(PathError::RefineMismatch {
                cells: self.cells,
                target,
            });
        }
        let rep = target / self.cells;
        let k = self.grid.len();
        let mut values = Vec::with_capacity(target * k);
        for c in 0..self.cells {
            for _ in 0..rep {
                values.extend_from_slice(&self.values[c * k..(c + 1) * k]);
            }
        }
        Ok(PathField {
            cells: target,
            grid: self.grid,
            values,
        })
    }

    /// Averages groups of cells down to `blocks` cells (`cells` a multiple of
    /// `blocks`). Exact cell-average coarsening.
    pub fn block_average(&self, blocks: usize) -> Result<PathField, PathError> {
        if blocks == 0 || self.cells % blocks != 0 {
            return Err(PathError::RefineMismatch {
                cells: self.cells,
                target: blocks,
            });
        }
        let group = self.cells / blocks;
        let k = self.grid.len();
        let mut out = PathField::zero(blocks, self.grid);
        for b in 0..blocks {
            for j in 0..k {
                let mut s = 0.0;
                for g in 0..group {
                    s += self.value(b * group + g, j);
                }
                out.set(b, j, s / group as f64);
            }
        }
        Ok(out)
    }

    /// CSV layout: header `cell_index,t,value`, rows cell-major.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), PathError> {
        writeln!(w, "cell_index,t,value")?;
        for c in 0..self.cells {
            for j in 0..self.grid.len() {
                writeln!(w, "{},{},{}", c, self.grid.time(j), self.value(c, j))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<PathField, PathError> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        let mut first_cell_done = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (lineno == 0 && line.starts_with("cell_index")) {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64, PathError> {
                s.ok_or_else(|| PathError::Malformed(format!("line {}: too few columns", lineno + 1)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| PathError::Malformed(format!("line {}: {e}", lineno + 1)))
            };
            let cell = parse(parts.next())? as usize;
            let t = parse(parts.next())?;
            let v = parse(parts.next())?;
            if cell == rows.len() {
                rows.push(Vec::new());
                first_cell_done = cell > 0;
            } else if cell + 1 != rows.len() {
                return Err(PathError::Malformed(format!(
                    "line {}: cell indices must be grouped in order",
                    lineno + 1
                )));
            }
            if !first_cell_done {
                times.push(t);
            }
            rows.last_mut().unwrap().push(v);
        }
        if rows.is_empty() || times.len() < 2 {
            return Err(PathError::Malformed(
                "need at least one cell and two grid times".into(),
            ));
        }
        let dt = times[1] - times[0];
        let grid = TimeGrid::from_dt(dt, times.len() - 1)?;
        PathField::from_rows(&rows, grid)
    }

    /// Compact binary layout: magic `PFB1`, then `cells: u64`, `steps: u64`,
    /// `dt: f64`, then row-major values as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), PathError> {
        w.write_all(b"PFB1")?;
        w.write_all(&(self.cells as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<PathField, PathError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PFB1" {
            return Err(PathError::Malformed("bad magic, expected PFB1".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let cells = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let steps = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        let grid = TimeGrid::from_dt(dt, steps)?;
        let n = cells
            .checked_mul(grid.len())
            .ok_or_else(|| PathError::Malformed("field size overflow".into()))?;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        Ok(PathField {
            cells,
            grid,
            values,
        })
    }
}
