//! Exact event simulation of finite open Jackson networks and fluid scaling
//! of the sampled trajectories.
//!
//! The simulator runs a single-clock jump chain: the total rate is the sum
//! of all arrival rates plus the service rates of busy stations, holding
//! times are exponential at that rate, and the event is chosen with
//! probability proportional to its rate. Routing after a service completion
//! follows the routing matrix row, with the row deficit as the exit
//! probability. This is distributionally identical to running independent
//! Poisson clocks per (station, destination) pair, at O(log N) bookkeeping
//! per event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::AtomSet;
use crate::operators::{matrix_spectral_radius, Kernel, KernelError, KernelSpec};
use crate::path::{PathError, PathField, TimeGrid};
use crate::profile::Profile;

/// Largest tolerated self-loop probability is `SELF_LOOP_BUDGET / N`;
/// order-one diagonals fall outside the dense-scaling regime.
const SELF_LOOP_BUDGET: f64 = 8.0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("station count must be positive")]
    Empty,
    #[error("rate vectors must have one entry per station")]
    ShapeMismatch,
    #[error("service rate at station {0} must be strictly positive")]
    NonPositiveService(usize),
    #[error("arrival rate at station {0} must be nonnegative")]
    NegativeArrival(usize),
    #[error("routing row {row} sums to {sum} > 1")]
    RowSumExceedsOne { row: usize, sum: f64 },
    #[error("routing entry ({row}, {col}) is negative")]
    NegativeRouting { row: usize, col: usize },
    #[error("network is closed: every exit probability is zero")]
    ClosedNetwork,
    #[error("routing matrix spectral radius {0} is not strictly below 1")]
    SpectralRadiusTooLarge(f64),
    #[error("self-loop probability {p} at station {station} exceeds the dense-scaling budget {budget}")]
    SelfLoopTooLarge { station: usize, p: f64, budget: f64 },
    #[error("event budget of {0} events exhausted before the horizon")]
    EventBudgetExceeded(u64),
    #[error("simulated horizon {horizon} is shorter than the required {required}")]
    HorizonTooShort { horizon: f64, required: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// A finite open Jackson network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub routing: Vec<Vec<f64>>,
    #[serde(skip)]
    pub p_exit: Vec<f64>,
}

impl NetworkSpec {
    pub fn new(
        lambda: Vec<f64>,
        mu: Vec<f64>,
        routing: Vec<Vec<f64>>,
    ) -> Result<NetworkSpec, NetworkError> {
        let n = lambda.len();
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        if mu.len() != n || routing.len() != n || routing.iter().any(|r| r.len() != n) {
            return Err(NetworkError::ShapeMismatch);
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(NetworkError::NegativeArrival(i));
            }
        }
        for (i, &m) in mu.iter().enumerate() {
            if !(m > 0.0) || !m.is_finite() {
                return Err(NetworkError::NonPositiveService(i));
            }
        }
        let mut p_exit = Vec::with_capacity(n);
        for (i, row) in routing.iter().enumerate() {
            let mut sum = 0.0;
            for (j, &p) in row.iter().enumerate() {
                if p < 0.0 {
                    return Err(NetworkError::NegativeRouting { row: i, col: j });
                }
                sum += p;
            }
            if sum > 1.0 + 1e-12 {
                return Err(NetworkError::RowSumExceedsOne { row: i, sum });
            }
            p_exit.push((1.0 - sum).max(0.0));
        }
        if p_exit.iter().all(|p| *p <= 1e-12) {
            return Err(NetworkError::ClosedNetwork);
        }
        let budget = (SELF_LOOP_BUDGET / n as f64).min(1.0);
        for (i, row) in routing.iter().enumerate() {
            if row[i] > budget + 1e-12 {
                return Err(NetworkError::SelfLoopTooLarge {
                    station: i,
                    p: row[i],
                    budget,
                });
            }
        }
        let rho = matrix_spectral_radius(&routing, 1e-10);
        if rho.value >= 1.0 - 1e-9 {
            return Err(NetworkError::SpectralRadiusTooLarge(rho.value));
        }
        Ok(NetworkSpec {
            lambda,
            mu,
            routing,
            p_exit,
        })
    }

    pub fn stations(&self) -> usize {
        self.lambda.len()
    }

    /// Re-derive the exit probabilities, e.g. after deserialization.
    pub fn validate(self) -> Result<NetworkSpec, NetworkError> {
        NetworkSpec::new(self.lambda, self.mu, self.routing)
    }
}

/// Sample a network from a kernel: `P[i][j] = G(i/N, j/N) / N` with rates
/// taken at the block representatives `i/N`.
///
/// The `ring` family is materialized as its finite nearest-neighbor model
/// (`(1 - eps) / k` on the `k = 2 * floor(alpha N / 2)` circular neighbors,
/// no self-loop) rather than sampled pointwise, which would double-count the
/// band boundary and the diagonal at finite `N`.
pub fn spec_from_kernel(
    kernel: &Kernel,
    lambda: &Profile,
    mu: &Profile,
    n: usize,
) -> Result<NetworkSpec, NetworkError> {
    if n == 0 {
        return Err(NetworkError::Empty);
    }
    let routing = match kernel.spec() {
        KernelSpec::Ring { eps, alpha } => ring_routing(n, *eps, *alpha)?,
        _ => {
            let scale = 1.0 / n as f64;
            (1..=n)
                .map(|i| {
                    let u = i as f64 / n as f64;
                    (1..=n)
                        .map(|j| scale * kernel.value(u, j as f64 / n as f64))
                        .collect()
                })
                .collect()
        }
    };
    // surface an over-unit row as the kernel-mass violation it is
    for (i, row) in routing.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if sum > 1.0 + 1e-12 {
            return Err(NetworkError::RowSumExceedsOne { row: i, sum });
        }
    }
    NetworkSpec::new(
        lambda.sample_right_endpoints(n),
        mu.sample_right_endpoints(n),
        routing,
    )
}

fn ring_routing(n: usize, eps: f64, alpha: f64) -> Result<Vec<Vec<f64>>, NetworkError> {
    let k = 2 * ((alpha * n as f64).floor() as usize / 2);
    if k == 0 {
        return Err(NetworkError::Empty);
    }
    let p = (1.0 - eps) / k as f64;
    let half = k / 2;
    let mut routing = vec![vec![0.0; n]; n];
    for (i, row) in routing.iter_mut().enumerate() {
        for d in 1..=half {
            row[(i + d) % n] += p;
            row[(i + n - d) % n] += p;
        }
    }
    Ok(routing)
}

/// Initial queue lengths `round(N^alpha * q0(i/N))` for a mass profile.
pub fn scaled_initial(q0: &Profile, n: usize, alpha: f64) -> Vec<u64> {
    let scale = (n as f64).powf(alpha);
    (1..=n)
        .map(|i| (scale * q0.eval(i as f64 / n as f64)).round().max(0.0) as u64)
        .collect()
}

/// Fluid scaling parameters: horizon `N^alpha * t_end` in simulation time,
/// reported on the `[0, t_end]` grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub alpha: f64,
    pub t_end: f64,
    pub dt: f64,
}

impl ScalingConfig {
    pub fn grid(&self) -> Result<TimeGrid, NetworkError> {
        let steps = (self.t_end / self.dt).round();
        if !(steps >= 1.0) || (steps * self.dt - self.t_end).abs() > 1e-9 * self.t_end {
            return Err(NetworkError::Path(PathError::BadGrid(format!(
                "dt {} does not divide the horizon {}",
                self.dt, self.t_end
            ))));
        }
        Ok(TimeGrid::new(self.t_end, steps as usize)?)
    }

    pub fn time_scale(&self, n: usize) -> f64 {
        (n as f64).powf(self.alpha)
    }

    pub fn sim_horizon(&self, n: usize) -> f64 {
        self.time_scale(n) * self.t_end
    }
}

/// Seed and stream pair; replications use one stream each so parallel runs
/// are order-independent.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimSeed {
    pub seed: u64,
    pub stream: u64,
}

impl SimSeed {
    pub fn new(seed: u64, stream: u64) -> Self {
        SimSeed { seed, stream }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimLimits {
    pub max_events: u64,
}

impl Default for SimLimits {
    fn default() -> Self {
        SimLimits {
            max_events: 20_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival,
    Exit,
    Route { to: u32 },
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub station: u32,
    pub kind: EventKind,
}

/// Per-station event totals for conservation checks.
#[derive(Debug, Clone, Default, Serialize)]
pub struct EventCounts {
    pub arrivals: Vec<u64>,
    pub services: Vec<u64>,
    pub routed_in: Vec<u64>,
    pub exits: Vec<u64>,
}

impl EventCounts {
    pub fn total_events(&self) -> u64 {
        self.arrivals.iter().sum::<u64>() + self.services.iter().sum::<u64>()
    }
}

/// One simulated trajectory: the full jump log plus event totals.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub q0: Vec<u64>,
    pub horizon: f64,
    pub events: Vec<Event>,
    pub counts: EventCounts,
    pub final_q: Vec<u64>,
}

/// Statistically exact trajectory of the network CTMC up to `horizon`.
pub fn simulate(
    spec: &NetworkSpec,
    q0: &[u64],
    horizon: f64,
    seed: SimSeed,
    limits: &SimLimits,
) -> Result<SamplePath, NetworkError> {
    let n = spec.stations();
    if q0.len() != n {
        return Err(NetworkError::ShapeMismatch);
    }
    let mut rng = seed.rng();

    // static arrival cumulative rates
    let mut lambda_cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &l in &spec.lambda {
        acc += l;
        lambda_cum.push(acc);
    }
    let total_arrival = acc;

    // per-row routing cumulative probabilities
    let routing_cum: Vec<Vec<f64>> = spec
        .routing
        .iter()
        .map(|row| {
            let mut acc = 0.0;
            row.iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect();

    let mut q: Vec<u64> = q0.to_vec();
    let mut busy = FenwickTree::new(n);
    for i in 0..n {
        if q[i] > 0 {
            busy.add(i, spec.mu[i]);
        }
    }

    let mut counts = EventCounts {
        arrivals: vec![0; n],
        services: vec![0; n],
        routed_in: vec![0; n],
        exits: vec![0; n],
    };
    let mut events: Vec<Event> = Vec::new();
    let mut clock = KahanSum::default();
    let mut updates_since_rebuild = 0usize;

    loop {
        let total = total_arrival + busy.total();
        if total <= 0.0 {
            break;
        }
        let hold = Exp::new(total)
            .expect("total rate is positive")
            .sample(&mut rng);
        clock.add(hold);
        if clock.value() >= horizon {
            break;
        }
        if events.len() as u64 >= limits.max_events {
            return Err(NetworkError::EventBudgetExceeded(limits.max_events));
        }
        let time = clock.value();
        let pick = rng.random::<f64>() * total;
        if pick < total_arrival {
            let station = lower_bound(&lambda_cum, pick);
            q[station] += 1;
            if q[station] == 1 {
                busy.add(station, spec.mu[station]);
                updates_since_rebuild += 1;
            }
            counts.arrivals[station] += 1;
            events.push(Event {
                time,
                station: station as u32,
                kind: EventKind::Arrival,
            });
        } else {
            let mut station = busy.search(pick - total_arrival);
            if q[station] == 0 {
                // floating-point edge of the tree search; take any busy station
                station = (0..n).find(|&i| q[i] > 0).expect("some station is busy");
            }
            counts.services[station] += 1;
            let draw = rng.random::<f64>();
            let row = &routing_cum[station];
            let kind = if draw < *row.last().unwrap() {
                let to = lower_bound(row, draw);
                q[to] += 1;
                if q[to] == 1 {
                    busy.add(to, spec.mu[to]);
                    updates_since_rebuild += 1;
                }
                counts.routed_in[to] += 1;
                EventKind::Route { to: to as u32 }
            } else {
                counts.exits[station] += 1;
                EventKind::Exit
            };
            q[station] -= 1;
            if q[station] == 0 {
                busy.remove(station, spec.mu[station]);
                updates_since_rebuild += 1;
            }
            events.push(Event {
                time,
                station: station as u32,
                kind,
            });
        }
        if updates_since_rebuild >= 1 << 20 {
            busy.rebuild(&q, &spec.mu);
            updates_since_rebuild = 0;
        }
    }

    Ok(SamplePath {
        q0: q0.to_vec(),
        horizon,
        events,
        counts,
        final_q: q,
    })
}

/// Fluid-scaled trajectories on the output grid.
#[derive(Debug, Clone)]
pub struct ScaledPaths {
    pub stations: usize,
    pub alpha: f64,
    /// `Q(N^alpha t) / N^alpha` per station.
    pub queue: PathField,
    /// Scaled cumulative idle time.
    pub idle: PathField,
    /// Scaled cumulative busy time, accumulated independently of `idle`.
    pub busy: PathField,
}

/// Scale a sample path onto the fluid grid.
pub fn fluid_scale(
    path: &SamplePath,
    cfg: &ScalingConfig,
    n: usize,
) -> Result<ScaledPaths, NetworkError> {
    let required = cfg.sim_horizon(n);
    if path.horizon < required - 1e-9 {
        return Err(NetworkError::HorizonTooShort {
            horizon: path.horizon,
            required,
        });
    }
    let grid = cfg.grid()?;
    let stations = path.q0.len();
    let scale = cfg.time_scale(n);
    let mut queue = PathField::zero(stations, grid);
    let mut idle = PathField::zero(stations, grid);
    let mut busy = PathField::zero(stations, grid);

    let mut state = ScaleState {
        q: path.q0.clone(),
        idle_acc: vec![KahanSum::default(); stations],
        busy_acc: vec![KahanSum::default(); stations],
        since: vec![0.0; stations],
    };

    let mut next_grid = 0usize;
    for ev in &path.events {
        next_grid = record_grid_points(
            &grid, scale, next_grid, ev.time, &state, &mut queue, &mut idle, &mut busy,
        );
        state.apply(ev);
    }
    record_grid_points(
        &grid,
        scale,
        next_grid,
        path.horizon + 1e-12,
        &state,
        &mut queue,
        &mut idle,
        &mut busy,
    );

    Ok(ScaledPaths {
        stations,
        alpha: cfg.alpha,
        queue,
        idle,
        busy,
    })
}

struct ScaleState {
    q: Vec<u64>,
    idle_acc: Vec<KahanSum>,
    busy_acc: Vec<KahanSum>,
    since: Vec<f64>,
}

impl ScaleState {
    fn enqueue(&mut self, i: usize, time: f64) {
        self.q[i] += 1;
        if self.q[i] == 1 {
            self.idle_acc[i].add(time - self.since[i]);
            self.since[i] = time;
        }
    }

    fn apply(&mut self, ev: &Event) {
        let station = ev.station as usize;
        match ev.kind {
            EventKind::Arrival => self.enqueue(station, ev.time),
            EventKind::Route { to } => self.enqueue(to as usize, ev.time),
            EventKind::Exit => {}
        }
        if !matches!(ev.kind, EventKind::Arrival) {
            self.q[station] -= 1;
            if self.q[station] == 0 {
                self.busy_acc[station].add(ev.time - self.since[station]);
                self.since[station] = ev.time;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn record_grid_points(
    grid: &TimeGrid,
    scale: f64,
    start: usize,
    upto: f64,
    state: &ScaleState,
    queue: &mut PathField,
    idle: &mut PathField,
    busy: &mut PathField,
) -> usize {
    let stations = state.q.len();
    let mut j = start;
    while j <= grid.steps() && scale * grid.time(j) <= upto {
        let s = scale * grid.time(j);
        for i in 0..stations {
            queue.set(i, j, state.q[i] as f64 / scale);
            let (iv, bv) = if state.q[i] == 0 {
                (
                    state.idle_acc[i].value() + (s - state.since[i]),
                    state.busy_acc[i].value(),
                )
            } else {
                (
                    state.idle_acc[i].value(),
                    state.busy_acc[i].value() + (s - state.since[i]),
                )
            };
            idle.set(i, j, iv / scale);
            busy.set(i, j, bv / scale);
        }
        j += 1;
    }
    j
}

/// Empirical measure of the scaled queue paths: one atom of weight `1/N` per
/// station.
pub fn empirical_measure(paths: &ScaledPaths) -> AtomSet {
    AtomSet::from_field(&paths.queue)
}

/// First index with `cum[i] > target`.
fn lower_bound(cum: &[f64], target: f64) -> usize {
    let mut lo = 0usize;
    let mut hi = cum.len();
    while lo < hi {
        let mid = (lo + hi) / 2;
        if cum[mid] > target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo.min(cum.len() - 1)
}

/// Compensated accumulator; keeps long simulations' bookkeeping at ulp-level
/// drift.
#[derive(Debug, Clone, Copy, Default)]
struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum
    }
}

/// Prefix-sum tree over station service rates for O(log N) event selection.
#[derive(Debug)]
struct FenwickTree {
    tree: Vec<f64>,
}

impl FenwickTree {
    fn new(n: usize) -> Self {
        FenwickTree {
            tree: vec![0.0; n + 1],
        }
    }

    fn add(&mut self, mut i: usize, v: f64) {
        i += 1;
        while i < self.tree.len() {
            self.tree[i] += v;
            i += i & i.wrapping_neg();
        }
    }

    fn remove(&mut self, i: usize, v: f64) {
        self.add(i, -v);
    }

    fn total(&self) -> f64 {
        self.prefix(self.tree.len() - 1)
    }

    fn prefix(&self, mut i: usize) -> f64 {
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }

    /// Smallest index whose prefix sum exceeds `target`.
    fn search(&self, mut target: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0usize;
        let mut mask = n.next_power_of_two();
        while mask > 0 {
            let next = pos + mask;
            if next <= n && self.tree[next] <= target {
                target -= self.tree[next];
                pos = next;
            }
            mask >>= 1;
        }
        pos.min(n - 1)
    }

    fn rebuild(&mut self, q: &[u64], mu: &[f64]) {
        self.tree.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..q.len() {
            if q[i] > 0 {
                self.add(i, mu[i]);
            }
        }
    }
}
