//! Command-line front end: network simulation sweeps, fluid solves,
//! reflection solves, path-measure distances and convergence studies.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fluidq::fluid::{fluid_limit, FluidSpec};
use fluidq::harness::{run_convergence_study, write_study_outputs, StudyConfig};
use fluidq::measures::{wasserstein1, AtomSet};
use fluidq::network::{
    fluid_scale, scaled_initial, simulate, spec_from_kernel, NetworkSpec, ScalingConfig,
    SimLimits, SimSeed,
};
use fluidq::skorokhod::{reflect, SolverConfig};
use fluidq::{Kernel, KernelSpec, PathField, Profile};

#[derive(Parser)]
#[command(
    name = "fluidq",
    about = "Growing Jackson networks: simulation, reflection solves, fluid limits and convergence studies",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a network and write fluid-scaled trajectories per replication.
    Simulate {
        /// Network description (JSON; explicit rates or kernel-sampled).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Fluid horizon.
        #[arg(long = "T", default_value_t = 2.0)]
        t_end: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the fluid system for a kernel and rate profiles.
    Fluid {
        /// Fluid description (JSON: kernel and profiles).
        #[arg(long)]
        spec: PathBuf,
        /// Spatial resolution (cells).
        #[arg(long = "M", default_value_t = 256)]
        cells: usize,
        #[arg(long = "T", default_value_t = 2.0)]
        t_end: f64,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        /// Output CSV; complementarity residuals go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the reflection problem for a free process and kernel.
    Skorokhod {
        /// Free process as a path-field CSV (cell_index,t,value).
        #[arg(long)]
        x: PathBuf,
        /// Kernel spec JSON.
        #[arg(long)]
        kernel: PathBuf,
        /// Output directory (y.csv, z.csv, diagnostics.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Distances between finitely supported path measures.
    Measure {
        /// First atom set CSV (atom,weight,t,value).
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "w1")]
        metric: String,
        /// Optional CSV for the optimal coupling (from,to,mass).
        #[arg(long)]
        coupling: Option<PathBuf>,
    },
    /// Run a convergence study from a config file.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// On-disk description of a simulation target.
#[derive(Serialize, Deserialize)]
struct SimulateSpecFile {
    network: NetworkInput,
    q0: Profile,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum NetworkInput {
    Explicit {
        lambda: Vec<f64>,
        mu: Vec<f64>,
        routing: Vec<Vec<f64>>,
    },
    FromKernel {
        kernel: KernelSpec,
        lambda: Profile,
        mu: Profile,
        n: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct FluidSpecFile {
    kernel: KernelSpec,
    lambda: Profile,
    mu: Profile,
    q0: Profile,
}

#[derive(Serialize)]
struct RunManifest {
    spec_sha256: String,
    stations: usize,
    alpha: f64,
    t_end: f64,
    dt: f64,
    seed: u64,
    replications: usize,
    events_per_replication: Vec<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            spec,
            alpha,
            t_end,
            dt,
            seed,
            reps,
            out,
        } => cmd_simulate(&spec, alpha, t_end, dt, seed, reps, &out),
        Command::Fluid {
            spec,
            cells,
            t_end,
            dt,
            out,
        } => cmd_fluid(&spec, cells, t_end, dt, &out),
        Command::Skorokhod { x, kernel, out } => cmd_skorokhod(&x, &kernel, &out),
        Command::Measure {
            a,
            b,
            metric,
            coupling,
        } => cmd_measure(&a, &b, &metric, coupling.as_deref()),
        Command::Converge { config, out } => cmd_converge(&config, &out),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = hex_digest(&bytes);
    let value =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((value, digest))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    spec_path: &Path,
    alpha: f64,
    t_end: f64,
    dt: f64,
    seed: u64,
    reps: usize,
    out: &Path,
) -> Result<ExitCode> {
    let (file, digest): (SimulateSpecFile, String) = read_json(spec_path)?;
    let net: NetworkSpec = match file.network {
        NetworkInput::Explicit {
            lambda,
            mu,
            routing,
        } => NetworkSpec::new(lambda, mu, routing)?,
        NetworkInput::FromKernel {
            kernel,
            lambda,
            mu,
            n,
        } => spec_from_kernel(&Kernel::from_spec(kernel)?, &lambda, &mu, n)?,
    };
    let n = net.stations();
    let scaling = ScalingConfig { alpha, t_end, dt };
    let q0 = scaled_initial(&file.q0, n, alpha);
    fs::create_dir_all(out)?;

    let mut events = Vec::with_capacity(reps);
    for rep in 0..reps {
        let sample = simulate(
            &net,
            &q0,
            scaling.sim_horizon(n),
            SimSeed::new(seed, rep as u64),
            &SimLimits::default(),
        )?;
        events.push(sample.counts.total_events());
        let scaled = fluid_scale(&sample, &scaling, n)?;
        let path = out.join(format!("rep_{rep:04}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "station,t,qbar,ibar")?;
        for i in 0..n {
            for (j, t) in scaled.queue.grid().times().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    i,
                    t,
                    scaled.queue.value(i, j),
                    scaled.idle.value(i, j)
                )?;
            }
        }
    }
    let manifest = RunManifest {
        spec_sha256: digest,
        stations: n,
        alpha,
        t_end,
        dt,
        seed,
        replications: reps,
        events_per_replication: events,
    };
    serde_json::to_writer_pretty(File::create(out.join("manifest.json"))?, &manifest)?;
    println!(
        "simulated {reps} replication(s) of {n} stations onto {}",
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_fluid(spec_path: &Path, cells: usize, t_end: f64, dt: f64, out: &Path) -> Result<ExitCode> {
    let (file, _): (FluidSpecFile, String) = read_json(spec_path)?;
    let spec = FluidSpec {
        kernel: Kernel::from_spec(file.kernel)?,
        lambda: file.lambda,
        mu: file.mu,
        q0: file.q0,
    };
    let steps = (t_end / dt).round() as usize;
    let grid = fluidq::TimeGrid::new(t_end, steps.max(1))?;
    let sol = fluid_limit(&spec, cells, grid, &SolverConfig::default())?;

    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "cell_index,t,qbar,ibar")?;
    for c in 0..cells {
        for (j, t) in grid.times().enumerate() {
            writeln!(
                w,
                "{},{},{},{}",
                c,
                t,
                sol.queue.value(c, j),
                sol.idle.value(c, j)
            )?;
        }
    }
    drop(w);

    let residuals_path = out.with_extension("residuals.csv");
    let mut w = BufWriter::new(File::create(&residuals_path)?);
    writeln!(w, "cell_index,complementarity_residual")?;
    for (c, r) in sol.complementarity.iter().enumerate() {
        writeln!(w, "{c},{r}")?;
    }
    println!(
        "fluid solve: {} iterations, fixed-point residual {:.3e}; wrote {} and {}",
        sol.iterations,
        sol.fixed_point_residual,
        out.display(),
        residuals_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_skorokhod(x_path: &Path, kernel_path: &Path, out: &Path) -> Result<ExitCode> {
    let x = PathField::read_csv(BufReader::new(
        File::open(x_path).with_context(|| format!("opening {}", x_path.display()))?,
    ))?;
    let (spec, _): (KernelSpec, String) = read_json(kernel_path)?;
    let kernel = Kernel::from_spec(spec)?;
    let sol = reflect(&x, &kernel, &SolverConfig::default())?;
    fs::create_dir_all(out)?;
    sol.y
        .write_csv(BufWriter::new(File::create(out.join("y.csv"))?))?;
    sol.clamped_z(1e-9)
        .write_csv(BufWriter::new(File::create(out.join("z.csv"))?))?;
    #[derive(Serialize)]
    struct Diagnostics<'a> {
        iterations: usize,
        converged: bool,
        fixed_point_residual: f64,
        complementarity: &'a [f64],
        certificate_gamma: f64,
        certificate_k: usize,
    }
    serde_json::to_writer_pretty(
        File::create(out.join("diagnostics.json"))?,
        &Diagnostics {
            iterations: sol.iterations,
            converged: sol.converged,
            fixed_point_residual: sol.fixed_point_residual,
            complementarity: &sol.complementarity,
            certificate_gamma: sol.certificate.gamma,
            certificate_k: sol.certificate.k,
        },
    )?;
    println!(
        "reflection solved in {} iterations (residual {:.3e}); outputs in {}",
        sol.iterations,
        sol.fixed_point_residual,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_measure(
    a_path: &Path,
    b_path: &Path,
    metric: &str,
    coupling: Option<&Path>,
) -> Result<ExitCode> {
    if metric != "w1" {
        bail!("unsupported metric {metric:?}; only \"w1\" is available");
    }
    let a = AtomSet::read_csv(BufReader::new(File::open(a_path)?))?;
    let b = AtomSet::read_csv(BufReader::new(File::open(b_path)?))?;
    let plan = wasserstein1(&a, &b)?;
    println!("{}", plan.value);
    if let Some(path) = coupling {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "from,to,mass")?;
        for (i, j, mass) in &plan.flows {
            writeln!(w, "{i},{j},{mass}")?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_converge(config_path: &Path, out: &Path) -> Result<ExitCode> {
    let (cfg, _): (StudyConfig, String) = read_json(config_path)?;
    let outcome = run_convergence_study(&cfg)?;
    write_study_outputs(&outcome, out)?;
    let report = &outcome.report;
    println!("n      coupling      stderr        w1            kernel_gap    intermediate");
    for s in &report.per_size {
        println!(
            "{:<6} {:<13.6e} {:<13.6e} {:<13.6e} {:<13.6e} {:<13.6e}",
            s.n,
            s.mean_coupling_error,
            s.coupling_stderr,
            s.w1_mean,
            s.deterministic.kernel_gap,
            s.deterministic.intermediate_vs_fluid
        );
    }
    if let Some(fit) = report.coupling_fit {
        println!(
            "coupling slope {:.4} (intercept {:.4}, residual {:.3e})",
            fit.slope, fit.intercept, fit.residual
        );
    } else {
        println!("coupling slope undefined (degenerate errors)");
    }
    println!(
        "flags: decreasing={} w1_decreasing={} slope_in_range={:?} bounds={} decomposition={} dual={}",
        report.flags.coupling_decreasing,
        report.flags.w1_decreasing,
        report.flags.slope_in_range,
        report.flags.bounds_ok,
        report.flags.decomposition_ok,
        report.flags.dual_bounds_ok
    );
    if report.pass() {
        println!("all checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("bound violation or failed check");
        Ok(ExitCode::from(2))
    }
}
