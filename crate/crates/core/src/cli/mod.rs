//! Batch front end: `check`, `solve`, `benchmark` and `grid` subcommands.
//!
//! Every run resolves its TOML config, writes `manifest.toml` to the output
//! directory, then computes and writes headered CSV files. Exit status is 0
//! on a converged or valid result, 2 on non-convergence, 1 on errors.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::coefficients::{audit_lipschitz, check_h1, check_h2, contraction_constants_h1, contraction_constants_h2, ContractionConstants};
use crate::error::{Error, Result};
use crate::forward_sim::{make_ensemble, TimeGrid};
use crate::lq_benchmark::{benchmark_fbsde, ClosedFormSolution};
use crate::mf_solver::{solve, solve_coupled_appendix, ConvergenceReport, MfSolution, Scheme};
use crate::smart_grid::{
    battery_constraint_report, cost_central, cost_region, coupling_residuals, price_path, simulate_policy, solution_paths,
    assemble_mfc_fbsde, CouplingMode,
};
use config::{Instance, RunConfig};
use output::{float, write_manifest, Table};

#[derive(Debug, Parser)]
#[command(name = "mfbsdej", version, about = "Picard solvers for mean-field FBSDEs with jumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sampled monotonicity checks, Lipschitz audit and contraction certificates.
    Check(RunArgs),
    /// Picard solve of the configured instance.
    Solve(RunArgs),
    /// Closed-form LQ benchmark and its solver comparison.
    Benchmark(RunArgs),
    /// Storage-network simulation under a policy or a coupling.
    Grid(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    NotConverged,
}

impl Outcome {
    pub fn code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::NotConverged => 2,
        }
    }

    fn from_flag(ok: bool) -> Self {
        if ok {
            Outcome::Success
        } else {
            Outcome::NotConverged
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Check(_) => "check",
            Command::Solve(_) => "solve",
            Command::Benchmark(_) => "benchmark",
            Command::Grid(_) => "grid",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Check(a) | Command::Solve(a) | Command::Benchmark(a) | Command::Grid(a) => a,
        }
    }
}

/// Parse arguments, run, and map the result to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(o) => o.code(),
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Resolved config, with flags overriding file values.
pub fn resolve(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args.out.clone().or_else(|| cfg.output.clone().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

pub fn run(command: &Command) -> Result<Outcome> {
    let args = command.args();
    if args.workers == 0 {
        return Err(Error::InvalidParameter("--workers must be at least 1".into()));
    }
    let (cfg, out) = resolve(args)?;
    write_manifest(&out, command.name(), args.workers, &cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Check(_) => run_check(&cfg, &out),
        Command::Solve(_) => run_solve(&cfg, &out),
        Command::Benchmark(_) => run_benchmark(&cfg, &out),
        Command::Grid(_) => run_grid(&cfg, &out),
    })
}

fn certificate_rows(t: &mut Table, section: &str, c: &ContractionConstants) {
    for (name, v) in c.rows() {
        t.push(vec![section.into(), name, float(v), String::new(), String::new()]);
    }
    for th in &c.thresholds {
        t.push(vec![format!("{section}_threshold"), th.name.clone(), float(th.lhs), float(th.rhs), th.passed.to_string()]);
    }
    t.push(vec![section.into(), "valid".into(), String::new(), String::new(), c.valid.to_string()]);
}

/// `check.csv`: section, name, value, reference, passed.
pub fn run_check(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let inst = cfg.instance.build()?;
    let constants = inst
        .constants
        .ok_or_else(|| Error::Config("check needs an instance with declared Lipschitz constants".into()))?;
    let intensity = inst.intensity.as_ref();
    let horizon = cfg.simulation.horizon;
    let h1 = check_h1(&inst.coeffs, &constants, intensity, &cfg.check)?;
    let h2 = check_h2(&inst.coeffs, &constants, intensity, &cfg.check)?;
    let audit = audit_lipschitz(&inst.coeffs, &constants, intensity, &cfg.check)?;
    let c1 = contraction_constants_h1(&constants, horizon)?;
    let c2 = contraction_constants_h2(&constants, horizon)?;

    let mut t = Table::new(&["section", "name", "value", "reference", "passed"]);
    for r in [&h1, &h2] {
        let s = r.assumption.to_lowercase();
        for c in [&r.monotonicity, &r.terminal] {
            t.push(vec![s.clone(), c.name.clone(), float(c.worst_margin), "0".into(), c.passed.to_string()]);
        }
        t.push(vec![s.clone(), "violations".into(), (r.monotonicity.violations + r.terminal.violations).to_string(), "0".into(), r.passed.to_string()]);
    }
    for a in &audit {
        t.push(vec!["lipschitz".into(), format!("{}.{}", a.function, a.argument), float(a.observed), float(a.declared), a.consistent.to_string()]);
    }
    certificate_rows(&mut t, "certificate_h1", &c1);
    certificate_rows(&mut t, "certificate_h2", &c2);
    t.write(out, "check.csv")?;
    Ok(Outcome::from_flag(h1.passed || h2.passed))
}

fn convergence_table(report: &ConvergenceReport) -> Table {
    let mut t = Table::new(&[
        "iteration",
        "x_terminal",
        "y",
        "z",
        "k",
        "distance",
        "ratio",
        "inner_iterations",
        "inner_change",
        "relaxation",
    ]);
    for r in &report.rows {
        t.push(vec![
            r.iteration.to_string(),
            float(r.x_terminal),
            float(r.y),
            float(r.z),
            float(r.k),
            float(r.distance),
            r.ratio.map(float).unwrap_or_default(),
            r.inner_iterations.to_string(),
            float(r.inner_change),
            float(r.relaxation),
        ]);
    }
    t
}

/// Cross-particle means of `X` and `Y` at every grid time.
fn solution_table(sol: &MfSolution) -> Table {
    let d = sol.iterate.dims;
    let mut header = vec!["t".to_string()];
    header.extend((0..d.x).map(|c| format!("x{c}")));
    header.extend((0..d.y).map(|c| format!("y{c}")));
    let mut t = Table::new(&header);
    let ens = &sol.ensemble;
    let n = ens.particles as f64;
    for i in 0..=ens.grid.steps {
        let mut row = vec![ens.grid.time(i)];
        for c in 0..d.x {
            row.push((0..ens.particles).map(|p| ens.x_at(p, i)[c]).sum::<f64>() / n);
        }
        for c in 0..d.y {
            row.push((0..ens.particles).map(|p| sol.iterate.y_at(p, i)[c]).sum::<f64>() / n);
        }
        t.push_floats(&row);
    }
    t
}

fn solve_instance(cfg: &RunConfig, inst: &Instance, grid: TimeGrid, particles: usize) -> Result<MfSolution> {
    let ens = make_ensemble(particles, grid, inst.noise.clone(), cfg.seed)?;
    match cfg.picard.scheme {
        Scheme::Appendix => solve_coupled_appendix(&inst.coeffs, &ens, &cfg.basis, &cfg.picard, inst.constants.as_ref()),
        _ => solve(&inst.coeffs, &ens, &cfg.basis, &cfg.picard),
    }
}

/// Solve the configured instance with the configured scheme.
pub fn solve_config(cfg: &RunConfig) -> Result<MfSolution> {
    let inst = cfg.instance.build()?;
    let sim = cfg.simulation;
    let horizon = cfg.instance.horizon().unwrap_or(sim.horizon);
    let grid = TimeGrid::new(horizon, sim.steps)?;
    sim.grid()?;
    solve_instance(cfg, &inst, grid, sim.particles)
}

/// `convergence.csv` and `solution.csv`.
pub fn run_solve(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let sol = solve_config(cfg)?;
    convergence_table(&sol.report).write(out, "convergence.csv")?;
    solution_table(&sol).write(out, "solution.csv")?;
    Ok(Outcome::from_flag(sol.report.converged))
}

/// `benchmark.csv` with the closed form and, when solved, the solver paths and errors.
pub fn run_benchmark(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let b = &cfg.benchmark;
    let oracle = ClosedFormSolution::new(&b.params, b.intervals)?;
    let grid = TimeGrid::new(b.params.horizon, b.steps)?;
    let sol = if b.solve {
        let inst = Instance { coeffs: benchmark_fbsde(&b.params)?, constants: None, noise: Default::default(), intensity: None };
        Some(solve_instance(cfg, &inst, grid, b.particles.max(1))?)
    } else {
        None
    };
    let mut header = vec!["t", "phi_bar", "psi_bar", "price_bar", "s_bar", "alpha_bar", "y_bar"];
    if sol.is_some() {
        header.extend(["s_solver", "y_solver", "s_error", "y_error"]);
    }
    let mut t = Table::new(&header);
    for i in 0..=grid.steps {
        let time = grid.time(i);
        let (s_bar, y_bar) = (oracle.s_bar(time), oracle.y_bar(time)?);
        let mut row =
            vec![time, oracle.phi_bar(time)?, oracle.psi_bar(time), oracle.price_bar(time)?, s_bar, oracle.alpha_bar(time)?, y_bar];
        if let Some(s) = &sol {
            let n = s.ensemble.particles as f64;
            let sm = (0..s.ensemble.particles).map(|p| s.ensemble.x_at(p, i)[0]).sum::<f64>() / n;
            let ym = (0..s.ensemble.particles).map(|p| s.iterate.y_at(p, i)[0]).sum::<f64>() / n;
            row.extend([sm, ym, sm - s_bar, ym - y_bar]);
        }
        t.push_floats(&row);
    }
    t.write(out, "benchmark.csv")?;
    match sol {
        Some(s) => {
            convergence_table(&s.report).write(out, "convergence.csv")?;
            Ok(Outcome::from_flag(s.report.converged))
        }
        None => Ok(Outcome::Success),
    }
}

/// `grid.csv` (per-time aggregates) and `grid_summary.csv` (costs, constraints, residuals).
pub fn run_grid(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let gc = cfg.grid.as_ref().ok_or_else(|| Error::Config("grid needs a [grid] section".into()))?;
    let model = &gc.model;
    model.validate()?;
    let grid = cfg.simulation.grid()?;
    let ens = make_ensemble(cfg.simulation.particles, grid, model.noise_spec(), cfg.seed)?;
    let mut summary = Table::new(&["metric", "value"]);
    let (paths, outcome, nu_bar) = match (&gc.coupling, &gc.policy) {
        (Some(mode), _) => {
            let coeffs = assemble_mfc_fbsde(model, mode)?;
            let sol = solve(&coeffs, &ens, &cfg.basis, &cfg.picard)?;
            convergence_table(&sol.report).write(out, "convergence.csv")?;
            let (nash, mfc) = coupling_residuals(model, mode, &sol)?;
            summary.push(vec!["nash_residual_max".into(), float(nash)]);
            summary.push(vec!["mfc_residual_max".into(), float(mfc)]);
            let paths = solution_paths(model, mode, &sol)?;
            let nu_bar = match mode {
                CouplingMode::Nash { nu_bar } => {
                    nu_bar.iter().map(|p| (0..=grid.steps).map(|i| p.eval(grid.time(i))).collect()).collect()
                }
                CouplingMode::Mfc => paths.mean_alpha(),
            };
            (paths, Outcome::from_flag(sol.report.converged), nu_bar)
        }
        (None, Some(policy)) => {
            let paths = simulate_policy(model, policy, &ens)?;
            let nu_bar = paths.mean_alpha();
            (paths, Outcome::Success, nu_bar)
        }
        (None, None) => return Err(Error::Config("grid needs either grid.policy or grid.coupling".into())),
    };

    let g = model.len();
    let mut header = vec!["t".to_string(), "price".into(), "q_rest".into()];
    for r in 0..g {
        header.extend([format!("s{r}"), format!("q{r}"), format!("alpha{r}")]);
    }
    let mut t = Table::new(&header);
    let price = price_path(model, &paths, &nu_bar);
    let (ms, mq, ma) = (paths.mean_s(), paths.mean_q(), paths.mean_alpha());
    for i in 0..=grid.steps {
        let mut row = vec![grid.time(i), price[i], paths.q0[i]];
        for r in 0..g {
            row.extend([ms[r][i], mq[r][i], ma[r][i]]);
        }
        t.push_floats(&row);
    }
    t.write(out, "grid.csv")?;

    for r in 0..g {
        summary.push(vec![format!("cost_region{r}"), float(cost_region(model, &paths, r, &nu_bar))]);
    }
    summary.push(vec!["cost_central".into(), float(cost_central(model, &paths))]);
    let battery = battery_constraint_report(&paths.s, model.s_max);
    summary.push(vec!["battery_violation_fraction".into(), float(battery.violation_fraction)]);
    summary.push(vec!["battery_max_excursion".into(), float(battery.max_excursion)]);
    summary.write(out, "grid_summary.csv")?;
    Ok(outcome)
}
