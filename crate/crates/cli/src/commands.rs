use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use covsteer::model::initial_state_warnings;
use covsteer::program::ProgramError;
use covsteer::rollout::NoiseModel;
use covsteer::{
    allocate_risk, empirical_cantelli_check, simulate_closed_loop, synthesize, validate_spec, Error, ProblemSpec,
    RolloutOptions, SolutionStatus, Synthesis, SynthesisOptions,
};
use thiserror::Error;

use crate::config::ConfigDocument;
use crate::document::{
    check_hash, read_json, spec_hash, write_json, write_trajectories_csv, write_violations_csv, ControllerDocument,
    Overrides, ReportDocument, SaturationOverride, SolveSummary, CONTROLLER_FILE, INPUT_PLOT, PROGRAM_FILE,
    REPORT_FILE, SUMMARY_FILE, TRAJECTORIES_FILE, TRAJECTORY_PLOT, VIOLATIONS_FILE,
};
use crate::plot::{input_svg, trajectory_svg, FigureSpec};

#[derive(Debug, Parser)]
#[command(name = "covsteer", version, about = "Chance-constrained covariance steering with hard input bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate a config without solving.
    Check(ProblemArgs),
    /// Synthesize a controller.
    Solve(SolveArgs),
    /// Monte Carlo rollout of a solved controller.
    Simulate(SimulateArgs),
    /// Draw the trajectory and input figures of a rollout report.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ProblemArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Drop every input hard constraint.
    #[arg(long)]
    pub no_input_constraints: bool,
    /// `inf`, a sigma multiplier such as `3`, or `values:a,b,..`.
    #[arg(long)]
    pub saturation: Option<SaturationOverride>,
}

impl ProblemArgs {
    fn overrides(&self) -> Overrides {
        Overrides { no_input_constraints: self.no_input_constraints, saturation: self.saturation.clone() }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Sets both the gap and the feasibility tolerance.
    #[arg(long)]
    pub solver_tol: Option<f64>,
    /// Also write the assembled conic program.
    #[arg(long)]
    pub export_program: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Controller document; defaults to `<out>/controller.json`.
    #[arg(long)]
    pub controller: Option<PathBuf>,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample paths kept for plotting.
    #[arg(long)]
    pub retain: Option<usize>,
    /// Replace Gaussian noise by `±magnitude` spikes.
    #[arg(long)]
    pub spikes: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Ellipse confidence multiplier.
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    /// State components for the planar plot, as `i,j`.
    #[arg(long, default_value = "0,1", value_parser = parse_pair::<usize>)]
    pub axes: (usize, usize),
    #[arg(long, value_parser = parse_pair::<f64>)]
    pub xlim: Option<(f64, f64)>,
    #[arg(long, value_parser = parse_pair::<f64>)]
    pub ylim: Option<(f64, f64)>,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected two comma-separated values, got {s:?}"))?;
    let p = |t: &str| t.trim().parse::<T>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

/// Failure classes and their exit codes.
#[derive(Debug, Error)]
pub enum Failure {
    /// Bad config, arguments or files: exit 1.
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Infeasible(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn classify(e: Error) -> Failure {
    match &e {
        Error::Solve(s) => match s.status() {
            Some(SolutionStatus::Infeasible) => Failure::Infeasible(e.to_string()),
            Some(_) => Failure::Numerical(e.to_string()),
            None => Failure::Usage(anyhow!(e)),
        },
        Error::Linalg(_) | Error::Program(ProgramError::Linalg(_)) => Failure::Numerical(e.to_string()),
        _ => Failure::Usage(anyhow!(e)),
    }
}

/// Parses `args` (including the program name), runs the command and reports
/// failures on standard error.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let label = match f {
                Failure::Usage(_) => "error",
                Failure::Infeasible(_) => "infeasible",
                Failure::Numerical(_) => "numerical failure",
            };
            eprintln!("{label}: {f}");
            ExitCode::from(f.code())
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Check(a) => check(&a),
        Command::Solve(a) => solve(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Plot(a) => plot(&a),
    }
}

/// Loads the config, applies the overrides and validates.
pub fn load_problem(path: &Path, overrides: &Overrides) -> anyhow::Result<(ConfigDocument, ProblemSpec<f64>)> {
    let doc = ConfigDocument::load(path)?;
    let spec = overrides.apply(doc.to_spec()?)?;
    let spec = validate_spec(&spec)?;
    Ok((doc, spec))
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn check(args: &ProblemArgs) -> Result<(), Failure> {
    let (_, spec) = load_problem(&args.config, &args.overrides())?;
    let risk = allocate_risk(&spec).map_err(|e| Failure::Usage(e.into()))?;
    for w in initial_state_warnings(&spec, &risk) {
        eprintln!("warning: {w}");
    }
    println!(
        "ok: N={}, n_x={}, n_u={}, {} state constraints, {} input constraints",
        spec.horizon,
        spec.state_dim(),
        spec.input_dim(),
        spec.state_constraints.len(),
        spec.input_constraints.len()
    );
    if !risk.p.is_empty() {
        let p: Vec<String> = risk.p.iter().map(|p| p.to_string()).collect();
        println!("risk allocation: [{}] (epsilon {})", p.join(", "), risk.epsilon);
    }
    println!("spec hash: {}", spec_hash(&spec));
    Ok(())
}

/// `μ0ᵀQμ0 + tr(QΣ0)`: the `k = 0` stage cost, fixed by the initial
/// distribution.
pub fn initial_stage_cost(spec: &ProblemSpec<f64>) -> f64 {
    let mu = &spec.initial.mean;
    (mu.transpose() * spec.cost.q_mean() * mu)[(0, 0)] + (spec.cost.q_cov() * &spec.initial.cov).trace()
}

fn summarize(s: &Synthesis<f64>, hash: String) -> SolveSummary {
    SolveSummary {
        spec_hash: hash,
        status: s.solution.status,
        objective: s.solution.objective,
        objective_excluding_initial_stage: s.solution.objective - initial_stage_cost(&s.spec),
        iterations: s.solution.iterations,
        solve_time: s.solution.solve_time,
        program: s.stats.clone(),
        verification: s.verification.clone(),
        warnings: s.warnings.clone(),
    }
}

fn solve(args: &SolveArgs) -> Result<(), Failure> {
    let overrides = args.problem.overrides();
    let (doc, spec) = load_problem(&args.problem.config, &overrides)?;
    let mut options = SynthesisOptions { program: doc.solver.program(), solver: doc.solver.settings(), ..Default::default() };
    if let Some(tol) = args.solver_tol {
        options.solver.tol_gap = tol;
        options.solver.tol_feas = tol;
    }
    ensure_dir(&args.out)?;
    let synthesis = synthesize(&spec, &options).map_err(classify)?;
    for w in &synthesis.warnings {
        eprintln!("warning: {w}");
    }
    let hash = spec_hash(&synthesis.spec);
    let summary = summarize(&synthesis, hash.clone());
    let controller = ControllerDocument { spec_hash: hash.clone(), overrides, controller: synthesis.solution.clone() };
    write_json(&args.out.join(CONTROLLER_FILE), &controller)?;
    write_json(&args.out.join(SUMMARY_FILE), &summary)?;
    if args.export_program {
        write_json(&args.out.join(PROGRAM_FILE), &synthesis.program.export())?;
    }

    let st = &summary.program;
    println!("status: {}", summary.status);
    println!("objective: {:.6}", summary.objective);
    println!("objective excluding initial stage: {:.6}", summary.objective_excluding_initial_stage);
    println!("iterations: {}", summary.iterations);
    println!("solve time: {:.3} s", summary.solve_time);
    println!(
        "program: {} variables, {} zero rows, {} nonnegative rows, {} second-order cones, {} PSD cones (max dim {}), {} nonzeros",
        st.variables, st.zero_rows, st.nonnegative_rows, st.soc_blocks, st.psd_blocks, st.psd_max_dim, st.nonzeros
    );
    println!("verification: worst residual {:.3e}", summary.verification.worst());
    println!("spec hash: {hash}");
    Ok(())
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let controller_path = args.controller.clone().unwrap_or_else(|| args.out.join(CONTROLLER_FILE));
    let controller: ControllerDocument = read_json(&controller_path)?;
    let (doc, spec) = load_problem(&args.config, &controller.overrides)?;
    check_hash(&controller, &spec)?;
    let noise = match args.spikes {
        Some(magnitude) if magnitude.is_finite() && magnitude > 0.0 => NoiseModel::Spikes { magnitude },
        Some(m) => return Err(Failure::Usage(anyhow!("--spikes must be positive, got {m}"))),
        None => NoiseModel::Gaussian,
    };
    let options = RolloutOptions {
        samples: args.samples.map_or(doc.rollout.samples, |s| s as usize),
        seed: args.seed.unwrap_or(doc.rollout.seed),
        retain: args.retain.unwrap_or(doc.rollout.retain),
        noise,
    };
    let solution = &controller.controller;
    let report = simulate_closed_loop(&spec, solution, &options).map_err(|e| Failure::Usage(e.into()))?;
    let risk = allocate_risk(&spec).map_err(|e| Failure::Usage(e.into()))?;
    let cantelli = empirical_cantelli_check(&spec, solution, &report, &risk).map_err(|e| Failure::Usage(e.into()))?;

    ensure_dir(&args.out)?;
    let traj_path = args.out.join(TRAJECTORIES_FILE);
    let file = File::create(&traj_path).with_context(|| format!("creating {}", traj_path.display()))?;
    write_trajectories_csv(BufWriter::new(file), &report)?;
    let viol_path = args.out.join(VIOLATIONS_FILE);
    let file = File::create(&viol_path).with_context(|| format!("creating {}", viol_path.display()))?;
    write_violations_csv(BufWriter::new(file), &cantelli)?;

    let worst = cantelli.iter().map(|r| r.empirical).fold(0.0, f64::max);
    let flagged = cantelli.iter().filter(|r| r.flagged).count();
    println!("samples: {} (seed {})", report.samples, report.seed);
    println!("cost: {:.6} ± {:.6} (controller objective {:.6})", report.cost_mean, report.cost_se, solution.objective);
    println!("worst chance-constraint violation rate: {worst:.6} ({flagged} flagged)");
    println!("input bound violations: {}", report.input_bound_violations);
    let document = ReportDocument {
        spec_hash: controller.spec_hash.clone(),
        spec,
        dt: doc.system.dt,
        controller_objective: solution.objective,
        report,
        cantelli,
    };
    write_json(&args.out.join(REPORT_FILE), &document)?;
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<(), Failure> {
    let doc: ReportDocument = read_json(&args.report)?;
    let fig = FigureSpec { sigma: args.sigma, axes: args.axes, x_range: args.xlim, y_range: args.ylim };
    let trajectories = trajectory_svg(&doc, &fig)?;
    let inputs = input_svg(&doc, &FigureSpec { y_range: None, ..fig })?;
    ensure_dir(&args.out)?;
    for (name, svg) in [(TRAJECTORY_PLOT, trajectories), (INPUT_PLOT, inputs)] {
        let path = args.out.join(name);
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
