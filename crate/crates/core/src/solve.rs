//! Solver adapter and controller extraction.
//!
//! [`ConicSolver`] is the only contact point with a numerical backend. It
//! receives the solver-neutral [`ConicExport`] in `f64`; the bundled
//! implementation wraps Clarabel's interior-point method.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Error;
use crate::lifting::{build_lift, BlockLift};
use crate::linalg;
use crate::model::{allocate_risk, cantelli_coefficient, initial_state_warnings, validate_spec, ProblemSpec, RiskAllocation};
use crate::moments::{build_moment_blocks, MomentMatrices, MomentMode, SaturationSpec};
use crate::program::{
    build_program, explicit_objective, Cone, ConicExport, ConicProgram, DecisionLayout, Family, ProgramOptions,
    ProgramStats, RobustConstraintData,
};
use crate::scalar::Scalar;

/// Ω entries in `[-OMEGA_CLAMP, 0)` are rounded to zero on extraction.
pub const OMEGA_CLAMP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub max_iter: u32,
    pub tol_gap: f64,
    pub tol_feas: f64,
    pub verbose: bool,
    /// Seconds; `None` means unlimited.
    pub time_limit: Option<f64>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iter: 200, tol_gap: 1e-8, tol_feas: 1e-8, verbose: false, time_limit: None }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolveError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.tol_gap) || !positive(self.tol_feas) {
            return Err(SolveError::Settings("tolerances must be positive".into()));
        }
        if self.time_limit.is_some_and(|t| !(t > 0.0)) {
            return Err(SolveError::Settings("time limit must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(SolveError::Settings("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionStatus {
    Optimal,
    NearOptimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl SolutionStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, SolutionStatus::Optimal | SolutionStatus::NearOptimal)
    }
}

impl std::fmt::Display for SolutionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolutionStatus::Optimal => "optimal",
            SolutionStatus::NearOptimal => "near_optimal",
            SolutionStatus::Infeasible => "infeasible",
            SolutionStatus::Unbounded => "unbounded",
            SolutionStatus::NumericalFailure => "numerical_failure",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("invalid solver settings: {0}")]
    Settings(String),
    #[error("problem is infeasible{}", family.as_ref().map(|f| format!(" (largest certificate weight on {f})")).unwrap_or_default())]
    Infeasible { family: Option<String> },
    #[error("problem is unbounded")]
    Unbounded,
    #[error("solver failed: {detail} after {iterations} iterations")]
    NumericalFailure { detail: String, iterations: u32 },
    #[error("solver returned {got} variables, layout needs at least {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("Ω_{k}[{row}, {col}] = {value} is negative beyond tolerance")]
    NegativeMultiplier { k: usize, row: usize, col: usize, value: f64 },
    #[error("backend rejected the problem: {0}")]
    Backend(String),
}

impl SolveError {
    pub fn status(&self) -> Option<SolutionStatus> {
        match self {
            SolveError::Infeasible { .. } => Some(SolutionStatus::Infeasible),
            SolveError::Unbounded => Some(SolutionStatus::Unbounded),
            SolveError::NumericalFailure { .. } => Some(SolutionStatus::NumericalFailure),
            _ => None,
        }
    }
}

/// Backend output in the exported row order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSolution {
    pub status: SolutionStatus,
    pub detail: String,
    pub x: Vec<f64>,
    /// Dual variables, one per exported row.
    pub z: Vec<f64>,
    pub primal_objective: f64,
    pub iterations: u32,
    pub solve_time: f64,
}

/// Linear, second-order and PSD cone programs in the `s = b − Ax ∈ K` form.
pub trait ConicSolver {
    fn solve(&self, problem: &ConicExport, settings: &SolverSettings) -> Result<RawSolution, SolveError>;
}

/// Interior-point backend. Runs that stop short of full accuracy are retried
/// with different Ruiz equilibration; the first fully optimal run wins,
/// otherwise the first reduced-accuracy one.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClarabelSolver;

/// `Some((iterations, min_scaling))` with `max_scaling = 1 / min_scaling`;
/// `None` disables equilibration.
const EQUILIBRATION_LADDER: [Option<(u32, f64)>; 3] = [Some((10, 1e-4)), Some((50, 1e-6)), None];

fn map_status(status: SolverStatus) -> SolutionStatus {
    match status {
        SolverStatus::Solved => SolutionStatus::Optimal,
        SolverStatus::AlmostSolved => SolutionStatus::NearOptimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolutionStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolutionStatus::Unbounded,
        _ => SolutionStatus::NumericalFailure,
    }
}

fn csc_from_sorted(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    let mut colptr = vec![0usize; n_cols + 1];
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    for &(r, c, v) in triplets {
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for c in 0..n_cols {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(n_rows, n_cols, colptr, rowval, nzval)
}

impl ConicSolver for ClarabelSolver {
    fn solve(&self, problem: &ConicExport, settings: &SolverSettings) -> Result<RawSolution, SolveError> {
        settings.validate()?;
        let p = csc_from_sorted(problem.n_vars, problem.n_vars, &problem.p);
        let a = csc_from_sorted(problem.n_rows, problem.n_vars, &problem.a);
        let cones: Vec<SupportedConeT<f64>> = problem
            .cones
            .iter()
            .map(|&(cone, dim)| match cone {
                Cone::Zero => SupportedConeT::ZeroConeT(dim),
                Cone::Nonnegative => SupportedConeT::NonnegativeConeT(dim),
                Cone::SecondOrder => SupportedConeT::SecondOrderConeT(dim),
                Cone::Psd { dim } => SupportedConeT::PSDTriangleConeT(dim),
            })
            .collect();
        let started = Instant::now();
        let mut fallback: Option<RawSolution> = None;
        let mut iterations = 0;
        for (attempt, scaling) in EQUILIBRATION_LADDER.iter().enumerate() {
            let defaults = DefaultSettings::<f64>::default();
            let options = DefaultSettings {
                max_iter: settings.max_iter,
                time_limit: settings.time_limit.unwrap_or(f64::INFINITY),
                verbose: settings.verbose,
                tol_gap_abs: settings.tol_gap,
                tol_gap_rel: settings.tol_gap,
                tol_feas: settings.tol_feas,
                equilibrate_enable: scaling.is_some(),
                equilibrate_max_iter: scaling.map_or(defaults.equilibrate_max_iter, |s| s.0),
                equilibrate_min_scaling: scaling.map_or(defaults.equilibrate_min_scaling, |s| s.1),
                equilibrate_max_scaling: scaling.map_or(defaults.equilibrate_max_scaling, |s| 1.0 / s.1),
                ..defaults
            };
            let mut solver = DefaultSolver::new(&p, &problem.c, &a, &problem.b, &cones, options)
                .map_err(|e| SolveError::Backend(e.to_string()))?;
            solver.solve();
            let sol = &solver.solution;
            iterations += sol.iterations;
            let raw = RawSolution {
                status: map_status(sol.status),
                detail: format!("{:?} (attempt {})", sol.status, attempt + 1),
                x: sol.x.clone(),
                z: sol.z.clone(),
                primal_objective: sol.obj_val,
                iterations,
                solve_time: started.elapsed().as_secs_f64(),
            };
            match raw.status {
                SolutionStatus::Optimal | SolutionStatus::Infeasible | SolutionStatus::Unbounded => return Ok(raw),
                SolutionStatus::NearOptimal if fallback.as_ref().is_none_or(|f| !f.status.is_usable()) => fallback = Some(raw),
                _ if fallback.is_none() => fallback = Some(raw),
                _ => {}
            }
            log::debug!("clarabel attempt {} ended {:?}; rescaling", attempt + 1, sol.status);
        }
        let mut raw = fallback.expect("ladder is non-empty");
        raw.iterations = iterations;
        raw.solve_time = started.elapsed().as_secs_f64();
        Ok(raw)
    }
}

/// Cone-membership violations of the solver point, per cone class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub max_lmi_violation: f64,
    pub max_linear_residual: f64,
    pub max_soc_residual: f64,
}

impl Residuals {
    pub fn of<T: Scalar>(program: &ConicProgram<T>, x: &[T]) -> Self {
        let mut out = Self::default();
        for block in &program.blocks {
            let single = ConicProgram {
                layout: program.layout,
                n_vars: program.n_vars,
                objective: Vec::new(),
                quadratic: Vec::new(),
                objective_constant: T::zero(),
                blocks: vec![block.clone()],
                aux: Vec::new(),
            };
            let v = single.max_violation(x).as_f64();
            let slot = match block.cone {
                Cone::Zero | Cone::Nonnegative => &mut out.max_linear_residual,
                Cone::SecondOrder => &mut out.max_soc_residual,
                Cone::Psd { .. } => &mut out.max_lmi_violation,
            };
            *slot = slot.max(v);
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.max_lmi_violation.max(self.max_linear_residual).max(self.max_soc_residual)
    }
}

/// Structured decision variables recovered from a flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Decisions<T: Scalar> {
    pub v: DVector<T>,
    pub k_blocks: Vec<DMatrix<T>>,
    pub omega: Vec<DMatrix<T>>,
}

/// Un-flattens `[V | K | Ω]`, clamping slightly negative Ω entries to zero.
/// Trailing auxiliary variables beyond the layout are ignored.
pub fn extract_controller<T: Scalar>(x: &[T], layout: &DecisionLayout) -> Result<Decisions<T>, SolveError> {
    if x.len() < layout.len() {
        return Err(SolveError::LengthMismatch { got: x.len(), want: layout.len() });
    }
    let (n, m) = (layout.state_dim, layout.input_dim);
    let v = DVector::from_iterator(layout.v_len(), x[layout.v_range()].iter().copied());
    let k_blocks = (0..layout.horizon).map(|k| DMatrix::from_fn(m, n, |a, b| x[layout.k(k, a, b)])).collect();
    let clamp = T::lit(OMEGA_CLAMP);
    let mut omega = Vec::with_capacity(if layout.input_constraints > 0 { layout.horizon } else { 0 });
    if layout.input_constraints > 0 {
        for k in 0..layout.horizon {
            let mut o = DMatrix::zeros(layout.omega_rows(), layout.input_constraints);
            for s in 0..layout.input_constraints {
                for r in 0..layout.omega_rows() {
                    let value = x[layout.omega(k, r, s)];
                    if value < -clamp {
                        return Err(SolveError::NegativeMultiplier { k, row: r, col: s, value: value.as_f64() });
                    }
                    o[(r, s)] = value.max(T::zero());
                }
            }
            omega.push(o);
        }
    }
    Ok(Decisions { v, k_blocks, omega })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ControllerSolution<T: Scalar> {
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub v: DVector<T>,
    pub k_blocks: Vec<DMatrix<T>>,
    pub omega: Vec<DMatrix<T>>,
    /// Objective including the decision-independent constant.
    pub objective: T,
    pub status: SolutionStatus,
    pub residuals: Residuals,
    pub iterations: u32,
    pub solve_time: f64,
}

impl<T: Scalar> ControllerSolution<T> {
    pub fn layout(&self) -> DecisionLayout {
        let n_c = self.omega.first().map_or(0, |o| o.ncols());
        DecisionLayout::new(self.state_dim, self.input_dim, self.horizon, n_c)
    }

    /// Feedforward `v_k`.
    pub fn feedforward(&self, k: usize) -> DVector<T> {
        self.v.rows(k * self.input_dim, self.input_dim).into_owned()
    }

    /// Stacked `K = [blkdiag(K_0, …, K_{N-1}) 0]`.
    pub fn feedback_matrix(&self) -> DMatrix<T> {
        self.layout().stacked_gain(&self.k_blocks)
    }

    /// Converts every number to another scalar type.
    pub fn cast<S: Scalar>(&self) -> ControllerSolution<S> {
        let m = |a: &DMatrix<T>| a.map(|v| S::lit(v.as_f64()));
        ControllerSolution {
            state_dim: self.state_dim,
            input_dim: self.input_dim,
            horizon: self.horizon,
            v: self.v.map(|v| S::lit(v.as_f64())),
            k_blocks: self.k_blocks.iter().map(m).collect(),
            omega: self.omega.iter().map(m).collect(),
            objective: S::lit(self.objective.as_f64()),
            status: self.status,
            residuals: self.residuals.clone(),
            iterations: self.iterations,
            solve_time: self.solve_time,
        }
    }
}

fn family_name(f: Family) -> String {
    match f {
        Family::Objective => "objective epigraph".into(),
        Family::Chance { k, j } => format!("state chance constraint j={j} at k={k}"),
        Family::InputRobust { k } => format!("input hard constraints at k={k}"),
        Family::TerminalMean => "terminal mean".into(),
        Family::TerminalCovariance => "terminal covariance".into(),
    }
}

/// Family carrying the most weight in a primal infeasibility certificate.
fn dominant_family<T: Scalar>(program: &ConicProgram<T>, z: &[f64]) -> Option<String> {
    let mut offset = 0;
    let mut best: Option<(f64, Family)> = None;
    for block in &program.blocks {
        let len = block.rows.len();
        let weight: f64 = z.get(offset..offset + len).map_or(0.0, |s| s.iter().map(|v| v * v).sum());
        offset += len;
        // The objective epigraphs are always satisfiable; skip them.
        if block.family == Family::Objective {
            continue;
        }
        if best.is_none_or(|(w, _)| weight > w) {
            best = Some((weight, block.family));
        }
    }
    best.filter(|(w, _)| *w > 0.0).map(|(_, f)| family_name(f))
}

/// Solves with the bundled backend.
pub fn solve_program<T: Scalar>(program: &ConicProgram<T>, settings: &SolverSettings) -> Result<ControllerSolution<T>, SolveError> {
    solve_program_with(&ClarabelSolver, program, settings)
}

pub fn solve_program_with<T: Scalar>(
    backend: &dyn ConicSolver,
    program: &ConicProgram<T>,
    settings: &SolverSettings,
) -> Result<ControllerSolution<T>, SolveError> {
    let export = program.export();
    let raw = backend.solve(&export, settings)?;
    match raw.status {
        SolutionStatus::Infeasible => return Err(SolveError::Infeasible { family: dominant_family(program, &raw.z) }),
        SolutionStatus::Unbounded => return Err(SolveError::Unbounded),
        SolutionStatus::NumericalFailure => {
            return Err(SolveError::NumericalFailure { detail: raw.detail, iterations: raw.iterations })
        }
        SolutionStatus::Optimal | SolutionStatus::NearOptimal => {}
    }
    if raw.status == SolutionStatus::NearOptimal {
        log::warn!("solver returned a reduced-accuracy solution ({})", raw.detail);
    }
    let x: Vec<T> = raw.x.iter().map(|&v| T::lit(v)).collect();
    let layout = program.layout;
    let d = extract_controller(&x, &layout)?;
    Ok(ControllerSolution {
        state_dim: layout.state_dim,
        input_dim: layout.input_dim,
        horizon: layout.horizon,
        v: d.v,
        k_blocks: d.k_blocks,
        omega: d.omega,
        objective: T::lit(raw.primal_objective) + program.objective_constant,
        status: raw.status,
        residuals: Residuals::of(program, &x),
        iterations: raw.iterations,
        solve_time: raw.solve_time,
    })
}

/// Constraint residuals recomputed from `(V, K, Ω)` with dense algebra,
/// independently of the assembled program. Positive values are violations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// `max αᵀE_kX̄ − β + c‖Σ^{1/2}[I ℬK]ᵀE_kᵀα‖` over `(j, k ≥ 1)`.
    pub chance: f64,
    /// `max HF_kV + Ω_kᵀσ − h`.
    pub input_inequality: f64,
    /// `max |HF_kK[𝒜 𝒟] − Ω_kᵀS|`.
    pub input_equality: f64,
    /// `−min Ω` (0 when every multiplier is nonnegative).
    pub omega_negativity: f64,
    /// `max |E_N X̄ − μ_f|`.
    pub terminal_mean: f64,
    /// `−λ_min(Σ_f − E_N[I ℬK]Σ_XX[I ℬK]ᵀE_Nᵀ)` clipped at 0.
    pub terminal_covariance: f64,
    /// Quadratic cost evaluated from the dense matrices.
    pub explicit_objective: f64,
}

impl Verification {
    pub fn worst(&self) -> f64 {
        [
            self.chance,
            self.input_inequality,
            self.input_equality,
            self.omega_negativity,
            self.terminal_mean,
            self.terminal_covariance,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

pub fn verify_solution<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    moments: &MomentMatrices<T>,
    sat: &SaturationSpec<T>,
    risk: &RiskAllocation<T>,
    solution: &ControllerSolution<T>,
) -> Verification {
    let (n, horizon) = (spec.state_dim(), spec.horizon);
    let stacked = lift.stacked_state_len();
    let kmat = solution.feedback_matrix();
    let bk = &lift.cal_b * &kmat;
    let mean = &lift.cal_a * &spec.initial.mean + &lift.cal_b * &solution.v;
    let mut out = Verification::default();

    for k in 1..=horizon {
        for (j, c) in spec.state_constraints.iter().enumerate() {
            let mut a = DVector::zeros(stacked);
            a.rows_mut(k * n, n).copy_from(&c.alpha);
            let mut stackv = DVector::zeros(2 * stacked);
            stackv.rows_mut(0, stacked).copy_from(&a);
            stackv.rows_mut(stacked, stacked).copy_from(&(bk.transpose() * &a));
            let norm = (&moments.sigma_xx_sqrt * stackv).norm();
            let value = c.alpha.dot(&mean.rows(k * n, n)) - c.beta + cantelli_coefficient(risk.p[j]) * norm;
            out.chance = out.chance.max(value.as_f64());
        }
    }

    if !spec.input_constraints.is_empty() {
        if let Ok(data) = RobustConstraintData::new(spec, sat) {
            for k in 0..horizon {
                let Some(om) = solution.omega.get(k) else {
                    out.input_equality = f64::INFINITY;
                    break;
                };
                let vk = solution.feedforward(k);
                let lhs = &data.h_mat * &vk + om.transpose() * &data.sigma - &data.h;
                out.input_inequality = out.input_inequality.max(lhs.max().as_f64());
                let eq = &data.h_mat * &solution.k_blocks[k] * lift.source_row_block(k) - om.transpose() * &data.s;
                out.input_equality = out.input_equality.max(linalg::max_abs(&eq).as_f64());
                out.omega_negativity = out.omega_negativity.max((-om.min()).as_f64());
            }
        }
    }

    let terminal = mean.rows(horizon * n, n) - &spec.terminal.mean;
    out.terminal_mean = terminal.amax().as_f64();
    let mut map = DMatrix::zeros(n, 2 * stacked);
    map.view_mut((0, horizon * n), (n, n)).fill_with_identity();
    map.view_mut((0, stacked), (n, stacked)).copy_from(&bk.rows(horizon * n, n));
    let cov = &map * &moments.sigma_xx * map.transpose();
    let gap = linalg::symmetrize(&(&spec.terminal.cov - cov));
    out.terminal_covariance = linalg::min_eigenvalue(&gap).map_or(f64::INFINITY, |e| (-e.as_f64()).max(0.0));
    out.explicit_objective = explicit_objective(spec, lift, moments, &solution.v, &kmat).as_f64();
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// `None` picks analytic moments when possible and Monte Carlo otherwise.
    pub moments: Option<MomentMode>,
    pub moment_seed: u64,
    pub program: ProgramOptions,
    pub solver: SolverSettings,
}

/// Everything produced on the way from a spec to a controller.
#[derive(Clone, Debug)]
pub struct Synthesis<T: Scalar> {
    pub spec: ProblemSpec<T>,
    pub lift: BlockLift<T>,
    pub saturation: SaturationSpec<T>,
    pub moments: MomentMatrices<T>,
    pub risk: RiskAllocation<T>,
    pub program: ConicProgram<T>,
    pub stats: ProgramStats,
    pub solution: ControllerSolution<T>,
    pub verification: Verification,
    pub warnings: Vec<String>,
}

/// Pre-solve stages shared by [`synthesize`] and tooling that only needs
/// the program.
pub struct Prepared<T: Scalar> {
    pub spec: ProblemSpec<T>,
    pub lift: BlockLift<T>,
    pub saturation: SaturationSpec<T>,
    pub moments: MomentMatrices<T>,
    pub risk: RiskAllocation<T>,
    pub program: ConicProgram<T>,
    pub warnings: Vec<String>,
}

pub fn prepare<T: Scalar>(spec: &ProblemSpec<T>, options: &SynthesisOptions) -> Result<Prepared<T>, Error> {
    let spec = validate_spec(spec)?;
    let risk = allocate_risk(&spec)?;
    let warnings = initial_state_warnings(&spec, &risk);
    let lift = build_lift(&spec);
    let saturation = SaturationSpec::resolve(&spec);
    let mode = options.moments.unwrap_or_else(|| MomentMode::auto(&spec, options.moment_seed));
    let moments = build_moment_blocks(&spec, &lift, &saturation, mode)?;
    let program = build_program(&spec, &lift, &moments, &saturation, &risk, options.program)?;
    Ok(Prepared { spec, lift, saturation, moments, risk, program, warnings })
}

/// Validate, lift, compute moments, assemble, solve and verify.
pub fn synthesize<T: Scalar>(spec: &ProblemSpec<T>, options: &SynthesisOptions) -> Result<Synthesis<T>, Error> {
    let Prepared { spec, lift, saturation, moments, risk, program, mut warnings } = prepare(spec, options)?;
    let solution = solve_program(&program, &options.solver)?;
    if solution.status == SolutionStatus::NearOptimal {
        warnings.push("solver returned a reduced-accuracy (near_optimal) solution".into());
    }
    let verification = verify_solution(&spec, &lift, &moments, &saturation, &risk, &solution);
    let stats = program.stats();
    Ok(Synthesis { spec, lift, saturation, moments, risk, program, stats, solution, verification, warnings })
}
