//! End-to-end acceptance checks on the shipped double-integrator benchmark
//! and on random instances. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Result};
use covsteer::moments::{sat_cross_moment, sat_second_moment, SaturationSpec};
use covsteer::program::DecisionLayout;
use covsteer::solve::prepare;
use covsteer::{
    build_lift, build_moment_blocks, linalg, synthesize, vertex_containment_oracle, ControllerSolution, CostWeights,
    Gaussian, InputHalfspace, MomentMode, ProblemSpec, Saturation, SolutionStatus, SynthesisOptions,
};
use covsteer_cli::ConfigDocument;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;
use tempfile::TempDir;

const UNCONSTRAINED_COST: f64 = 2285.0;
const CONSTRAINED_COST: f64 = 2301.0;
const COST_BAND: f64 = 0.05;
const RUNTIME_LIMIT_S: f64 = 60.0;
const U_MAX: f64 = 2.9;
const INPUT_TOL: f64 = 1e-9;
const P_ALLOCATED: f64 = 0.05;
const SAMPLES: usize = 10_000;
const SEED: u64 = 42;

fn shipped_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/double_integrator.toml")
}

fn benchmark_spec() -> ProblemSpec<f64> {
    ConfigDocument::load(&shipped_config()).unwrap().to_spec().unwrap()
}

fn covsteer(args: &[&str]) -> Result<std::process::Output> {
    Ok(Command::new(env!("CARGO_BIN_EXE_covsteer")).args(args).output()?)
}

fn run_ok(args: &[&str]) -> Result<()> {
    let out = covsteer(args)?;
    ensure!(
        out.status.success(),
        "`covsteer {}` exited with {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn num(v: &Value) -> Result<f64> {
    v.as_f64().ok_or_else(|| anyhow!("expected a number, got {v}"))
}

fn matrix(v: &Value) -> Result<DMatrix<f64>> {
    let a = v.as_array().ok_or_else(|| anyhow!("expected a matrix"))?;
    let rows = a[1].as_u64().ok_or_else(|| anyhow!("bad row count"))? as usize;
    let cols = a[2].as_u64().unwrap_or(1) as usize;
    let data: Vec<f64> = a[0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

fn vector(v: &Value) -> Result<DVector<f64>> {
    let m = matrix(v)?;
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// Solve (and optionally simulate) through the binary.
struct Run {
    dir: PathBuf,
    elapsed: f64,
}

impl Run {
    fn solve(root: &Path, name: &str, extra: &[&str]) -> Result<Run> {
        let dir = root.join(name);
        let config = shipped_config();
        let mut args = vec!["solve", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        let start = Instant::now();
        run_ok(&args)?;
        Ok(Run { dir, elapsed: start.elapsed().as_secs_f64() })
    }

    fn simulate(&self, out: &str, extra: &[&str]) -> Result<PathBuf> {
        let dir = self.dir.join(out);
        let config = shipped_config();
        let controller = self.dir.join("controller.json");
        let samples = SAMPLES.to_string();
        let seed = SEED.to_string();
        let mut args = vec![
            "simulate",
            "--controller",
            controller.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--samples",
            &samples,
            "--seed",
            &seed,
        ];
        args.extend_from_slice(extra);
        run_ok(&args)?;
        Ok(dir)
    }

    fn summary(&self) -> Result<Value> {
        read_json(&self.dir.join("summary.json"))
    }

    fn objective(&self) -> Result<f64> {
        num(&self.summary()?["objective"])
    }
}

struct Context {
    _tmp: TempDir,
    unconstrained: Option<Run>,
    constrained: Option<Run>,
    report: Option<PathBuf>,
}

impl Context {
    fn constrained(&self) -> Result<&Run> {
        self.constrained.as_ref().ok_or_else(|| anyhow!("constrained solve did not run"))
    }

    fn report(&self) -> Result<Value> {
        let dir = self.report.as_ref().ok_or_else(|| anyhow!("rollout did not run"))?;
        read_json(&dir.join("report.json"))
    }
}

fn status_optimal(summary: &Value) -> Result<()> {
    ensure!(summary["status"] == "optimal", "status {}", summary["status"]);
    Ok(())
}

fn within_band(j: f64, target: f64) -> Result<f64> {
    let rel = (j - target) / target;
    ensure!(rel.abs() <= COST_BAND, "J = {j:.3} is {:+.2}% from {target}", 100.0 * rel);
    Ok(rel)
}

fn criterion_1(ctx: &Context) -> Result<String> {
    let run = ctx.unconstrained.as_ref().ok_or_else(|| anyhow!("unconstrained solve failed"))?;
    status_optimal(&run.summary()?)?;
    let j = run.objective()?;
    let rel = within_band(j, UNCONSTRAINED_COST)?;
    ensure!(run.elapsed < RUNTIME_LIMIT_S, "took {:.1} s", run.elapsed);
    Ok(format!("J = {j:.3} ({:+.2}% of {UNCONSTRAINED_COST}), {:.1} s", 100.0 * rel, run.elapsed))
}

fn criterion_2(ctx: &Context) -> Result<String> {
    let run = ctx.constrained()?;
    status_optimal(&run.summary()?)?;
    let j = run.objective()?;
    let rel = within_band(j, CONSTRAINED_COST)?;
    let free = ctx.unconstrained.as_ref().ok_or_else(|| anyhow!("no unconstrained run"))?.objective()?;
    ensure!(j >= free - 1e-6, "J_constrained {j} < J_unconstrained {free}");
    Ok(format!("J = {j:.3} ({:+.2}% of {CONSTRAINED_COST}) >= {free:.3}, {:.1} s", 100.0 * rel, run.elapsed))
}

/// Largest `|u|` over the retained paths of a trajectories.csv.
fn max_abs_input(csv_path: &Path) -> Result<f64> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.starts_with('u')).map(|(i, _)| i).collect();
    let mut worst: f64 = 0.0;
    for rec in reader.records() {
        let rec = rec?;
        for &c in &cols {
            if !rec[c].is_empty() {
                worst = worst.max(rec[c].parse::<f64>()?.abs());
            }
        }
    }
    Ok(worst)
}

fn check_input_bounds(dir: &Path) -> Result<(u64, f64, f64)> {
    let doc = read_json(&dir.join("report.json"))?;
    let count = doc["report"]["input_bound_violations"].as_u64().unwrap();
    let excess = num(&doc["report"]["max_input_excess"])?;
    let retained = max_abs_input(&dir.join("trajectories.csv"))?;
    ensure!(count == 0, "{count} sample-steps exceed the bound");
    ensure!(excess <= INPUT_TOL, "max excess {excess:e}");
    ensure!(retained <= U_MAX + INPUT_TOL, "retained path with |u| = {retained}");
    Ok((count, excess, retained))
}

fn criterion_3(ctx: &Context) -> Result<String> {
    let gaussian = ctx.report.as_ref().ok_or_else(|| anyhow!("rollout did not run"))?;
    let (_, g_excess, g_max) = check_input_bounds(gaussian)?;
    let spikes = ctx.constrained()?.simulate("spikes", &["--spikes", "1e6"])?;
    let (_, s_excess, s_max) = check_input_bounds(&spikes)?;
    Ok(format!(
        "0 violations in {SAMPLES} Gaussian samples (max |u| {g_max:.6}, excess {g_excess:.1e}) and {SAMPLES} spike samples (max |u| {s_max:.6}, excess {s_excess:.1e})"
    ))
}

fn criterion_4(ctx: &Context) -> Result<String> {
    let doc = ctx.report()?;
    let n = num(&doc["report"]["samples"])?;
    let se = (P_ALLOCATED * (1.0 - P_ALLOCATED) / n).sqrt();
    let limit = P_ALLOCATED + 3.0 * se;
    let mut worst: (f64, usize, usize) = (0.0, 0, 0);
    for (j, row) in doc["report"]["violation"].as_array().unwrap().iter().enumerate() {
        for (k, v) in row.as_array().unwrap().iter().enumerate() {
            let v = num(v)?;
            ensure!(v <= limit, "half-space {j} at step {k}: rate {v} > {limit}");
            if v > worst.0 {
                worst = (v, j, k);
            }
        }
    }
    Ok(format!("worst rate {:.4} (j={}, k={}) <= {limit:.4}", worst.0, worst.1, worst.2))
}

fn criterion_5(ctx: &Context) -> Result<String> {
    let doc = ctx.report()?;
    let spec = benchmark_spec();
    let r = &doc["report"];
    let cov = matrix(&r["terminal_cov"])?;
    let cov_se = matrix(&r["terminal_cov_se"])?;
    let mean = vector(&r["terminal_mean"])?;
    let mean_se = vector(&r["terminal_mean_se"])?;
    let delta = 4.0 * cov_se.amax();
    let gap = linalg::symmetrize(&(&spec.terminal.cov - &cov));
    let min_eig = linalg::min_eigenvalue(&gap)?;
    ensure!(min_eig >= -delta, "min eig of Σ_f − cov(x_N) is {min_eig:e} < −{delta:e}");
    let mut worst_z: f64 = 0.0;
    for i in 0..mean.len() {
        let z = (mean[i] - spec.terminal.mean[i]).abs() / mean_se[i];
        ensure!(z <= 4.0, "terminal mean component {i} is {z:.2} SE from target");
        worst_z = worst_z.max(z);
    }
    let controller = read_json(&ctx.constrained()?.dir.join("controller.json"))?;
    let lmi = num(&controller["controller"]["residuals"]["max_lmi_violation"])?;
    ensure!(lmi <= 1e-6, "solver-side LMI violation {lmi:e}");
    Ok(format!("min eig {min_eig:.3e} >= −{delta:.3e}, mean within {worst_z:.2} SE, LMI residual {lmi:.1e}"))
}

/// Adaptive Gauss-Kronrod (7, 15) quadrature.
fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    const XK: [f64; 8] = [
        0.991455371120812639206854697526329,
        0.949107912342758524526189684047851,
        0.864864423359769072789712788640926,
        0.741531185599394439863864773280788,
        0.586087235467691130294144845693013,
        0.405845151377397166906606412076961,
        0.207784955007898467600689403773245,
        0.000000000000000000000000000000000,
    ];
    const WK: [f64; 8] = [
        0.022935322010529224963732008058970,
        0.063092092629978553290700663189204,
        0.104790010322250183839876322541518,
        0.140653259715525918745189590510238,
        0.169004726639267902826583426598550,
        0.190350578064785409913256402421014,
        0.204432940075298892414161999234649,
        0.209482141084727828012999174891714,
    ];
    const WG: [f64; 4] = [
        0.129484966168869693270611432679082,
        0.279705391489276667901467771423780,
        0.381830050505118944950369775488975,
        0.417959183673469387755102040816327,
    ];
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let fc = f(c);
    let mut kron = WK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let (lo, hi) = (f(c - h * XK[i]), f(c + h * XK[i]));
        kron += WK[i] * (lo + hi);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (lo + hi);
        }
    }
    let (kron, gauss) = (kron * h, gauss * h);
    if (kron - gauss).abs() <= tol || depth == 0 {
        kron
    } else {
        integrate(f, a, c, 0.5 * tol, depth - 1) + integrate(f, c, b, 0.5 * tol, depth - 1)
    }
}

/// `E[zφ(z)]` and `E[φ(z)²]` for `z ~ N(0, σ²)` clamped at `±ζ`, by
/// quadrature in the standardized variable.
fn quadrature_moments(sigma: f64, zeta: f64) -> (f64, f64) {
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let r = zeta / sigma;
    let tail_end = r + 40.0;
    let tol = 1e-17;
    let body = integrate(&|t| t * t * pdf(t), 0.0, r, tol, 40);
    let tail_t = integrate(&|t| t * pdf(t), r, tail_end, tol, 40);
    let tail_1 = integrate(&|t| pdf(t), r, tail_end, tol, 40);
    let s2 = sigma * sigma;
    (2.0 * s2 * (body + r * tail_t), 2.0 * s2 * (body + r * r * tail_1))
}

/// Joint vector `[x̃; z]` for one sample of the benchmark, by direct
/// recursion: `x̃_{k+1} = A x̃_k + w_k`, `z_{k+1} = A z_k + φ(w_k)`.
fn joint_sample(spec: &ProblemSpec<f64>, init_sd: &DVector<f64>, noise_sd: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = spec.state_dim();
    let m = (spec.horizon + 1) * n;
    let clamp = |v: f64, l: f64| v.clamp(-l, l);
    let mut y = DVector::zeros(2 * m);
    let mut x = DVector::from_fn(n, |i, _| init_sd[i] * rng.sample::<f64, _>(StandardNormal));
    let mut z = DVector::from_fn(n, |i, _| clamp(x[i], 3.0 * init_sd[i]));
    for k in 0..=spec.horizon {
        y.rows_mut(k * n, n).copy_from(&x);
        y.rows_mut(m + k * n, n).copy_from(&z);
        if k == spec.horizon {
            break;
        }
        let w = DVector::from_fn(n, |i, _| noise_sd[i] * rng.sample::<f64, _>(StandardNormal));
        x = &spec.a[k] * &x + &w;
        z = &spec.a[k] * &z + w.map_with_location(|i, _, v| clamp(v, 3.0 * noise_sd[i]));
    }
    y
}

fn criterion_6() -> Result<String> {
    let mut worst: f64 = 0.0;
    for sigma in [0.01, 0.1, 1.0, 10.0, 100.0] {
        for ratio in [0.1, 0.5, 1.0, 2.0, 3.0, 5.0] {
            let zeta = ratio * sigma;
            let (cross_q, second_q) = quadrature_moments(sigma, zeta);
            let cross = sat_cross_moment(sigma, zeta)?;
            let second = sat_second_moment(sigma, zeta)?;
            let err = (cross - cross_q).abs().max((second - second_q).abs());
            ensure!(err <= 1e-10, "σ={sigma}, ζ/σ={ratio}: |Δ| = {err:e}");
            worst = worst.max(err);
        }
    }

    let spec = benchmark_spec();
    let lift = build_lift(&spec);
    let sat = SaturationSpec::resolve(&spec);
    let analytic = build_moment_blocks(&spec, &lift, &sat, MomentMode::Analytic)?.sigma_xx;
    let init_sd = spec.initial.cov.diagonal().map(f64::sqrt);
    let noise_sd = spec.noise_cov(0).diagonal().map(f64::sqrt);
    let samples = 1_000_000;
    let batch = 2_000;
    let dim = analytic.nrows();
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut block = DMatrix::<f64>::zeros(dim, batch);
    for _ in 0..samples / batch {
        for c in 0..batch {
            block.set_column(c, &joint_sample(&spec, &init_sd, &noise_sd, &mut rng));
        }
        acc.gemm(1.0, &block, &block.transpose(), 1.0);
    }
    let mc = acc / samples as f64;
    let rel = (&mc - &analytic).norm() / analytic.norm();
    ensure!(rel <= 1e-2, "Σ_XX relative Frobenius error {rel:e}");
    Ok(format!("closed forms vs quadrature max |Δ| {worst:.1e}; Σ_XX vs 10^6-sample MC rel. Frobenius {rel:.2e}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

fn random_diag(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(lo..hi)))
}

/// A valid random instance; `diagonal` keeps the covariances diagonal so the
/// analytic moment path applies.
fn random_spec(rng: &mut ChaCha8Rng, diagonal: bool) -> ProblemSpec<f64> {
    let n = rng.random_range(1..=3);
    let m = rng.random_range(1..=2);
    let horizon = rng.random_range(1..=6);
    let (d, s0) = if diagonal {
        (random_diag(rng, n, 0.0, 0.5), random_diag(rng, n, 0.0, 0.5))
    } else {
        let l = random_matrix(rng, n, n, 0.5);
        (random_matrix(rng, n, n, 0.5), &l * l.transpose())
    };
    let mut spec = ProblemSpec::time_invariant(
        horizon,
        DMatrix::identity(n, n),
        random_matrix(rng, n, m, 1.0),
        d,
        Gaussian::new(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)), s0),
        Gaussian::new(DVector::zeros(n), random_diag(rng, n, 0.5, 2.0)),
        CostWeights::new(random_diag(rng, n, 0.1, 2.0), random_diag(rng, m, 0.1, 2.0)),
    );
    spec.a = (0..horizon).map(|_| random_matrix(rng, n, n, 1.2 / n as f64)).collect();
    spec.b = (0..horizon).map(|_| random_matrix(rng, n, m, 1.0)).collect();
    spec.saturation = match rng.random_range(0..3) {
        0 => Saturation::Disabled,
        1 => Saturation::SigmaMultiplier(rng.random_range(0.5..4.0)),
        _ => Saturation::Limits {
            initial: DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0)),
            noise: DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0)),
        },
    };
    spec
}

fn criterion_7() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::INFINITY;
    for trial in 0..50 {
        let diagonal = trial % 2 == 0;
        let spec = random_spec(&mut rng, diagonal);
        let lift = build_lift(&spec);
        let sat = SaturationSpec::resolve(&spec);
        let mode = if diagonal { MomentMode::Analytic } else { MomentMode::MonteCarlo { samples: 20_000, seed: trial } };
        let sigma = build_moment_blocks(&spec, &lift, &sat, mode)?.sigma_xx;
        let e = linalg::min_eigenvalue(&sigma)?;
        ensure!(e >= -1e-8, "trial {trial}: min eigenvalue {e:e}");
        worst = worst.min(e);
    }
    Ok(format!("50 specs, smallest eigenvalue {worst:.2e}"))
}

fn criterion_8() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let spec = random_spec(&mut rng, trial % 2 == 0);
        let (n, m, horizon) = (spec.state_dim(), spec.input_dim(), spec.horizon);
        let lift = build_lift(&spec);
        let x0 = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let u = DVector::from_fn(horizon * m, |_, _| rng.random_range(-2.0..2.0));
        let w = DVector::from_fn(horizon * n, |_, _| rng.random_range(-2.0..2.0));
        let lifted = &lift.cal_a * &x0 + &lift.cal_b * &u + &lift.cal_d * &w;
        let mut x = x0.clone();
        for k in 0..=horizon {
            let err = (&x - lifted.rows(k * n, n)).amax() / x.amax().max(1.0);
            ensure!(err <= 1e-10, "trial {trial}, step {k}: error {err:e}");
            worst = worst.max(err);
            if k < horizon {
                x = &spec.a[k] * &x + &spec.b[k] * u.rows(k * m, m) + w.rows(k * n, n);
            }
        }
    }
    Ok(format!("50 specs, worst relative error {worst:.1e}"))
}

fn scalar_instance(rng: &mut ChaCha8Rng) -> ProblemSpec<f64> {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let mut spec = ProblemSpec::time_invariant(
        2,
        one(rng.random_range(0.5..1.2)),
        one(rng.random_range(0.5..1.5)),
        one(rng.random_range(0.1..0.4)),
        Gaussian::new(DVector::from_element(1, rng.random_range(-1.0..1.0)), one(rng.random_range(0.1..0.5))),
        Gaussian::new(DVector::zeros(1), one(rng.random_range(0.3..1.0))),
        CostWeights::new(one(rng.random_range(0.5..2.0)), one(rng.random_range(0.5..2.0))),
    );
    let h = rng.random_range(2.0..3.0);
    spec.input_constraints = vec![
        InputHalfspace { alpha: DVector::from_element(1, 1.0), beta: h },
        InputHalfspace { alpha: DVector::from_element(1, -1.0), beta: h },
    ];
    spec.saturation = Saturation::SigmaMultiplier(2.0);
    spec
}

/// `max_ξ hᵀu_k` over the saturation box, in closed form: the feedforward
/// part plus the absolute row sums of the feedback map weighted by the box
/// half-widths.
fn worst_case_input(spec: &ProblemSpec<f64>, solution: &ControllerSolution<f64>, k: usize, row: usize) -> f64 {
    let lift = build_lift(spec);
    let sat = SaturationSpec::resolve(spec);
    let (n, m, horizon) = (spec.state_dim(), spec.input_dim(), spec.horizon);
    let mut gen = DMatrix::zeros((horizon + 1) * n, (horizon + 1) * n);
    gen.view_mut((0, 0), ((horizon + 1) * n, n)).copy_from(&lift.cal_a);
    gen.view_mut((0, n), ((horizon + 1) * n, horizon * n)).copy_from(&lift.cal_d);
    let c = &spec.input_constraints[row];
    let gain = solution.feedback_matrix();
    let map = c.alpha.transpose() * gain.rows(k * m, m) * gen;
    let feedforward = c.alpha.dot(&solution.feedforward(k));
    let spread: f64 = map.iter().zip(&sat.limits).map(|(v, l)| v.abs() * l.unwrap()).sum();
    feedforward + spread
}

fn criterion_9() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rejected = 0;
    for trial in 0..10 {
        let spec = scalar_instance(&mut rng);
        let s = synthesize(&spec, &SynthesisOptions::default())?;
        ensure!(s.solution.status == SolutionStatus::Optimal, "trial {trial}: status {}", s.solution.status);
        for k in 0..spec.horizon {
            ensure!(vertex_containment_oracle(&s.spec, &s.lift, &s.solution, k)?, "trial {trial}: oracle false at k={k}");
        }

        // Scale K_0 until the closed-form worst case exceeds the bound by 0.5.
        let mut bad = s.solution.clone();
        let sat = SaturationSpec::resolve(&s.spec);
        let box0 = sat.limits[0].unwrap();
        let g = bad.k_blocks[0][(0, 0)];
        let base = if g.abs() > 1e-6 { g } else { 1.0 };
        let beta = s.spec.input_constraints[0].beta;
        let v0 = bad.feedforward(0)[0];
        let scale = (beta - v0.abs() + 0.5) / (base.abs() * box0);
        bad.k_blocks[0][(0, 0)] = base.signum() * base.abs() * scale;
        let worst = (0..2).map(|row| worst_case_input(&s.spec, &bad, 0, row) - s.spec.input_constraints[row].beta).fold(f64::MIN, f64::max);
        ensure!(worst > 0.1, "trial {trial}: scaled pair is not infeasible (margin {worst})");
        ensure!(!vertex_containment_oracle(&s.spec, &s.lift, &bad, 0)?, "trial {trial}: oracle accepted an infeasible pair");
        rejected += 1;
    }
    Ok(format!("10/10 solved instances contained, {rejected}/10 scaled pairs rejected"))
}

/// Dense cost `tr(Q̄[I ℬK]Σ_XX[I ℬK]ᵀ) + tr(R̄KΣ_UUKᵀ) + ‖𝒜μ0+ℬV‖²_Q̄ + ‖V‖²_R̄`.
struct DenseCost {
    qbar: DMatrix<f64>,
    rbar: DMatrix<f64>,
    cal_b: DMatrix<f64>,
    mean0: DVector<f64>,
    sigma_xx: DMatrix<f64>,
    sigma_uu: DMatrix<f64>,
    layout: DecisionLayout,
}

impl DenseCost {
    fn new(spec: &ProblemSpec<f64>, layout: DecisionLayout) -> Result<Self> {
        let lift = build_lift(spec);
        let sat = SaturationSpec::resolve(spec);
        let moments = build_moment_blocks(spec, &lift, &sat, MomentMode::Analytic)?;
        let (n, m, horizon) = (spec.state_dim(), spec.input_dim(), spec.horizon);
        let mut qbar = DMatrix::zeros((horizon + 1) * n, (horizon + 1) * n);
        let mut rbar = DMatrix::zeros(horizon * m, horizon * m);
        for k in 0..horizon {
            qbar.view_mut((k * n, k * n), (n, n)).copy_from(&spec.cost.q);
            rbar.view_mut((k * m, k * m), (m, m)).copy_from(&spec.cost.r);
        }
        Ok(Self {
            qbar,
            rbar,
            mean0: &lift.cal_a * &spec.initial.mean,
            cal_b: lift.cal_b,
            sigma_xx: moments.sigma_xx,
            sigma_uu: moments.sigma_uu,
            layout,
        })
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let l = &self.layout;
        let (n, m, horizon) = (l.state_dim, l.input_dim, l.horizon);
        let v = DVector::from_column_slice(&x[..horizon * m]);
        let mut k = DMatrix::zeros(horizon * m, (horizon + 1) * n);
        for step in 0..horizon {
            for a in 0..m {
                for b in 0..n {
                    k[(step * m + a, step * n + b)] = x[l.k(step, a, b)];
                }
            }
        }
        let dim = (horizon + 1) * n;
        let mut g = DMatrix::zeros(dim, 2 * dim);
        g.view_mut((0, 0), (dim, dim)).fill_with_identity();
        g.view_mut((0, dim), (dim, dim)).copy_from(&(&self.cal_b * &k));
        let state_cov = (&self.qbar * &g * &self.sigma_xx * g.transpose()).trace();
        let input_cov = (&self.rbar * &k * &self.sigma_uu * k.transpose()).trace();
        let mean = &self.mean0 + &self.cal_b * &v;
        state_cov + input_cov + (mean.transpose() * &self.qbar * &mean)[(0, 0)] + (v.transpose() * &self.rbar * &v)[(0, 0)]
    }
}

fn criterion_10() -> Result<String> {
    let spec = benchmark_spec();
    let prepared = prepare(&spec, &SynthesisOptions::default())?;
    let program = &prepared.program;
    let dense = DenseCost::new(&prepared.spec, program.layout)?;
    let decisions = program.layout.len();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for point in 0..20 {
        let mut x = vec![0.0; program.n_vars];
        for xi in x.iter_mut().take(decisions) {
            *xi = rng.random_range(-1.0..1.0);
        }
        let mut grad = vec![0.0; program.n_vars];
        for &(i, c) in &program.objective {
            grad[i] += c;
        }
        for &(i, j, p) in &program.quadratic {
            grad[i] += p * x[j];
            if i != j {
                grad[j] += p * x[i];
            }
        }
        ensure!(grad[decisions..].iter().all(|g| *g == 0.0), "point {point}: gradient on auxiliary variables");
        let value = program.objective_value(&x);
        let dense_value = dense.eval(&x);
        ensure!((value - dense_value).abs() <= 1e-8 * dense_value.abs(), "point {point}: J {value} vs dense {dense_value}");
        let h = 1e-3;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        let v_len = program.layout.v_len();
        let mut coords: Vec<usize> = (0..v_len).collect();
        coords.extend((0..100).map(|_| rng.random_range(v_len..decisions)));
        for &i in &coords {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (dense.eval(&xp) - dense.eval(&xm)) / (2.0 * h);
            diff2 += (grad[i] - fd).powi(2);
            norm2 += fd * fd;
        }
        let rel = (diff2 / norm2.max(1e-300)).sqrt();
        ensure!(rel <= 1e-6, "point {point}: relative gradient error {rel:e}");
        worst = worst.max(rel);
    }
    Ok(format!("20 points, all feedforward and 100 sampled gain coordinates each, worst relative error {worst:.1e}"))
}

fn criterion_11(ctx: &Context, root: &Path) -> Result<String> {
    let first = ctx.report.as_ref().ok_or_else(|| anyhow!("rollout did not run"))?;
    let rerun = Run::solve(root, "constrained_again", &[])?;
    let second = rerun.simulate("rollout", &[])?;
    for f in ["trajectories.csv", "violations.csv"] {
        let (a, b) = (std::fs::read(first.join(f))?, std::fs::read(second.join(f))?);
        if a != b {
            bail!("{f} differs between repeated runs");
        }
    }
    let (a, b) = (ctx.constrained()?.objective()?, rerun.objective()?);
    ensure!((a - b).abs() <= 1e-6 * a.abs(), "objectives {a} and {b} differ");
    Ok("trajectories.csv and violations.csv byte-identical across two solve+simulate runs".into())
}

fn main() -> ExitCode {
    let tmp = TempDir::new().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let unconstrained = Run::solve(&root, "unconstrained", &["--no-input-constraints", "--saturation", "inf"]);
    let constrained = Run::solve(&root, "constrained", &[]);
    let report = constrained.as_ref().ok().map(|r| r.simulate("rollout", &[]));
    let mut setup_errors = Vec::new();
    let mut keep = |r: Result<Run>| r.map_err(|e| setup_errors.push(e.to_string())).ok();
    let unconstrained = keep(unconstrained);
    let constrained = keep(constrained);
    let report = match report {
        Some(Ok(p)) => Some(p),
        Some(Err(e)) => {
            setup_errors.push(e.to_string());
            None
        }
        None => None,
    };
    for e in &setup_errors {
        eprintln!("setup: {e}");
    }
    let ctx = Context { _tmp: tmp, unconstrained, constrained, report };

    let criteria: Vec<(&str, Box<dyn Fn() -> Result<String> + '_>)> = vec![
        ("unconstrained benchmark cost", Box::new(|| criterion_1(&ctx))),
        ("constrained benchmark cost", Box::new(|| criterion_2(&ctx))),
        ("hard input bound under Gaussian and spike noise", Box::new(|| criterion_3(&ctx))),
        ("empirical chance-constraint violation rates", Box::new(|| criterion_4(&ctx))),
        ("terminal moments", Box::new(|| criterion_5(&ctx))),
        ("saturation moments and joint covariance", Box::new(criterion_6)),
        ("joint covariance is PSD", Box::new(criterion_7)),
        ("lifted dynamics match the recursion", Box::new(criterion_8)),
        ("robust input constraint duality", Box::new(criterion_9)),
        ("objective gradient vs finite differences", Box::new(criterion_10)),
        ("determinism of solve and simulate", Box::new(|| criterion_11(&ctx, &root))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err(anyhow!("panicked")));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2}: {name}: {detail} [{secs:.1} s]", i + 1),
            Err(e) => {
                failed += 1;
                println!("FAIL criterion {:>2}: {name}: {e:#} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
