//! Closed-loop Monte Carlo of a synthesized controller and brute-force
//! verifiers.
//!
//! The controller never sees the noise. At step `k` it reconstructs
//! `w_{k-1} = x_k − A x_{k-1} − B u_{k-1}` from the measured state and feeds
//! the clamped value into `z_k = A z_{k-1} + φ(w_{k-1})`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifting::{build_lift, BlockLift};
use crate::linalg::{self, psd_sqrt, LinalgError};
use crate::model::{ProblemSpec, RiskAllocation};
use crate::moments::{build_moment_blocks, clamp, MomentError, MomentMode, SaturationSpec};
use crate::sampling::{self, chunk_ranges};
use crate::scalar::Scalar;
use crate::solve::{ControllerSolution, SolutionStatus};

/// Slack on `Hu_k ≤ h` before a sample counts as a violation.
pub const INPUT_TOLERANCE: f64 = 1e-9;
/// Slack of the vertex enumeration.
pub const VERTEX_TOLERANCE: f64 = 1e-7;
/// Largest box dimension [`vertex_containment_oracle`] will enumerate.
pub const MAX_VERTEX_DIM: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("sample count must be positive")]
    NoSamples,
    #[error("controller status {0} is not usable for simulation")]
    Unusable(SolutionStatus),
    #[error("controller shape ({got}) does not match the problem ({want})")]
    Shape { got: String, want: String },
    #[error("box dimension {dim} exceeds the enumeration limit {max}")]
    TooLarge { dim: usize, max: usize },
    #[error("step {k} out of range 0..{horizon}")]
    Step { k: usize, horizon: usize },
    #[error("saturation limits must be finite for this check")]
    Unbounded,
    #[error("report has no path costs")]
    EmptyReport,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Moment(#[from] MomentError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `w_k ~ N(0, D_k D_kᵀ)`.
    #[default]
    Gaussian,
    /// Every entry of `w_k` is `±magnitude` with a fair random sign.
    Spikes { magnitude: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub samples: usize,
    pub seed: u64,
    /// Number of sample paths kept for plotting.
    pub retain: usize,
    pub noise: NoiseModel,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self { samples: 10_000, seed: 0, retain: 100, noise: NoiseModel::Gaussian }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Trajectory<T: Scalar> {
    pub sample: usize,
    /// `x_0 … x_N`.
    pub states: Vec<DVector<T>>,
    /// `u_0 … u_{N-1}`.
    pub inputs: Vec<DVector<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RolloutReport<T: Scalar> {
    pub samples: usize,
    pub seed: u64,
    pub noise: NoiseModel,
    /// `violation[j][k]`: fraction of samples with `α_jᵀx_k > β_j`, `k = 0..=N`.
    pub violation: Vec<Vec<f64>>,
    /// Sample-steps with some `Hu_k > h + 1e-9`.
    pub input_bound_violations: usize,
    /// `max (Hu_k − h)` over all samples, steps and rows.
    pub max_input_excess: f64,
    pub cost_mean: T,
    pub cost_se: T,
    /// `Σ_{k<N} x_kᵀQx_k + u_kᵀRu_k` per sample.
    pub path_costs: Vec<T>,
    pub terminal_mean: DVector<T>,
    pub terminal_mean_se: DVector<T>,
    pub terminal_cov: DMatrix<T>,
    /// Standard error of each entry of `terminal_cov`.
    pub terminal_cov_se: DMatrix<T>,
    pub step_means: Vec<DVector<T>>,
    pub step_covs: Vec<DMatrix<T>>,
    pub trajectories: Vec<Trajectory<T>>,
    /// `max |ŵ_k − w_k|` between reconstructed and injected noise.
    pub max_reconstruction_error: f64,
    /// `max ‖z_k‖ / bound_k` over samples and steps with a finite bound.
    pub max_z_bound_ratio: f64,
}

fn check_shapes<T: Scalar>(spec: &ProblemSpec<T>, solution: &ControllerSolution<T>) -> Result<(), RolloutError> {
    let want = (spec.state_dim(), spec.input_dim(), spec.horizon);
    let got = (solution.state_dim, solution.input_dim, solution.horizon);
    let gains_ok = solution.k_blocks.len() == spec.horizon
        && solution.k_blocks.iter().all(|k| k.shape() == (want.1, want.0))
        && solution.v.len() == want.1 * want.2;
    if got != want || !gains_ok {
        return Err(RolloutError::Shape {
            got: format!("n_x={}, n_u={}, N={}", got.0, got.1, got.2),
            want: format!("n_x={}, n_u={}, N={}", want.0, want.1, want.2),
        });
    }
    Ok(())
}

/// `‖z_0‖ ≤ ‖ζ^max‖`, `‖z_{k+1}‖ ≤ ‖A_k‖‖z_k‖ + ‖w_k^max‖`; `None` once any
/// limit is infinite.
pub fn z_norm_bounds<T: Scalar>(spec: &ProblemSpec<T>, sat: &SaturationSpec<T>) -> Vec<Option<T>> {
    let norm = |limits: &[Option<T>]| -> Option<T> {
        limits.iter().try_fold(T::zero(), |acc, l| l.filter(|v| v.is_finite()).map(|v| acc + v * v)).map(|s| s.sqrt())
    };
    let mut out = Vec::with_capacity(spec.horizon + 1);
    let mut bound = norm(sat.initial());
    out.push(bound);
    for k in 0..spec.horizon {
        bound = match (bound, norm(sat.noise(k))) {
            (Some(b), Some(w)) => Some(linalg::spectral_norm(&spec.a[k]) * b + w),
            _ => None,
        };
        out.push(bound);
    }
    out
}

struct ChunkResult<T: Scalar> {
    violation_counts: Vec<Vec<usize>>,
    input_violations: usize,
    max_input_excess: f64,
    path_costs: Vec<T>,
    terminal: Vec<DVector<T>>,
    /// Per step: `Σ d` and `Σ d dᵀ` with `d = x_k − x̄_k` (nominal mean).
    sum: Vec<DVector<T>>,
    sum_sq: Vec<DMatrix<T>>,
    trajectories: Vec<Trajectory<T>>,
    max_reconstruction_error: f64,
    max_z_ratio: f64,
}

/// Closed-loop simulation with per-sample random streams.
pub fn simulate_closed_loop<T: Scalar>(
    spec: &ProblemSpec<T>,
    solution: &ControllerSolution<T>,
    options: &RolloutOptions,
) -> Result<RolloutReport<T>, RolloutError> {
    if options.samples == 0 {
        return Err(RolloutError::NoSamples);
    }
    if !solution.status.is_usable() {
        return Err(RolloutError::Unusable(solution.status));
    }
    check_shapes(spec, solution)?;
    let (n, horizon) = (spec.state_dim(), spec.horizon);
    let n_j = spec.state_constraints.len();
    let sat = SaturationSpec::resolve(spec);
    let init_factor = psd_sqrt(&spec.initial.cov)?;
    let noise_factors = (0..horizon).map(|k| psd_sqrt(&spec.noise_cov(k))).collect::<Result<Vec<_>, _>>()?;
    let z_bounds = z_norm_bounds(spec, &sat);
    let tol = T::lit(INPUT_TOLERANCE);

    let mut nominal = Vec::with_capacity(horizon + 1);
    nominal.push(spec.initial.mean.clone());
    for k in 0..horizon {
        let next = &spec.a[k] * &nominal[k] + &spec.b[k] * solution.feedforward(k);
        nominal.push(next);
    }
    let feedforward: Vec<DVector<T>> = (0..horizon).map(|k| solution.feedforward(k)).collect();

    let run_chunk = |range: std::ops::Range<usize>| -> ChunkResult<T> {
        let mut acc = ChunkResult {
            violation_counts: vec![vec![0; horizon + 1]; n_j],
            input_violations: 0,
            max_input_excess: f64::NEG_INFINITY,
            path_costs: Vec::with_capacity(range.len()),
            terminal: Vec::with_capacity(range.len()),
            sum: vec![DVector::zeros(n); horizon + 1],
            sum_sq: vec![DMatrix::zeros(n, n); horizon + 1],
            trajectories: Vec::new(),
            max_reconstruction_error: 0.0,
            max_z_ratio: 0.0,
        };
        for sample in range {
            let mut rng = sampling::stream(options.seed, sample as u64);
            let zeta = sampling::gaussian::<T>(&mut rng, &init_factor);
            let mut x = &spec.initial.mean + &zeta;
            let mut z = DVector::from_iterator(n, zeta.iter().zip(sat.initial()).map(|(&v, &l)| clamp(v, l)));
            let keep = sample < options.retain;
            let mut states = Vec::new();
            let mut inputs = Vec::new();
            let mut cost = T::zero();
            for k in 0..=horizon {
                for (j, c) in spec.state_constraints.iter().enumerate() {
                    if c.alpha.dot(&x) > c.beta {
                        acc.violation_counts[j][k] += 1;
                    }
                }
                let d = &x - &nominal[k];
                acc.sum[k] += &d;
                acc.sum_sq[k] += &d * d.transpose();
                if let Some(b) = z_bounds[k] {
                    if b > T::zero() {
                        acc.max_z_ratio = acc.max_z_ratio.max((z.norm() / b).as_f64());
                    }
                }
                if keep {
                    states.push(x.clone());
                }
                if k == horizon {
                    break;
                }
                let u = &feedforward[k] + &solution.k_blocks[k] * &z;
                let mut violated = false;
                for h in &spec.input_constraints {
                    let excess = h.alpha.dot(&u) - h.beta;
                    acc.max_input_excess = acc.max_input_excess.max(excess.as_f64());
                    violated |= excess > tol;
                }
                if violated {
                    acc.input_violations += 1;
                }
                cost += (&spec.cost.q * &x).dot(&x) + (&spec.cost.r * &u).dot(&u);
                let w = match options.noise {
                    NoiseModel::Gaussian => sampling::gaussian::<T>(&mut rng, &noise_factors[k]),
                    NoiseModel::Spikes { magnitude } => {
                        let mag = T::lit(magnitude);
                        DVector::from_fn(n, |_, _| if rng.random::<bool>() { mag } else { -mag })
                    }
                };
                let ax = &spec.a[k] * &x;
                let bu = &spec.b[k] * &u;
                let next = &ax + &bu + &w;
                let w_hat = &next - &ax - &bu;
                acc.max_reconstruction_error = acc.max_reconstruction_error.max((&w_hat - &w).amax().as_f64());
                let phi = DVector::from_iterator(n, w_hat.iter().zip(sat.noise(k)).map(|(&v, &l)| clamp(v, l)));
                z = &spec.a[k] * &z + phi;
                if keep {
                    inputs.push(u);
                }
                x = next;
            }
            acc.path_costs.push(cost);
            acc.terminal.push(x);
            if keep {
                acc.trajectories.push(Trajectory { sample, states, inputs });
            }
        }
        acc
    };

    let chunks: Vec<ChunkResult<T>> = chunk_ranges(options.samples).into_par_iter().map(run_chunk).collect();

    let mut violation_counts = vec![vec![0usize; horizon + 1]; n_j];
    let mut input_bound_violations = 0;
    let mut max_input_excess = f64::NEG_INFINITY;
    let mut path_costs = Vec::with_capacity(options.samples);
    let mut terminal = Vec::with_capacity(options.samples);
    let mut sum = vec![DVector::<T>::zeros(n); horizon + 1];
    let mut sum_sq = vec![DMatrix::<T>::zeros(n, n); horizon + 1];
    let mut trajectories = Vec::new();
    let mut max_reconstruction_error: f64 = 0.0;
    let mut max_z_bound_ratio: f64 = 0.0;
    for c in chunks {
        for j in 0..n_j {
            for k in 0..=horizon {
                violation_counts[j][k] += c.violation_counts[j][k];
            }
        }
        input_bound_violations += c.input_violations;
        max_input_excess = max_input_excess.max(c.max_input_excess);
        path_costs.extend(c.path_costs);
        terminal.extend(c.terminal);
        for k in 0..=horizon {
            sum[k] += &c.sum[k];
            sum_sq[k] += &c.sum_sq[k];
        }
        trajectories.extend(c.trajectories);
        max_reconstruction_error = max_reconstruction_error.max(c.max_reconstruction_error);
        max_z_bound_ratio = max_z_bound_ratio.max(c.max_z_ratio);
    }
    if spec.input_constraints.is_empty() {
        max_input_excess = 0.0;
    }

    let count = options.samples;
    let nt = T::from_usize(count).unwrap();
    let denom = T::from_usize(count.saturating_sub(1).max(1)).unwrap();
    let mut step_means = Vec::with_capacity(horizon + 1);
    let mut step_covs = Vec::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let mean_d = &sum[k] / nt;
        let cov = (&sum_sq[k] - &mean_d * mean_d.transpose() * nt) / denom;
        step_means.push(&nominal[k] + &mean_d);
        step_covs.push(linalg::symmetrize(&cov));
    }
    let terminal_mean = step_means[horizon].clone();
    let terminal_cov = step_covs[horizon].clone();
    let sqrt_n = nt.sqrt();
    let terminal_mean_se = DVector::from_fn(n, |i, _| (terminal_cov[(i, i)].max(T::zero()) / nt).sqrt());
    let terminal_cov_se = DMatrix::from_fn(n, n, |i, j| {
        let (mi, mj) = (terminal_mean[i], terminal_mean[j]);
        let products: Vec<T> = terminal.iter().map(|x| (x[i] - mi) * (x[j] - mj)).collect();
        let mean = products.iter().fold(T::zero(), |a, &p| a + p) / nt;
        let var = products.iter().fold(T::zero(), |a, &p| a + (p - mean) * (p - mean)) / denom;
        var.sqrt() / sqrt_n
    });
    let (cost_mean, cost_se) = mean_and_se(&path_costs);
    let violation = violation_counts
        .iter()
        .map(|row| row.iter().map(|&c| c as f64 / count as f64).collect())
        .collect();

    Ok(RolloutReport {
        samples: count,
        seed: options.seed,
        noise: options.noise,
        violation,
        input_bound_violations,
        max_input_excess,
        cost_mean,
        cost_se,
        path_costs,
        terminal_mean,
        terminal_mean_se,
        terminal_cov,
        terminal_cov_se,
        step_means,
        step_covs,
        trajectories,
        max_reconstruction_error,
        max_z_bound_ratio,
    })
}

fn mean_and_se<T: Scalar>(values: &[T]) -> (T, T) {
    let n = T::from_usize(values.len()).unwrap();
    let mean = values.iter().fold(T::zero(), |a, &v| a + v) / n;
    if values.len() < 2 {
        return (mean, T::zero());
    }
    let var = values.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / (n - T::one());
    (mean, (var / n).sqrt())
}

/// Sample mean and standard error of the per-path cost.
pub fn estimate_cost<T: Scalar>(report: &RolloutReport<T>) -> Result<(T, T), RolloutError> {
    if report.path_costs.is_empty() {
        return Err(RolloutError::EmptyReport);
    }
    Ok(mean_and_se(&report.path_costs))
}

/// Checks `HF_k(V + K[𝒜 𝒟]ξ) ≤ h + 1e-7` at every vertex of the
/// saturated-noise box by enumeration.
pub fn vertex_containment_oracle<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    solution: &ControllerSolution<T>,
    k: usize,
) -> Result<bool, RolloutError> {
    check_shapes(spec, solution)?;
    if k >= spec.horizon {
        return Err(RolloutError::Step { k, horizon: spec.horizon });
    }
    let sat = SaturationSpec::resolve(spec);
    let dim = sat.len();
    if dim > MAX_VERTEX_DIM {
        return Err(RolloutError::TooLarge { dim, max: MAX_VERTEX_DIM });
    }
    if !sat.is_bounded() {
        return Err(RolloutError::Unbounded);
    }
    let limits: Vec<T> = sat.limits.iter().map(|l| l.unwrap()).collect();
    let gain = &solution.k_blocks[k] * lift.source_row_block(k);
    let v = solution.feedforward(k);
    let tol = T::lit(VERTEX_TOLERANCE);
    for mask in 0u64..(1u64 << dim) {
        let xi = DVector::from_fn(dim, |i, _| if mask >> i & 1 == 1 { limits[i] } else { -limits[i] });
        let u = &v + &gain * xi;
        for h in &spec.input_constraints {
            if h.alpha.dot(&u) > h.beta + tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CantelliRow {
    pub j: usize,
    pub k: usize,
    pub empirical: f64,
    /// Binomial standard error of `empirical`.
    pub se: f64,
    pub allocated: f64,
    /// `Σ / (Σ + c²)` with `c = β − αᵀx̄_k`, or 1 when `c ≤ 0`.
    pub cantelli_bound: f64,
    /// `empirical > allocated + 3 se`.
    pub flagged: bool,
}

/// Empirical violation rates against the allocated risk and the analytic
/// Cantelli bound of the designed closed-loop distribution, `k = 1..=N`.
pub fn empirical_cantelli_check<T: Scalar>(
    spec: &ProblemSpec<T>,
    solution: &ControllerSolution<T>,
    report: &RolloutReport<T>,
    risk: &RiskAllocation<T>,
) -> Result<Vec<CantelliRow>, RolloutError> {
    check_shapes(spec, solution)?;
    let (n, horizon) = (spec.state_dim(), spec.horizon);
    let lift = build_lift(spec);
    let sat = SaturationSpec::resolve(spec);
    let moments = build_moment_blocks(spec, &lift, &sat, MomentMode::auto(spec, report.seed))?;
    let stacked = lift.stacked_state_len();
    let bk = &lift.cal_b * solution.feedback_matrix();
    let mean = &lift.cal_a * &spec.initial.mean + &lift.cal_b * &solution.v;
    let mut rows = Vec::new();
    for (j, c) in spec.state_constraints.iter().enumerate() {
        for k in 1..=horizon {
            let mut a = DVector::zeros(stacked);
            a.rows_mut(k * n, n).copy_from(&c.alpha);
            let mut lifted = DVector::zeros(2 * stacked);
            lifted.rows_mut(0, stacked).copy_from(&a);
            lifted.rows_mut(stacked, stacked).copy_from(&(bk.transpose() * &a));
            let var = (&moments.sigma_xx * &lifted).dot(&lifted).max(T::zero()).as_f64();
            let margin = (c.beta - c.alpha.dot(&mean.rows(k * n, n))).as_f64();
            let bound = if margin > 0.0 { var / (var + margin * margin) } else { 1.0 };
            let empirical = report.violation[j][k];
            let p = risk.p[j].as_f64();
            let se = (p * (1.0 - p) / report.samples as f64).sqrt();
            rows.push(CantelliRow {
                j,
                k,
                empirical,
                se,
                allocated: p,
                cantelli_bound: bound,
                flagged: empirical > p + 3.0 * se,
            });
        }
    }
    Ok(rows)
}
