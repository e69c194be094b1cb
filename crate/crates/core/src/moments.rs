//! Saturation function and the second-moment matrices of the saturated
//! noise processes.
//!
//! `Σ_XX` is the covariance of `[X̃_open; Z]`, where `X̃_open = 𝒜ζ₀ + 𝒟W`
//! and `Z = 𝒜φ(ζ₀) + 𝒟φ(W)`; `Σ_UU` is the covariance of `Z` alone.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifting::BlockLift;
use crate::linalg::{self, is_diagonal, symmetrize, LinalgError};
use crate::model::{ProblemSpec, Saturation};
use crate::sampling;
use crate::scalar::Scalar;

pub use crate::linalg::psd_sqrt;

/// Smallest Monte Carlo sample count accepted for moment estimation.
pub const MIN_MC_SAMPLES: usize = 10_000;
/// Default Monte Carlo sample count when covariances are correlated.
pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("sigma and zeta must be positive (got sigma={sigma}, zeta={zeta})")]
    NonPositive { sigma: f64, zeta: f64 },
    #[error("analytic moments need diagonal {0}; use Monte Carlo mode")]
    NotDiagonal(&'static str),
    #[error("Monte Carlo moment estimation needs at least {MIN_MC_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("saturation limits have length {got}, expected {want}")]
    LimitLength { got: usize, want: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Resolved per-component clamp limits for `[ζ₀; w_0; …; w_{N-1}]`.
/// `None` means unbounded on that component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SaturationSpec<T: Scalar> {
    pub state_dim: usize,
    pub horizon: usize,
    pub limits: Vec<Option<T>>,
}

impl<T: Scalar> SaturationSpec<T> {
    pub fn disabled(state_dim: usize, horizon: usize) -> Self {
        Self { state_dim, horizon, limits: vec![None; (horizon + 1) * state_dim] }
    }

    /// Resolves sigma multipliers against the standard deviations of `ζ₀`
    /// (from `Σ₀`) and of each `w_k` (from `D_k D_kᵀ`).
    pub fn resolve(spec: &ProblemSpec<T>) -> Self {
        let n = spec.state_dim();
        let horizon = spec.horizon;
        let mut limits = Vec::with_capacity((horizon + 1) * n);
        match &spec.saturation {
            Saturation::Disabled => return Self::disabled(n, horizon),
            Saturation::SigmaMultiplier(mult) => {
                limits.extend((0..n).map(|i| Some(*mult * spec.initial.cov[(i, i)].max(T::zero()).sqrt())));
                for k in 0..horizon {
                    let cov = spec.noise_cov(k);
                    limits.extend((0..n).map(|i| Some(*mult * cov[(i, i)].max(T::zero()).sqrt())));
                }
            }
            Saturation::Limits { initial, noise } => {
                limits.extend(initial.iter().map(|&l| Some(l)));
                for _ in 0..horizon {
                    limits.extend(noise.iter().map(|&l| Some(l)));
                }
            }
        }
        Self { state_dim: n, horizon, limits }
    }

    pub fn len(&self) -> usize {
        self.limits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.limits.is_empty()
    }

    /// True when every component has a finite limit.
    pub fn is_bounded(&self) -> bool {
        self.limits.iter().all(|l| l.is_some_and(|v| v.is_finite()))
    }

    pub fn initial(&self) -> &[Option<T>] {
        &self.limits[..self.state_dim]
    }

    /// Limits applied to `w_k`.
    pub fn noise(&self, k: usize) -> &[Option<T>] {
        let n = self.state_dim;
        &self.limits[(k + 1) * n..(k + 2) * n]
    }

    pub fn apply(&self, v: &DVector<T>) -> DVector<T> {
        saturate(v, &self.limits)
    }
}

/// Element-wise symmetric clamp `max(-ζ_i, min(v_i, ζ_i))`.
pub fn saturate<T: Scalar>(v: &DVector<T>, limits: &[Option<T>]) -> DVector<T> {
    debug_assert_eq!(v.len(), limits.len());
    DVector::from_iterator(v.len(), v.iter().zip(limits).map(|(&x, l)| clamp(x, *l)))
}

#[inline]
pub(crate) fn clamp<T: Scalar>(x: T, limit: Option<T>) -> T {
    match limit {
        Some(l) => x.max(-l).min(l),
        None => x,
    }
}

fn check_positive<T: Scalar>(sigma: T, zeta: T) -> Result<(), MomentError> {
    if sigma > T::zero() && zeta > T::zero() {
        Ok(())
    } else {
        Err(MomentError::NonPositive { sigma: sigma.as_f64(), zeta: zeta.as_f64() })
    }
}

/// `E[z φ(z)] = σ² erf(ζ / (√2 σ))` for `z ~ N(0, σ²)`.
pub fn sat_cross_moment<T: Scalar>(sigma: T, zeta: T) -> Result<T, MomentError> {
    check_positive(sigma, zeta)?;
    Ok(sigma * sigma * (zeta / (T::lit(std::f64::consts::SQRT_2) * sigma)).erf())
}

/// `E[φ(z)²] = ζ² + (σ² − ζ²) erf(r) − (2ζσ/√(2π)) e^{−r²}` with
/// `r = ζ / (√2 σ)`, for `z ~ N(0, σ²)`.
///
/// Evaluated as `σ² erf(r) + ζ² erfc(r) − …`, which is the same expression
/// without the cancellation between `ζ²` and `ζ² erf(r)` for large `r`.
pub fn sat_second_moment<T: Scalar>(sigma: T, zeta: T) -> Result<T, MomentError> {
    check_positive(sigma, zeta)?;
    let r = zeta / (T::lit(std::f64::consts::SQRT_2) * sigma);
    let density = T::lit(2.0 / (2.0 * std::f64::consts::PI).sqrt()) * zeta * sigma * (-r * r).exp();
    Ok(sigma * sigma * r.erf() + zeta * zeta * r.erfc() - density)
}

/// `(E[zφ(z)], E[φ(z)²])` for one scalar component with variance `var`,
/// covering the degenerate zero-variance and unbounded cases.
fn component_moments<T: Scalar>(var: T, limit: Option<T>) -> Result<(T, T), MomentError> {
    if var <= T::zero() {
        return Ok((T::zero(), T::zero()));
    }
    match limit {
        None => Ok((var, var)),
        Some(l) if !l.is_finite() => Ok((var, var)),
        Some(l) if l <= T::zero() => Ok((T::zero(), T::zero())),
        Some(l) => {
            let sigma = var.sqrt();
            Ok((sat_cross_moment(sigma, l)?, sat_second_moment(sigma, l)?))
        }
    }
}

/// `E[ζζᵀ]`, `E[ζφ(ζ)ᵀ]`, `E[φ(ζ)φ(ζ)ᵀ]` for one noise source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SourceMoments<T: Scalar> {
    pub zz: DMatrix<T>,
    pub zphi: DMatrix<T>,
    pub phiphi: DMatrix<T>,
}

impl<T: Scalar> SourceMoments<T> {
    fn zeros(n: usize) -> Self {
        Self { zz: DMatrix::zeros(n, n), zphi: DMatrix::zeros(n, n), phiphi: DMatrix::zeros(n, n) }
    }

    /// The 2×2-block matrix `[[zz, zphi], [zphiᵀ, phiphi]]`.
    pub fn joint(&self) -> DMatrix<T> {
        let n = self.zz.nrows();
        let mut out = DMatrix::zeros(2 * n, 2 * n);
        out.view_mut((0, 0), (n, n)).copy_from(&self.zz);
        out.view_mut((0, n), (n, n)).copy_from(&self.zphi);
        out.view_mut((n, 0), (n, n)).copy_from(&self.zphi.transpose());
        out.view_mut((n, n), (n, n)).copy_from(&self.phiphi);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MomentMatrices<T: Scalar> {
    /// `2(N+1)n_x` square.
    pub sigma_xx: DMatrix<T>,
    /// `(N+1)n_x` square.
    pub sigma_uu: DMatrix<T>,
    pub sigma_xx_sqrt: DMatrix<T>,
    pub sigma_uu_sqrt: DMatrix<T>,
    pub initial: SourceMoments<T>,
    pub noise: SourceMoments<T>,
}

impl<T: Scalar> MomentMatrices<T> {
    /// Side length of `Σ_UU`, i.e. `(N+1)n_x`.
    pub fn stacked_len(&self) -> usize {
        self.sigma_uu.nrows()
    }

    /// Combines source moments through the lift and caches the square roots.
    pub fn assemble(lift: &BlockLift<T>, initial: SourceMoments<T>, noise: SourceMoments<T>) -> Result<Self, MomentError> {
        let m = lift.stacked_state_len();
        let map = |g: &DMatrix<T>, s: &DMatrix<T>| g * s * g.transpose();
        let top_left = map(&lift.cal_a, &initial.zz) + map(&lift.cal_d, &noise.zz);
        let top_right = map(&lift.cal_a, &initial.zphi) + map(&lift.cal_d, &noise.zphi);
        let bottom_right = map(&lift.cal_a, &initial.phiphi) + map(&lift.cal_d, &noise.phiphi);
        let mut sigma_xx = DMatrix::zeros(2 * m, 2 * m);
        sigma_xx.view_mut((0, 0), (m, m)).copy_from(&top_left);
        sigma_xx.view_mut((0, m), (m, m)).copy_from(&top_right);
        sigma_xx.view_mut((m, 0), (m, m)).copy_from(&top_right.transpose());
        sigma_xx.view_mut((m, m), (m, m)).copy_from(&bottom_right);
        let sigma_xx = symmetrize(&sigma_xx);
        let sigma_uu = symmetrize(&bottom_right);
        let sigma_xx_sqrt = psd_sqrt(&sigma_xx)?;
        let sigma_uu_sqrt = psd_sqrt(&sigma_uu)?;
        Ok(Self { sigma_xx, sigma_uu, sigma_xx_sqrt, sigma_uu_sqrt, initial, noise })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentMode {
    /// Closed-form scalar formulas; needs uncorrelated components.
    Analytic,
    MonteCarlo { samples: usize, seed: u64 },
}

impl MomentMode {
    /// Analytic when the covariances allow it, Monte Carlo otherwise.
    pub fn auto<T: Scalar>(spec: &ProblemSpec<T>, seed: u64) -> Self {
        if analytic_supported(spec) {
            MomentMode::Analytic
        } else {
            MomentMode::MonteCarlo { samples: DEFAULT_MC_SAMPLES, seed }
        }
    }
}

fn diagonal_enough<T: Scalar>(m: &DMatrix<T>) -> bool {
    is_diagonal(m, T::lit(1e-12) * linalg::max_abs(m))
}

fn analytic_supported<T: Scalar>(spec: &ProblemSpec<T>) -> bool {
    matches!(spec.saturation, Saturation::Disabled)
        || (diagonal_enough(&spec.initial.cov) && (0..spec.horizon).all(|k| diagonal_enough(&spec.noise_cov(k))))
}

/// Source moments from the closed-form scalar formulas.
pub fn analytic_source_moments<T: Scalar>(
    spec: &ProblemSpec<T>,
    sat: &SaturationSpec<T>,
) -> Result<(SourceMoments<T>, SourceMoments<T>), MomentError> {
    let n = spec.state_dim();
    let horizon = spec.horizon;
    if sat.len() != (horizon + 1) * n {
        return Err(MomentError::LimitLength { got: sat.len(), want: (horizon + 1) * n });
    }
    let unsaturated = sat.limits.iter().all(|l| l.is_none_or(|v| !v.is_finite()));
    if !unsaturated {
        if !diagonal_enough(&spec.initial.cov) {
            return Err(MomentError::NotDiagonal("initial covariance"));
        }
        if !(0..horizon).all(|k| diagonal_enough(&spec.noise_cov(k))) {
            return Err(MomentError::NotDiagonal("noise covariance D_k D_kᵀ"));
        }
    }

    let fill = |cov: &DMatrix<T>, limits: &[Option<T>], out: &mut SourceMoments<T>, offset: usize| -> Result<(), MomentError> {
        out.zz.view_mut((offset, offset), (n, n)).copy_from(cov);
        if unsaturated {
            out.zphi.view_mut((offset, offset), (n, n)).copy_from(cov);
            out.phiphi.view_mut((offset, offset), (n, n)).copy_from(cov);
        } else {
            for i in 0..n {
                let (cross, second) = component_moments(cov[(i, i)], limits[i])?;
                out.zphi[(offset + i, offset + i)] = cross;
                out.phiphi[(offset + i, offset + i)] = second;
            }
        }
        Ok(())
    };

    let mut initial = SourceMoments::zeros(n);
    fill(&spec.initial.cov, sat.initial(), &mut initial, 0)?;
    let mut noise = SourceMoments::zeros(horizon * n);
    for k in 0..horizon {
        fill(&spec.noise_cov(k), sat.noise(k), &mut noise, k * n)?;
    }
    Ok((initial, noise))
}

/// Builds `Σ_XX`, `Σ_UU` and the constituent blocks.
pub fn build_moment_blocks<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    sat: &SaturationSpec<T>,
    mode: MomentMode,
) -> Result<MomentMatrices<T>, MomentError> {
    match mode {
        MomentMode::Analytic => {
            let (initial, noise) = analytic_source_moments(spec, sat)?;
            MomentMatrices::assemble(lift, initial, noise)
        }
        MomentMode::MonteCarlo { samples, seed } => Ok(mc_moment_oracle(spec, lift, sat, samples, seed)?.moments),
    }
}

/// Sample-average moment estimate with element-wise standard errors of the
/// source blocks.
#[derive(Clone, Debug)]
pub struct MonteCarloMoments<T: Scalar> {
    pub moments: MomentMatrices<T>,
    pub initial_se: SourceMoments<T>,
    pub noise_se: SourceMoments<T>,
    pub samples: usize,
}

/// Running sums of `y yᵀ` and `(y yᵀ)²` for the joint vectors
/// `[ζ₀; φ(ζ₀)]` and `[w_k; φ(w_k)]`, k = 0..N-1.
#[derive(Clone)]
struct Accum<T: Scalar> {
    sum: Vec<DMatrix<T>>,
    sum_sq: Vec<DMatrix<T>>,
}

impl<T: Scalar> Accum<T> {
    fn new(blocks: usize, n: usize) -> Self {
        Self { sum: vec![DMatrix::zeros(2 * n, 2 * n); blocks], sum_sq: vec![DMatrix::zeros(2 * n, 2 * n); blocks] }
    }

    fn add(&mut self, block: usize, y: &DVector<T>) {
        let outer = y * y.transpose();
        self.sum_sq[block] += outer.component_mul(&outer);
        self.sum[block] += outer;
    }

    fn merge(&mut self, other: &Self) {
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_sq.iter_mut().zip(&other.sum_sq) {
            *a += b;
        }
    }
}

/// Monte Carlo estimate of every source moment block.
///
/// Noise samples at different steps are independent and zero-mean, so the
/// cross-step blocks of `E[W Wᵀ]`, `E[W φ(W)ᵀ]` and `E[φ(W) φ(W)ᵀ]` are zero;
/// only the per-step diagonal blocks are estimated. Results are identical
/// for a fixed seed regardless of the rayon thread count.
pub fn mc_moment_oracle<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    sat: &SaturationSpec<T>,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloMoments<T>, MomentError> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(MomentError::TooFewSamples(n_samples));
    }
    let n = spec.state_dim();
    let horizon = spec.horizon;
    if sat.len() != (horizon + 1) * n {
        return Err(MomentError::LimitLength { got: sat.len(), want: (horizon + 1) * n });
    }
    let init_factor = psd_sqrt(&spec.initial.cov)?;
    let joint = |x: &DVector<T>, limits: &[Option<T>]| -> DVector<T> {
        let mut y = DVector::zeros(2 * n);
        y.rows_mut(0, n).copy_from(x);
        y.rows_mut(n, n).copy_from(&saturate(x, limits));
        y
    };

    let partials: Vec<Accum<T>> = sampling::chunk_ranges(n_samples)
        .into_par_iter()
        .map(|range| {
            let mut acc = Accum::new(horizon + 1, n);
            for i in range {
                let mut rng = sampling::stream(seed, i as u64);
                let zeta0 = sampling::gaussian(&mut rng, &init_factor);
                acc.add(0, &joint(&zeta0, sat.initial()));
                for k in 0..horizon {
                    let w = sampling::gaussian(&mut rng, &spec.d[k]);
                    acc.add(k + 1, &joint(&w, sat.noise(k)));
                }
            }
            acc
        })
        .collect();
    let mut total = Accum::new(horizon + 1, n);
    for p in &partials {
        total.merge(p);
    }

    let count = T::from_usize(n_samples).unwrap();
    let split = |mean: &DMatrix<T>, se: &DMatrix<T>, m: &mut SourceMoments<T>, s: &mut SourceMoments<T>, off: usize| {
        m.zz.view_mut((off, off), (n, n)).copy_from(&mean.view((0, 0), (n, n)));
        m.zphi.view_mut((off, off), (n, n)).copy_from(&mean.view((0, n), (n, n)));
        m.phiphi.view_mut((off, off), (n, n)).copy_from(&mean.view((n, n), (n, n)));
        s.zz.view_mut((off, off), (n, n)).copy_from(&se.view((0, 0), (n, n)));
        s.zphi.view_mut((off, off), (n, n)).copy_from(&se.view((0, n), (n, n)));
        s.phiphi.view_mut((off, off), (n, n)).copy_from(&se.view((n, n), (n, n)));
    };
    let stats = |b: usize| {
        let mean = &total.sum[b] / count;
        let second = &total.sum_sq[b] / count;
        let denom = (count - T::one()).max(T::one());
        let se = DMatrix::from_fn(2 * n, 2 * n, |i, j| {
            let var = (second[(i, j)] - mean[(i, j)] * mean[(i, j)]).max(T::zero()) * count / denom;
            (var / count).sqrt()
        });
        (mean, se)
    };

    let (mut initial, mut initial_se) = (SourceMoments::zeros(n), SourceMoments::zeros(n));
    let (mean, se) = stats(0);
    split(&mean, &se, &mut initial, &mut initial_se, 0);
    let (mut noise, mut noise_se) = (SourceMoments::zeros(horizon * n), SourceMoments::zeros(horizon * n));
    for k in 0..horizon {
        let (mean, se) = stats(k + 1);
        split(&mean, &se, &mut noise, &mut noise_se, k * n);
    }
    let moments = MomentMatrices::assemble(lift, initial, noise)?;
    Ok(MonteCarloMoments { moments, initial_se, noise_se, samples: n_samples })
}
