//! Assembly of the covariance-steering conic program.
//!
//! Decision variables are the feedforward sequence `V`, the block-diagonal
//! feedback gains `K_k` and, when input hard constraints are present, one
//! nonnegative slack matrix `Ω_k` per step. Every constraint is emitted as
//! an affine expression that must lie in a cone; the list is ordered by
//! family, then step `k`, then half-space `j`, so the program is
//! byte-stable for identical inputs.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lifting::BlockLift;
use crate::linalg::{self, psd_factor, psd_sqrt, LinalgError};
use crate::model::{cantelli_coefficient, ProblemSpec, RiskAllocation};
use crate::moments::{MomentMatrices, SaturationSpec};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("Cantelli probability {0} outside (0, 1)")]
    BadProbability(f64),
    #[error(
        "input hard constraints need finite saturation limits on every component; \
         disable the input constraints or give finite limits"
    )]
    UnboundedSaturation,
    #[error("missing moment factor: {0}")]
    MissingMoments(&'static str),
    #[error("risk allocation has {got} entries for {want} state constraints")]
    RiskLength { got: usize, want: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// `Σ_j coef_j x_j + constant`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AffineExpr<T: Scalar> {
    pub terms: Vec<(usize, T)>,
    pub constant: T,
}

impl<T: Scalar> AffineExpr<T> {
    pub fn constant(value: T) -> Self {
        Self { terms: Vec::new(), constant: value }
    }

    pub fn add(&mut self, var: usize, coef: T) {
        if coef != T::zero() {
            self.terms.push((var, coef));
        }
    }

    pub fn eval(&self, x: &[T]) -> T {
        self.terms.iter().fold(self.constant, |acc, &(i, c)| acc + c * x[i])
    }

    /// Linear part only.
    pub fn eval_linear(&self, x: &[T]) -> T {
        self.terms.iter().fold(T::zero(), |acc, &(i, c)| acc + c * x[i])
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty() && self.constant == T::zero()
    }

    /// Sorts terms by variable and merges duplicates.
    pub fn canonicalize(&mut self) {
        self.terms.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(usize, T)> = Vec::with_capacity(self.terms.len());
        for &(i, c) in &self.terms {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|&(_, c)| c != T::zero());
        self.terms = merged;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    /// Rows equal zero.
    Zero,
    /// Rows are nonnegative.
    Nonnegative,
    /// `rows[0] ≥ ‖rows[1..]‖`.
    SecondOrder,
    /// Upper triangle, column-major, of a symmetric `dim × dim` PSD matrix.
    Psd { dim: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Objective,
    Chance { k: usize, j: usize },
    InputRobust { k: usize },
    TerminalMean,
    TerminalCovariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConeBlock<T: Scalar> {
    pub family: Family,
    pub cone: Cone,
    pub rows: Vec<AffineExpr<T>>,
}

/// Index map for the structured decision vector `[V | K blocks | Ω_0..Ω_{N-1}]`.
///
/// `K_k[a, b]` is stored row-major per step; `Ω_k[r, s]` is stored
/// column-major (`s` outer). The structurally zero trailing column block of
/// the stacked `K` is not stored at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    /// Number of input half-spaces `N_c`; zero disables the `Ω_k` blocks.
    pub input_constraints: usize,
}

impl DecisionLayout {
    pub fn new(state_dim: usize, input_dim: usize, horizon: usize, input_constraints: usize) -> Self {
        Self { state_dim, input_dim, horizon, input_constraints }
    }

    pub fn for_spec<T: Scalar>(spec: &ProblemSpec<T>) -> Self {
        Self::new(spec.state_dim(), spec.input_dim(), spec.horizon, spec.input_constraints.len())
    }

    pub fn v_len(&self) -> usize {
        self.horizon * self.input_dim
    }

    pub fn k_len(&self) -> usize {
        self.horizon * self.input_dim * self.state_dim
    }

    /// `2(N+1)n_x`.
    pub fn omega_rows(&self) -> usize {
        2 * (self.horizon + 1) * self.state_dim
    }

    pub fn omega_len(&self) -> usize {
        self.omega_rows() * self.input_constraints
    }

    pub fn len(&self) -> usize {
        self.v_len() + self.k_len() + self.horizon * self.omega_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn v(&self, k: usize, a: usize) -> usize {
        k * self.input_dim + a
    }

    pub fn k(&self, step: usize, a: usize, b: usize) -> usize {
        self.v_len() + step * self.input_dim * self.state_dim + a * self.state_dim + b
    }

    pub fn omega(&self, step: usize, row: usize, s: usize) -> usize {
        self.v_len() + self.k_len() + step * self.omega_len() + s * self.omega_rows() + row
    }

    pub fn v_range(&self) -> Range<usize> {
        0..self.v_len()
    }

    pub fn k_range(&self) -> Range<usize> {
        self.v_len()..self.v_len() + self.k_len()
    }

    /// `(row in stacked K, column in stacked K)` of the `p`-th gain entry.
    pub fn k_position(&self, p: usize) -> (usize, usize) {
        let per_step = self.input_dim * self.state_dim;
        let step = p / per_step;
        let a = (p % per_step) / self.state_dim;
        let b = p % self.state_dim;
        (step * self.input_dim + a, step * self.state_dim + b)
    }

    pub fn flatten<T: Scalar>(&self, v: &DVector<T>, gains: &[DMatrix<T>], omega: &[DMatrix<T>]) -> Vec<T> {
        let mut x = vec![T::zero(); self.len()];
        for i in 0..self.v_len() {
            x[i] = v[i];
        }
        for (step, g) in gains.iter().enumerate() {
            for a in 0..self.input_dim {
                for b in 0..self.state_dim {
                    x[self.k(step, a, b)] = g[(a, b)];
                }
            }
        }
        for (step, o) in omega.iter().enumerate() {
            for s in 0..self.input_constraints {
                for r in 0..self.omega_rows() {
                    x[self.omega(step, r, s)] = o[(r, s)];
                }
            }
        }
        x
    }

    /// Stacked `K = [blkdiag(K_0, …, K_{N-1}) 0]`.
    pub fn stacked_gain<T: Scalar>(&self, gains: &[DMatrix<T>]) -> DMatrix<T> {
        let (n, m) = (self.state_dim, self.input_dim);
        let mut out = DMatrix::zeros(self.horizon * m, (self.horizon + 1) * n);
        for (step, g) in gains.iter().enumerate() {
            out.view_mut((step * m, step * n), (m, n)).copy_from(g);
        }
        out
    }

    /// Stacked gain from a flat decision vector.
    pub fn stacked_gain_from_flat<T: Scalar>(&self, x: &[T]) -> DMatrix<T> {
        let (n, m) = (self.state_dim, self.input_dim);
        let mut out = DMatrix::zeros(self.horizon * m, (self.horizon + 1) * n);
        for p in 0..self.k_len() {
            let (r, c) = self.k_position(p);
            out[(r, c)] = x[self.v_len() + p];
        }
        out
    }
}

/// `t ≥ Σ rows²`, one epigraph per quadratic term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SquaredNorm<T: Scalar> {
    pub label: String,
    pub rows: Vec<AffineExpr<T>>,
}

/// Objective as `constant + linᵀx + Σ_terms ‖rows(x)‖²` over the decision
/// vector. The constant is dropped from the solver and added back when
/// reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ObjectiveTerms<T: Scalar> {
    pub linear: Vec<(usize, T)>,
    pub constant: T,
    pub squares: Vec<SquaredNorm<T>>,
}

impl<T: Scalar> ObjectiveTerms<T> {
    pub fn eval(&self, x: &[T]) -> T {
        let lin = self.linear.iter().fold(T::zero(), |acc, &(i, c)| acc + c * x[i]);
        let sq = self.squares.iter().fold(T::zero(), |acc, term| {
            term.rows.iter().fold(acc, |a, r| {
                let v = r.eval(x);
                a + v * v
            })
        });
        self.constant + lin + sq
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); x.len()];
        for &(i, c) in &self.linear {
            g[i] += c;
        }
        let two = T::lit(2.0);
        for term in &self.squares {
            for r in &term.rows {
                let v = two * r.eval(x);
                for &(i, c) in &r.terms {
                    g[i] += v * c;
                }
            }
        }
        g
    }
}

/// `Q̄ = blkdiag(Q, …, Q, 0)` over `N+1` blocks.
pub fn stacked_state_weight<T: Scalar>(q: &DMatrix<T>, horizon: usize) -> DMatrix<T> {
    let n = q.nrows();
    let mut blocks = vec![q.clone(); horizon];
    blocks.push(DMatrix::zeros(n, n));
    linalg::block_diag(&blocks)
}

/// `R̄ = blkdiag(R, …, R)` over `N` blocks.
pub fn stacked_input_weight<T: Scalar>(r: &DMatrix<T>, horizon: usize) -> DMatrix<T> {
    linalg::block_diag(&vec![r.clone(); horizon])
}

/// Relative eigenvalue cut used when factoring the gain Gram matrix.
const GRAM_DROP: f64 = 1e-15;
/// Relative eigenvalue cut for the thin moment factors. Without saturation
/// `Σ_XX` has rank `(N+1)n_x` only, since `z` then equals the deviation.
const MOMENT_DROP: f64 = 1e-14;

/// Thin `L` with `L Lᵀ = Σ`. Any such factor gives the same norms as `Σ^{1/2}`
/// while dropping the null directions.
pub fn moment_factor<T: Scalar>(sigma: &DMatrix<T>) -> Result<DMatrix<T>, LinalgError> {
    psd_factor(sigma, T::lit(MOMENT_DROP))
}

/// Expected quadratic cost as squared norms of affine maps of `(V, K)`.
///
/// * mean term: `‖Q̄_m^{1/2}(𝒜μ₀ + ℬV)‖² + ‖R̄_m^{1/2}V‖²`;
/// * input-covariance term: `‖R̄_v^{1/2} K Σ_UU^{1/2}‖_F²`;
/// * state-covariance term `tr(Q̄_v [I ℬK] Σ_XX [I ℬK]ᵀ)`, expanded as
///   `tr(Q̄_vΣ₁₁) + 2 tr(Q̄_v ℬ K Σ₂₁) + kᵀ P k` with
///   `P = (Σ₂₂ ⊗ ℬᵀQ̄_vℬ)` restricted to the stored gain entries and
///   factored once, so the cone has at most `N n_u n_x` rows instead of
///   `(N+1)n_x · 2(N+1)n_x`.
pub fn assemble_objective<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    moments: &MomentMatrices<T>,
    layout: &DecisionLayout,
) -> Result<ObjectiveTerms<T>, ProgramError> {
    let (n, m, horizon) = (layout.state_dim, layout.input_dim, layout.horizon);
    let stacked = (horizon + 1) * n;
    if moments.sigma_xx.nrows() != 2 * stacked {
        return Err(ProgramError::MissingMoments("Σ_XX"));
    }
    if moments.sigma_uu.nrows() != stacked {
        return Err(ProgramError::MissingMoments("Σ_UU"));
    }
    let mut squares = Vec::new();

    // Mean steering.
    let qm_h = psd_sqrt(spec.cost.q_mean())?;
    let rm_h = psd_sqrt(spec.cost.r_mean())?;
    let a_mu = &lift.cal_a * &spec.initial.mean;
    let mut mean_rows = Vec::new();
    for k in 0..horizon {
        let b_k = lift.cal_b.rows(k * n, n);
        let qb = &qm_h * b_k;
        let qa = &qm_h * a_mu.rows(k * n, n);
        for i in 0..n {
            let mut row = AffineExpr::constant(qa[i]);
            for step in 0..k {
                for a in 0..m {
                    row.add(layout.v(step, a), qb[(i, step * m + a)]);
                }
            }
            if !row.is_zero() {
                mean_rows.push(row);
            }
        }
    }
    for k in 0..horizon {
        for i in 0..m {
            let mut row = AffineExpr::constant(T::zero());
            for a in 0..m {
                row.add(layout.v(k, a), rm_h[(i, a)]);
            }
            if !row.is_zero() {
                mean_rows.push(row);
            }
        }
    }
    squares.push(SquaredNorm { label: "mean".into(), rows: mean_rows });

    // Input covariance: rows (step, i, col) of R_v^{1/2} K_step L_UU[step block, :].
    let rv_h = psd_sqrt(spec.cost.r_cov())?;
    let su = moment_factor(&moments.sigma_uu)?;
    let mut input_rows = Vec::new();
    for step in 0..horizon {
        for i in 0..m {
            for col in 0..su.ncols() {
                let mut row = AffineExpr::constant(T::zero());
                for a in 0..m {
                    for b in 0..n {
                        row.add(layout.k(step, a, b), rv_h[(i, a)] * su[(step * n + b, col)]);
                    }
                }
                if !row.is_zero() {
                    input_rows.push(row);
                }
            }
        }
    }
    squares.push(SquaredNorm { label: "input_covariance".into(), rows: input_rows });

    // State covariance.
    let q_bar = stacked_state_weight(spec.cost.q_cov(), horizon);
    let qb = &q_bar * &lift.cal_b;
    let gram_b = lift.cal_b.transpose() * &qb;
    let s11 = moments.sigma_xx.view((0, 0), (stacked, stacked));
    let s21 = moments.sigma_xx.view((stacked, 0), (stacked, stacked));
    let s22 = moments.sigma_xx.view((stacked, stacked), (stacked, stacked));
    let constant = (&q_bar * s11).trace();
    let cross = s21 * &qb;
    let nk = layout.k_len();
    let positions: Vec<(usize, usize)> = (0..nk).map(|p| layout.k_position(p)).collect();
    let mut linear = Vec::with_capacity(nk);
    for (p, &(r, c)) in positions.iter().enumerate() {
        let coef = T::lit(2.0) * cross[(c, r)];
        if coef != T::zero() {
            linear.push((layout.v_len() + p, coef));
        }
    }
    let gram = DMatrix::from_fn(nk, nk, |p, q| {
        let (rp, cp) = positions[p];
        let (rq, cq) = positions[q];
        s22[(cp, cq)] * gram_b[(rp, rq)]
    });
    let factor = psd_factor(&gram, T::lit(GRAM_DROP))?;
    let mut state_rows = Vec::with_capacity(factor.ncols());
    for col in 0..factor.ncols() {
        let mut row = AffineExpr::constant(T::zero());
        for p in 0..nk {
            row.add(layout.v_len() + p, factor[(p, col)]);
        }
        state_rows.push(row);
    }
    squares.push(SquaredNorm { label: "state_covariance".into(), rows: state_rows });

    Ok(ObjectiveTerms { linear, constant, squares })
}

/// `J(V, K)` evaluated directly from the dense matrices:
/// `tr(Q̄_v[I ℬK]Σ_XX[I ℬK]ᵀ) + tr(R̄_v K Σ_UU Kᵀ) + X̄ᵀQ̄_m X̄ + VᵀR̄_m V`.
pub fn explicit_objective<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    moments: &MomentMatrices<T>,
    v: &DVector<T>,
    stacked_gain: &DMatrix<T>,
) -> T {
    let horizon = spec.horizon;
    let stacked = lift.stacked_state_len();
    let mut map = DMatrix::zeros(stacked, 2 * stacked);
    map.view_mut((0, 0), (stacked, stacked)).fill_with_identity();
    map.view_mut((0, stacked), (stacked, stacked)).copy_from(&(&lift.cal_b * stacked_gain));
    let qv = stacked_state_weight(spec.cost.q_cov(), horizon);
    let rv = stacked_input_weight(spec.cost.r_cov(), horizon);
    let qm = stacked_state_weight(spec.cost.q_mean(), horizon);
    let rm = stacked_input_weight(spec.cost.r_mean(), horizon);
    let state_cov = (&qv * &map * &moments.sigma_xx * map.transpose()).trace();
    let input_cov = (&rv * stacked_gain * &moments.sigma_uu * stacked_gain.transpose()).trace();
    let mean = &lift.cal_a * &spec.initial.mean + &lift.cal_b * v;
    state_cov + input_cov + (&qm * &mean).dot(&mean) + (&rm * v).dot(v)
}

/// Chebyshev–Cantelli second-order cones, one per `(j, k)` with `k = 1..N`:
/// `αᵀE_k(𝒜μ₀ + ℬV) − β + c_j‖Σ_XX^{1/2}[I ℬK]ᵀE_kᵀα‖ ≤ 0`.
pub fn assemble_chance_constraints<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    moments: &MomentMatrices<T>,
    layout: &DecisionLayout,
    risk: &RiskAllocation<T>,
) -> Result<Vec<ConeBlock<T>>, ProgramError> {
    let (n, m, horizon) = (layout.state_dim, layout.input_dim, layout.horizon);
    let stacked = (horizon + 1) * n;
    if risk.p.len() != spec.state_constraints.len() {
        return Err(ProgramError::RiskLength { got: risk.p.len(), want: spec.state_constraints.len() });
    }
    if moments.sigma_xx.nrows() != 2 * stacked {
        return Err(ProgramError::MissingMoments("Σ_XX"));
    }
    for &p in &risk.p {
        if !(p > T::zero() && p < T::one()) {
            return Err(ProgramError::BadProbability(p.as_f64()));
        }
    }
    let factor = moment_factor(&moments.sigma_xx)?;
    let a_mu = &lift.cal_a * &spec.initial.mean;
    let mut blocks = Vec::new();
    for k in 1..=horizon {
        let b_k = lift.cal_b.rows(k * n, n);
        for (j, c) in spec.state_constraints.iter().enumerate() {
            let coef = cantelli_coefficient(risk.p[j]);
            let b_alpha = b_k.transpose() * &c.alpha;
            let mut head = AffineExpr::constant(c.beta - c.alpha.dot(&a_mu.rows(k * n, n)));
            for col in 0..layout.v_len() {
                head.add(col, -b_alpha[col]);
            }
            let mut rows = Vec::with_capacity(factor.ncols() + 1);
            rows.push(head);
            for r in 0..factor.ncols() {
                let constant = (0..n).fold(T::zero(), |acc, i| acc + factor[(k * n + i, r)] * c.alpha[i]);
                let mut row = AffineExpr::constant(coef * constant);
                for step in 0..k {
                    for a in 0..m {
                        let weight = b_alpha[step * m + a];
                        if weight == T::zero() {
                            continue;
                        }
                        for b in 0..n {
                            row.add(layout.k(step, a, b), coef * weight * factor[(stacked + step * n + b, r)]);
                        }
                    }
                }
                rows.push(row);
            }
            blocks.push(ConeBlock { family: Family::Chance { k, j }, cone: Cone::SecondOrder, rows });
        }
    }
    Ok(blocks)
}

/// `H`, `h` and the box description `S ξ ≤ σ` of the saturated-noise set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RobustConstraintData<T: Scalar> {
    pub h_mat: DMatrix<T>,
    pub h: DVector<T>,
    /// `2(N+1)n_x × (N+1)n_x`; rows `2i` and `2i+1` are `+e_iᵀ` and `−e_iᵀ`.
    pub s: DMatrix<T>,
    pub sigma: DVector<T>,
}

impl<T: Scalar> RobustConstraintData<T> {
    pub fn new(spec: &ProblemSpec<T>, sat: &SaturationSpec<T>) -> Result<Self, ProgramError> {
        if !sat.is_bounded() {
            return Err(ProgramError::UnboundedSaturation);
        }
        let m = spec.input_dim();
        let n_c = spec.input_constraints.len();
        let h_mat = DMatrix::from_fn(n_c, m, |s, a| spec.input_constraints[s].alpha[a]);
        let h = DVector::from_fn(n_c, |s, _| spec.input_constraints[s].beta);
        let dim = sat.len();
        let mut s = DMatrix::zeros(2 * dim, dim);
        let mut sigma = DVector::zeros(2 * dim);
        for (i, limit) in sat.limits.iter().enumerate() {
            let limit = limit.expect("bounded");
            s[(2 * i, i)] = T::one();
            s[(2 * i + 1, i)] = -T::one();
            sigma[2 * i] = limit;
            sigma[2 * i + 1] = limit;
        }
        Ok(Self { h_mat, h, s, sigma })
    }
}

/// Robust input constraints via duality, one slack `Ω_k ≥ 0` per step:
/// `H F_k V + Ω_kᵀσ ≤ h`, `H F_k K [𝒜 𝒟] = Ω_kᵀ S`.
pub fn assemble_input_hard_constraints<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    layout: &DecisionLayout,
    sat: &SaturationSpec<T>,
) -> Result<Vec<ConeBlock<T>>, ProgramError> {
    if spec.input_constraints.is_empty() {
        return Ok(Vec::new());
    }
    let data = RobustConstraintData::new(spec, sat)?;
    let (n, m, horizon) = (layout.state_dim, layout.input_dim, layout.horizon);
    let n_c = layout.input_constraints;
    let dim = (horizon + 1) * n;
    let rows_omega = layout.omega_rows();
    // Column i of S has its nonzeros at rows 2i, 2i+1.
    let s_cols: Vec<Vec<(usize, T)>> = (0..dim)
        .map(|i| (0..rows_omega).filter(|&r| data.s[(r, i)] != T::zero()).map(|r| (r, data.s[(r, i)])).collect())
        .collect();
    let mut blocks = Vec::new();
    for k in 0..horizon {
        let source = lift.source_row_block(k);
        let mut equalities = Vec::with_capacity(n_c * dim);
        for s in 0..n_c {
            for i in 0..dim {
                let mut row = AffineExpr::constant(T::zero());
                for a in 0..m {
                    let h = data.h_mat[(s, a)];
                    if h == T::zero() {
                        continue;
                    }
                    for b in 0..n {
                        row.add(layout.k(k, a, b), h * source[(b, i)]);
                    }
                }
                for &(r, sv) in &s_cols[i] {
                    row.add(layout.omega(k, r, s), -sv);
                }
                equalities.push(row);
            }
        }
        let mut inequalities = Vec::with_capacity(n_c);
        for s in 0..n_c {
            let mut row = AffineExpr::constant(data.h[s]);
            for a in 0..m {
                row.add(layout.v(k, a), -data.h_mat[(s, a)]);
            }
            for r in 0..rows_omega {
                row.add(layout.omega(k, r, s), -data.sigma[r]);
            }
            inequalities.push(row);
        }
        let signs = (0..n_c)
            .flat_map(|s| (0..rows_omega).map(move |r| (r, s)))
            .map(|(r, s)| {
                let mut row = AffineExpr::constant(T::zero());
                row.add(layout.omega(k, r, s), T::one());
                row
            })
            .collect();
        let family = Family::InputRobust { k };
        blocks.push(ConeBlock { family, cone: Cone::Zero, rows: equalities });
        blocks.push(ConeBlock { family, cone: Cone::Nonnegative, rows: inequalities });
        blocks.push(ConeBlock { family, cone: Cone::Nonnegative, rows: signs });
    }
    Ok(blocks)
}

/// How the terminal covariance LMI is handed to the solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmiEncoding {
    /// One PSD block `[[Σ_f, Y], [Yᵀ, I]]` with `Y = E_N[I ℬK]L, L Lᵀ = Σ_XX`.
    Full,
    /// Exact rank-one split: `[[T_c, y_c], [y_cᵀ, 1]] ⪰ 0` for each column
    /// `y_c` of `Y` and `Σ_f − Σ_c T_c ⪰ 0`. Same feasible set in `(V, K)`,
    /// but the PSD blocks stay `(n_x+1)`-dimensional.
    #[default]
    Split,
}

/// Allocates auxiliary variables after the structured decision block.
#[derive(Clone, Debug)]
pub struct VarAllocator {
    next: usize,
    pub named: Vec<(String, Range<usize>)>,
}

impl VarAllocator {
    pub fn new(layout: &DecisionLayout) -> Self {
        Self { next: layout.len(), named: Vec::new() }
    }

    pub fn alloc(&mut self, name: impl Into<String>, len: usize) -> Range<usize> {
        let range = self.next..self.next + len;
        self.next += len;
        self.named.push((name.into(), range.clone()));
        range
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// `Y = E_N [I ℬK] L` as affine expressions, row-major, with `L Lᵀ = Σ_XX`.
fn terminal_factor<T: Scalar>(lift: &BlockLift<T>, root: &DMatrix<T>, layout: &DecisionLayout) -> Vec<Vec<AffineExpr<T>>> {
    let (n, m, horizon) = (layout.state_dim, layout.input_dim, layout.horizon);
    let stacked = (horizon + 1) * n;
    let b_n = lift.cal_b.rows(horizon * n, n);
    (0..n)
        .map(|i| {
            (0..root.ncols())
                .map(|col| {
                    let mut e = AffineExpr::constant(root[(horizon * n + i, col)]);
                    for step in 0..horizon {
                        for a in 0..m {
                            let w = b_n[(i, step * m + a)];
                            if w == T::zero() {
                                continue;
                            }
                            for b in 0..n {
                                e.add(layout.k(step, a, b), w * root[(stacked + step * n + b, col)]);
                            }
                        }
                    }
                    e
                })
                .collect()
        })
        .collect()
}

/// Terminal mean equality and the relaxed terminal covariance LMI.
pub fn assemble_terminal_constraints<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    moments: &MomentMatrices<T>,
    layout: &DecisionLayout,
    encoding: LmiEncoding,
    aux: &mut VarAllocator,
) -> Result<Vec<ConeBlock<T>>, ProgramError> {
    let (n, m, horizon) = (layout.state_dim, layout.input_dim, layout.horizon);
    if moments.sigma_xx.nrows() != 2 * (horizon + 1) * n {
        return Err(ProgramError::MissingMoments("Σ_XX"));
    }
    let a_mu = &lift.cal_a * &spec.initial.mean;
    let b_n = lift.cal_b.rows(horizon * n, n);
    let mean_rows = (0..n)
        .map(|i| {
            let mut row = AffineExpr::constant(a_mu[horizon * n + i] - spec.terminal.mean[i]);
            for col in 0..horizon * m {
                row.add(col, b_n[(i, col)]);
            }
            row
        })
        .collect();
    let mut blocks = vec![ConeBlock { family: Family::TerminalMean, cone: Cone::Zero, rows: mean_rows }];

    let y = terminal_factor(lift, &moment_factor(&moments.sigma_xx)?, layout);
    let sigma_f = &spec.terminal.cov;
    let cols: Vec<usize> = (0..y.first().map_or(0, |r| r.len())).filter(|&c| (0..n).any(|i| !y[i][c].is_zero())).collect();
    match encoding {
        LmiEncoding::Full => {
            let dim = n + cols.len();
            let mut rows = Vec::with_capacity(dim * (dim + 1) / 2);
            for c in 0..dim {
                for r in 0..=c {
                    let e = if c < n {
                        AffineExpr::constant(sigma_f[(r, c)])
                    } else if r < n {
                        y[r][cols[c - n]].clone()
                    } else {
                        AffineExpr::constant(if r == c { T::one() } else { T::zero() })
                    };
                    rows.push(e);
                }
            }
            blocks.push(ConeBlock { family: Family::TerminalCovariance, cone: Cone::Psd { dim }, rows });
        }
        LmiEncoding::Split => {
            let tri = n * (n + 1) / 2;
            let tri_index = |r: usize, c: usize| c * (c + 1) / 2 + r;
            let mut slack_vars = Vec::with_capacity(cols.len());
            for &col in &cols {
                let vars = aux.alloc(format!("lmi_split[{col}]"), tri);
                let mut rows = Vec::with_capacity((n + 1) * (n + 2) / 2);
                for c in 0..=n {
                    for r in 0..=c {
                        let e = if c < n {
                            let mut e = AffineExpr::constant(T::zero());
                            e.add(vars.start + tri_index(r, c), T::one());
                            e
                        } else if r < n {
                            y[r][col].clone()
                        } else {
                            AffineExpr::constant(T::one())
                        };
                        rows.push(e);
                    }
                }
                blocks.push(ConeBlock { family: Family::TerminalCovariance, cone: Cone::Psd { dim: n + 1 }, rows });
                slack_vars.push(vars);
            }
            let mut rows = Vec::with_capacity(tri);
            for c in 0..n {
                for r in 0..=c {
                    let mut e = AffineExpr::constant(sigma_f[(r, c)]);
                    for vars in &slack_vars {
                        e.add(vars.start + tri_index(r, c), -T::one());
                    }
                    rows.push(e);
                }
            }
            blocks.push(ConeBlock { family: Family::TerminalCovariance, cone: Cone::Psd { dim: n }, rows });
        }
    }
    Ok(blocks)
}

/// How the quadratic cost reaches the solver.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveForm {
    /// One second-order epigraph cone per squared norm; linear objective.
    Epigraph,
    /// `½xᵀPx` handed to the solver directly.
    #[default]
    Quadratic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramOptions {
    pub lmi: LmiEncoding,
    pub objective: ObjectiveForm,
}

/// The assembled program: minimize `½xᵀPx + objectiveᵀx` subject to every
/// block's rows lying in its cone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ConicProgram<T: Scalar> {
    pub layout: DecisionLayout,
    pub n_vars: usize,
    pub objective: Vec<(usize, T)>,
    /// Upper triangle `(i ≤ j, P_ij)` of the symmetric `P`; empty for the
    /// epigraph form.
    pub quadratic: Vec<(usize, usize, T)>,
    /// Decision-independent part of `J`, excluded from `objective`.
    pub objective_constant: T,
    pub blocks: Vec<ConeBlock<T>>,
    pub aux: Vec<(String, Range<usize>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramStats {
    pub variables: usize,
    pub decision_variables: usize,
    pub zero_rows: usize,
    pub nonnegative_rows: usize,
    pub soc_blocks: usize,
    pub soc_rows: usize,
    pub psd_blocks: usize,
    pub psd_max_dim: usize,
    pub nonzeros: usize,
}

/// Solver-neutral sparse layout: `s = b − A x ∈ K`, PSD blocks in scaled
/// upper-triangle (svec) order with off-diagonals multiplied by `√2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConicExport {
    pub n_vars: usize,
    pub n_rows: usize,
    /// `(row, col, value)` of `A`, sorted by column then row.
    pub a: Vec<(usize, usize, f64)>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// `(row, col, value)` of the upper triangle of `P`, sorted by column then row.
    pub p: Vec<(usize, usize, f64)>,
    pub cones: Vec<(Cone, usize)>,
}

impl<T: Scalar> ConicProgram<T> {
    pub fn stats(&self) -> ProgramStats {
        let mut st = ProgramStats { variables: self.n_vars, decision_variables: self.layout.len(), ..Default::default() };
        for b in &self.blocks {
            st.nonzeros += b.rows.iter().map(|r| r.terms.len()).sum::<usize>();
            match b.cone {
                Cone::Zero => st.zero_rows += b.rows.len(),
                Cone::Nonnegative => st.nonnegative_rows += b.rows.len(),
                Cone::SecondOrder => {
                    st.soc_blocks += 1;
                    st.soc_rows += b.rows.len();
                }
                Cone::Psd { dim } => {
                    st.psd_blocks += 1;
                    st.psd_max_dim = st.psd_max_dim.max(dim);
                }
            }
        }
        st
    }

    /// Largest violation of any cone membership at `x` (0 when feasible).
    pub fn max_violation(&self, x: &[T]) -> T {
        let mut worst = T::zero();
        for b in &self.blocks {
            let vals: Vec<T> = b.rows.iter().map(|r| r.eval(x)).collect();
            let viol = match b.cone {
                Cone::Zero => vals.iter().fold(T::zero(), |a, v| a.max(v.abs())),
                Cone::Nonnegative => vals.iter().fold(T::zero(), |a, v| a.max(-*v)),
                Cone::SecondOrder => {
                    let tail = vals[1..].iter().fold(T::zero(), |a, v| a + *v * *v).sqrt();
                    (tail - vals[0]).max(T::zero())
                }
                Cone::Psd { dim } => {
                    let mut mat = DMatrix::zeros(dim, dim);
                    let mut idx = 0;
                    for c in 0..dim {
                        for r in 0..=c {
                            mat[(r, c)] = vals[idx];
                            mat[(c, r)] = vals[idx];
                            idx += 1;
                        }
                    }
                    (-linalg::min_eigenvalue(&mat).unwrap_or(T::zero())).max(T::zero())
                }
            };
            worst = worst.max(viol);
        }
        worst
    }

    pub fn objective_value(&self, x: &[T]) -> T {
        let lin = self.objective.iter().fold(self.objective_constant, |acc, &(i, c)| acc + c * x[i]);
        let half = T::lit(0.5);
        self.quadratic.iter().fold(lin, |acc, &(i, j, p)| {
            let w = if i == j { half } else { T::one() };
            acc + w * p * x[i] * x[j]
        })
    }

    pub fn export(&self) -> ConicExport {
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let scale_of = |idx: usize| -> f64 {
                match block.cone {
                    Cone::Psd { .. } => {
                        // Column c holds c+1 entries; the last one is diagonal.
                        let c = ((((8 * idx + 1) as f64).sqrt() - 1.0) / 2.0).floor() as usize;
                        let c = if (c + 1) * (c + 2) / 2 <= idx { c + 1 } else { c };
                        let r = idx - c * (c + 1) / 2;
                        if r == c { 1.0 } else { sqrt2 }
                    }
                    _ => 1.0,
                }
            };
            for (idx, row) in block.rows.iter().enumerate() {
                let scale = scale_of(idx);
                let mut row = row.clone();
                row.canonicalize();
                let r = b.len();
                for &(col, coef) in &row.terms {
                    a.push((r, col, -coef.as_f64() * scale));
                }
                b.push(row.constant.as_f64() * scale);
            }
            let dim = match block.cone {
                Cone::Psd { dim } => dim,
                _ => block.rows.len(),
            };
            cones.push((block.cone, dim));
        }
        a.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
        let mut c = vec![0.0; self.n_vars];
        for &(i, v) in &self.objective {
            c[i] += v.as_f64();
        }
        let mut p: Vec<(usize, usize, f64)> = self.quadratic.iter().map(|&(i, j, v)| (i, j, v.as_f64())).collect();
        p.sort_by(|x, y| (x.1, x.0).cmp(&(y.1, y.0)));
        ConicExport { n_vars: self.n_vars, n_rows: b.len(), a, b, c, p, cones }
    }
}

/// Builds the complete program for a validated spec.
pub fn build_program<T: Scalar>(
    spec: &ProblemSpec<T>,
    lift: &BlockLift<T>,
    moments: &MomentMatrices<T>,
    sat: &SaturationSpec<T>,
    risk: &RiskAllocation<T>,
    options: ProgramOptions,
) -> Result<ConicProgram<T>, ProgramError> {
    let layout = DecisionLayout::for_spec(spec);
    let mut aux = VarAllocator::new(&layout);
    let terms = assemble_objective(spec, lift, moments, &layout)?;

    let mut objective = terms.linear.clone();
    let mut objective_constant = terms.constant;
    let mut quadratic = Vec::new();
    let mut blocks = Vec::new();
    if options.objective == ObjectiveForm::Quadratic {
        // Σ‖Ax + b‖² = xᵀ(AᵀA)x + 2bᵀAx + bᵀb over the V and K entries only.
        let dim = layout.v_len() + layout.k_len();
        let mut gram = DMatrix::<T>::zeros(dim, dim);
        let mut lin = vec![T::zero(); dim];
        for row in terms.squares.iter().flat_map(|sq| &sq.rows) {
            let mut row = row.clone();
            row.canonicalize();
            for &(i, ci) in &row.terms {
                lin[i] += T::lit(2.0) * row.constant * ci;
                for &(j, cj) in &row.terms {
                    if i <= j {
                        gram[(i, j)] += ci * cj;
                    }
                }
            }
            objective_constant += row.constant * row.constant;
        }
        for j in 0..dim {
            for i in 0..=j {
                if gram[(i, j)] != T::zero() {
                    quadratic.push((i, j, T::lit(2.0) * gram[(i, j)]));
                }
            }
        }
        objective.extend(lin.into_iter().enumerate().filter(|&(_, c)| c != T::zero()));
    }
    for sq in &terms.squares {
        if sq.rows.is_empty() || options.objective == ObjectiveForm::Quadratic {
            continue;
        }
        // t ≥ ‖y‖²  ⇔  ((t+1)/2, (t-1)/2, y) ∈ SOC
        let t = aux.alloc(format!("epigraph[{}]", sq.label), 1).start;
        let half = T::lit(0.5);
        let mut top = AffineExpr::constant(half);
        top.add(t, half);
        let mut second = AffineExpr::constant(-half);
        second.add(t, half);
        let mut rows = vec![top, second];
        rows.extend(sq.rows.iter().cloned());
        blocks.push(ConeBlock { family: Family::Objective, cone: Cone::SecondOrder, rows });
        objective.push((t, T::one()));
    }
    blocks.extend(assemble_chance_constraints(spec, lift, moments, &layout, risk)?);
    blocks.extend(assemble_input_hard_constraints(spec, lift, &layout, sat)?);
    blocks.extend(assemble_terminal_constraints(spec, lift, moments, &layout, options.lmi, &mut aux)?);

    Ok(ConicProgram {
        layout,
        n_vars: aux.total(),
        objective,
        quadratic,
        objective_constant,
        blocks,
        aux: aux.named,
    })
}
