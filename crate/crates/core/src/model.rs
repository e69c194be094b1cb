//! Problem data model, validation and risk allocation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{asymmetry, is_finite, max_abs, min_eigenvalue, symmetrize};
use crate::scalar::Scalar;

/// Relative asymmetry above which a covariance or weight matrix is rejected.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;
/// Minimum eigenvalue a positive-definite input must exceed.
pub const PD_TOLERANCE: f64 = 1e-12;
/// Slack on PSD inputs, relative to the matrix scale.
pub const PSD_INPUT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Gaussian<T: Scalar> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

impl<T: Scalar> Gaussian<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>) -> Self {
        Self { mean, cov }
    }
}

/// `αᵀ x ≤ β` enforced with violation probability at most `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct StateHalfspace<T: Scalar> {
    pub alpha: DVector<T>,
    pub beta: T,
    pub p: Option<T>,
}

/// `αᵀ u ≤ β` enforced for every noise realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct InputHalfspace<T: Scalar> {
    pub alpha: DVector<T>,
    pub beta: T,
}

/// Separate mean-steering and covariance-steering weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SplitWeights<T: Scalar> {
    pub q_mean: DMatrix<T>,
    pub q_cov: DMatrix<T>,
    pub r_mean: DMatrix<T>,
    pub r_cov: DMatrix<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct CostWeights<T: Scalar> {
    pub q: DMatrix<T>,
    pub r: DMatrix<T>,
    pub split: Option<SplitWeights<T>>,
}

impl<T: Scalar> CostWeights<T> {
    pub fn new(q: DMatrix<T>, r: DMatrix<T>) -> Self {
        Self { q, r, split: None }
    }

    pub fn q_mean(&self) -> &DMatrix<T> {
        self.split.as_ref().map_or(&self.q, |s| &s.q_mean)
    }
    pub fn q_cov(&self) -> &DMatrix<T> {
        self.split.as_ref().map_or(&self.q, |s| &s.q_cov)
    }
    pub fn r_mean(&self) -> &DMatrix<T> {
        self.split.as_ref().map_or(&self.r, |s| &s.r_mean)
    }
    pub fn r_cov(&self) -> &DMatrix<T> {
        self.split.as_ref().map_or(&self.r, |s| &s.r_cov)
    }
}

/// How the element-wise clamp limits are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub enum Saturation<T: Scalar> {
    /// Infinite limits: the clamp is the identity.
    Disabled,
    /// Limit of each component is `m` times its standard deviation.
    SigmaMultiplier(T),
    /// Explicit limits for the initial deviation and for every noise sample.
    Limits { initial: DVector<T>, noise: DVector<T> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ProblemSpec<T: Scalar> {
    pub horizon: usize,
    pub a: Vec<DMatrix<T>>,
    pub b: Vec<DMatrix<T>>,
    pub d: Vec<DMatrix<T>>,
    pub initial: Gaussian<T>,
    pub terminal: Gaussian<T>,
    pub cost: CostWeights<T>,
    pub state_constraints: Vec<StateHalfspace<T>>,
    pub input_constraints: Vec<InputHalfspace<T>>,
    pub epsilon: Option<T>,
    pub saturation: Saturation<T>,
}

impl<T: Scalar> ProblemSpec<T> {
    /// Expands constant `A`, `B`, `D` to length-`horizon` sequences. No
    /// constraints, saturation disabled.
    pub fn time_invariant(
        horizon: usize,
        a: DMatrix<T>,
        b: DMatrix<T>,
        d: DMatrix<T>,
        initial: Gaussian<T>,
        terminal: Gaussian<T>,
        cost: CostWeights<T>,
    ) -> Self {
        Self {
            horizon,
            a: vec![a; horizon],
            b: vec![b; horizon],
            d: vec![d; horizon],
            initial,
            terminal,
            cost,
            state_constraints: Vec::new(),
            input_constraints: Vec::new(),
            epsilon: None,
            saturation: Saturation::Disabled,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.initial.mean.len()
    }

    pub fn input_dim(&self) -> usize {
        self.b.first().map_or(0, |b| b.ncols())
    }

    /// `D_k D_kᵀ`.
    pub fn noise_cov(&self, k: usize) -> DMatrix<T> {
        &self.d[k] * self.d[k].transpose()
    }
}

/// A violated invariant, addressed by a config-style field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("invalid problem: {}", join_issues(.0))]
    Invalid(Vec<Issue>),
    #[error("risk allocation: {0}")]
    Risk(String),
}

fn join_issues(issues: &[Issue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

impl SpecError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            SpecError::Invalid(v) => v,
            SpecError::Risk(_) => &[],
        }
    }
}

struct Checker {
    issues: Vec<Issue>,
}

impl Checker {
    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue { path: path.into(), message: message.into() });
    }

    fn shape<T: Scalar>(&mut self, path: &str, m: &DMatrix<T>, rows: usize, cols: usize) -> bool {
        if m.nrows() != rows || m.ncols() != cols {
            self.push(path, format!("dimension mismatch: expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()));
            return false;
        }
        if !is_finite(m) {
            self.push(path, "non-finite entries");
            return false;
        }
        true
    }

    fn vector<T: Scalar>(&mut self, path: &str, v: &DVector<T>, len: usize) -> bool {
        if v.len() != len {
            self.push(path, format!("dimension mismatch: expected length {len}, got {}", v.len()));
            return false;
        }
        if v.iter().any(|x| !x.is_finite()) {
            self.push(path, "non-finite entries");
            return false;
        }
        true
    }

    /// Symmetrizes in place and checks the spectrum. `strict` demands PD.
    fn symmetric<T: Scalar>(&mut self, path: &str, what: &str, m: &mut DMatrix<T>, strict: bool) {
        let scale = max_abs(m).max(T::one());
        if asymmetry(m) > T::lit(SYMMETRY_TOLERANCE) * scale {
            self.push(path, format!("{what} not symmetric"));
            return;
        }
        *m = symmetrize(m);
        let Ok(min_eig) = min_eigenvalue(m) else {
            self.push(path, format!("{what}: eigen-decomposition failed"));
            return;
        };
        if strict {
            if min_eig <= T::lit(PD_TOLERANCE) {
                self.push(path, format!("{what} not PD (min eigenvalue {:e})", min_eig.as_f64()));
            }
        } else if min_eig < -T::lit(PSD_INPUT_TOLERANCE) * scale {
            self.push(path, format!("{what} not PSD (min eigenvalue {:e})", min_eig.as_f64()));
        }
    }
}

/// Checks every invariant of a problem instance and returns the normalized
/// (symmetrized) copy.
///
/// Validating an already-normalized spec returns it bit-identically.
pub fn validate_spec<T: Scalar>(spec: &ProblemSpec<T>) -> Result<ProblemSpec<T>, SpecError> {
    let mut out = spec.clone();
    let mut ck = Checker { issues: Vec::new() };
    let n = spec.state_dim();
    let m = spec.input_dim();
    let horizon = spec.horizon;

    if horizon == 0 {
        ck.push("horizon", "must be positive");
    }
    if n == 0 {
        ck.push("initial.mu", "state dimension must be positive");
    }
    if m == 0 {
        ck.push("system.B", "input dimension must be positive");
    }
    for (name, seq) in [("system.A", &spec.a), ("system.B", &spec.b), ("system.D", &spec.d)] {
        if seq.len() != horizon {
            ck.push(name, format!("expected {horizon} matrices, got {}", seq.len()));
        }
    }
    if !ck.issues.is_empty() {
        return Err(SpecError::Invalid(ck.issues));
    }

    for k in 0..horizon {
        ck.shape(&format!("system.A[{k}]"), &spec.a[k], n, n);
        ck.shape(&format!("system.B[{k}]"), &spec.b[k], n, m);
        ck.shape(&format!("system.D[{k}]"), &spec.d[k], n, n);
    }
    ck.vector("terminal.mu", &spec.terminal.mean, n);
    if ck.shape("initial.Sigma", &spec.initial.cov, n, n) {
        ck.symmetric("initial.Sigma", "initial covariance", &mut out.initial.cov, false);
    }
    if ck.shape("terminal.Sigma", &spec.terminal.cov, n, n) {
        ck.symmetric("terminal.Sigma", "terminal covariance", &mut out.terminal.cov, true);
    }

    let check_weights = |ck: &mut Checker, prefix: &str, q: &mut DMatrix<T>, r: &mut DMatrix<T>| {
        if ck.shape(&format!("cost.{prefix}Q"), q, n, n) {
            ck.symmetric(&format!("cost.{prefix}Q"), "state weight", q, false);
        }
        if ck.shape(&format!("cost.{prefix}R"), r, m, m) {
            ck.symmetric(&format!("cost.{prefix}R"), "input weight", r, true);
        }
    };
    check_weights(&mut ck, "", &mut out.cost.q, &mut out.cost.r);
    if let Some(split) = out.cost.split.as_mut() {
        check_weights(&mut ck, "m", &mut split.q_mean, &mut split.r_mean);
        check_weights(&mut ck, "v", &mut split.q_cov, &mut split.r_cov);
    }

    for (j, c) in spec.state_constraints.iter().enumerate() {
        let path = format!("state_constraints[{j}]");
        ck.vector(&format!("{path}.alpha"), &c.alpha, n);
        if !c.beta.is_finite() {
            ck.push(format!("{path}.beta"), "non-finite");
        }
        if let Some(p) = c.p {
            if !(p > T::zero() && p < T::one()) {
                ck.push(format!("{path}.p"), "probability must lie in (0, 1)");
            }
        }
    }
    for (s, c) in spec.input_constraints.iter().enumerate() {
        let path = format!("input_constraints[{s}]");
        ck.vector(&format!("{path}.alpha"), &c.alpha, m);
        if !c.beta.is_finite() {
            ck.push(format!("{path}.beta"), "non-finite");
        }
    }
    if let Some(eps) = spec.epsilon {
        if !(eps > T::zero() && eps < T::one()) {
            ck.push("risk.epsilon", "must lie in (0, 1)");
        }
    }
    if !spec.state_constraints.is_empty() && ck.issues.is_empty() {
        if let Err(SpecError::Risk(msg)) = allocate_risk(&out) {
            ck.push("risk", msg);
        }
    }

    match &spec.saturation {
        Saturation::Disabled => {}
        Saturation::SigmaMultiplier(mult) => {
            if !(*mult > T::zero()) || !mult.is_finite() {
                ck.push("saturation.sigma_multiplier", "must be positive and finite");
            }
        }
        Saturation::Limits { initial, noise } => {
            for (name, v) in [("saturation.initial", initial), ("saturation.noise", noise)] {
                if v.len() != n {
                    ck.push(name, format!("dimension mismatch: expected length {n}, got {}", v.len()));
                } else if v.iter().any(|&x| !(x > T::zero())) {
                    ck.push(name, "negative or zero saturation limit");
                }
            }
        }
    }

    if ck.issues.is_empty() {
        Ok(out)
    } else {
        Err(SpecError::Invalid(ck.issues))
    }
}

/// Per-constraint violation probabilities `p_{x,j}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RiskAllocation<T: Scalar> {
    pub epsilon: T,
    pub p: Vec<T>,
}

impl<T: Scalar> RiskAllocation<T> {
    /// `sqrt((1 - p) / p)`, the one-sided Chebyshev–Cantelli multiplier.
    pub fn cantelli_coefficient(&self, j: usize) -> T {
        cantelli_coefficient(self.p[j])
    }
}

pub fn cantelli_coefficient<T: Scalar>(p: T) -> T {
    ((T::one() - p) / p).sqrt()
}

/// Splits the total risk budget across the state half-spaces.
///
/// Provided probabilities are kept as given; unset ones share whatever
/// remains of `epsilon` uniformly. When `epsilon` is absent every
/// probability must be set and their sum is the budget.
pub fn allocate_risk<T: Scalar>(spec: &ProblemSpec<T>) -> Result<RiskAllocation<T>, SpecError> {
    let given: T = spec.state_constraints.iter().filter_map(|c| c.p).fold(T::zero(), |a, b| a + b);
    let unset = spec.state_constraints.iter().filter(|c| c.p.is_none()).count();
    let epsilon = match spec.epsilon {
        Some(e) => e,
        None if unset == 0 && !spec.state_constraints.is_empty() => given,
        None if spec.state_constraints.is_empty() => return Ok(RiskAllocation { epsilon: T::zero(), p: vec![] }),
        None => return Err(SpecError::Risk("risk.epsilon required when some p are unset".into())),
    };
    if !(epsilon > T::zero() && epsilon < T::one()) {
        return Err(SpecError::Risk(format!("epsilon {epsilon} outside (0, 1)")));
    }
    for c in &spec.state_constraints {
        if let Some(p) = c.p {
            if !(p > T::zero() && p < T::one()) {
                return Err(SpecError::Risk(format!("probability {p} outside (0, 1)")));
            }
        }
    }
    let slack = T::lit(1e-12) * epsilon;
    if given > epsilon + slack {
        return Err(SpecError::Risk(format!("sum of p ({given}) exceeds epsilon ({epsilon})")));
    }
    let share = if unset > 0 {
        let rest = epsilon - given;
        if !(rest > T::zero()) {
            return Err(SpecError::Risk("no risk budget left for constraints without p".into()));
        }
        rest / T::from_usize(unset).unwrap()
    } else {
        T::zero()
    };
    let p = spec.state_constraints.iter().map(|c| c.p.unwrap_or(share)).collect();
    Ok(RiskAllocation { epsilon, p })
}

/// Chance-constraint screening of the (uncontrollable) initial state.
/// Returns one message per half-space that the initial distribution
/// already fails to satisfy in the Cantelli sense.
pub fn initial_state_warnings<T: Scalar>(spec: &ProblemSpec<T>, risk: &RiskAllocation<T>) -> Vec<String> {
    let mut out = Vec::new();
    for (j, c) in spec.state_constraints.iter().enumerate() {
        let mean = c.alpha.dot(&spec.initial.mean);
        let var = (spec.initial.cov.transpose() * &c.alpha).dot(&c.alpha).max(T::zero());
        let lhs = mean + risk.cantelli_coefficient(j) * var.sqrt();
        if lhs > c.beta {
            out.push(format!(
                "state_constraints[{j}]: initial distribution violates the chance bound at k = 0 ({lhs} > {})",
                c.beta
            ));
        }
    }
    out
}
