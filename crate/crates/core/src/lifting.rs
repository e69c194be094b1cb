//! Stacked-horizon form `X = 𝒜 x₀ + ℬ U + 𝒟 W` and the block selectors.
//!
//! `W` enters the recursion directly (`x_{k+1} = A_k x_k + B_k u_k + w_k`),
//! so `𝒟` holds only state-transition products; the noise shaping `D_k`
//! appears in the moment matrices instead.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ProblemSpec;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LiftError {
    #[error("selector index {k} out of range 0..={max}")]
    IndexOutOfRange { k: usize, max: usize },
    #[error("vector length {got} does not match stacked length {want}")]
    LengthMismatch { got: usize, want: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BlockLift<T: Scalar> {
    pub state_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    /// `(N+1)n_x × n_x`
    pub cal_a: DMatrix<T>,
    /// `(N+1)n_x × N n_u`
    pub cal_b: DMatrix<T>,
    /// `(N+1)n_x × N n_x`
    pub cal_d: DMatrix<T>,
}

impl<T: Scalar> BlockLift<T> {
    pub fn stacked_state_len(&self) -> usize {
        (self.horizon + 1) * self.state_dim
    }

    /// `𝒜 x₀ + ℬ U + 𝒟 W`.
    pub fn propagate(&self, x0: &DVector<T>, u: &DVector<T>, w: &DVector<T>) -> DVector<T> {
        &self.cal_a * x0 + &self.cal_b * u + &self.cal_d * w
    }

    /// Row block `k` of `[𝒜 𝒟]`, i.e. the map from `(ζ₀, W)` to `x_k`.
    pub fn source_row_block(&self, k: usize) -> DMatrix<T> {
        let n = self.state_dim;
        let m = self.stacked_state_len();
        let mut out = DMatrix::zeros(n, m);
        out.view_mut((0, 0), (n, n)).copy_from(&self.cal_a.view((k * n, 0), (n, n)));
        out.view_mut((0, n), (n, m - n)).copy_from(&self.cal_d.view((k * n, 0), (n, m - n)));
        out
    }
}

/// Builds the stacked matrices from the time-varying system.
pub fn build_lift<T: Scalar>(spec: &ProblemSpec<T>) -> BlockLift<T> {
    let n = spec.state_dim();
    let m = spec.input_dim();
    let horizon = spec.horizon;
    let rows = (horizon + 1) * n;
    let mut cal_a = DMatrix::zeros(rows, n);
    let mut cal_b = DMatrix::zeros(rows, horizon * m);
    let mut cal_d = DMatrix::zeros(rows, horizon * n);

    cal_a.view_mut((0, 0), (n, n)).fill_with_identity();
    for k in 1..=horizon {
        let step = &spec.a[k - 1];
        let prev_a = cal_a.view(((k - 1) * n, 0), (n, n)).clone_owned();
        cal_a.view_mut((k * n, 0), (n, n)).copy_from(&(step * prev_a));
        // Earlier columns: A_{k-1} times the previous row block.
        for j in 0..(k - 1) {
            let prev_b = cal_b.view(((k - 1) * n, j * m), (n, m)).clone_owned();
            cal_b.view_mut((k * n, j * m), (n, m)).copy_from(&(step * prev_b));
            let prev_d = cal_d.view(((k - 1) * n, j * n), (n, n)).clone_owned();
            cal_d.view_mut((k * n, j * n), (n, n)).copy_from(&(step * prev_d));
        }
        cal_b.view_mut((k * n, (k - 1) * m), (n, m)).copy_from(&spec.b[k - 1]);
        cal_d.view_mut((k * n, (k - 1) * n), (n, n)).fill_with_identity();
    }

    BlockLift { state_dim: n, input_dim: m, horizon, cal_a, cal_b, cal_d }
}

/// Index-map form of `E_k` / `F_k`: picks block `block` of width `width`
/// out of a stacked vector with `blocks` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selector {
    pub block: usize,
    pub width: usize,
    pub blocks: usize,
}

impl Selector {
    pub fn offset(&self) -> usize {
        self.block * self.width
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset()..self.offset() + self.width
    }

    pub fn apply<T: Scalar>(&self, stacked: &DVector<T>) -> Result<DVector<T>, LiftError> {
        let want = self.blocks * self.width;
        if stacked.len() != want {
            return Err(LiftError::LengthMismatch { got: stacked.len(), want });
        }
        Ok(stacked.rows(self.offset(), self.width).clone_owned())
    }

    /// Dense `[0 | I | 0]`.
    pub fn to_matrix<T: Scalar>(&self) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.width, self.blocks * self.width);
        out.view_mut((0, self.offset()), (self.width, self.width)).fill_with_identity();
        out
    }
}

/// `E_k` with `x_k = E_k X`, for `0 ≤ k ≤ N`.
pub fn selector_state(k: usize, horizon: usize, state_dim: usize) -> Result<Selector, LiftError> {
    if k > horizon {
        return Err(LiftError::IndexOutOfRange { k, max: horizon });
    }
    Ok(Selector { block: k, width: state_dim, blocks: horizon + 1 })
}

/// `F_k` with `u_k = F_k U`, for `0 ≤ k ≤ N-1`.
pub fn selector_input(k: usize, horizon: usize, input_dim: usize) -> Result<Selector, LiftError> {
    if horizon == 0 || k >= horizon {
        return Err(LiftError::IndexOutOfRange { k, max: horizon.saturating_sub(1) });
    }
    Ok(Selector { block: k, width: input_dim, blocks: horizon })
}
