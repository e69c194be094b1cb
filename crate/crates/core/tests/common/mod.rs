#![allow(dead_code)]

use covsteer::{CostWeights, Gaussian, InputHalfspace, ProblemSpec, Saturation, StateHalfspace};
use nalgebra::{DMatrix, DVector};

pub fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

/// Planar double integrator, Δt = 0.2, N = 20, with the cone-shaped
/// corridor `0.2(x − 1) ≤ y ≤ −0.2(x − 1)` and `|u_i| ≤ 2.9`.
pub fn double_integrator() -> ProblemSpec<f64> {
    let dt = 0.2;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 2, &[
        dt * dt / 2.0, 0.0,
        0.0, dt * dt / 2.0,
        dt, 0.0,
        0.0, dt,
    ]);
    let mut spec = ProblemSpec::time_invariant(
        20,
        a,
        b,
        diag(&[0.01; 4]),
        Gaussian::new(DVector::from_row_slice(&[-10.0, 1.0, 0.0, 0.0]), diag(&[0.05, 0.05, 0.01, 0.01])),
        Gaussian::new(DVector::zeros(4), diag(&[0.025, 0.025, 0.005, 0.005])),
        CostWeights::new(diag(&[0.5, 4.0, 0.05, 0.05]), diag(&[20.0, 20.0])),
    );
    spec.state_constraints = vec![
        StateHalfspace { alpha: DVector::from_row_slice(&[0.2, 1.0, 0.0, 0.0]), beta: 0.2, p: Some(0.05) },
        StateHalfspace { alpha: DVector::from_row_slice(&[0.2, -1.0, 0.0, 0.0]), beta: 0.2, p: Some(0.05) },
    ];
    spec.input_constraints = (0..2)
        .flat_map(|i| {
            [1.0, -1.0].map(|sign| {
                let mut alpha = DVector::zeros(2);
                alpha[i] = sign;
                InputHalfspace { alpha, beta: 2.9 }
            })
        })
        .collect();
    spec.saturation = Saturation::SigmaMultiplier(3.0);
    spec
}

pub fn unconstrained(mut spec: ProblemSpec<f64>) -> ProblemSpec<f64> {
    spec.input_constraints.clear();
    spec.saturation = Saturation::Disabled;
    spec
}
