//! Weighted quadratic state costs on the manifold and their exact
//! tangent-space derivatives.
//!
//! For `ℓ(x̄) = ‖x̄ ⊖ x‖²_Q` with diagonal `Q`, the gradient with respect
//! to a tangent perturbation of `x̄` is `2 Jᵀ Q e` and the Gauss-Newton
//! Hessian is `2 Jᵀ Q J`, where `J = diag(I₃, Jr⁻¹(e_q), I₃, I₃)` carries
//! the exact derivative of the quaternion log through the inverse SO(3)
//! right Jacobian. Using the exact `J` (not its small-error limit `I`)
//! is what makes analytic gradients agree with finite differences at
//! non-infinitesimal errors.

use crate::liegroup::so3_jac_right_inv;
use crate::state::{diff, State, StateError};
use nalgebra::{DMatrix, Matrix3, SVector, Vector3};

/// Weighted squared error `eᵀ diag(q) e`.
pub fn weighted_cost(e: &StateError, qdiag: &SVector<f64, 12>) -> f64 {
    e.iter().zip(qdiag.iter()).map(|(ei, qi)| qi * ei * ei).sum()
}

/// Cost, tangent gradient, and Gauss-Newton Hessian of
/// `‖x̄ ⊖ target‖²_diag(q)` at `x̄`.
pub fn state_cost_terms(
    x: &State,
    target: &State,
    qdiag: &SVector<f64, 12>,
) -> (f64, SVector<f64, 12>, DMatrix<f64>) {
    let e = diff(x, target);
    let cost = weighted_cost(&e, qdiag);
    let jr_inv = so3_jac_right_inv(&e.fixed_rows::<3>(3).into());

    let we = e.component_mul(qdiag);
    let mut grad = 2.0 * we;
    let gq: nalgebra::Vector3<f64> = (jr_inv.transpose() * we.fixed_rows::<3>(3)) * 2.0;
    grad.fixed_rows_mut::<3>(3).copy_from(&gq);

    let mut hess = DMatrix::zeros(12, 12);
    for i in 0..12 {
        hess[(i, i)] = 2.0 * qdiag[i];
    }
    let qphi_vec: Vector3<f64> = qdiag.fixed_rows::<3>(3).into();
    let qphi = Matrix3::from_diagonal(&qphi_vec);
    let hq = 2.0 * jr_inv.transpose() * qphi * jr_inv;
    hess.view_mut((3, 3), (3, 3)).copy_from(&hq);
    (cost, grad, hess)
}

/// Gradient only (cheaper inner-loop variant).
pub fn state_cost_grad(x: &State, target: &State, qdiag: &SVector<f64, 12>) -> SVector<f64, 12> {
    state_cost_terms(x, target, qdiag).1
}
