//! Unit-quaternion algebra and the exp/log maps between rotations and
//! axis-angle vectors.
//!
//! Conventions used everywhere in this crate:
//!
//! - Quaternions are stored scalar-first as `(w, x, y, z)` with unit norm.
//! - `exp_map` / `log_map` use the *full* rotation angle: `exp_map(phi)`
//!   rotates by `‖phi‖` radians about `phi/‖phi‖`, and `log_map` returns a
//!   vector of norm ≤ π. Half-angle factors live inside these two
//!   functions and nowhere else.
//! - Operations documented as canonicalizing return the upper-hemisphere
//!   representative (`w ≥ 0`) of the double cover.

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector3, Vector4};

/// Axis-angle rotation vector; `‖phi‖` is the rotation angle in radians.
pub type AxisAngle = Vector3<f64>;

/// Angles below this threshold use Taylor expansions instead of the
/// closed-form trigonometric expressions.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Unit-norm tolerance enforced by constructors and asserted in tests.
pub const NORM_TOL: f64 = 1e-9;

/// Unit quaternion `(w, v)` with `w² + ‖v‖² = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    /// Scalar part.
    pub w: f64,
    /// Vector part `(x, y, z)`.
    pub v: Vector3<f64>,
}

/// Skew-symmetric cross-product matrix `[v]×` with `[v]× a = v × a`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The 4×3 lift `H = [0₁ₓ₃; I₃]` embedding ℝ³ as pure-vector quaternions.
pub fn h_matrix() -> SMatrix<f64, 4, 3> {
    let mut h = SMatrix::<f64, 4, 3>::zeros();
    h[(1, 0)] = 1.0;
    h[(2, 1)] = 1.0;
    h[(3, 2)] = 1.0;
    h
}

impl UnitQuaternion {
    /// The identity rotation `(1, 0, 0, 0)`.
    pub fn identity() -> Self {
        Self { w: 1.0, v: Vector3::zeros() }
    }

    /// Builds a unit quaternion from components, normalizing the input.
    ///
    /// Panics if the input norm is zero.
    pub fn new_normalize(w: f64, v: Vector3<f64>) -> Self {
        let n = (w * w + v.norm_squared()).sqrt();
        assert!(n > 0.0, "cannot normalize a zero quaternion");
        Self { w: w / n, v: v / n }
    }

    /// Components in `(w, x, y, z)` order.
    pub fn as_wxyz(&self) -> [f64; 4] {
        [self.w, self.v.x, self.v.y, self.v.z]
    }

    /// Builds from `(w, x, y, z)` components, normalizing. Components
    /// already unit to machine precision are kept bit-identical so
    /// serialization round-trips exactly.
    pub fn from_wxyz(c: [f64; 4]) -> Self {
        let v = Vector3::new(c[1], c[2], c[3]);
        let n = (c[0] * c[0] + v.norm_squared()).sqrt();
        if (n - 1.0).abs() < 4.0 * f64::EPSILON {
            Self { w: c[0], v }
        } else {
            Self::new_normalize(c[0], v)
        }
    }

    /// The quaternion as a 4-vector `(w, x, y, z)`.
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.v.x, self.v.y, self.v.z)
    }

    /// Euclidean norm of the 4 components (1 up to rounding).
    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.v.norm_squared()).sqrt()
    }

    /// Upper-hemisphere representative: flips the sign if `w < 0`.
    pub fn canonicalize(&self) -> Self {
        if self.w < 0.0 {
            Self { w: -self.w, v: -self.v }
        } else {
            *self
        }
    }

    /// Left product matrix `[q]_L` with `q ⊗ r = [q]_L r`.
    pub fn left_matrix(&self) -> Matrix4<f64> {
        let (w, v) = (self.w, self.v);
        let mut m = Matrix4::zeros();
        m[(0, 0)] = w;
        m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-v.transpose()));
        m.fixed_view_mut::<3, 1>(1, 0).copy_from(&v);
        m.fixed_view_mut::<3, 3>(1, 1)
            .copy_from(&(Matrix3::identity() * w + skew(&v)));
        m
    }

    /// Right product matrix `[q]_R` with `r ⊗ q = [q]_R r`.
    pub fn right_matrix(&self) -> Matrix4<f64> {
        let (w, v) = (self.w, self.v);
        let mut m = Matrix4::zeros();
        m[(0, 0)] = w;
        m.fixed_view_mut::<1, 3>(0, 1).copy_from(&(-v.transpose()));
        m.fixed_view_mut::<3, 1>(1, 0).copy_from(&v);
        m.fixed_view_mut::<3, 3>(1, 1)
            .copy_from(&(Matrix3::identity() * w - skew(&v)));
        m
    }

    fn from_vector_normalize(c: Vector4<f64>) -> Self {
        Self::new_normalize(c.x, Vector3::new(c.y, c.z, c.w))
    }
}

/// Quaternion product `a ⊗ b`, computed as `[a]_L b` and renormalized.
pub fn qmul(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::from_vector_normalize(a.left_matrix() * b.as_vector())
}

/// Quaternion product `a ⊗ b` through the right product matrix `[b]_R a`.
///
/// Must agree with [`qmul`] to machine precision; kept as an independent
/// algebraic route for cross-checking.
pub fn qmul_via_right(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion::from_vector_normalize(b.right_matrix() * a.as_vector())
}

/// Quaternion inverse `(w, -v)`.
pub fn qinv(q: &UnitQuaternion) -> UnitQuaternion {
    UnitQuaternion { w: q.w, v: -q.v }
}

/// Rotates a vector: `H^T [q]_L [q]_R^T H x`, i.e. `q ⊗ (0, x) ⊗ q⁻¹`.
pub fn qrotate(q: &UnitQuaternion, x: &Vector3<f64>) -> Vector3<f64> {
    let h = h_matrix();
    let lifted = h * x;
    let rotated = q.left_matrix() * (q.right_matrix().transpose() * lifted);
    h.transpose() * rotated
}

/// Rotation matrix `R = H^T [q]_L [q]_R^T H` of the quaternion.
pub fn rotmat(q: &UnitQuaternion) -> Matrix3<f64> {
    let h = h_matrix();
    h.transpose() * q.left_matrix() * q.right_matrix().transpose() * h
}

/// Exponential map: axis-angle `phi` to the unit quaternion rotating by
/// `‖phi‖` radians about `phi/‖phi‖`.
pub fn exp_map(phi: &AxisAngle) -> UnitQuaternion {
    let theta = phi.norm();
    let half = 0.5 * theta;
    // sin(θ/2)/θ, with its second-order Taylor expansion near zero.
    let s = if theta < SMALL_ANGLE {
        0.5 - theta * theta / 48.0
    } else {
        half.sin() / theta
    };
    UnitQuaternion::new_normalize(half.cos(), phi * s)
}

/// Logarithm map: full-angle axis-angle vector of the rotation, with
/// `‖result‖ ≤ π`. Canonicalizes to the upper hemisphere first, so `q`
/// and `-q` map to the same vector.
pub fn log_map(q: &UnitQuaternion) -> AxisAngle {
    let q = q.canonicalize();
    let nv = q.v.norm();
    if nv < SMALL_ANGLE {
        // atan2(nv, w)/nv → 1/w as nv → 0.
        q.v * (2.0 / q.w)
    } else {
        q.v * (2.0 * nv.atan2(q.w) / nv)
    }
}

/// Orientation Jacobian `Q(q) = [q]_L H ∈ ℝ⁴ˣ³`.
///
/// First-order perturbation model: `q ⊗ exp_map(φ) ≈ q + ½ Q(q) φ`.
pub fn orientation_jacobian(q: &UnitQuaternion) -> SMatrix<f64, 4, 3> {
    q.left_matrix() * h_matrix()
}

/// Perturbs `q` by the axis-angle `phi`: `q ⊗ exp_map(phi)`, renormalized.
pub fn perturb(q: &UnitQuaternion, phi: &AxisAngle) -> UnitQuaternion {
    qmul(q, &exp_map(phi))
}

/// Derivative of the exponential map, `∂ exp_map(φ)/∂φ ∈ ℝ⁴ˣ³`.
///
/// At `φ = 0` this reduces to `½ H`; away from zero the exact derivative
/// carries the curvature of the map and satisfies
/// `dexp(φ) = ½ [exp_map(φ)]_L H · Jr(φ)` with `Jr` the SO(3) right
/// Jacobian.
pub fn dexp(phi: &AxisAngle) -> SMatrix<f64, 4, 3> {
    let theta = phi.norm();
    let mut d = SMatrix::<f64, 4, 3>::zeros();
    if theta < SMALL_ANGLE {
        d.fixed_view_mut::<1, 3>(0, 0)
            .copy_from(&(-0.25 * phi.transpose()));
        d.fixed_view_mut::<3, 3>(1, 0)
            .copy_from(&(Matrix3::identity() * 0.5));
        return d;
    }
    let half = 0.5 * theta;
    let u = phi / theta;
    // Coefficients of I and uuᵀ in the vector block; the uuᵀ coefficient
    // suffers cancellation for small θ, so switch to its series.
    let sinc_half = half.sin() / theta;
    let c_uu = if theta < 1e-3 {
        let t2 = theta * theta;
        -t2 / 24.0 + t2 * t2 / 960.0
    } else {
        0.5 * half.cos() - sinc_half
    };
    d.fixed_view_mut::<1, 3>(0, 0)
        .copy_from(&(-(0.5 * half.sin()) * u.transpose()));
    d.fixed_view_mut::<3, 3>(1, 0)
        .copy_from(&(Matrix3::identity() * sinc_half + u * u.transpose() * c_uu));
    d
}

/// SO(3) right Jacobian `Jr(φ)` in the full-angle convention:
/// `exp_map(φ + dφ) ≈ exp_map(φ) ⊗ exp_map(Jr(φ) dφ)`.
pub fn so3_jac_right(phi: &AxisAngle) -> Matrix3<f64> {
    let theta = phi.norm();
    let px = skew(phi);
    let (c1, c2) = if theta < 1e-3 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    Matrix3::identity() - px * c1 + px * px * c2
}

/// Inverse of the SO(3) right Jacobian:
/// `log_map(exp_map(φ) ⊗ exp_map(dφ)) ≈ φ + Jr⁻¹(φ) dφ`.
///
/// Well-defined for `‖φ‖ < 2π`; callers keep arguments well below π.
pub fn so3_jac_right_inv(phi: &AxisAngle) -> Matrix3<f64> {
    let theta = phi.norm();
    let px = skew(phi);
    let c = if theta < 1e-3 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let t2 = theta * theta;
        1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + px * 0.5 + px * px * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0x11ee)
    }

    pub(crate) fn random_quat(rng: &mut ChaCha8Rng) -> UnitQuaternion {
        let mut draw = || rng.random_range(-1.0..1.0);
        UnitQuaternion::new_normalize(draw(), Vector3::new(draw(), draw(), draw()))
    }

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
            rng.random_range(-scale..scale),
        )
    }

    fn rotz(angle: f64) -> UnitQuaternion {
        exp_map(&Vector3::new(0.0, 0.0, angle))
    }

    #[test]
    fn qmul_identity_and_inverse() {
        let mut r = rng();
        for _ in 0..100 {
            let q = random_quat(&mut r);
            let e = qmul(&UnitQuaternion::identity(), &q);
            assert_relative_eq!(e.as_vector(), q.as_vector(), epsilon = 1e-12);
            let i = qmul(&q, &qinv(&q));
            assert_relative_eq!(i.w, 1.0, epsilon = 1e-12);
            assert!(i.v.norm() < 1e-12);
        }
    }

    #[test]
    fn qmul_rotz_composition() {
        let q = qmul(&rotz(std::f64::consts::FRAC_PI_2), &rotz(std::f64::consts::FRAC_PI_2));
        // rotz(180°) = (0, 0, 0, 1) in (w, x, y, z) order.
        assert_relative_eq!(q.as_vector(), Vector4::new(0.0, 0.0, 0.0, 1.0), epsilon = 1e-12);
        // Cross-check against the independent 3×3 rotation-matrix product.
        let oracle = rotmat(&rotz(std::f64::consts::FRAC_PI_2))
            * rotmat(&rotz(std::f64::consts::FRAC_PI_2));
        assert_relative_eq!(rotmat(&q), oracle, epsilon = 1e-12);
    }

    #[test]
    fn left_right_product_matrices_agree() {
        let mut r = rng();
        for _ in 0..10_000 {
            let a = random_quat(&mut r);
            let b = random_quat(&mut r);
            let left = a.left_matrix() * b.as_vector();
            let right = b.right_matrix() * a.as_vector();
            assert!((left - right).amax() < 1e-12);
        }
    }

    #[test]
    fn qinv_is_involution_and_rotation_roundtrip() {
        let mut r = rng();
        for _ in 0..100 {
            let q = random_quat(&mut r);
            let qq = qinv(&qinv(&q));
            assert_relative_eq!(qq.as_vector(), q.as_vector(), epsilon = 1e-15);
            let x = random_vec(&mut r, 5.0);
            let back = qrotate(&qinv(&q), &qrotate(&q, &x));
            assert_relative_eq!(back, x, epsilon = 1e-10);
        }
    }

    #[test]
    fn qrotate_matches_rotation_matrix_and_preserves_norm() {
        let mut r = rng();
        let e = qrotate(&UnitQuaternion::identity(), &Vector3::new(1.0, 2.0, 3.0));
        assert_relative_eq!(e, Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
        let y = qrotate(&rotz(std::f64::consts::FRAC_PI_2), &Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(y, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        for _ in 0..200 {
            let q = random_quat(&mut r);
            let x = random_vec(&mut r, 3.0);
            let rx = qrotate(&q, &x);
            assert_relative_eq!(rx, rotmat(&q) * x, epsilon = 1e-12);
            assert_relative_eq!(rx.norm(), x.norm(), epsilon = 1e-12);
        }
    }

    #[test]
    fn rotmat_orthonormal_and_homomorphic() {
        let mut r = rng();
        assert_relative_eq!(rotmat(&UnitQuaternion::identity()), Matrix3::identity(), epsilon = 1e-15);
        for _ in 0..200 {
            let a = random_quat(&mut r);
            let b = random_quat(&mut r);
            let ra = rotmat(&a);
            assert!((ra * ra.transpose() - Matrix3::identity()).norm() < 1e-9);
            assert_relative_eq!(ra.determinant(), 1.0, epsilon = 1e-9);
            let homo = rotmat(&qmul(&a, &b)) - ra * rotmat(&b);
            assert!(homo.norm() < 1e-10);
        }
    }

    #[test]
    fn exp_log_closed_form_points() {
        let q = exp_map(&Vector3::zeros());
        assert_relative_eq!(q.as_vector(), Vector4::new(1.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
        let q = exp_map(&Vector3::new(0.0, 0.0, std::f64::consts::PI));
        assert_relative_eq!(q.as_vector(), Vector4::new(0.0, 0.0, 0.0, 1.0), epsilon = 1e-12);
        let phi = log_map(&UnitQuaternion::from_wxyz([0.0, 0.0, 0.0, 1.0]));
        assert_relative_eq!(phi, Vector3::new(0.0, 0.0, std::f64::consts::PI), epsilon = 1e-12);
        assert_relative_eq!(log_map(&UnitQuaternion::identity()), Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn exp_log_roundtrip_over_angle_range() {
        let mut r = rng();
        for _ in 0..10_000 {
            let axis = random_vec(&mut r, 1.0).normalize();
            let angle = r.random_range(1e-8..std::f64::consts::PI - 1e-3);
            let phi = axis * angle;
            let q = exp_map(&phi);
            assert!((q.norm() - 1.0).abs() < 1e-9);
            assert!((log_map(&q) - phi).norm() < 1e-8);
        }
    }

    #[test]
    fn log_map_double_cover() {
        let mut r = rng();
        for _ in 0..1000 {
            let q = random_quat(&mut r);
            let neg = UnitQuaternion { w: -q.w, v: -q.v };
            assert_relative_eq!(log_map(&q), log_map(&neg), epsilon = 1e-15);
        }
    }

    #[test]
    fn orientation_jacobian_identity_and_orthonormality() {
        let qj = orientation_jacobian(&UnitQuaternion::identity());
        let mut expected = SMatrix::<f64, 4, 3>::zeros();
        expected.fixed_view_mut::<3, 3>(1, 0).copy_from(&Matrix3::identity());
        assert_relative_eq!(qj, expected, epsilon = 1e-15);

        let mut r = rng();
        for _ in 0..200 {
            let q = random_quat(&mut r);
            let j = orientation_jacobian(&q);
            assert!((j.transpose() * j - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn perturb_first_order_model_quadratic_decay() {
        let mut r = rng();
        for _ in 0..20 {
            let q = random_quat(&mut r);
            let dir = random_vec(&mut r, 1.0).normalize();
            let err = |scale: f64| -> f64 {
                let phi = dir * scale;
                let exact = perturb(&q, &phi).as_vector();
                let lin = q.as_vector() + 0.5 * orientation_jacobian(&q) * phi;
                (exact - lin).norm()
            };
            let e3 = err(1e-3);
            let e4 = err(1e-4);
            // Quadratic convergence: shrinking the step 10× shrinks the
            // residual ~100×.
            assert!(e3 < 1e-5);
            assert!(e4 < e3 / 50.0);
        }
    }

    #[test]
    fn perturb_group_roundtrip() {
        let mut r = rng();
        assert_relative_eq!(
            perturb(&UnitQuaternion::identity(), &Vector3::new(0.3, -0.2, 0.9)).as_vector(),
            exp_map(&Vector3::new(0.3, -0.2, 0.9)).as_vector(),
            epsilon = 1e-14
        );
        for _ in 0..500 {
            let q = random_quat(&mut r);
            let phi = random_vec(&mut r, 1.0);
            let recovered = log_map(&qmul(&qinv(&q), &perturb(&q, &phi)));
            assert!((recovered - phi).norm() < 1e-9);
        }
    }

    #[test]
    fn dexp_matches_finite_differences() {
        let mut r = rng();
        let h = 1e-6;
        for _ in 0..50 {
            let phi = random_vec(&mut r, 2.0);
            let d = dexp(&phi);
            for j in 0..3 {
                let mut hi = phi;
                let mut lo = phi;
                hi[j] += h;
                lo[j] -= h;
                let fd = (exp_map(&hi).as_vector() - exp_map(&lo).as_vector()) / (2.0 * h);
                for i in 0..4 {
                    assert!(
                        (d[(i, j)] - fd[i]).abs() < 1e-8,
                        "dexp mismatch at ({i},{j}): {} vs {}",
                        d[(i, j)],
                        fd[i]
                    );
                }
            }
        }
        // Tiny-angle branch agrees with the ½H limit.
        let d0 = dexp(&Vector3::zeros());
        assert_relative_eq!(d0, h_matrix() * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn right_jacobian_inverse_consistency() {
        let mut r = rng();
        for _ in 0..100 {
            let phi = random_vec(&mut r, 2.0);
            let prod = so3_jac_right(&phi) * so3_jac_right_inv(&phi);
            assert!((prod - Matrix3::identity()).norm() < 1e-9);
        }
        // Jr⁻¹ is the derivative of log(exp(φ)⊗exp(ε)) in ε.
        let h = 1e-6;
        for _ in 0..50 {
            let phi = random_vec(&mut r, 1.5);
            let jri = so3_jac_right_inv(&phi);
            let base = exp_map(&phi);
            for j in 0..3 {
                let mut e = Vector3::zeros();
                e[j] = h;
                let hi = log_map(&qmul(&base, &exp_map(&e)));
                let lo = log_map(&qmul(&base, &exp_map(&(-e))));
                let fd = (hi - lo) / (2.0 * h);
                for i in 0..3 {
                    assert!((jri[(i, j)] - fd[i]).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn norm_preserved_by_all_constructors() {
        let mut r = rng();
        for _ in 0..10_000 {
            let a = random_quat(&mut r);
            let b = random_quat(&mut r);
            assert!((qmul(&a, &b).norm() - 1.0).abs() < 1e-9);
            assert!((exp_map(&random_vec(&mut r, 3.0)).norm() - 1.0).abs() < 1e-9);
            assert!((perturb(&a, &random_vec(&mut r, 3.0)).norm() - 1.0).abs() < 1e-9);
        }
    }
}
