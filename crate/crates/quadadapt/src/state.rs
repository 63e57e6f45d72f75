//! Manifold robot state, tangent increments, and the ⊕ / ⊖ operations.
//!
//! A state is 13 numbers (position, unit quaternion, body linear velocity,
//! body angular velocity) living on ℝ³ × 𝕊³ × ℝ³ × ℝ³; the tangent space
//! is 12-dimensional with the quaternion block expressed as a full-angle
//! axis-angle vector. `compose` keeps the quaternion unit-norm and on the
//! upper hemisphere so downstream error terms never see a sign flip.

use crate::liegroup::{self, UnitQuaternion};
use nalgebra::{SVector, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Motor thrust command, Newtons per motor.
pub type Control = Vector4<f64>;

/// Tangent-space state error `(e_p, e_q, e_v, e_ω)`; 12 components.
pub type StateError = SVector<f64, 12>;

/// Robot state: position, orientation, body-frame velocities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    /// Position in the world frame [m].
    pub p: Vector3<f64>,
    /// Orientation (body to world).
    pub q: UnitQuaternion,
    /// Linear velocity in the body frame [m/s].
    pub v: Vector3<f64>,
    /// Angular velocity in the body frame [rad/s].
    pub w: Vector3<f64>,
}

/// Tangent-space state change `(δp, δφ, δv, δω)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Increment {
    pub dp: Vector3<f64>,
    pub dphi: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dw: Vector3<f64>,
}

impl State {
    /// State at rest at a given position, level attitude.
    pub fn at_rest(p: Vector3<f64>) -> Self {
        Self {
            p,
            q: UnitQuaternion::identity(),
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    /// Serializes as 13 numbers in `(p, q_wxyz, v, w)` order.
    pub fn to_array(&self) -> [f64; 13] {
        let q = self.q.as_wxyz();
        [
            self.p.x, self.p.y, self.p.z, q[0], q[1], q[2], q[3], self.v.x, self.v.y, self.v.z,
            self.w.x, self.w.y, self.w.z,
        ]
    }

    /// Reads 13 numbers in `(p, q_wxyz, v, w)` order, normalizing q.
    pub fn from_array(a: &[f64; 13]) -> Self {
        Self {
            p: Vector3::new(a[0], a[1], a[2]),
            q: UnitQuaternion::from_wxyz([a[3], a[4], a[5], a[6]]),
            v: Vector3::new(a[7], a[8], a[9]),
            w: Vector3::new(a[10], a[11], a[12]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

impl Increment {
    pub fn zero() -> Self {
        Self {
            dp: Vector3::zeros(),
            dphi: Vector3::zeros(),
            dv: Vector3::zeros(),
            dw: Vector3::zeros(),
        }
    }

    /// Packs as `(δp, δφ, δv, δω)` into a 12-vector.
    pub fn to_vector(&self) -> SVector<f64, 12> {
        let mut out = SVector::<f64, 12>::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.dp);
        out.fixed_rows_mut::<3>(3).copy_from(&self.dphi);
        out.fixed_rows_mut::<3>(6).copy_from(&self.dv);
        out.fixed_rows_mut::<3>(9).copy_from(&self.dw);
        out
    }

    pub fn from_vector(v: &SVector<f64, 12>) -> Self {
        Self {
            dp: v.fixed_rows::<3>(0).into(),
            dphi: v.fixed_rows::<3>(3).into(),
            dv: v.fixed_rows::<3>(6).into(),
            dw: v.fixed_rows::<3>(9).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Manifold composition `x ⊕ d`: Euclidean on p/v/ω, quaternion
/// multiplication with the exponential map on orientation. The resulting
/// quaternion is renormalized and mapped to the upper hemisphere.
pub fn compose(x: &State, d: &Increment) -> State {
    State {
        p: x.p + d.dp,
        q: liegroup::perturb(&x.q, &d.dphi).canonicalize(),
        v: x.v + d.dv,
        w: x.w + d.dw,
    }
}

/// Manifold difference `a ⊖ b` in tangent coordinates:
/// `(a.p - b.p, log(b.q⁻¹ ⊗ a.q), a.v - b.v, a.w - b.w)`.
///
/// Invariant under sign flips of either quaternion.
pub fn diff(a: &State, b: &State) -> StateError {
    let mut e = StateError::zeros();
    e.fixed_rows_mut::<3>(0).copy_from(&(a.p - b.p));
    e.fixed_rows_mut::<3>(3)
        .copy_from(&liegroup::log_map(&liegroup::qmul(&liegroup::qinv(&b.q), &a.q)));
    e.fixed_rows_mut::<3>(6).copy_from(&(a.v - b.v));
    e.fixed_rows_mut::<3>(9).copy_from(&(a.w - b.w));
    e
}

/// Perturbs every block of the state with zero-mean Gaussian noise of
/// standard deviation `sigma`; the quaternion is perturbed on the manifold
/// via `q ⊗ exp_map(ε)`.
pub fn perturb_state<R: Rng>(x: &State, sigma: f64, rng: &mut R) -> State {
    assert!(sigma >= 0.0);
    if sigma == 0.0 {
        return *x;
    }
    let normal = Normal::new(0.0, sigma).expect("valid std");
    let draw3 = |rng: &mut R| {
        Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
    };
    let eps_p = draw3(rng);
    let eps_q = draw3(rng);
    let eps_v = draw3(rng);
    let eps_w = draw3(rng);
    State {
        p: x.p + eps_p,
        q: liegroup::perturb(&x.q, &eps_q).canonicalize(),
        v: x.v + eps_v,
        w: x.w + eps_w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0x57a7e)
    }

    pub(crate) fn random_state(r: &mut ChaCha8Rng) -> State {
        let mut d = |s: f64| {
            Vector3::new(
                r.random_range(-s..s),
                r.random_range(-s..s),
                r.random_range(-s..s),
            )
        };
        let p = d(2.0);
        let v = d(3.0);
        let w = d(5.0);
        let q = UnitQuaternion::new_normalize(
            r.random_range(-1.0..1.0),
            Vector3::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
            ),
        );
        State { p, q, v, w }
    }

    fn random_increment(r: &mut ChaCha8Rng, phi_max: f64) -> Increment {
        let mut d = |s: f64| {
            Vector3::new(
                r.random_range(-s..s),
                r.random_range(-s..s),
                r.random_range(-s..s),
            )
        };
        let dp = d(1.0);
        let dv = d(1.0);
        let dw = d(1.0);
        let dir = d(1.0).normalize();
        let dphi = dir * r.random_range(0.0..phi_max);
        Increment { dp, dphi, dv, dw }
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let mut r = rng();
        for _ in 0..100 {
            let x = random_state(&mut r).into();
            let x: State = x;
            let y = compose(&x, &Increment::zero());
            // Hemisphere canonicalization may flip a lower-hemisphere input.
            assert_relative_eq!(y.p, x.p, epsilon = 1e-15);
            assert_relative_eq!(y.v, x.v, epsilon = 1e-15);
            assert!(diff(&y, &x).norm() < 1e-12);
            assert!(y.q.w >= 0.0);
        }
    }

    #[test]
    fn compose_pure_translation() {
        let x = State::at_rest(Vector3::new(0.5, -0.5, 1.0));
        let mut d = Increment::zero();
        d.dp.z = 0.01;
        let y = compose(&x, &d);
        assert_relative_eq!(y.p, Vector3::new(0.5, -0.5, 1.01), epsilon = 1e-15);
        assert_eq!(y.q, x.q);
        assert_eq!(y.v, x.v);
        assert_eq!(y.w, x.w);
    }

    #[test]
    fn diff_of_equal_states_is_zero_and_double_cover_safe() {
        let mut r = rng();
        for _ in 0..1000 {
            let x = random_state(&mut r);
            assert!(diff(&x, &x).norm() < 1e-15);
            let mut flipped = x;
            flipped.q = UnitQuaternion { w: -x.q.w, v: -x.q.v };
            assert!(diff(&flipped, &x).norm() < 1e-12);
            assert!((diff(&flipped, &x) - diff(&x, &x)).norm() < 1e-12);
        }
    }

    #[test]
    fn compose_diff_roundtrip() {
        let mut r = rng();
        for _ in 0..10_000 {
            let x = random_state(&mut r);
            let d = random_increment(&mut r, std::f64::consts::PI - 0.1);
            let y = compose(&x, &d);
            assert!((y.q.norm() - 1.0).abs() < 1e-9);
            assert!(y.q.w >= 0.0);
            let recovered = diff(&y, &x);
            assert!(
                (recovered - d.to_vector()).norm() < 1e-9,
                "roundtrip error {}",
                (recovered - d.to_vector()).norm()
            );
        }
    }

    #[test]
    fn diff_compose_recovers_target() {
        let mut r = rng();
        for _ in 0..1000 {
            let x = random_state(&mut r);
            let y = random_state(&mut r);
            let d = Increment::from_vector(&diff(&y, &x));
            let z = compose(&x, &d);
            // Quaternion agreement up to sign is captured by diff.
            assert!(diff(&z, &y).norm() < 1e-9);
        }
    }

    #[test]
    fn serialization_order_roundtrip() {
        let mut r = rng();
        for _ in 0..100 {
            let x = random_state(&mut r);
            let a = x.to_array();
            let y = State::from_array(&a);
            assert!(diff(&y, &x).norm() < 1e-12);
            assert_relative_eq!(a[3], x.q.w, epsilon = 1e-15);
        }
    }

    #[test]
    fn perturb_state_zero_sigma_is_identity() {
        let mut r = rng();
        let x = random_state(&mut r);
        let y = perturb_state(&x, 0.0, &mut r);
        assert_eq!(x, y);
    }

    #[test]
    fn perturb_state_keeps_quaternion_unit() {
        let mut r = rng();
        let x = random_state(&mut r);
        for _ in 0..1000 {
            let y = perturb_state(&x, 0.05, &mut r);
            assert!((y.q.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perturb_state_empirical_std() {
        let mut r = rng();
        let x = State::at_rest(Vector3::zeros());
        let sigma = 0.02;
        let n = 100_000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let y = perturb_state(&x, sigma, &mut r);
            sum_sq += (y.p - x.p).norm_squared();
        }
        // E[‖ε‖²] = 3σ² for an isotropic Gaussian.
        let est = (sum_sq / (3.0 * n as f64)).sqrt();
        assert!(
            (est - sigma).abs() / sigma < 0.02,
            "estimated σ = {est}, expected {sigma}"
        );
    }
}
