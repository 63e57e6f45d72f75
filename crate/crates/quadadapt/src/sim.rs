//! Ground-truth quadrotor simulator: rigid-body ODE, motor mixer, RK4
//! integration, reference trajectories, payload disturbance, and the
//! geometric tracking controller used for dataset generation.
//!
//! Body-frame dynamics:
//!
//! ```text
//! ṗ = R v                     v̇ = (f/m) e₃ − ω × v + Rᵀ g
//! q̇ = ½ [q]_L H ω             ω̇ = M⁻¹ (τ − ω × M ω)
//! ```
//!
//! with `g = (0, 0, −9.81)` and `(f, τ)` from the 4×4 mixer. Integration
//! is classical RK4 with fixed substeps (1 ms at the 100 Hz control
//! period), renormalizing the quaternion after every substep. A payload
//! is modeled as pure added mass at the center of mass.

use crate::dynamics::{DynError, PredictiveModel};
use crate::liegroup;
use crate::state::{compose, diff, Control, Increment, State};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, SVector, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Physical constants of the simulated quadrotor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QuadParams {
    /// Mass [kg].
    pub mass: f64,
    /// Diagonal inertia [kg·m²].
    pub inertia: [f64; 3],
    /// Arm length [m].
    pub arm: f64,
    /// Torque constant [N·m·s²].
    pub k_tau: f64,
    /// Gravitational acceleration [m/s²].
    pub gravity: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [0.0025, 0.0025, 0.004],
            arm: 0.125,
            k_tau: 0.016,
            gravity: 9.81,
        }
    }
}

impl QuadParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from_column_slice(&self.inertia))
    }

    /// Per-motor thrust that balances gravity at the nominal mass.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / 4.0
    }
}

/// Payload disturbance: pure added mass, active from `activation_time`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Disturbance {
    /// Added payload mass [kg].
    pub payload_mass: f64,
    /// Time the payload becomes active [s].
    pub activation_time: f64,
}

impl Default for Disturbance {
    fn default() -> Self {
        Self { payload_mass: 0.0, activation_time: 0.0 }
    }
}

impl Disturbance {
    pub fn extra_mass(&self, t: f64) -> f64 {
        if self.payload_mass > 0.0 && t >= self.activation_time {
            self.payload_mass
        } else {
            0.0
        }
    }
}

/// The 4×4 mixer mapping motor thrusts to collective thrust and torques.
pub fn mixer_matrix(p: &QuadParams) -> Matrix4<f64> {
    let a = p.arm / 2.0_f64.sqrt();
    let k = p.k_tau;
    Matrix4::new(
        1.0, 1.0, 1.0, 1.0, //
        -a, a, -a, a, //
        -a, a, a, -a, //
        -k, -k, k, k,
    )
}

/// Collective thrust [N] and body torque [N·m] from motor thrusts.
pub fn mixer(u: &Control, p: &QuadParams) -> (f64, Vector3<f64>) {
    let ft = mixer_matrix(p) * u;
    (ft[0], Vector3::new(ft[1], ft[2], ft[3]))
}

/// Motor thrusts realizing a desired collective thrust and torque.
pub fn mixer_inverse(f: f64, tau: &Vector3<f64>, p: &QuadParams) -> Control {
    let rhs = Vector4::new(f, tau.x, tau.y, tau.z);
    mixer_matrix(p)
        .lu()
        .solve(&rhs)
        .expect("mixer matrix is invertible")
}

/// State derivative of the ground-truth ODE with an optional payload mass.
pub fn deriv(x: &State, u: &Control, p: &QuadParams, extra_mass: f64) -> [f64; 13] {
    let (f, tau) = mixer(u, p);
    let m_eff = p.mass + extra_mass;
    let r = liegroup::rotmat(&x.q);
    let g = Vector3::new(0.0, 0.0, -p.gravity);

    let dp = r * x.v;
    let dq = 0.5 * liegroup::orientation_jacobian(&x.q) * x.w;
    let dv = (f / m_eff) * Vector3::z() - x.w.cross(&x.v) + r.transpose() * g;
    let inertia = p.inertia_matrix();
    let dw = Vector3::new(
        (tau.x - (x.w.cross(&(inertia * x.w))).x) / p.inertia[0],
        (tau.y - (x.w.cross(&(inertia * x.w))).y) / p.inertia[1],
        (tau.z - (x.w.cross(&(inertia * x.w))).z) / p.inertia[2],
    );

    [
        dp.x, dp.y, dp.z, dq[0], dq[1], dq[2], dq[3], dv.x, dv.y, dv.z, dw.x, dw.y, dw.z,
    ]
}

fn add_scaled(a: &[f64; 13], b: &[f64; 13], s: f64) -> [f64; 13] {
    let mut out = *a;
    for i in 0..13 {
        out[i] += s * b[i];
    }
    out
}

/// One RK4 step of an arbitrary 13-component derivative field, with
/// quaternion renormalization at the end.
pub fn rk4_step<F: Fn(&State) -> [f64; 13]>(x: &State, h: f64, field: F) -> State {
    let y0 = x.to_array();
    let k1 = field(x);
    let k2 = field(&State::from_array(&add_scaled(&y0, &k1, h / 2.0)));
    let k3 = field(&State::from_array(&add_scaled(&y0, &k2, h / 2.0)));
    let k4 = field(&State::from_array(&add_scaled(&y0, &k3, h)));
    let mut y = y0;
    for i in 0..13 {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    // from_array renormalizes the quaternion.
    State::from_array(&y)
}

/// Integrates the ground-truth dynamics over one control period `dt` with
/// the control held constant, using `substeps` RK4 substeps.
pub fn integrate(
    x: &State,
    u: &Control,
    p: &QuadParams,
    extra_mass: f64,
    dt: f64,
    substeps: usize,
) -> State {
    assert!(dt > 0.0 && substeps > 0);
    let h = dt / substeps as f64;
    let mut state = *x;
    for _ in 0..substeps {
        state = rk4_step(&state, h, |s| deriv(s, u, p, extra_mass));
    }
    state
}

// ---------------------------------------------------------------------------
// Reference trajectories
// ---------------------------------------------------------------------------

/// Analytic reference families for tracking experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    Hover,
    Circle,
    Lemniscate,
}

impl std::str::FromStr for ReferenceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hover" => Ok(Self::Hover),
            "circle" => Ok(Self::Circle),
            "lemniscate" => Ok(Self::Lemniscate),
            other => Err(format!("unknown reference kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Hover => "hover",
            Self::Circle => "circle",
            Self::Lemniscate => "lemniscate",
        };
        f.write_str(s)
    }
}

/// One reference sample: world position, velocity, acceleration, yaw.
#[derive(Debug, Clone, Copy)]
pub struct RefSample {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub yaw: f64,
}

/// A smooth closed loop used both for the standard references and for
/// randomized dataset generation.
#[derive(Debug, Clone, Copy)]
pub struct LoopRef {
    pub kind: ReferenceKind,
    /// Half-extent along x [m].
    pub rx: f64,
    /// Half-extent along y [m] (circle ignores this and uses `rx`).
    pub ry: f64,
    pub period: f64,
    pub altitude: f64,
    pub phase: f64,
}

impl LoopRef {
    pub fn sample(&self, t: f64) -> RefSample {
        let om = 2.0 * std::f64::consts::PI / self.period;
        let th = om * t + self.phase;
        match self.kind {
            ReferenceKind::Hover => RefSample {
                p: Vector3::new(0.0, 0.0, self.altitude),
                v: Vector3::zeros(),
                a: Vector3::zeros(),
                yaw: 0.0,
            },
            ReferenceKind::Circle => RefSample {
                p: Vector3::new(self.rx * th.cos(), self.rx * th.sin(), self.altitude),
                v: Vector3::new(-self.rx * om * th.sin(), self.rx * om * th.cos(), 0.0),
                a: Vector3::new(
                    -self.rx * om * om * th.cos(),
                    -self.rx * om * om * th.sin(),
                    0.0,
                ),
                yaw: 0.0,
            },
            ReferenceKind::Lemniscate => {
                // Gerono figure-eight: x = rx cos θ, y = ry sin 2θ.
                RefSample {
                    p: Vector3::new(self.rx * th.cos(), self.ry * (2.0 * th).sin(), self.altitude),
                    v: Vector3::new(
                        -self.rx * om * th.sin(),
                        2.0 * self.ry * om * (2.0 * th).cos(),
                        0.0,
                    ),
                    a: Vector3::new(
                        -self.rx * om * om * th.cos(),
                        -4.0 * self.ry * om * om * (2.0 * th).sin(),
                        0.0,
                    ),
                    yaw: 0.0,
                }
            }
        }
    }
}

/// The pinned experiment references: circle of radius 1 m / period 6 s,
/// Gerono lemniscate of 1.5 m × 1 m extents / period 8 s, both at 1 m
/// altitude with zero yaw.
pub fn standard_loop(kind: ReferenceKind) -> LoopRef {
    match kind {
        ReferenceKind::Hover => LoopRef {
            kind,
            rx: 0.0,
            ry: 0.0,
            period: 1.0,
            altitude: 1.0,
            phase: 0.0,
        },
        ReferenceKind::Circle => LoopRef {
            kind,
            rx: 1.0,
            ry: 1.0,
            period: 6.0,
            altitude: 1.0,
            phase: 0.0,
        },
        ReferenceKind::Lemniscate => LoopRef {
            kind,
            rx: 0.75,
            ry: 0.5,
            period: 8.0,
            altitude: 1.0,
            phase: 0.0,
        },
    }
}

/// Samples the standard reference of the given kind.
pub fn reference(kind: ReferenceKind, t: f64) -> RefSample {
    standard_loop(kind).sample(t)
}

/// Converts a reference sample into a full reference state: yaw-derived
/// level attitude, body-frame feedforward velocity, zero angular rate.
pub fn reference_state(sample: &RefSample) -> State {
    let q = liegroup::exp_map(&Vector3::new(0.0, 0.0, sample.yaw)).canonicalize();
    let v_body = liegroup::qrotate(&liegroup::qinv(&q), &sample.v);
    State { p: sample.p, q, v: v_body, w: Vector3::zeros() }
}

// ---------------------------------------------------------------------------
// Geometric tracking controller (dataset generation)
// ---------------------------------------------------------------------------

/// Gains of the geometric/PD data-collection controller.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeoGains {
    pub kp: f64,
    pub kv: f64,
    pub kr: f64,
    pub kw: f64,
}

impl Default for GeoGains {
    fn default() -> Self {
        Self { kp: 6.0, kv: 4.0, kr: 0.8, kw: 0.12 }
    }
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Geometric tracking law producing motor thrusts through the mixer
/// inverse, clamped to `[0, u_max]`. Used to excite the dynamics while
/// collecting training data.
pub fn datagen_controller(
    x: &State,
    r: &RefSample,
    p: &QuadParams,
    gains: &GeoGains,
    u_max: f64,
) -> Control {
    let rot = liegroup::rotmat(&x.q);
    let v_world = rot * x.v;
    let a_des = gains.kp * (r.p - x.p) + gains.kv * (r.v - v_world) + r.a
        + Vector3::new(0.0, 0.0, p.gravity);
    // Desired thrust vector and attitude.
    let thrust_vec = p.mass * a_des;
    let f_cmd = thrust_vec.dot(&(rot * Vector3::z()));
    let b3 = if thrust_vec.norm() > 1e-9 {
        thrust_vec.normalize()
    } else {
        Vector3::z()
    };
    let b1_yaw = Vector3::new(r.yaw.cos(), r.yaw.sin(), 0.0);
    let b2 = b3.cross(&b1_yaw);
    let b2 = if b2.norm() > 1e-9 { b2.normalize() } else { Vector3::y() };
    let b1 = b2.cross(&b3);
    let r_des = Matrix3::from_columns(&[b1, b2, b3]);

    let e_r = 0.5 * vee(&(r_des.transpose() * rot - rot.transpose() * r_des));
    let e_w = x.w;
    let inertia = p.inertia_matrix();
    let tau = -gains.kr * e_r - gains.kw * e_w + x.w.cross(&(inertia * x.w));

    let mut u = mixer_inverse(f_cmd.max(0.0), &tau, p);
    u.iter_mut().for_each(|ui| *ui = ui.clamp(0.0, u_max));
    u
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Simulates one closed-loop trajectory under the geometric controller
/// tracking the given loop, recording states and controls at `dt`.
pub fn generate_trajectory(
    p: &QuadParams,
    loop_ref: &LoopRef,
    n_controls: usize,
    dt: f64,
    substeps: usize,
    gains: &GeoGains,
    u_max: f64,
    initial_offset: Vector3<f64>,
) -> crate::data::Trajectory {
    let start = loop_ref.sample(0.0);
    let mut x = reference_state(&start);
    x.p += initial_offset;
    let mut states = Vec::with_capacity(n_controls + 1);
    let mut controls = Vec::with_capacity(n_controls);
    states.push(x);
    for k in 0..n_controls {
        let t = k as f64 * dt;
        let u = datagen_controller(&x, &loop_ref.sample(t), p, gains, u_max);
        x = integrate(&x, &u, p, 0.0, dt, substeps);
        controls.push(u);
        states.push(x);
    }
    crate::data::Trajectory::new(dt, states, controls).expect("lengths consistent")
}

/// Draws a randomized smooth loop for dataset generation: circle or
/// lemniscate, radius 0.5–1.5 m, period 4–10 s, altitude 0.5–1.5 m,
/// random phase.
pub fn random_loop<R: Rng>(rng: &mut R) -> LoopRef {
    let kind = if rng.random_range(0.0..1.0) < 0.5 {
        ReferenceKind::Circle
    } else {
        ReferenceKind::Lemniscate
    };
    let rx = rng.random_range(0.5..1.5);
    let ry = rng.random_range(0.25..0.75);
    LoopRef {
        kind,
        rx,
        ry,
        period: rng.random_range(4.0..10.0),
        altitude: rng.random_range(0.5..1.5),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

// ---------------------------------------------------------------------------
// Simulator-backed predictive model (oracle for controller tests)
// ---------------------------------------------------------------------------

/// The ground-truth simulator exposed through the predictive-model
/// interface, with Jacobians from manifold central differences. Used to
/// exercise the controller independently of any learned model.
#[derive(Debug, Clone)]
pub struct SimModel {
    pub quad: QuadParams,
    pub extra_mass: f64,
    pub dt: f64,
    pub substeps: usize,
}

impl SimModel {
    pub fn new(quad: QuadParams, dt: f64) -> Self {
        Self { quad, extra_mass: 0.0, dt, substeps: 10 }
    }
}

impl PredictiveModel for SimModel {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &State, u: &Control) -> Result<State, DynError> {
        let next = integrate(x, u, &self.quad, self.extra_mass, self.dt, self.substeps);
        if next.is_finite() {
            Ok(next)
        } else {
            Err(DynError::NonFinite { step: 0 })
        }
    }

    fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = 1e-6;
        let step = |x: &State, u: &Control| {
            integrate(x, u, &self.quad, self.extra_mass, self.dt, self.substeps)
        };
        let mut a = DMatrix::zeros(12, 12);
        for j in 0..12 {
            let mut e = SVector::<f64, 12>::zeros();
            e[j] = h;
            let xp = compose(x, &Increment::from_vector(&e));
            e[j] = -h;
            let xm = compose(x, &Increment::from_vector(&e));
            let col = diff(&step(&xp, u), &step(&xm, u)) / (2.0 * h);
            a.column_mut(j)
                .copy_from(&DVector::from_iterator(12, col.iter().copied()));
        }
        let mut b = DMatrix::zeros(12, 4);
        for j in 0..4 {
            let mut up = *u;
            let mut um = *u;
            up[j] += h;
            um[j] -= h;
            let col = diff(&step(x, &up), &step(x, &um)) / (2.0 * h);
            b.column_mut(j)
                .copy_from(&DVector::from_iterator(12, col.iter().copied()));
        }
        (a, b)
    }
}
