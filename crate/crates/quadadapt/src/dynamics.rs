//! Discrete-time manifold dynamics `x_{k+1} = x_k ⊕ δf(x_k, u_k)` over the
//! learned network, and its Jacobians with respect to state, control, and
//! adapter parameters.
//!
//! Jacobians are expressed in the 12-dimensional tangent space on both
//! sides: a tangent input perturbation enters the raw 13 coordinates
//! through `diag(I₃, ½Q(q_k), I₃, I₃)` and a raw output perturbation is
//! projected back through `diag(I₃, 2Q(q_{k+1})ᵀ, I₃, I₃)`; the factors ½
//! and 2 come from the full-angle axis-angle convention used throughout
//! this crate. The quaternion composition block uses the exact derivative
//! of the exponential map at the predicted increment (`liegroup::dexp`),
//! which reduces to the familiar `½[q]_L H` at zero increment. All three
//! Jacobians match manifold central finite differences to near machine
//! precision.
//!
//! Position never enters the network input: the dynamics are
//! translational-invariant by construction.

use crate::liegroup::{self, UnitQuaternion};
use crate::lowrank::{self, LayerAdapter, LowRankError};
use crate::net::{self, ForwardCache, MlpParams, NetError, NetInput, NormStats};
use crate::state::{compose, Control, State};
use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DynError {
    #[error("non-finite state at rollout step {step}")]
    NonFinite { step: usize },
    #[error("model/config sample period mismatch: model {model_dt} s vs configured {config_dt} s")]
    DtMismatch { model_dt: f64, config_dt: f64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// Anything the predictive controller can plan over: a discrete-time step
/// function with tangent-space state and control Jacobians.
pub trait PredictiveModel {
    fn dt(&self) -> f64;
    fn step(&self, x: &State, u: &Control) -> Result<State, DynError>;
    /// `(A, B)`: 12×12 and 12×4 tangent-space Jacobians at `(x, u)`.
    fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>);
}

/// The learned incremental dynamics model: frozen pretrained weights, the
/// current low-rank adapters, normalization statistics, and the sample
/// period.
#[derive(Debug, Clone)]
pub struct DynModel {
    params: MlpParams,
    stats: NormStats,
    dt: f64,
    adapters: Vec<LayerAdapter>,
    /// Effective parameters `W + UΣPVᵀ`, refreshed on adapter updates.
    eff: MlpParams,
}

impl DynModel {
    pub fn new(params: MlpParams, stats: NormStats, dt: f64) -> Result<Self, DynError> {
        Self::with_adapters(params, stats, dt, Vec::new())
    }

    pub fn with_adapters(
        params: MlpParams,
        stats: NormStats,
        dt: f64,
        adapters: Vec<LayerAdapter>,
    ) -> Result<Self, DynError> {
        if params.input_dim() != net::INPUT_DIM || params.output_dim() != net::OUTPUT_DIM {
            return Err(NetError::DimensionMismatch(format!(
                "dynamics model needs {}→{} network, got {}→{}",
                net::INPUT_DIM,
                net::OUTPUT_DIM,
                params.input_dim(),
                params.output_dim()
            ))
            .into());
        }
        stats.validate()?;
        assert!(dt > 0.0, "sample period must be positive");
        let eff = if adapters.is_empty() {
            params.clone()
        } else {
            lowrank::effective_params(&params, &adapters)
        };
        Ok(Self { params, stats, dt, adapters, eff })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn adapters(&self) -> &[LayerAdapter] {
        &self.adapters
    }

    /// Effective (adapter-applied) parameters currently in force.
    pub fn effective(&self) -> &MlpParams {
        &self.eff
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapters.is_empty()
    }

    pub fn n_adapt_params(&self) -> usize {
        lowrank::adapter_dim(&self.adapters)
    }

    /// Current flattened adaptation vector.
    pub fn adapter_vector(&self) -> nalgebra::DVector<f64> {
        lowrank::flatten(&self.adapters)
    }

    /// Installs a new adaptation vector and refreshes the effective
    /// weights (snapshot semantics: callers clone the model to publish).
    pub fn set_adapter_vector(&mut self, v: &nalgebra::DVector<f64>) -> Result<(), DynError> {
        lowrank::unflatten_into(v, &mut self.adapters)?;
        self.eff = lowrank::effective_params(&self.params, &self.adapters);
        Ok(())
    }

    pub fn set_adapters(&mut self, adapters: Vec<LayerAdapter>) {
        self.adapters = adapters;
        self.eff = if self.adapters.is_empty() {
            self.params.clone()
        } else {
            lowrank::effective_params(&self.params, &self.adapters)
        };
    }
}

/// The spec'd tangent projection `E(q) = diag(I₃, Q(q), I₃, I₃)` mapping
/// 12 tangent coordinates into the 13 raw state coordinates, satisfying
/// `EᵀE = I₁₂`.
pub fn tangent_projection(q: &UnitQuaternion) -> SMatrix<f64, 13, 12> {
    let mut e = SMatrix::<f64, 13, 12>::zeros();
    e.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    e.fixed_view_mut::<4, 3>(3, 3)
        .copy_from(&liegroup::orientation_jacobian(q));
    e.fixed_view_mut::<3, 3>(7, 6).copy_from(&Matrix3::identity());
    e.fixed_view_mut::<3, 3>(10, 9).copy_from(&Matrix3::identity());
    e
}

/// Per-step linearization data shared by the Jacobian assembly and by
/// backpropagation through time.
#[derive(Debug, Clone)]
pub struct StepLin {
    /// Orientation at the start of the step.
    pub q: UnitQuaternion,
    /// Predicted orientation increment.
    pub dphi: Vector3<f64>,
    /// `q ⊗ exp(δφ)` before hemisphere canonicalization; the tangent maps
    /// are sign-invariant so this is interchangeable with the canonical
    /// representative.
    pub q_next_raw: UnitQuaternion,
    /// Direct quaternion block of `∂x_{k+1}/∂x_k`: `R(exp(δφ))ᵀ`.
    pub a_direct_q: Matrix3<f64>,
    /// Tangent sensitivity of the next orientation to the predicted
    /// increment: `2 Q(q_next)ᵀ [q]_L dexp(δφ)`.
    pub gq: Matrix3<f64>,
    /// Network activations at this step (on the effective parameters).
    pub cache: ForwardCache,
}

/// Linearization blocks of the manifold composition `x ⊕ δ` for a known
/// orientation increment.
pub(crate) fn compose_lin_blocks(
    q: &UnitQuaternion,
    dphi: &Vector3<f64>,
) -> (UnitQuaternion, Matrix3<f64>, Matrix3<f64>) {
    let exp_dphi = liegroup::exp_map(dphi);
    let q_next_raw = liegroup::qmul(q, &exp_dphi);
    let a_direct_q = liegroup::rotmat(&exp_dphi).transpose();
    let gq = 2.0
        * liegroup::orientation_jacobian(&q_next_raw).transpose()
        * q.left_matrix()
        * liegroup::dexp(dphi);
    (q_next_raw, a_direct_q, gq)
}

/// One dynamics step on raw parameters with the linearization byproducts
/// retained. Offline training calls this directly on the weights being
/// optimized; [`step_with_lin`] wraps it for a [`DynModel`].
pub fn step_with_lin_params(
    params: &MlpParams,
    stats: &NormStats,
    x: &State,
    u: &Control,
) -> Result<(State, StepLin), DynError> {
    let z = NetInput::new(&x.q, &x.v, &x.w, u);
    let cache = net::forward_cached(params, stats, &z)?;
    let inc = net::increment_from_output(&cache.output)?;
    let next = compose(x, &inc);
    if !next.is_finite() {
        return Err(DynError::NonFinite { step: 0 });
    }
    let (q_next_raw, a_direct_q, gq) = compose_lin_blocks(&x.q, &inc.dphi);
    Ok((
        next,
        StepLin { q: x.q, dphi: inc.dphi, q_next_raw, a_direct_q, gq, cache },
    ))
}

/// One dynamics step with the linearization byproducts retained.
pub fn step_with_lin(m: &DynModel, x: &State, u: &Control) -> Result<(State, StepLin), DynError> {
    step_with_lin_params(&m.eff, &m.stats, x, u)
}

/// Advances the model one step: `compose(x, δf(x, u))`.
pub fn step(m: &DynModel, x: &State, u: &Control) -> Result<State, DynError> {
    let z = NetInput::new(&x.q, &x.v, &x.w, u);
    let inc = net::forward(&m.eff, &m.stats, &z)?;
    let next = compose(x, &inc);
    if !next.is_finite() {
        return Err(DynError::NonFinite { step: 0 });
    }
    Ok(next)
}

/// Recursive rollout; the result has `us.len() + 1` states including `x0`.
pub fn rollout(m: &DynModel, x0: &State, us: &[Control]) -> Result<Vec<State>, DynError> {
    let mut states = Vec::with_capacity(us.len() + 1);
    states.push(*x0);
    for (k, u) in us.iter().enumerate() {
        let next = step(m, states.last().unwrap(), u).map_err(|e| match e {
            DynError::NonFinite { .. } => DynError::NonFinite { step: k },
            other => other,
        })?;
        states.push(next);
    }
    Ok(states)
}

/// Scales the orientation rows of a raw net-output Jacobian by the
/// orientation output gain; position/velocity rows pass through.
fn apply_output_gain(gq: &Matrix3<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    let phi_rows = gq * m.rows(3, 3);
    out.rows_mut(3, 3).copy_from(&phi_rows);
    out
}

/// Maps the raw-input Jacobian (columns over `z = (q, v, ω, u)`) to
/// tangent state columns `(δp, δφ, δv, δω)`; position columns are zero.
fn input_columns_to_tangent(jz: &DMatrix<f64>, q: &UnitQuaternion) -> DMatrix<f64> {
    let rows = jz.nrows();
    let mut out = DMatrix::zeros(rows, 12);
    let lift = liegroup::orientation_jacobian(q) * 0.5;
    let lift_dyn = DMatrix::from_fn(4, 3, |i, j| lift[(i, j)]);
    out.columns_mut(3, 3)
        .copy_from(&(jz.columns(0, 4) * lift_dyn));
    out.columns_mut(6, 3).copy_from(&jz.columns(4, 3));
    out.columns_mut(9, 3).copy_from(&jz.columns(7, 3));
    out
}

fn assemble_jac_state(m: &DynModel, lin: &StepLin) -> DMatrix<f64> {
    let jz = net::input_jacobian_cached(&m.eff, &m.stats, &lin.cache);
    let net_path = apply_output_gain(&lin.gq, &input_columns_to_tangent(&jz, &lin.q));
    let mut a = DMatrix::identity(12, 12);
    a.view_mut((3, 3), (3, 3))
        .copy_from(&lin.a_direct_q);
    a + net_path
}

fn assemble_jac_control(m: &DynModel, lin: &StepLin) -> DMatrix<f64> {
    let jz = net::input_jacobian_cached(&m.eff, &m.stats, &lin.cache);
    apply_output_gain(&lin.gq, &jz.columns(10, 4).into())
}

fn assemble_jac_params(m: &DynModel, lin: &StepLin) -> DMatrix<f64> {
    let jp = net::param_jacobian_cached(&m.eff, &m.adapters, &m.stats, &lin.cache);
    apply_output_gain(&lin.gq, &jp)
}

/// Tangent-space state Jacobian `A_k` (12×12).
pub fn jac_state(m: &DynModel, x: &State, u: &Control) -> DMatrix<f64> {
    let (_, lin) = step_with_lin(m, x, u).expect("finite step");
    assemble_jac_state(m, &lin)
}

/// Tangent-space control Jacobian `B_k` (12×4).
pub fn jac_control(m: &DynModel, x: &State, u: &Control) -> DMatrix<f64> {
    let (_, lin) = step_with_lin(m, x, u).expect("finite step");
    assemble_jac_control(m, &lin)
}

/// Jacobian `F_k` (12 × adapter dim) with respect to the flattened
/// low-rank adaptation vector.
pub fn jac_params(m: &DynModel, x: &State, u: &Control) -> DMatrix<f64> {
    let (_, lin) = step_with_lin(m, x, u).expect("finite step");
    assemble_jac_params(m, &lin)
}

/// `(next state, A_k, B_k)` sharing one forward evaluation; the
/// controller's hot path.
pub fn step_and_jacobians(
    m: &DynModel,
    x: &State,
    u: &Control,
) -> Result<(State, DMatrix<f64>, DMatrix<f64>), DynError> {
    let (next, lin) = step_with_lin(m, x, u)?;
    let jz = net::input_jacobian_cached(&m.eff, &m.stats, &lin.cache);
    let a = {
        let net_path = apply_output_gain(&lin.gq, &input_columns_to_tangent(&jz, &lin.q));
        let mut a = DMatrix::identity(12, 12);
        a.view_mut((3, 3), (3, 3)).copy_from(&lin.a_direct_q);
        a + net_path
    };
    let b = apply_output_gain(&lin.gq, &jz.columns(10, 4).into());
    Ok((next, a, b))
}

/// `(next state, A_k, F_k)` sharing one forward evaluation; the adapter's
/// hot path.
pub fn step_and_adapt_jacobians(
    m: &DynModel,
    x: &State,
    u: &Control,
) -> Result<(State, DMatrix<f64>, DMatrix<f64>), DynError> {
    let (next, lin) = step_with_lin(m, x, u)?;
    let a = assemble_jac_state(m, &lin);
    let f = assemble_jac_params(m, &lin);
    Ok((next, a, f))
}

impl PredictiveModel for DynModel {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &State, u: &Control) -> Result<State, DynError> {
        step(self, x, u)
    }

    fn jacobians(&self, x: &State, u: &Control) -> (DMatrix<f64>, DMatrix<f64>) {
        let (_, a, b) = step_and_jacobians(self, x, u).expect("finite step");
        (a, b)
    }
}
