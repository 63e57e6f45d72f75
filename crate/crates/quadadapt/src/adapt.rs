//! Online low-rank second-order parameter adaptation over recorded
//! state-control windows.
//!
//! Each adaptation window solves a small trajectory-fitting problem in
//! the flattened adapter vector δθ: roll the model out from the measured
//! initial state under the recorded controls, quadraticize the weighted
//! manifold error (Gauss-Newton — no second derivatives of the dynamics),
//! run the Riccati-style backward recursion to collapse the window into a
//! gradient `J^θ₀` and Hessian `J^θθ₀`, then take a regularized Newton
//! step with a backtracking line search that only accepts strict cost
//! decrease. The parameter regularizer anchors δθ at zero, i.e. at the
//! pretrained model, so adaptation is pulled back to the prior when the
//! data stops demanding a correction.
//!
//! The backward recursion:
//!
//! ```text
//! J^x_k  = ℓ^x_k + A_kᵀ J^x_{k+1}
//! J^θ_k  = r^θ_k + F_kᵀ J^x_{k+1} + J^θ_{k+1}
//! J^xx_k = ℓ^xx_k + A_kᵀ J^xx_{k+1} A_k
//! J^θθ_k = r^θθ_k + F_kᵀ J^xx_{k+1} F_k + 2 F_kᵀ J^xθ_{k+1} + J^θθ_{k+1}
//! J^xθ_k = A_kᵀ J^xx_{k+1} F_k + A_kᵀ J^xθ_{k+1}
//! ```
//!
//! with `r^θ`/`r^θθ` nonzero only at the terminal index. The `2 Fᵀ J^xθ`
//! term is asymmetric as written; the final `J^θθ₀` is symmetrized as
//! `(M + Mᵀ)/2` before factorization (which restores the exact
//! Gauss-Newton Hessian, all other terms being symmetric) and the
//! asymmetry norm is reported. The rollout starts at the measured state,
//! so `δx₀ = 0` and the `J^xθ`/`J^xx` blocks do not enter the final
//! solve; they are still computed in full and exposed for testing.

use crate::cost;
use crate::dynamics::{self, DynError, DynModel};
use crate::state::{Control, State};
use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("adaptation window needs {expected} states and {} controls, got {states}/{controls}", expected - 1)]
    IncompleteWindow { expected: usize, states: usize, controls: usize },
    #[error("non-finite adaptation cost")]
    NonFiniteCost,
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error("adaptation log io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Online adaptation hyperparameters (weights from the adaptation column
/// of the experiment's cost-weight table).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Window length in steps (window holds `window + 1` states).
    pub window: usize,
    pub iters_per_window: usize,
    /// Truncated-SVD rank p.
    pub rank: usize,
    /// Initial Levenberg regularization.
    pub mu0: f64,
    pub mu_growth: f64,
    pub mu_max: f64,
    /// Divisor applied to μ after an accepted step.
    pub mu_decay: f64,
    /// Descending line-search step sizes.
    pub alphas: Vec<f64>,
    /// Diagonal state-error weights `(Q_p, Q_q, Q_v, Q_ω)`.
    pub q_state: [f64; 12],
    /// Scalar parameter regularization weight (`Q_θ = q_theta · I`).
    pub q_theta: f64,
    /// Steps between window adaptations in closed loop (50 = 0.5 s at
    /// 100 Hz).
    pub cadence_steps: usize,
    /// Reset the cores to zero before each window instead of persisting.
    pub reset_each_window: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            window: 50,
            iters_per_window: 3,
            rank: 5,
            mu0: 1e-6,
            mu_growth: 10.0,
            mu_max: 1e6,
            mu_decay: 10.0,
            alphas: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            q_state: [10.0, 10.0, 10.0, 5.0, 5.0, 2.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
            q_theta: 0.1,
            cadence_steps: 50,
            reset_each_window: false,
        }
    }
}

impl AdaptConfig {
    pub fn q_state_vec(&self) -> SVector<f64, 12> {
        SVector::from_column_slice(&self.q_state)
    }
}

/// A complete recorded window: `T + 1` states and `T` controls.
#[derive(Debug, Clone, Copy)]
pub struct AdaptWindow<'a> {
    pub states: &'a [State],
    pub controls: &'a [Control],
}

impl<'a> AdaptWindow<'a> {
    pub fn new(states: &'a [State], controls: &'a [Control], expected_steps: usize) -> Result<Self, AdaptError> {
        if states.len() != expected_steps + 1 || controls.len() != expected_steps {
            return Err(AdaptError::IncompleteWindow {
                expected: expected_steps + 1,
                states: states.len(),
                controls: controls.len(),
            });
        }
        Ok(Self { states, controls })
    }
}

/// Window cost `J = δθᵀ Q_θ δθ + Σ_k ‖x̄_k ⊖ x_k‖²_Q` under the model's
/// current adapters, rolling out from the measured initial state.
pub fn adapt_cost(model: &DynModel, win: &AdaptWindow, cfg: &AdaptConfig) -> Result<f64, AdaptError> {
    let rollout = dynamics::rollout(model, &win.states[0], win.controls)?;
    let q = cfg.q_state_vec();
    let theta = model.adapter_vector();
    let mut j = cfg.q_theta * theta.norm_squared();
    for (xb, xm) in rollout.iter().zip(win.states) {
        j += cost::weighted_cost(&crate::state::diff(xb, xm), &q);
    }
    if !j.is_finite() {
        return Err(AdaptError::NonFiniteCost);
    }
    Ok(j)
}

/// Outputs of the Gauss-Newton backward recursion at `k = 0`.
#[derive(Debug, Clone)]
pub struct GnBackward {
    /// `J^θ₀`, the exact gradient of the window cost in δθ.
    pub grad: DVector<f64>,
    /// Symmetrized `J^θθ₀`.
    pub hess: DMatrix<f64>,
    /// `‖J^θθ₀ − J^θθ₀ᵀ‖` before symmetrization.
    pub asymmetry: f64,
    /// `J^x₀` (vanishes from the solve since δx₀ = 0; kept for tests).
    pub jx0: DVector<f64>,
    /// `J^xx₀`.
    pub jxx0: DMatrix<f64>,
    /// `J^xθ₀`.
    pub jxtheta0: DMatrix<f64>,
}

/// The backward recursion on generic sequence data: `a`/`f` are the `T`
/// per-step Jacobians, `lx`/`lxx` the `T + 1` cost derivatives, and
/// `r_grad`/`r_hess` the terminal parameter-regularizer derivatives.
pub fn gn_backward(
    a: &[DMatrix<f64>],
    f: &[DMatrix<f64>],
    lx: &[DVector<f64>],
    lxx: &[DMatrix<f64>],
    r_grad: &DVector<f64>,
    r_hess: &DMatrix<f64>,
) -> GnBackward {
    let steps = a.len();
    assert_eq!(f.len(), steps);
    assert_eq!(lx.len(), steps + 1);
    assert_eq!(lxx.len(), steps + 1);
    let np = r_grad.len();

    let mut jx = lx[steps].clone();
    let mut jth = r_grad.clone();
    let mut jxx = lxx[steps].clone();
    let mut jthth = r_hess.clone();
    let mut jxth = DMatrix::<f64>::zeros(jx.len(), np);

    for k in (0..steps).rev() {
        let at = a[k].transpose();
        let jxx_a = &jxx * &a[k];
        let jxx_f = &jxx * &f[k];
        let new_jth = &f[k].transpose() * &jx + &jth;
        let new_jthth = f[k].transpose() * &jxx_f + 2.0 * f[k].transpose() * &jxth + &jthth;
        let new_jxth = &at * &jxx_f + &at * &jxth;
        let new_jx = &lx[k] + &at * &jx;
        let new_jxx = &lxx[k] + at * jxx_a;
        jx = new_jx;
        jth = new_jth;
        jxx = new_jxx;
        jthth = new_jthth;
        jxth = new_jxth;
    }

    let asymmetry = (&jthth - jthth.transpose()).norm();
    let hess = (&jthth + jthth.transpose()) * 0.5;
    GnBackward { grad: jth, hess, asymmetry, jx0: jx, jxx0: jxx, jxtheta0: jxth }
}

/// Assembles the cost derivatives and dynamics Jacobians along a nominal
/// rollout and runs the backward recursion. The stage costs are
/// differentiated against the measured states of the window.
pub fn backward_pass(
    model: &DynModel,
    nominal: &[State],
    win: &AdaptWindow,
    cfg: &AdaptConfig,
) -> Result<GnBackward, AdaptError> {
    let steps = win.controls.len();
    assert_eq!(nominal.len(), steps + 1);
    let q = cfg.q_state_vec();
    let np = model.n_adapt_params();

    let mut a_seq = Vec::with_capacity(steps);
    let mut f_seq = Vec::with_capacity(steps);
    for k in 0..steps {
        let (_, a, f) = dynamics::step_and_adapt_jacobians(model, &nominal[k], &win.controls[k])?;
        a_seq.push(a);
        f_seq.push(f);
    }
    let mut lx = Vec::with_capacity(steps + 1);
    let mut lxx = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let (_, g, h) = cost::state_cost_terms(&nominal[k], &win.states[k], &q);
        lx.push(DVector::from_iterator(12, g.iter().copied()));
        lxx.push(h);
    }
    let theta = model.adapter_vector();
    let r_grad = 2.0 * cfg.q_theta * &theta;
    let r_hess = DMatrix::from_diagonal_element(np, np, 2.0 * cfg.q_theta);
    Ok(gn_backward(&a_seq, &f_seq, &lx, &lxx, &r_grad, &r_hess))
}

/// Solves `(H + μI) δθ = −g` by Cholesky, escalating μ by `mu_growth`
/// until the factorization succeeds. Returns the step and the μ that
/// worked, or `None` if `mu_max` is exceeded.
pub fn solve_regularized(
    grad: &DVector<f64>,
    hess: &DMatrix<f64>,
    mu0: f64,
    mu_growth: f64,
    mu_max: f64,
) -> Option<(DVector<f64>, f64)> {
    let n = grad.len();
    let mut mu = mu0;
    while mu <= mu_max {
        let damped = hess + DMatrix::from_diagonal_element(n, n, mu);
        if let Some(chol) = damped.cholesky() {
            return Some((-chol.solve(grad), mu));
        }
        mu *= mu_growth;
    }
    None
}

/// One adaptation iteration's log entry.
#[derive(Debug, Clone, Copy)]
pub struct IterLog {
    pub j_before: f64,
    pub j_after: f64,
    pub alpha: f64,
    pub mu: f64,
    pub step_norm: f64,
    pub asymmetry: f64,
    pub accepted: bool,
}

/// Per-window adaptation log record.
#[derive(Debug, Clone)]
pub struct WindowLog {
    /// Simulation time at which the window was adapted [s].
    pub sim_time: f64,
    /// Wall-clock duration of the adaptation [ms].
    pub wall_ms: f64,
    /// Index of the window's first sample in the run.
    pub start_index: usize,
    pub iters: Vec<IterLog>,
    /// ‖δθ‖ after the window.
    pub theta_norm: f64,
}

/// Runs `iters_per_window` Gauss-Newton iterations on one window,
/// mutating the model's adapters in place. `mu` persists across calls
/// (decayed on acceptance, grown on rejection). A window that accepts no
/// step leaves the adapters at their last accepted value.
pub fn adapt_window(
    model: &mut DynModel,
    win: &AdaptWindow,
    cfg: &AdaptConfig,
    mu: &mut f64,
) -> Result<Vec<IterLog>, AdaptError> {
    if cfg.reset_each_window {
        let zeros = DVector::zeros(model.n_adapt_params());
        model.set_adapter_vector(&zeros)?;
    }
    let mut iters = Vec::with_capacity(cfg.iters_per_window);
    for _ in 0..cfg.iters_per_window {
        let nominal = dynamics::rollout(model, &win.states[0], win.controls)?;
        let j0 = adapt_cost(model, win, cfg)?;
        let gn = backward_pass(model, &nominal, win, cfg)?;
        let Some((delta, mu_used)) = solve_regularized(&gn.grad, &gn.hess, *mu, cfg.mu_growth, cfg.mu_max)
        else {
            log::warn!("adaptation Hessian singular at mu_max; skipping window iteration");
            iters.push(IterLog {
                j_before: j0,
                j_after: j0,
                alpha: 0.0,
                mu: *mu,
                step_norm: 0.0,
                asymmetry: gn.asymmetry,
                accepted: false,
            });
            continue;
        };
        let theta0 = model.adapter_vector();
        let mut accepted = false;
        let mut j_after = j0;
        let mut alpha_used = 0.0;
        for &alpha in &cfg.alphas {
            let candidate = &theta0 + alpha * &delta;
            model.set_adapter_vector(&candidate)?;
            match adapt_cost(model, win, cfg) {
                Ok(j_new) if j_new < j0 => {
                    accepted = true;
                    j_after = j_new;
                    alpha_used = alpha;
                    break;
                }
                _ => {
                    model.set_adapter_vector(&theta0)?;
                }
            }
        }
        if accepted {
            *mu = (mu_used / cfg.mu_decay).max(cfg.mu0);
        } else {
            *mu = (mu_used * cfg.mu_growth).min(cfg.mu_max);
        }
        iters.push(IterLog {
            j_before: j0,
            j_after,
            alpha: alpha_used,
            mu: mu_used,
            step_norm: delta.norm(),
            asymmetry: gn.asymmetry,
            accepted,
        });
    }
    Ok(iters)
}

/// Sliding sample buffer driving window-wise adaptation in closed loop.
#[derive(Debug, Clone)]
pub struct AdaptState {
    states: VecDeque<State>,
    controls: VecDeque<Control>,
    capacity: usize,
    /// Current Levenberg regularization, persisted across windows.
    pub mu: f64,
    pub windows_run: usize,
}

impl AdaptState {
    pub fn new(cfg: &AdaptConfig) -> Self {
        Self {
            states: VecDeque::with_capacity(cfg.window + 1),
            controls: VecDeque::with_capacity(cfg.window),
            capacity: cfg.window,
            mu: cfg.mu0,
            windows_run: 0,
        }
    }

    /// Records the measured state and the control applied from it.
    pub fn push(&mut self, x: State, u: Control) {
        self.states.push_back(x);
        self.controls.push_back(u);
        while self.controls.len() > self.capacity {
            self.states.pop_front();
            self.controls.pop_front();
        }
    }

    /// True once the buffer holds a full window of fresh data.
    pub fn ready(&self) -> bool {
        self.controls.len() == self.capacity
    }

    /// The buffered window: the last `T` transitions plus the latest
    /// measured state.
    pub fn window_data(&self, latest: &State) -> (Vec<State>, Vec<Control>) {
        let mut states: Vec<State> = self.states.iter().copied().collect();
        states.push(*latest);
        (states, self.controls.iter().copied().collect())
    }
}

/// Writes adaptation logs as CSV, one row per window iteration.
pub fn write_adapt_log(path: &Path, logs: &[WindowLog], config_hash: &str) -> Result<(), AdaptError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# format: adapt-log-v1")?;
    writeln!(f, "# config: {config_hash}")?;
    writeln!(
        f,
        "sim_time,wall_ms,window_start,iter,j_before,j_after,alpha,mu,step_norm,theta_norm"
    )?;
    for w in logs {
        for (i, it) in w.iters.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                w.sim_time,
                w.wall_ms,
                w.start_index,
                i,
                it.j_before,
                it.j_after,
                it.alpha,
                it.mu,
                it.step_norm,
                w.theta_norm
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynModel;
    use crate::lowrank::build_adapter;
    use crate::net::{self, MlpParams, NormStats};
    use crate::state::Increment;
    use approx::assert_relative_eq;
    use nalgebra::{SVector, Vector3, Vector4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0xada7)
    }

    fn random_state(r: &mut ChaCha8Rng) -> State {
        let mut d = |s: f64| {
            Vector3::new(
                r.random_range(-s..s),
                r.random_range(-s..s),
                r.random_range(-s..s),
            )
        };
        let p = d(1.0);
        let v = d(2.0);
        let w = d(3.0);
        State {
            p,
            q: crate::UnitQuaternion::new_normalize(
                r.random_range(-1.0..1.0),
                Vector3::new(
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                    r.random_range(-1.0..1.0),
                ),
            )
            .canonicalize(),
            v,
            w,
        }
    }

    fn random_control(r: &mut ChaCha8Rng) -> Control {
        Vector4::new(
            r.random_range(1.0..5.0),
            r.random_range(1.0..5.0),
            r.random_range(1.0..5.0),
            r.random_range(1.0..5.0),
        )
    }

    fn test_model(r: &mut ChaCha8Rng) -> DynModel {
        let params = MlpParams::random(&MlpParams::quadrotor_dims(), r);
        let mut stats = NormStats::default_limits(net::OUTPUT_DIM);
        stats.out_mean = nalgebra::DVector::from_fn(12, |_, _| r.random_range(-0.005..0.005));
        stats.out_std = nalgebra::DVector::from_fn(12, |_, _| r.random_range(0.01..0.05));
        let adapters = build_adapter(&params, 5).unwrap();
        DynModel::with_adapters(params, stats, 0.01, adapters).unwrap()
    }

    fn small_cfg(steps: usize) -> AdaptConfig {
        AdaptConfig { window: steps, ..Default::default() }
    }

    /// Window data generated by a model with known adapter vector.
    fn window_from(
        model: &DynModel,
        x0: &State,
        r: &mut ChaCha8Rng,
        steps: usize,
    ) -> (Vec<State>, Vec<Control>) {
        let controls: Vec<Control> = (0..steps).map(|_| random_control(r)).collect();
        let states = dynamics::rollout(model, x0, &controls).unwrap();
        (states, controls)
    }

    #[test]
    fn cost_zero_for_generating_model_and_zero_adapters() {
        let mut r = rng();
        let model = test_model(&mut r);
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&model, &x0, &mut r, 10);
        let cfg = small_cfg(10);
        let win = AdaptWindow::new(&states, &controls, 10).unwrap();
        let j = adapt_cost(&model, &win, &cfg).unwrap();
        assert!(j < 1e-18, "J = {j}");
    }

    #[test]
    fn cost_reduces_to_regularizer_with_zero_state_weights() {
        let mut r = rng();
        let mut model = test_model(&mut r);
        let theta = nalgebra::DVector::from_fn(100, |_, _| r.random_range(-0.1..0.1));
        model.set_adapter_vector(&theta).unwrap();
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&model, &x0, &mut r, 5);
        let mut cfg = small_cfg(5);
        cfg.q_state = [0.0; 12];
        let win = AdaptWindow::new(&states, &controls, 5).unwrap();
        let j = adapt_cost(&model, &win, &cfg).unwrap();
        assert_relative_eq!(j, cfg.q_theta * theta.norm_squared(), epsilon = 1e-12);
    }

    #[test]
    fn cost_matches_hand_built_window() {
        // Zero network, constant measured states, q_p weight only: the
        // rollout stays at x0, measured states drift +0.1 in z per step.
        let params = MlpParams::zeros(&MlpParams::quadrotor_dims());
        let stats = NormStats::default_limits(net::OUTPUT_DIM);
        let adapters = build_adapter(&MlpParams::random(&MlpParams::quadrotor_dims(), &mut rng()), 5)
            .unwrap();
        let model = DynModel::with_adapters(params, stats, 0.01, adapters).unwrap();
        let x0 = State::at_rest(Vector3::zeros());
        let mut s1 = x0;
        s1.p.z = 0.1;
        let mut s2 = x0;
        s2.p.z = 0.2;
        let states = vec![x0, s1, s2];
        let controls = vec![Vector4::from_element(2.0); 2];
        let mut cfg = small_cfg(2);
        cfg.q_state = [0.0; 12];
        cfg.q_state[2] = 4.0;
        let win = AdaptWindow::new(&states, &controls, 2).unwrap();
        // Rollout stays at x0: errors 0, −0.1, −0.2 in z.
        // J = 4·(0.01 + 0.04) = 0.2 (δθ = 0).
        let j = adapt_cost(&model, &win, &cfg).unwrap();
        assert_relative_eq!(j, 0.2, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_on_quadrotor_window() {
        let mut r = rng();
        let mut model = test_model(&mut r);
        // Non-zero adapters and mismatched data exercise the full path.
        let theta = nalgebra::DVector::from_fn(100, |_, _| r.random_range(-0.02..0.02));
        model.set_adapter_vector(&theta).unwrap();
        let gen = test_model(&mut r);
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&gen, &x0, &mut r, 8);
        let cfg = small_cfg(8);
        let win = AdaptWindow::new(&states, &controls, 8).unwrap();

        let nominal = dynamics::rollout(&model, &win.states[0], win.controls).unwrap();
        let gn = backward_pass(&model, &nominal, &win, &cfg).unwrap();

        // h = 1e-5 balances truncation against FD round-off on a cost of
        // this scale; smaller steps drown the comparison in noise.
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for j in 0..100 {
            let mut hi = model.clone();
            let mut lo = model.clone();
            let mut th = theta.clone();
            th[j] += h;
            hi.set_adapter_vector(&th).unwrap();
            th[j] -= 2.0 * h;
            lo.set_adapter_vector(&th).unwrap();
            let fd = (adapt_cost(&hi, &win, &cfg).unwrap() - adapt_cost(&lo, &win, &cfg).unwrap())
                / (2.0 * h);
            max_rel = max_rel.max((gn.grad[j] - fd).abs() / fd.abs().max(1e-6));
        }
        assert!(max_rel < 1e-5, "gradient rel err {max_rel}");
    }

    #[test]
    fn zero_error_window_has_zero_gradient() {
        let mut r = rng();
        let model = test_model(&mut r);
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&model, &x0, &mut r, 6);
        let cfg = small_cfg(6);
        let win = AdaptWindow::new(&states, &controls, 6).unwrap();
        let nominal = dynamics::rollout(&model, &win.states[0], win.controls).unwrap();
        let gn = backward_pass(&model, &nominal, &win, &cfg).unwrap();
        assert!(gn.grad.amax() < 1e-9, "grad at optimum {}", gn.grad.amax());
    }

    /// Scalar linear system toy: x_{k+1} = a·x_k + f·θ with 2 parameters.
    /// The recursion must reproduce the closed-form regularized
    /// least-squares solution and normal-equation matrix.
    #[test]
    fn linear_toy_matches_normal_equations() {
        let a_coef = 0.9;
        let f_coef = DMatrix::from_row_slice(1, 2, &[0.7, -0.3]);
        let steps = 6;
        let q = 2.5;
        let q_theta = 0.4;
        let x0 = 1.3;
        // Measured data from θ* (linear system: exact).
        let theta_star = DVector::from_column_slice(&[0.05, -0.08]);
        let mut measured = vec![x0];
        for _ in 0..steps {
            let prev = *measured.last().unwrap();
            measured.push(a_coef * prev + (&f_coef * &theta_star)[0]);
        }
        // Nominal rollout at θ = 0 stays governed by a alone.
        let mut nominal = vec![x0];
        for _ in 0..steps {
            nominal.push(a_coef * nominal.last().unwrap());
        }
        let a_seq: Vec<DMatrix<f64>> = (0..steps).map(|_| DMatrix::from_element(1, 1, a_coef)).collect();
        let f_seq: Vec<DMatrix<f64>> = (0..steps).map(|_| f_coef.clone()).collect();
        let lx: Vec<DVector<f64>> = (0..=steps)
            .map(|k| DVector::from_element(1, 2.0 * q * (nominal[k] - measured[k])))
            .collect();
        let lxx: Vec<DMatrix<f64>> = (0..=steps).map(|_| DMatrix::from_element(1, 1, 2.0 * q)).collect();
        let r_grad = DVector::zeros(2);
        let r_hess = DMatrix::from_diagonal_element(2, 2, 2.0 * q_theta);
        let gn = gn_backward(&a_seq, &f_seq, &lx, &lxx, &r_grad, &r_hess);

        // Sensitivities Φ_k = ∂x_k/∂θ.
        let mut phi = vec![DMatrix::<f64>::zeros(1, 2)];
        for k in 0..steps {
            phi.push(&phi[k] * a_coef + &f_seq[k]);
        }
        let mut h_oracle = DMatrix::from_diagonal_element(2, 2, 2.0 * q_theta);
        let mut g_oracle = DVector::<f64>::zeros(2);
        for k in 0..=steps {
            h_oracle += 2.0 * q * phi[k].transpose() * &phi[k];
            g_oracle += 2.0 * q * (nominal[k] - measured[k]) * phi[k].transpose();
        }
        assert!((&gn.hess - &h_oracle).amax() < 1e-10, "Hessian vs normal equations");
        assert!((&gn.grad - &g_oracle).amax() < 1e-10);

        // One regularized Newton step from θ = 0 lands on the closed-form
        // regularized least-squares optimum.
        let (delta, _) = solve_regularized(&gn.grad, &gn.hess, 1e-13, 10.0, 1e6).unwrap();
        let oracle = h_oracle
            .clone()
            .cholesky()
            .unwrap()
            .solve(&(-&g_oracle));
        assert!((&delta - &oracle).amax() < 1e-8);
    }

    #[test]
    fn solve_zero_gradient_gives_zero_step() {
        let g = DVector::zeros(5);
        let h = DMatrix::from_diagonal_element(5, 5, 3.0);
        let (d, _) = solve_regularized(&g, &h, 1e-6, 10.0, 1e6).unwrap();
        assert_eq!(d.amax(), 0.0);
    }

    #[test]
    fn solve_escalates_mu_on_indefinite_hessian() {
        let g = DVector::from_element(2, 1.0);
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -5.0]);
        let (_, mu) = solve_regularized(&g, &h, 1e-6, 10.0, 1e6).unwrap();
        assert!(mu > 5.0, "needed mu > 5, got {mu}");
        assert!(solve_regularized(&g, &h, 1e-6, 10.0, 1.0).is_none());
    }

    #[test]
    fn adapt_window_recovers_known_cores() {
        let mut r = rng();
        let base = test_model(&mut r);
        // Ground truth: the same network with a small non-zero core.
        let theta_star = nalgebra::DVector::from_fn(100, |_, _| r.random_range(-0.01..0.01));
        let mut truth = base.clone();
        truth.set_adapter_vector(&theta_star).unwrap();

        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&truth, &x0, &mut r, 30);
        let mut cfg = small_cfg(30);
        cfg.q_theta = 1e-8;
        let win = AdaptWindow::new(&states, &controls, 30).unwrap();

        let mut model = base.clone();
        let mut mu = cfg.mu0;
        let iters = adapt_window(&mut model, &win, &cfg, &mut mu).unwrap();
        let err0 = theta_star.norm();
        let err1 = (model.adapter_vector() - &theta_star).norm();
        assert!(
            err1 < 0.5 * err0,
            "recovery too weak: {err0} -> {err1}; iters: {iters:?}"
        );
        // Monotone non-increasing cost across the window's iterations.
        for it in &iters {
            assert!(it.j_after <= it.j_before);
        }
        for pair in iters.windows(2) {
            assert!(pair[1].j_before <= pair[0].j_after + 1e-12);
        }
    }

    #[test]
    fn regularizer_pulls_adapters_to_zero() {
        let mut r = rng();
        let mut model = test_model(&mut r);
        let theta = nalgebra::DVector::from_fn(100, |_, _| r.random_range(-0.2..0.2));
        model.set_adapter_vector(&theta).unwrap();
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&model, &x0, &mut r, 10);
        let mut cfg = small_cfg(10);
        cfg.q_state = [0.0; 12];
        let win = AdaptWindow::new(&states, &controls, 10).unwrap();
        let mut mu = cfg.mu0;
        for _ in 0..3 {
            adapt_window(&mut model, &win, &cfg, &mut mu).unwrap();
        }
        assert!(
            model.adapter_vector().norm() < 1e-6 * theta.norm(),
            "‖δθ‖ = {}",
            model.adapter_vector().norm()
        );
    }

    #[test]
    fn incomplete_window_rejected() {
        let mut r = rng();
        let model = test_model(&mut r);
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&model, &x0, &mut r, 5);
        assert!(matches!(
            AdaptWindow::new(&states[..4], &controls, 5),
            Err(AdaptError::IncompleteWindow { .. })
        ));
        assert!(AdaptWindow::new(&states, &controls, 5).is_ok());
    }

    #[test]
    fn buffer_slides_and_reports_ready() {
        let mut r = rng();
        let cfg = small_cfg(5);
        let mut st = AdaptState::new(&cfg);
        assert!(!st.ready());
        let states: Vec<State> = (0..8).map(|_| random_state(&mut r)).collect();
        for s in states.iter().take(7) {
            st.push(*s, random_control(&mut r));
        }
        assert!(st.ready());
        let (ws, wc) = st.window_data(&states[7]);
        assert_eq!(ws.len(), 6);
        assert_eq!(wc.len(), 5);
        // The buffer keeps the most recent transitions.
        assert_eq!(ws[0].to_array(), states[2].to_array());
        assert_eq!(ws[5].to_array(), states[7].to_array());
    }

    #[test]
    fn perfect_data_keeps_cost_at_floor() {
        // Alg. 1 on a window the model explains exactly: gradient ≈ 0, so
        // no step should be accepted and J stays at its floor.
        let mut r = rng();
        let mut model = test_model(&mut r);
        let x0 = random_state(&mut r);
        let (states, controls) = window_from(&model, &x0, &mut r, 10);
        let cfg = small_cfg(10);
        let win = AdaptWindow::new(&states, &controls, 10).unwrap();
        let mut mu = cfg.mu0;
        let iters = adapt_window(&mut model, &win, &cfg, &mut mu).unwrap();
        for it in &iters {
            assert!(it.j_after <= it.j_before);
            assert!(it.j_before < 1e-12);
        }
        assert!(model.adapter_vector().norm() < 1e-9);
    }
}
