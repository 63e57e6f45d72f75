//! Offline pre-training of the incremental dynamics network: dataset
//! windowing, multi-step rollout loss, backpropagation through time, and
//! Adam with a cosine learning-rate schedule.
//!
//! A window of `T` consecutive samples contributes a rollout of `T − 1`
//! steps from its (optionally noise-perturbed) initial state; the loss is
//! the weighted squared manifold error against the recorded states,
//! summed over the window. Gradients are exact reverse-mode: tangent
//! adjoints flow backwards through the composition blocks while each
//! step's output adjoint is pushed through the network, accumulating
//! weight and bias gradients.
//!
//! Two equivalent evaluation paths exist: a per-window reference path
//! (`window_loss` / `window_grad`) and a batched path that stacks windows
//! column-wise so the layer products become matrix-matrix multiplies.
//! The batched path is what makes desk-scale training run in minutes on
//! one core; a test pins it to the reference path.

use crate::cost;
use crate::data::Dataset;
use crate::dynamics::{self, DynError, StepLin};
use crate::liegroup;
use crate::net::{self, MlpParams, NormStats, ParamGrads};
use crate::state::{compose, diff, perturb_state, Control, Increment, State};
use nalgebra::{DMatrix, DVector, SVector, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("non-finite loss in window {window}")]
    WindowNonFinite { window: usize },
    #[error("dataset too small: no windows of length {horizon}")]
    NoWindows { horizon: usize },
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error("training log io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Offline training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Samples per window; each window rolls out `horizon − 1` steps.
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Initial-state perturbation std (per block).
    pub sigma: f64,
    /// Decoupled weight decay (0 disables).
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; the paper-scale protocol (batch 8192, 10000
    /// epochs over 500+500 trajectories of 700 samples) is available via
    /// configuration.
    fn default() -> Self {
        Self {
            horizon: 10,
            epochs: 2000,
            batch_size: 512,
            lr_start: 1e-3,
            lr_end: 1e-5,
            sigma: 0.01,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// One training window: initial state, controls, and target states.
/// `us` has `T − 1` controls and `targets` the `T − 1` states they lead
/// to.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub x0: &'a State,
    pub us: &'a [Control],
    pub targets: &'a [State],
}

/// Cuts every trajectory into consecutive disjoint windows of `t`
/// samples, dropping the remainder.
pub fn windows(ds: &Dataset, t: usize) -> Vec<Window<'_>> {
    assert!(t >= 2, "window needs at least two samples");
    let mut out = Vec::new();
    for traj in &ds.trajectories {
        let n_win = traj.states.len() / t;
        for i in 0..n_win {
            let s = i * t;
            out.push(Window {
                x0: &traj.states[s],
                us: &traj.controls[s..s + t - 1],
                targets: &traj.states[s + 1..s + t],
            });
        }
    }
    out
}

/// Mean and variance of the one-step tangent increments over a dataset.
fn increment_moments(ds: &Dataset) -> (SVector<f64, 12>, SVector<f64, 12>) {
    let mut mean = SVector::<f64, 12>::zeros();
    let mut m2 = SVector::<f64, 12>::zeros();
    let mut n = 0.0;
    for traj in &ds.trajectories {
        for k in 0..traj.controls.len() {
            let d = diff(&traj.states[k + 1], &traj.states[k]);
            n += 1.0;
            let delta = d - mean;
            mean += delta / n;
            m2 += delta.component_mul(&(d - mean));
        }
    }
    let var = if n > 1.0 { m2 / n } else { SVector::zeros() };
    (mean, var)
}

/// Fits output standardization statistics from the training split; input
/// limits are the fixed physics bounds.
pub fn fit_norm_stats(ds: &Dataset, v_max: f64, w_max: f64, u_max: f64) -> NormStats {
    let (mean, var) = increment_moments(ds);
    let mut stats = NormStats::unit(v_max, w_max, u_max, net::OUTPUT_DIM);
    stats.out_mean = DVector::from_iterator(12, mean.iter().copied());
    stats.out_std = DVector::from_iterator(12, var.iter().map(|v| v.sqrt().max(1e-6)));
    stats
}

/// Diagonal inverse variance of the one-step tangent increments, the loss
/// weight that gives each error block comparable influence. Variances are
/// floored at 1e-6.
pub fn fit_loss_weights(ds: &Dataset) -> SVector<f64, 12> {
    let (_, var) = increment_moments(ds);
    SVector::from_fn(|i, _| 1.0 / var[i].max(1e-6))
}

fn measured<'a>(w: &'a Window<'a>, k: usize) -> &'a State {
    if k == 0 {
        w.x0
    } else {
        &w.targets[k - 1]
    }
}

/// Multi-step rollout loss of one window, starting from `x0_used`
/// (normally the window's own initial state, optionally perturbed).
pub fn window_loss(
    params: &MlpParams,
    stats: &NormStats,
    w: &Window,
    qdiag: &SVector<f64, 12>,
    x0_used: &State,
) -> Result<f64, TrainError> {
    let mut loss = cost::weighted_cost(&diff(x0_used, w.x0), qdiag);
    let mut x = *x0_used;
    for (k, u) in w.us.iter().enumerate() {
        let (next, _) = dynamics::step_with_lin_params(params, stats, &x, u)?;
        x = next;
        loss += cost::weighted_cost(&diff(&x, &w.targets[k]), qdiag);
    }
    if !loss.is_finite() {
        return Err(TrainError::WindowNonFinite { window: 0 });
    }
    Ok(loss)
}

/// Pushes a tangent adjoint backwards through one composition step and
/// the network, accumulating parameter gradients.
fn pull_back_adjoint(
    params: &MlpParams,
    stats: &NormStats,
    lin: &StepLin,
    lam_next: &SVector<f64, 12>,
    grads: &mut ParamGrads,
) -> SVector<f64, 12> {
    // Output adjoint: ĝ = Gᵀ λ (orientation rows through the output gain).
    let mut ghat = *lam_next;
    let gphi: Vector3<f64> = lin.gq.transpose() * lam_next.fixed_rows::<3>(3);
    ghat.fixed_rows_mut::<3>(3).copy_from(&gphi);
    let ghat_dv = DVector::from_iterator(12, ghat.iter().copied());
    let zeta = net::backprop(params, stats, &lin.cache, &ghat_dv, grads);

    // λ ← A_directᵀ λ + Sᵀ ζ  (ζ already includes the input scaling).
    let mut lam = *lam_next;
    let lphi: Vector3<f64> = lin.a_direct_q.transpose() * lam_next.fixed_rows::<3>(3);
    lam.fixed_rows_mut::<3>(3).copy_from(&lphi);
    let zq = nalgebra::Vector4::new(zeta[0], zeta[1], zeta[2], zeta[3]);
    let sphi: Vector3<f64> = 0.5 * liegroup::orientation_jacobian(&lin.q).transpose() * zq;
    for i in 0..3 {
        lam[3 + i] += sphi[i];
        lam[6 + i] += zeta[4 + i];
        lam[9 + i] += zeta[7 + i];
    }
    lam
}

/// Exact reverse-mode gradient of [`window_loss`] with respect to every
/// weight and bias; also returns the loss.
pub fn window_grad(
    params: &MlpParams,
    stats: &NormStats,
    w: &Window,
    qdiag: &SVector<f64, 12>,
    x0_used: &State,
    grads: &mut ParamGrads,
) -> Result<f64, TrainError> {
    let steps = w.us.len();
    let mut states = Vec::with_capacity(steps + 1);
    let mut lins = Vec::with_capacity(steps);
    states.push(*x0_used);
    for u in w.us {
        let (next, lin) = dynamics::step_with_lin_params(params, stats, states.last().unwrap(), u)?;
        states.push(next);
        lins.push(lin);
    }
    let mut loss = 0.0;
    let mut lx = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let (c, g, _) = cost::state_cost_terms(&states[k], measured(w, k), qdiag);
        loss += c;
        lx.push(g);
    }
    if !loss.is_finite() {
        return Err(TrainError::WindowNonFinite { window: 0 });
    }
    let mut lam = lx[steps];
    for k in (0..steps).rev() {
        let pulled = pull_back_adjoint(params, stats, &lins[k], &lam, grads);
        lam = lx[k] + pulled;
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Batched evaluation
// ---------------------------------------------------------------------------

struct BatchCols {
    q: Vec<liegroup::UnitQuaternion>,
    a_direct_q: Vec<nalgebra::Matrix3<f64>>,
    gq: Vec<nalgebra::Matrix3<f64>>,
}

/// Batched multi-step loss and mean gradient over same-horizon windows.
/// Numerically identical to averaging [`window_grad`] over the batch, but
/// the layer products run as matrix-matrix multiplies across the batch.
pub fn batch_loss_grad(
    params: &MlpParams,
    stats: &NormStats,
    qdiag: &SVector<f64, 12>,
    batch: &[(State, Window)],
    grads: &mut ParamGrads,
) -> Result<f64, TrainError> {
    let b = batch.len();
    assert!(b > 0);
    let steps = batch[0].1.us.len();
    let n_layers = params.n_layers();
    let in_scale = stats.input_scale();

    // Forward rollout, column per window.
    let mut states: Vec<Vec<State>> = vec![Vec::with_capacity(b); steps + 1];
    states[0] = batch.iter().map(|(x0, _)| *x0).collect();
    let mut h_store: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(steps);
    let mut lin_store: Vec<BatchCols> = Vec::with_capacity(steps);

    for k in 0..steps {
        let mut z = DMatrix::zeros(net::INPUT_DIM, b);
        for (i, (_, w)) in batch.iter().enumerate() {
            let x = &states[k][i];
            let zc = net::NetInput::new(&x.q, &x.v, &x.w, &w.us[k]);
            let zn = net::normalize_input(&zc, stats);
            for r in 0..net::INPUT_DIM {
                z[(r, i)] = zn[r];
            }
        }
        let mut h_list = vec![z];
        let mut raw = DMatrix::zeros(0, 0);
        for (li, layer) in params.layers().iter().enumerate() {
            let mut a = &layer.w * h_list.last().unwrap();
            for mut col in a.column_iter_mut() {
                col += &layer.b;
            }
            if li + 1 < n_layers {
                a.apply(|x| *x = x.tanh());
                h_list.push(a);
            } else {
                raw = a;
            }
        }
        let mut cols = BatchCols {
            q: Vec::with_capacity(b),
            a_direct_q: Vec::with_capacity(b),
            gq: Vec::with_capacity(b),
        };
        let mut next_states = Vec::with_capacity(b);
        for i in 0..b {
            let mut out = SVector::<f64, 12>::zeros();
            for r in 0..12 {
                out[r] = stats.out_mean[r] + stats.out_std[r] * raw[(r, i)];
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::WindowNonFinite { window: i });
            }
            let inc = Increment::from_vector(&out);
            let x = &states[k][i];
            let (_, a_direct_q, gq) = dynamics::compose_lin_blocks(&x.q, &inc.dphi);
            cols.q.push(x.q);
            cols.a_direct_q.push(a_direct_q);
            cols.gq.push(gq);
            next_states.push(compose(x, &inc));
        }
        states[k + 1] = next_states;
        h_store.push(h_list);
        lin_store.push(cols);
    }

    // Loss and per-step cost gradients.
    let mut loss = 0.0;
    let mut lx: Vec<DMatrix<f64>> = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let mut g = DMatrix::zeros(12, b);
        for (i, (_, w)) in batch.iter().enumerate() {
            let (c, gi, _) = cost::state_cost_terms(&states[k][i], measured(w, k), qdiag);
            loss += c;
            for r in 0..12 {
                g[(r, i)] = gi[r];
            }
        }
        lx.push(g);
    }
    if !loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0 });
    }

    // Reverse sweep with batched layer products.
    let mut lam = lx[steps].clone();
    for k in (0..steps).rev() {
        let cols = &lin_store[k];
        let h_list = &h_store[k];
        // ĝ = Gᵀ λ.
        let mut ghat = lam.clone();
        for i in 0..b {
            let gphi = cols.gq[i].transpose() * Vector3::new(lam[(3, i)], lam[(4, i)], lam[(5, i)]);
            for r in 0..3 {
                ghat[(3 + r, i)] = gphi[r];
            }
        }
        // Batched network backprop.
        let mut delta = ghat;
        for (r, s) in stats.out_std.iter().enumerate() {
            delta.row_mut(r).scale_mut(*s);
        }
        let mut zeta = DMatrix::zeros(0, 0);
        for li in (0..n_layers).rev() {
            grads.gw[li].gemm(1.0, &delta, &h_store[k][li].transpose(), 1.0);
            for col in delta.column_iter() {
                grads.gb[li] += col;
            }
            let e = params.layers()[li].w.tr_mul(&delta);
            if li > 0 {
                let hcur = &h_list[li];
                delta = e.zip_map(hcur, |ei, h| ei * (1.0 - h * h));
            } else {
                zeta = e;
            }
        }
        // λ_k = ℓ^x_k + A_directᵀ λ + Sᵀ diag(scale) ζ.
        let mut new_lam = lx[k].clone();
        for i in 0..b {
            let lphi = cols.a_direct_q[i].transpose()
                * Vector3::new(lam[(3, i)], lam[(4, i)], lam[(5, i)]);
            for r in 0..3 {
                new_lam[(r, i)] += lam[(r, i)];
                new_lam[(9 + r, i)] += lam[(9 + r, i)];
                new_lam[(6 + r, i)] += lam[(6 + r, i)];
            }
            let zq = nalgebra::Vector4::new(zeta[(0, i)], zeta[(1, i)], zeta[(2, i)], zeta[(3, i)]);
            let sphi = 0.5 * liegroup::orientation_jacobian(&cols.q[i]).transpose() * zq;
            for r in 0..3 {
                new_lam[(3 + r, i)] += lphi[r] + sphi[r];
                new_lam[(6 + r, i)] += zeta[(4 + r, i)] * in_scale[4 + r];
                new_lam[(9 + r, i)] += zeta[(7 + r, i)] * in_scale[7 + r];
            }
        }
        lam = new_lam;
    }

    let scale = 1.0 / b as f64;
    grads.scale(scale);
    Ok(loss * scale)
}

/// Batched forward-only mean loss (validation).
pub fn batch_loss(
    params: &MlpParams,
    stats: &NormStats,
    qdiag: &SVector<f64, 12>,
    batch: &[(State, Window)],
) -> Result<f64, TrainError> {
    let b = batch.len();
    assert!(b > 0);
    let steps = batch[0].1.us.len();
    let n_layers = params.n_layers();
    let mut states: Vec<State> = batch.iter().map(|(x0, _)| *x0).collect();
    let mut loss = 0.0;
    for (i, (_, w)) in batch.iter().enumerate() {
        loss += cost::weighted_cost(&diff(&states[i], w.x0), qdiag);
    }
    for k in 0..steps {
        let mut z = DMatrix::zeros(net::INPUT_DIM, b);
        for (i, (_, w)) in batch.iter().enumerate() {
            let x = &states[i];
            let zc = net::NetInput::new(&x.q, &x.v, &x.w, &w.us[k]);
            let zn = net::normalize_input(&zc, stats);
            for r in 0..net::INPUT_DIM {
                z[(r, i)] = zn[r];
            }
        }
        let mut h = z;
        for (li, layer) in params.layers().iter().enumerate() {
            let mut a = &layer.w * &h;
            for mut col in a.column_iter_mut() {
                col += &layer.b;
            }
            if li + 1 < n_layers {
                a.apply(|x| *x = x.tanh());
            }
            h = a;
        }
        for (i, (_, w)) in batch.iter().enumerate() {
            let mut out = SVector::<f64, 12>::zeros();
            for r in 0..12 {
                out[r] = stats.out_mean[r] + stats.out_std[r] * h[(r, i)];
            }
            states[i] = compose(&states[i], &Increment::from_vector(&out));
            loss += cost::weighted_cost(&diff(&states[i], &w.targets[k]), qdiag);
        }
    }
    if !loss.is_finite() {
        return Err(TrainError::Diverged { epoch: 0 });
    }
    Ok(loss / b as f64)
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay
// ---------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers persisting across steps.
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    t: u32,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adam_step(
    st: &mut AdamState,
    params: &mut MlpParams,
    grads: &ParamGrads,
    lr: f64,
    weight_decay: f64,
) {
    st.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
    for (li, layer) in params.layers_mut().iter_mut().enumerate() {
        let apply = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *theta -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * *theta);
        };
        for (idx, g) in grads.gw[li].iter().enumerate() {
            apply(
                &mut layer.w.as_mut_slice()[idx],
                &mut st.m.gw[li].as_mut_slice()[idx],
                &mut st.v.gw[li].as_mut_slice()[idx],
                *g,
            );
        }
        for (idx, g) in grads.gb[li].iter().enumerate() {
            apply(
                &mut layer.b.as_mut_slice()[idx],
                &mut st.m.gb[li].as_mut_slice()[idx],
                &mut st.v.gb[li].as_mut_slice()[idx],
                *g,
            );
        }
    }
}

/// Cosine-annealed learning rate with exact endpoints:
/// `lr(0) = lr_start`, `lr(epochs − 1) = lr_end`.
pub fn cosine_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ---------------------------------------------------------------------------
// Training driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainResult {
    pub params: MlpParams,
    pub stats: NormStats,
    pub loss_weights: SVector<f64, 12>,
    pub log: Vec<EpochLog>,
}

/// Runs the full offline training loop and returns the trained weights,
/// normalization statistics (fit from the training split), and the
/// per-epoch loss curve.
pub fn train(
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    limits: (f64, f64, f64),
) -> Result<TrainResult, TrainError> {
    let stats = fit_norm_stats(train_ds, limits.0, limits.1, limits.2);
    let qdiag = fit_loss_weights(train_ds);
    let train_windows = windows(train_ds, cfg.horizon);
    let val_windows = windows(val_ds, cfg.horizon);
    if train_windows.is_empty() {
        return Err(TrainError::NoWindows { horizon: cfg.horizon });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = MlpParams::random(&MlpParams::quadrotor_dims(), &mut rng);
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg, epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(State, Window)> = chunk
                .iter()
                .map(|&i| {
                    let w = train_windows[i];
                    (perturb_state(w.x0, cfg.sigma, &mut rng), w)
                })
                .collect();
            let mut grads = ParamGrads::zeros_like(&params);
            let loss = batch_loss_grad(&params, &stats, &qdiag, &batch, &mut grads)
                .map_err(|_| TrainError::Diverged { epoch })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            adam_step(&mut adam, &mut params, &grads, lr, cfg.weight_decay);
            epoch_loss += loss;
            n_batches += 1.0;
        }
        let train_loss = epoch_loss / n_batches;
        let val_loss = if val_windows.is_empty() {
            f64::NAN
        } else {
            let batch: Vec<(State, Window)> =
                val_windows.iter().map(|w| (*w.x0, *w)).collect();
            batch_loss(&params, &stats, &qdiag, &batch)
                .map_err(|_| TrainError::Diverged { epoch })?
        };
        log.push(EpochLog { epoch, lr, train_loss, val_loss });
    }
    Ok(TrainResult { params, stats, loss_weights: qdiag, log })
}

/// Writes the per-epoch loss curve as CSV.
pub fn write_training_log(path: &Path, log: &[EpochLog], config_hash: &str) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# format: training-log-v1")?;
    writeln!(f, "# config: {config_hash}")?;
    writeln!(f, "epoch,lr,train_loss,val_loss")?;
    for e in log {
        writeln!(f, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_loss)?;
    }
    Ok(())
}
