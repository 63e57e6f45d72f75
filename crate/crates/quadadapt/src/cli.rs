//! Batch experiment commands: dataset generation, offline training,
//! open-loop evaluation, closed-loop tracking with optional online
//! adaptation, plot-data extraction, and the full experiment chain.
//!
//! These functions are the library side of the `quadadapt` binary; each
//! maps onto one subcommand. Exit-code policy for the binary: 0 success,
//! 1 configuration error, 2 numerical failure, 3 threshold failure.

use crate::adapt::{self, AdaptError, AdaptState, AdaptWindow, WindowLog};
use crate::config::{ConfigError, ExperimentConfig};
use crate::control::{self, ControlError, ControlRecord, Controller, Reference};
use crate::data::{self, DataError, Dataset};
use crate::dynamics::{self, DynError, DynModel};
use crate::lowrank::{self, LowRankError};
use crate::metrics::{self, RmseReport, SummaryRow};
use crate::net::{self, NetError};
use crate::sim::{self, ReferenceKind};
use crate::state::{compose, Increment, State};
use crate::trainer::{self, TrainError};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model trained at dt = {model_dt} s but config uses dt = {config_dt} s")]
    DtMismatch { model_dt: f64, config_dt: f64 },
    #[error("acceptance threshold failed: {0}")]
    Threshold(String),
}

impl CliError {
    /// Exit-code classification: 1 config, 2 numerical, 3 threshold.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::DtMismatch { .. } => 1,
            CliError::Threshold(_) => 3,
            _ => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// datagen
// ---------------------------------------------------------------------------

/// Generates the train/validation datasets with manifests. Deterministic
/// under a fixed seed.
pub fn cmd_datagen(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let hash = cfg.hash();
    let dir = cfg.paths.data_dir();
    std::fs::create_dir_all(&dir)?;
    cfg.write_resolved()?;
    let seed = cfg.datagen.seed.unwrap_or_else(|| cfg.derived_seed("datagen"));
    let (train, val) = generate_datasets(cfg, seed);
    data::save_dataset(&dir, "train", &train, &hash)?;
    data::save_dataset(&dir, "val", &val, &hash)?;
    data::write_manifest(&dir.join("train_manifest.csv"), &train, "train", seed, &hash)?;
    data::write_manifest(&dir.join("val_manifest.csv"), &val, "val", seed, &hash)?;
    println!(
        "datagen: {} train + {} val trajectories of {} samples at {} Hz -> {}",
        train.trajectories.len(),
        val.trajectories.len(),
        cfg.datagen.samples,
        (1.0 / cfg.sim.dt).round(),
        dir.display()
    );
    Ok(())
}

/// In-memory dataset generation used by `cmd_datagen` and tests.
pub fn generate_datasets(cfg: &ExperimentConfig, seed: u64) -> (Dataset, Dataset) {
    let gen = |count: usize, stream: u64| -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            let loop_ref = sim::random_loop(&mut rng);
            let s = cfg.datagen.initial_offset_std;
            let offset = Vector3::new(
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            );
            trajectories.push(sim::generate_trajectory(
                &cfg.sim.quad,
                &loop_ref,
                cfg.datagen.samples - 1,
                cfg.sim.dt,
                cfg.sim.substeps,
                &cfg.datagen.gains,
                cfg.sim.limits.u_max,
                offset,
            ));
        }
        Dataset { trajectories }
    };
    (gen(cfg.datagen.n_train, 0x7261_696e), gen(cfg.datagen.n_val, 0x7661_6c69))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Trains the dynamics model from the generated dataset, writing the
/// model file and the training-log CSV. Prints the final validation
/// loss.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let hash = cfg.hash();
    let dir = cfg.paths.data_dir();
    let train_ds = data::load_dataset(&dir, "train")?;
    let val_ds = data::load_dataset(&dir, "val")?;
    let mut tc = cfg.train.clone();
    tc.seed = tc.seed.wrapping_add(cfg.derived_seed("train"));
    let limits = (cfg.sim.limits.v_max, cfg.sim.limits.w_max, cfg.sim.limits.u_max);
    let result = trainer::train(&train_ds, &val_ds, &tc, limits)?;
    let model_path = cfg.paths.model_file();
    net::save_model(&model_path, &result.params, &result.stats, cfg.sim.dt, &hash)?;
    trainer::write_training_log(&cfg.paths.out_dir.join("training_log.csv"), &result.log, &hash)?;
    let final_val = result.log.last().map_or(f64::NAN, |e| e.val_loss);
    println!(
        "train: {} epochs done; final validation loss {final_val:.6e}; model -> {}",
        result.log.len(),
        model_path.display()
    );
    Ok(model_path)
}

/// Loads the model file, checking the sample period against the config.
pub fn load_model_checked(cfg: &ExperimentConfig) -> Result<DynModel, CliError> {
    let (params, stats, dt, _) = net::load_model(&cfg.paths.model_file())?;
    if (dt - cfg.sim.dt).abs() > 1e-12 {
        return Err(CliError::DtMismatch { model_dt: dt, config_dt: cfg.sim.dt });
    }
    Ok(DynModel::new(params, stats, dt)?)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Open-loop prediction evaluation against two baselines.
#[derive(Debug, Clone, Copy)]
pub struct EvalReport {
    pub model: RmseReport,
    pub zero_increment: RmseReport,
    pub constant_velocity: RmseReport,
    pub n_windows: usize,
    pub horizon: usize,
}

fn constant_velocity_step(x: &State, dt: f64) -> State {
    let mut d = Increment::zero();
    d.dp = crate::liegroup::qrotate(&x.q, &x.v) * dt;
    d.dphi = x.w * dt;
    compose(x, &d)
}

/// Rolls the model (and baselines) over validation windows at the
/// control horizon and reports per-block RMSE pooled over all predicted
/// states.
pub fn evaluate_model(
    model: &DynModel,
    val_ds: &Dataset,
    horizon: usize,
) -> Result<EvalReport, CliError> {
    let wins = trainer::windows(val_ds, horizon + 1);
    if wins.is_empty() {
        return Err(TrainError::NoWindows { horizon: horizon + 1 }.into());
    }
    let mut pred_states = Vec::new();
    let mut zero_states = Vec::new();
    let mut cvel_states = Vec::new();
    let mut truth_states = Vec::new();
    for w in &wins {
        let rollout = dynamics::rollout(model, w.x0, w.us)?;
        let mut cvel = *w.x0;
        for (k, target) in w.targets.iter().enumerate() {
            pred_states.push(rollout[k + 1]);
            zero_states.push(*w.x0);
            cvel = constant_velocity_step(&cvel, model.dt());
            cvel_states.push(cvel);
            truth_states.push(*target);
        }
    }
    Ok(EvalReport {
        model: metrics::rmse(&pred_states, &truth_states),
        zero_increment: metrics::rmse(&zero_states, &truth_states),
        constant_velocity: metrics::rmse(&cvel_states, &truth_states),
        n_windows: wins.len(),
        horizon,
    })
}

/// `eval` command: loads model and validation data, writes
/// `eval_report.csv`, and optionally enforces the prediction-quality
/// thresholds.
pub fn cmd_eval(cfg: &ExperimentConfig, check: bool) -> Result<EvalReport, CliError> {
    let model = load_model_checked(cfg)?;
    let val_ds = data::load_dataset(&cfg.paths.data_dir(), "val")?;
    let report = evaluate_model(&model, &val_ds, cfg.control.horizon)?;
    let hash = cfg.hash();

    let path = cfg.paths.out_dir.join("eval_report.csv");
    let mut f = std::fs::File::create(&path)?;
    writeln!(f, "# format: eval-report-v1")?;
    writeln!(f, "# config: {hash}")?;
    writeln!(f, "# horizon: {} steps, {} windows", report.horizon, report.n_windows)?;
    writeln!(f, "predictor,pos_m,orient_rad,lin_vel_mps,ang_vel_radps")?;
    for (name, r) in [
        ("model", &report.model),
        ("zero_increment", &report.zero_increment),
        ("constant_velocity", &report.constant_velocity),
    ] {
        writeln!(f, "{name},{},{},{},{}", r.pos, r.orient, r.lin_vel, r.ang_vel)?;
    }
    println!("eval over {} windows at {} steps:", report.n_windows, report.horizon);
    println!("  model:             {}", report.model);
    println!("  zero increment:    {}", report.zero_increment);
    println!("  constant velocity: {}", report.constant_velocity);

    if check {
        check_eval_thresholds(&report)?;
    }
    Ok(report)
}

/// Prediction-quality gates: per-block RMSE within 3× of the reference
/// precision targets, and the model beats both baselines on position by
/// at least 5×.
pub fn check_eval_thresholds(report: &EvalReport) -> Result<(), CliError> {
    let m = &report.model;
    let bounds = [
        (m.pos, 0.18, "position RMSE [m]"),
        (m.orient, 0.30, "orientation RMSE [rad]"),
        (m.lin_vel, 0.78, "linear velocity RMSE [m/s]"),
        (m.ang_vel, 1.20, "angular velocity RMSE [rad/s]"),
    ];
    for (value, bound, name) in bounds {
        if !(value <= bound) {
            return Err(CliError::Threshold(format!("{name} = {value:.4} > {bound}")));
        }
    }
    for (baseline, name) in [
        (report.zero_increment.pos, "zero-increment"),
        (report.constant_velocity.pos, "constant-velocity"),
    ] {
        if !(baseline >= 5.0 * m.pos) {
            return Err(CliError::Threshold(format!(
                "{name} baseline position RMSE {baseline:.4} is not 5x the model's {:.4}",
                m.pos
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// track
// ---------------------------------------------------------------------------

/// Closed-loop scenario settings distilled from the config plus command
/// flags.
#[derive(Debug, Clone, Copy)]
pub struct TrackSettings {
    pub reference: ReferenceKind,
    pub duration: f64,
    pub payload_mass: f64,
    pub activation_time: f64,
    pub adapt_enabled: bool,
}

impl TrackSettings {
    pub fn from_config(cfg: &ExperimentConfig, adapt_enabled: bool) -> Self {
        Self {
            reference: cfg.sim.reference,
            duration: cfg.sim.duration,
            payload_mass: cfg.sim.disturbance.payload_mass,
            activation_time: cfg.sim.disturbance.activation_time,
            adapt_enabled,
        }
    }

    pub fn mode_name(&self) -> &'static str {
        if self.adapt_enabled {
            "adapt"
        } else {
            "no_adapt"
        }
    }
}

/// Everything a tracking run produces.
pub struct TrackOutcome {
    /// Measured states at each control instant (length N+1).
    pub states: Vec<State>,
    /// Reference states at the same instants.
    pub refs: Vec<State>,
    pub control_log: Vec<ControlRecord>,
    pub adapt_logs: Vec<WindowLog>,
    pub rmse: RmseReport,
}

/// Runs the closed-loop tracking experiment: simulator plant with the
/// payload disturbance, predictive controller on the learned model, and
/// (optionally) window-wise online adaptation publishing new adapter
/// snapshots between control cycles.
pub fn run_tracking(
    pretrained: &DynModel,
    cfg: &ExperimentConfig,
    settings: &TrackSettings,
) -> Result<TrackOutcome, CliError> {
    let dt = cfg.sim.dt;
    let n_steps = (settings.duration / dt).round() as usize;
    let loop_ref = sim::standard_loop(settings.reference);
    let disturbance = sim::Disturbance {
        payload_mass: settings.payload_mass,
        activation_time: settings.activation_time,
    };

    let mut model = pretrained.clone();
    if settings.adapt_enabled {
        let adapters = lowrank::build_adapter(model.params(), cfg.adapt.rank)?;
        model.set_adapters(adapters);
    }

    let mut controller = Controller::new(cfg.control.clone());
    let mut adapt_state = AdaptState::new(&cfg.adapt);
    let mut x = sim::reference_state(&loop_ref.sample(0.0));
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut refs = Vec::with_capacity(n_steps + 1);
    let mut control_log = Vec::with_capacity(n_steps);
    let mut adapt_logs = Vec::new();
    states.push(x);
    refs.push(sim::reference_state(&loop_ref.sample(0.0)));

    for k in 0..n_steps {
        let t = k as f64 * dt;
        let horizon_refs: Vec<State> = (0..=cfg.control.horizon)
            .map(|i| sim::reference_state(&loop_ref.sample(t + i as f64 * dt)))
            .collect();
        let reference = Reference { states: horizon_refs };
        let (u, info) = controller.cycle(&model, &x, &reference);

        adapt_state.push(x, u);
        let next = sim::integrate(&x, &u, &cfg.sim.quad, disturbance.extra_mass(t), dt, cfg.sim.substeps);
        if !next.is_finite() {
            return Err(DynError::NonFinite { step: k }.into());
        }
        control_log.push(ControlRecord {
            t,
            state: x,
            reference: reference.states[0],
            u,
            cost: info.cost,
            iters: info.iters_used,
        });

        if settings.adapt_enabled && adapt_state.ready() && (k + 1) % cfg.adapt.cadence_steps == 0 {
            let (win_states, win_controls) = adapt_state.window_data(&next);
            let win = AdaptWindow::new(&win_states, &win_controls, cfg.adapt.window)?;
            let wall = Instant::now();
            let iters = adapt::adapt_window(&mut model, &win, &cfg.adapt, &mut adapt_state.mu)?;
            adapt_state.windows_run += 1;
            adapt_logs.push(WindowLog {
                sim_time: t + dt,
                wall_ms: wall.elapsed().as_secs_f64() * 1e3,
                start_index: k + 1 - cfg.adapt.window,
                iters,
                theta_norm: model.adapter_vector().norm(),
            });
        }

        x = next;
        states.push(x);
        refs.push(sim::reference_state(&loop_ref.sample((k + 1) as f64 * dt)));
    }

    let rmse = metrics::rmse(&states, &refs);
    Ok(TrackOutcome { states, refs, control_log, adapt_logs, rmse })
}

/// `track` command: runs one scenario, writes the control/adaptation
/// logs and a summary row, and prints the RMSE.
pub fn cmd_track(cfg: &ExperimentConfig, settings: &TrackSettings) -> Result<TrackOutcome, CliError> {
    let model = load_model_checked(cfg)?;
    let hash = cfg.hash();
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let outcome = run_tracking(&model, cfg, settings)?;
    let tag = format!("{}_{}", settings.reference, settings.mode_name());
    control::write_control_log(
        &cfg.paths.out_dir.join(format!("control_log_{tag}.csv")),
        &outcome.control_log,
        &hash,
    )?;
    if settings.adapt_enabled {
        adapt::write_adapt_log(
            &cfg.paths.out_dir.join(format!("adapt_log_{tag}.csv")),
            &outcome.adapt_logs,
            &hash,
        )?;
    }
    println!(
        "track {} ({}), payload {} kg: {}",
        settings.reference,
        settings.mode_name(),
        settings.payload_mass,
        outcome.rmse
    );
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// track analysis (threshold checks and plot preparation)
// ---------------------------------------------------------------------------

/// Derived quantities used by the experiment gates.
#[derive(Debug, Clone, Copy)]
pub struct TrackAnalysis {
    /// Mean signed altitude error (ref_z − z) over the steady phase
    /// (t ≥ 5 s).
    pub mean_alt_error_steady: f64,
    /// Fraction of steady-phase samples flying below the reference.
    pub below_reference_fraction: f64,
    /// Signed altitude error at t = 10 s.
    pub alt_error_at_10s: f64,
    /// Largest step-to-step change of the emitted control during the
    /// steady phase [N].
    pub max_u_step_steady: f64,
    /// Adaptation cost non-increasing within every window.
    pub adapt_monotone: bool,
}

pub fn analyze_track(outcome: &TrackOutcome, dt: f64) -> TrackAnalysis {
    let n = outcome.states.len();
    let steady_start = ((5.0 / dt) as usize).min(n.saturating_sub(1));
    let mut alt_err_sum = 0.0;
    let mut below = 0.0;
    let mut count = 0.0_f64;
    for k in steady_start..n {
        let e = outcome.refs[k].p.z - outcome.states[k].p.z;
        alt_err_sum += e;
        if e > 0.0 {
            below += 1.0;
        }
        count += 1.0;
    }
    let k10 = ((10.0 / dt).round() as usize).min(n - 1);
    let mut max_u_step: f64 = 0.0;
    for pair in outcome.control_log.windows(2) {
        if pair[0].t >= 5.0 {
            max_u_step = max_u_step.max((pair[1].u - pair[0].u).amax());
        }
    }
    let mut monotone = true;
    for w in &outcome.adapt_logs {
        for it in &w.iters {
            if it.j_after > it.j_before {
                monotone = false;
            }
        }
        for pair in w.iters.windows(2) {
            if pair[1].j_before > pair[0].j_after * (1.0 + 1e-12) + 1e-12 {
                monotone = false;
            }
        }
    }
    TrackAnalysis {
        mean_alt_error_steady: alt_err_sum / count.max(1.0),
        below_reference_fraction: below / count.max(1.0),
        alt_error_at_10s: outcome.refs[k10].p.z - outcome.states[k10].p.z,
        max_u_step_steady: max_u_step,
        adapt_monotone: monotone,
    }
}

// ---------------------------------------------------------------------------
// plotdata
// ---------------------------------------------------------------------------

/// Extracts plot-ready CSV bundles (3D path and altitude series) from a
/// control log.
pub fn cmd_plotdata(log_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(log_path)?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    std::fs::create_dir_all(out_dir)?;
    let mut path_file = std::fs::File::create(out_dir.join("path.csv"))?;
    let mut alt_file = std::fs::File::create(out_dir.join("altitude.csv"))?;
    writeln!(path_file, "t,x,y,z,ref_x,ref_y,ref_z")?;
    writeln!(alt_file, "t,z,ref_z,err_z")?;
    for record in reader.records() {
        let record = record.map_err(DataError::from)?;
        let get = |i: usize| -> Result<f64, CliError> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    CliError::Data(DataError::Format {
                        path: log_path.to_path_buf(),
                        msg: format!("bad field {i}"),
                    })
                })
        };
        let t = get(0)?;
        let (x, y, z) = (get(1)?, get(2)?, get(3)?);
        let (rx, ry, rz) = (get(14)?, get(15)?, get(16)?);
        writeln!(path_file, "{t},{x},{y},{z},{rx},{ry},{rz}")?;
        writeln!(alt_file, "{t},{z},{rz},{}", rz - z)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// repro: the full experiment chain
// ---------------------------------------------------------------------------

/// Outputs of the full chain, kept for threshold checks.
pub struct ReproOutcome {
    pub eval: EvalReport,
    /// `(reference, adapt_enabled) -> outcome`, in fixed order:
    /// lemniscate off/on, circle off/on.
    pub tracks: Vec<(ReferenceKind, bool, TrackOutcome)>,
    pub summary_csv: PathBuf,
}

/// Runs datagen → train → eval → tracking (2 references × adaptation
/// on/off) and writes the combined summary table.
pub fn cmd_repro(cfg: &ExperimentConfig, check: bool) -> Result<ReproOutcome, CliError> {
    cmd_datagen(cfg)?;
    cmd_train(cfg)?;
    let eval = cmd_eval(cfg, false)?;

    let mut rows = Vec::new();
    let mut tracks = Vec::new();
    for reference in [ReferenceKind::Lemniscate, ReferenceKind::Circle] {
        for adapt_enabled in [false, true] {
            let mut scenario = cfg.clone();
            scenario.sim.reference = reference;
            let settings = TrackSettings::from_config(&scenario, adapt_enabled);
            let outcome = cmd_track(&scenario, &settings)?;
            rows.push(SummaryRow {
                reference: reference.to_string(),
                mode: settings.mode_name().to_string(),
                report: outcome.rmse,
            });
            tracks.push((reference, adapt_enabled, outcome));
        }
    }
    let hash = cfg.hash();
    let summary_csv = cfg.paths.out_dir.join("summary.csv");
    metrics::write_summary(
        &summary_csv,
        &cfg.paths.out_dir.join("summary.txt"),
        &rows,
        &hash,
    )?;
    println!("summary -> {}", summary_csv.display());

    let outcome = ReproOutcome { eval, tracks, summary_csv };
    if check {
        check_eval_thresholds(&outcome.eval)?;
        check_tracking_thresholds(cfg, &outcome)?;
    }
    Ok(outcome)
}

/// Closed-loop gates: adaptation improves position RMSE by ≥ 15% on both
/// references, heading stays comparable, adaptation cost is monotone
/// within windows, and the altitude signature matches (persistent droop
/// without adaptation, recovered to ≤ 25% of the droop by t = 10 s with
/// it).
pub fn check_tracking_thresholds(cfg: &ExperimentConfig, outcome: &ReproOutcome) -> Result<(), CliError> {
    for reference in [ReferenceKind::Lemniscate, ReferenceKind::Circle] {
        let find = |adapt: bool| -> &TrackOutcome {
            outcome
                .tracks
                .iter()
                .find(|(r, a, _)| *r == reference && *a == adapt)
                .map(|(_, _, o)| o)
                .expect("repro ran all four scenarios")
        };
        let off = find(false);
        let on = find(true);
        if !(on.rmse.pos <= 0.85 * off.rmse.pos) {
            return Err(CliError::Threshold(format!(
                "{reference}: adapt-on position RMSE {:.4} not <= 0.85x adapt-off {:.4}",
                on.rmse.pos, off.rmse.pos
            )));
        }
        let heading_change = (on.rmse.heading - off.rmse.heading).abs() / off.rmse.heading.max(1e-9);
        if !(heading_change < 0.25) {
            return Err(CliError::Threshold(format!(
                "{reference}: heading RMSE changed by {:.1}% between modes",
                100.0 * heading_change
            )));
        }
        let a_off = analyze_track(off, cfg.sim.dt);
        let a_on = analyze_track(on, cfg.sim.dt);
        if !a_on.adapt_monotone {
            return Err(CliError::Threshold(format!(
                "{reference}: adaptation cost increased within a window"
            )));
        }
        if !(a_off.mean_alt_error_steady > 0.0 && a_off.below_reference_fraction > 0.9) {
            return Err(CliError::Threshold(format!(
                "{reference}: no persistent below-reference altitude offset without adaptation \
                 (mean {:.4} m, below fraction {:.2})",
                a_off.mean_alt_error_steady, a_off.below_reference_fraction
            )));
        }
        if !(a_on.alt_error_at_10s.abs() <= 0.25 * a_off.mean_alt_error_steady) {
            return Err(CliError::Threshold(format!(
                "{reference}: adapted altitude error at 10 s is {:.4} m, offset {:.4} m",
                a_on.alt_error_at_10s, a_off.mean_alt_error_steady
            )));
        }
    }
    Ok(())
}
