//! Learned incremental quadrotor dynamics with online low-rank adaptation
//! and predictive tracking control.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`sim`] — ground-truth quadrotor simulator: rigid-body ODE with an
//!    RK4 integrator, motor mixer, reference trajectories, payload
//!    disturbance, and a geometric data-collection controller.
//! 2. [`trainer`] — offline pre-training of an incremental dynamics MLP
//!    with a multi-step rollout loss and hand-rolled backpropagation
//!    through time.
//! 3. [`lowrank`] — rank-p truncated SVD of the pretrained weights and the
//!    small tunable cores used for online adaptation.
//! 4. [`adapt`] — second-order (Gauss-Newton / Riccati) online adaptation
//!    of the low-rank parameters over recorded state-control windows.
//! 5. [`control`] — iLQR-style finite-horizon predictive tracking
//!    controller running on the (possibly adapted) learned model.
//!
//! Supporting modules: [`liegroup`] (unit-quaternion algebra and exp/log
//! maps), [`state`] (the manifold robot state with ⊕/⊖), [`net`] (the MLP
//! and its closed-form Jacobians), [`dynamics`] (the discrete manifold
//! dynamics model and its state/control/parameter Jacobians), [`cost`]
//! (weighted manifold cost terms), [`data`] (trajectory file formats),
//! [`metrics`] (manifold RMSE reports), [`config`] and [`cli`] (experiment
//! configuration and the batch commands behind the `quadadapt` binary).
//!
//! The crate examples are runnable entry points into each capability; see
//! the README for the experiment walkthrough.

pub mod adapt;
pub mod cli;
pub mod config;
pub mod control;
pub mod cost;
pub mod data;
pub mod dynamics;
pub mod liegroup;
pub mod lowrank;
pub mod metrics;
pub mod net;
pub mod sim;
pub mod state;
pub mod trainer;

pub use liegroup::UnitQuaternion;
pub use state::{Control, Increment, State};
