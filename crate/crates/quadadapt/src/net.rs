//! The tanh MLP representing the incremental dynamics, with input/output
//! normalization and closed-form Jacobians.
//!
//! Architecture for the quadrotor model: 14 → 64 → 64 → 64 → 12. The input
//! is `z = (q, v, ω, u)` (raw quaternion, body velocities, motor thrusts);
//! hidden layers use tanh, the output layer is affine, and outputs are
//! de-standardized with dataset statistics. Inputs are normalized with
//! fixed physics limits so the network is invariant to the training
//! distribution.
//!
//! Jacobians with respect to the (raw) input and with respect to the
//! low-rank adapter parameters are assembled from the layer chain
//! `W_L D_{L-1} ⋯ D_1 W_1` with `D_l = diag(1 - tanh²)`, composed with the
//! normalization scaling and the output de-standardization.

use crate::lowrank::{effective_params, LayerAdapter};
use crate::state::Increment;
use crate::UnitQuaternion;
use nalgebra::{DMatrix, DVector, SVector, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Input dimension of the dynamics network: quaternion (4) + linear
/// velocity (3) + angular velocity (3) + motor thrusts (4).
pub const INPUT_DIM: usize = 14;
/// Output dimension: the 12-component tangent increment.
pub const OUTPUT_DIM: usize = 12;
/// Hidden-layer width of the quadrotor model.
pub const HIDDEN_WIDTH: usize = 64;
/// Number of hidden layers of the quadrotor model.
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network produced a non-finite output (model corrupt)")]
    NonFinite,
    #[error("layer dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("model file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported model format version {0}")]
    Version(u32),
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Ordered MLP weights and biases. Hidden layers are tanh, the final
/// layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

impl MlpParams {
    /// Zero-initialized network with the given layer dimensions
    /// (`dims[0]` inputs, `dims.last()` outputs).
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let layers = dims
            .windows(2)
            .map(|d| Layer {
                w: DMatrix::zeros(d[1], d[0]),
                b: DVector::zeros(d[1]),
            })
            .collect();
        Self { layers }
    }

    /// Symmetric uniform initialization in ±√(6/(fan_in+fan_out)).
    pub fn random<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(dims);
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.w.ncols() + layer.w.nrows()) as f64).sqrt();
            layer
                .w
                .iter_mut()
                .for_each(|x| *x = rng.random_range(-bound..bound));
        }
        net
    }

    /// The default quadrotor architecture 14 → 64 → 64 → 64 → 12.
    pub fn quadrotor_dims() -> Vec<usize> {
        let mut dims = vec![INPUT_DIM];
        dims.extend(std::iter::repeat(HIDDEN_WIDTH).take(HIDDEN_LAYERS));
        dims.push(OUTPUT_DIM);
        dims
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NetError> {
        for pair in layers.windows(2) {
            if pair[1].w.ncols() != pair[0].w.nrows() {
                return Err(NetError::DimensionMismatch(format!(
                    "layer output {} feeds layer input {}",
                    pair[0].w.nrows(),
                    pair[1].w.ncols()
                )));
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(NetError::DimensionMismatch("bias length".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.ncols()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    /// Total number of weight entries (excluding biases).
    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.w.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|x| x.is_finite()) && l.b.iter().all(|x| x.is_finite()))
    }
}

/// Input/output normalization constants. Input limits are physics-based
/// and fixed; output statistics are fit from the training dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    /// Linear-velocity limit [m/s].
    pub v_max: f64,
    /// Angular-velocity limit [rad/s].
    pub w_max: f64,
    /// Per-motor thrust limit [N].
    pub u_max: f64,
    /// Output mean (length = network output dim).
    pub out_mean: DVector<f64>,
    /// Output standard deviation, entrywise positive.
    pub out_std: DVector<f64>,
}

impl NormStats {
    /// Unit statistics (no output scaling) with the given input limits.
    pub fn unit(v_max: f64, w_max: f64, u_max: f64, out_dim: usize) -> Self {
        Self {
            v_max,
            w_max,
            u_max,
            out_mean: DVector::zeros(out_dim),
            out_std: DVector::from_element(out_dim, 1.0),
        }
    }

    /// Default physics limits for the quadrotor model.
    pub fn default_limits(out_dim: usize) -> Self {
        Self::unit(5.0, 10.0, 6.25, out_dim)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.v_max <= 0.0 || self.w_max <= 0.0 || self.u_max <= 0.0 {
            return Err(NetError::DimensionMismatch(
                "normalization limits must be positive".into(),
            ));
        }
        if self.out_std.iter().any(|&s| s <= 0.0) {
            return Err(NetError::DimensionMismatch(
                "output std must be entrywise positive".into(),
            ));
        }
        Ok(())
    }

    /// Diagonal of `∂(normalized z)/∂z`.
    pub fn input_scale(&self) -> SVector<f64, INPUT_DIM> {
        let mut s = SVector::<f64, INPUT_DIM>::from_element(1.0);
        for i in 4..7 {
            s[i] = 1.0 / self.v_max;
        }
        for i in 7..10 {
            s[i] = 1.0 / self.w_max;
        }
        for i in 10..14 {
            s[i] = 2.0 / self.u_max;
        }
        s
    }
}

/// Network input `z = (q, v, ω, u)` as a raw (unnormalized) 14-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetInput(pub SVector<f64, INPUT_DIM>);

impl NetInput {
    pub fn new(
        q: &UnitQuaternion,
        v: &Vector3<f64>,
        w: &Vector3<f64>,
        u: &Vector4<f64>,
    ) -> Self {
        let mut z = SVector::<f64, INPUT_DIM>::zeros();
        let qc = q.as_wxyz();
        for i in 0..4 {
            z[i] = qc[i];
        }
        z.fixed_rows_mut::<3>(4).copy_from(v);
        z.fixed_rows_mut::<3>(7).copy_from(w);
        z.fixed_rows_mut::<4>(10).copy_from(u);
        Self(z)
    }
}

/// Normalizes the raw input: quaternion unchanged, `v/v_max`, `ω/ω_max`,
/// `(u - u_max/2)/(u_max/2)`.
pub fn normalize_input(z: &NetInput, stats: &NormStats) -> SVector<f64, INPUT_DIM> {
    z.0.component_mul(&stats.input_scale())
        - SVector::<f64, INPUT_DIM>::from_fn(|i, _| if i >= 10 { 1.0 } else { 0.0 })
}

/// Per-evaluation activations needed by the Jacobians and backpropagation.
///
/// `h[0]` is the normalized input; `h[i]` for `i = 1..L` is the
/// post-tanh activation feeding layer `i`; `output` is the
/// de-standardized network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub h: Vec<DVector<f64>>,
    pub output: DVector<f64>,
}

/// Forward pass retaining intermediate activations.
pub fn forward_cached(
    params: &MlpParams,
    stats: &NormStats,
    z: &NetInput,
) -> Result<ForwardCache, NetError> {
    let n_layers = params.n_layers();
    let mut h: Vec<DVector<f64>> = Vec::with_capacity(n_layers);
    h.push(DVector::from_iterator(
        INPUT_DIM,
        normalize_input(z, stats).iter().copied(),
    ));
    for (i, layer) in params.layers.iter().enumerate() {
        let mut a = &layer.w * h.last().unwrap() + &layer.b;
        if i + 1 < n_layers {
            a.apply(|x| *x = x.tanh());
            h.push(a);
        } else {
            // Affine output layer, de-standardized.
            let out = &stats.out_mean + stats.out_std.component_mul(&a);
            if out.iter().any(|x| !x.is_finite()) {
                return Err(NetError::NonFinite);
            }
            return Ok(ForwardCache { h, output: out });
        }
    }
    unreachable!("network has at least one layer")
}

/// Evaluates the incremental dynamics network.
pub fn forward(
    params: &MlpParams,
    stats: &NormStats,
    z: &NetInput,
) -> Result<Increment, NetError> {
    let cache = forward_cached(params, stats, z)?;
    increment_from_output(&cache.output)
}

pub(crate) fn increment_from_output(out: &DVector<f64>) -> Result<Increment, NetError> {
    if out.len() != OUTPUT_DIM {
        return Err(NetError::DimensionMismatch(format!(
            "expected {OUTPUT_DIM} outputs, got {}",
            out.len()
        )));
    }
    let mut v = SVector::<f64, 12>::zeros();
    v.copy_from_slice(out.as_slice());
    Ok(Increment::from_vector(&v))
}

/// Closed-form Jacobian of the network output with respect to the *raw*
/// 14-dimensional input, including normalization scaling and output
/// de-standardization.
pub fn input_jacobian(params: &MlpParams, stats: &NormStats, z: &NetInput) -> DMatrix<f64> {
    let cache = forward_cached(params, stats, z).expect("finite forward");
    input_jacobian_cached(params, stats, &cache)
}

pub fn input_jacobian_cached(
    params: &MlpParams,
    stats: &NormStats,
    cache: &ForwardCache,
) -> DMatrix<f64> {
    let n_layers = params.n_layers();
    let mut m = params.layers[0].w.clone();
    for i in 1..n_layers {
        // D_i = diag(1 - h_i²) with h_i the tanh output feeding layer i.
        let hi = &cache.h[i];
        for (r, row) in hi.iter().enumerate() {
            let d = 1.0 - row * row;
            m.row_mut(r).scale_mut(d);
        }
        m = &params.layers[i].w * m;
    }
    // Output de-standardization scales rows; input normalization scales
    // columns.
    for (r, s) in stats.out_std.iter().enumerate() {
        m.row_mut(r).scale_mut(*s);
    }
    let col_scale = stats.input_scale();
    for (c, s) in col_scale.iter().enumerate() {
        m.column_mut(c).scale_mut(*s);
    }
    m
}

/// Jacobian of the network output with respect to the flattened low-rank
/// adapter parameters, evaluated at the adapters' current cores.
///
/// Columns are ordered layer-major, then row-major within each `P`.
pub fn adapted_param_jacobian(
    params: &MlpParams,
    adapters: &[LayerAdapter],
    stats: &NormStats,
    z: &NetInput,
) -> DMatrix<f64> {
    let eff = effective_params(params, adapters);
    let cache = forward_cached(&eff, stats, z).expect("finite forward");
    param_jacobian_cached(&eff, adapters, stats, &cache)
}

/// Same as [`adapted_param_jacobian`] but reusing an existing forward
/// cache computed on the *effective* parameters.
pub fn param_jacobian_cached(
    eff: &MlpParams,
    adapters: &[LayerAdapter],
    stats: &NormStats,
    cache: &ForwardCache,
) -> DMatrix<f64> {
    let n_layers = eff.n_layers();
    assert_eq!(adapters.len(), n_layers, "one adapter per layer");
    let out_dim = eff.output_dim();
    let n_params: usize = adapters.iter().map(|a| a.rank() * a.rank()).sum();
    let mut jac = DMatrix::zeros(out_dim, n_params);

    // mhat = ∂output/∂(pre-activation of layer i), built backwards.
    let mut mhat = DMatrix::from_diagonal(&stats.out_std);
    let mut col_offset = n_params;
    for i in (0..n_layers).rev() {
        if i < n_layers - 1 {
            // Push through layer i+1 and the tanh of layer i's output.
            let mut m = &mhat * &eff.layers[i + 1].w;
            let hi = &cache.h[i + 1];
            for (c, h) in hi.iter().enumerate() {
                m.column_mut(c).scale_mut(1.0 - h * h);
            }
            mhat = m;
        }
        let a = &adapters[i];
        let p = a.rank();
        col_offset -= p * p;
        if p == 0 {
            continue;
        }
        // ∂a_i/∂P_{ab} = (U diag(S))[:,a] · (Vᵀ h_i)[b]
        let c = &mhat * a.scaled_left();
        let r = a.v.transpose() * &cache.h[i];
        for ai in 0..p {
            for bi in 0..p {
                let col = col_offset + ai * p + bi;
                jac.column_mut(col).copy_from(&(c.column(ai) * r[bi]));
            }
        }
    }
    debug_assert_eq!(col_offset, 0);
    jac
}

/// Accumulated gradients with the same shape as [`MlpParams`].
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub gw: Vec<DMatrix<f64>>,
    pub gb: Vec<DVector<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            gw: params
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols()))
                .collect(),
            gb: params.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.gw.iter_mut().for_each(|g| g.scale_mut(s));
        self.gb.iter_mut().for_each(|g| g.scale_mut(s));
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.gw.iter_mut().zip(&other.gw) {
            *a += b;
        }
        for (a, b) in self.gb.iter_mut().zip(&other.gb) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let w = self.gw.iter().map(|g| g.amax()).fold(0.0, f64::max);
        let b = self.gb.iter().map(|g| g.amax()).fold(0.0, f64::max);
        w.max(b)
    }

    pub fn is_finite(&self) -> bool {
        self.gw.iter().all(|g| g.iter().all(|x| x.is_finite()))
            && self.gb.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Reverse-mode sweep through the network given the adjoint of the
/// de-standardized output. Accumulates weight/bias gradients into `grads`
/// and returns the adjoint of the *raw* input.
pub fn backprop(
    params: &MlpParams,
    stats: &NormStats,
    cache: &ForwardCache,
    out_adjoint: &DVector<f64>,
    grads: &mut ParamGrads,
) -> SVector<f64, INPUT_DIM> {
    let n_layers = params.n_layers();
    let mut delta = stats.out_std.component_mul(out_adjoint);
    let mut input_adjoint = DVector::zeros(params.input_dim());
    for i in (0..n_layers).rev() {
        grads.gw[i].ger(1.0, &delta, &cache.h[i], 1.0);
        grads.gb[i] += &delta;
        let e = params.layers[i].w.tr_mul(&delta);
        if i > 0 {
            let hi = &cache.h[i];
            delta = e.zip_map(hi, |ei, h| ei * (1.0 - h * h));
        } else {
            input_adjoint = e;
        }
    }
    let scale = stats.input_scale();
    SVector::<f64, INPUT_DIM>::from_fn(|i, _| input_adjoint[i] * scale[i])
}

// ---------------------------------------------------------------------------
// Model file format
// ---------------------------------------------------------------------------

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerData {
    rows: usize,
    cols: usize,
    /// Row-major weight entries.
    w: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NormData {
    v_max: f64,
    w_max: f64,
    u_max: f64,
    out_mean: Vec<f64>,
    out_std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    /// Sample period the model was trained at [s].
    dt: f64,
    dims: Vec<usize>,
    layers: Vec<LayerData>,
    norm: NormData,
    config_hash: String,
}

/// Writes the model (architecture, weights row-major, normalization
/// statistics, format version) as a structured text document.
pub fn save_model(
    path: &Path,
    params: &MlpParams,
    stats: &NormStats,
    dt: f64,
    config_hash: &str,
) -> Result<(), NetError> {
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION,
        dt,
        dims: params.dims(),
        layers: params
            .layers
            .iter()
            .map(|l| LayerData {
                rows: l.w.nrows(),
                cols: l.w.ncols(),
                w: l.w.transpose().as_slice().to_vec(),
                b: l.b.as_slice().to_vec(),
            })
            .collect(),
        norm: NormData {
            v_max: stats.v_max,
            w_max: stats.w_max,
            u_max: stats.u_max,
            out_mean: stats.out_mean.as_slice().to_vec(),
            out_std: stats.out_std.as_slice().to_vec(),
        },
        config_hash: config_hash.to_string(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a model file; the returned forward outputs are bit-exact with
/// the saved model's.
pub fn load_model(path: &Path) -> Result<(MlpParams, NormStats, f64, String), NetError> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.format_version != MODEL_FORMAT_VERSION {
        return Err(NetError::Version(file.format_version));
    }
    let layers = file
        .layers
        .iter()
        .map(|l| {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(NetError::DimensionMismatch("layer data length".into()));
            }
            Ok(Layer {
                w: DMatrix::from_row_slice(l.rows, l.cols, &l.w),
                b: DVector::from_column_slice(&l.b),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let params = MlpParams::from_layers(layers)?;
    if params.dims() != file.dims {
        return Err(NetError::DimensionMismatch("dims field".into()));
    }
    let stats = NormStats {
        v_max: file.norm.v_max,
        w_max: file.norm.w_max,
        u_max: file.norm.u_max,
        out_mean: DVector::from_column_slice(&file.norm.out_mean),
        out_std: DVector::from_column_slice(&file.norm.out_std),
    };
    stats.validate()?;
    Ok((params, stats, file.dt, file.config_hash))
}
