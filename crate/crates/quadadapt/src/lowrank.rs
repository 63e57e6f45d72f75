//! Rank-p truncated SVD of pretrained weights and the tunable low-rank
//! core matrices.
//!
//! Each layer's adapted weight is `W + U Σ P Vᵀ`, where `U, Σ, V` are the
//! top-p singular triplets of the frozen pretrained `W` and `P ∈ ℝᵖˣᵖ` is
//! the only tunable quantity (initialized to zero). The flattened
//! concatenation of all `P` matrices (layer-major, row-major within each
//! `P`) is the online adaptation vector.
//!
//! The SVD is a one-sided Jacobi iteration: the layer matrices are at most
//! 64×64, where Jacobi is accurate and needs no external solver. Each
//! singular-vector pair is sign-fixed (largest-magnitude entry of the U
//! column positive) so adapters are reproducible across runs.

use crate::net::MlpParams;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LowRankError {
    #[error("rank {rank} out of range for a {rows}x{cols} layer")]
    RankOutOfRange { rank: usize, rows: usize, cols: usize },
    #[error("adaptation vector length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("adapter file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("adapter file parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported adapter format version {0}")]
    Version(u32),
}

/// Frozen singular factors and the tunable core of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapter {
    /// Left singular vectors, m×p, orthonormal columns (frozen).
    pub u: DMatrix<f64>,
    /// Top-p singular values, descending (frozen).
    pub s: DVector<f64>,
    /// Right singular vectors, n×p, orthonormal columns (frozen).
    pub v: DMatrix<f64>,
    /// Tunable core, p×p.
    pub p: DMatrix<f64>,
}

impl LayerAdapter {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(Σ)`, the fixed left factor of the weight update.
    pub fn scaled_left(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (c, sv) in self.s.iter().enumerate() {
            us.column_mut(c).scale_mut(*sv);
        }
        us
    }

    /// The weight update `U Σ P Vᵀ` at the current core.
    pub fn delta_weight(&self) -> DMatrix<f64> {
        self.scaled_left() * &self.p * self.v.transpose()
    }
}

/// Full thin SVD `A = U diag(S) Vᵀ` by one-sided Jacobi rotations.
///
/// Singular values are returned descending; each pair `(uᵢ, vᵢ)` is
/// sign-fixed so the largest-magnitude entry of `uᵢ` is positive.
pub fn svd_jacobi(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v) = svd_jacobi(&a.transpose());
        return (v, s, u);
    }
    let (m, n) = (a.nrows(), a.ncols());
    let mut g = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = 1e-14;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let alpha = g.column(i).norm_squared();
                let beta = g.column(j).norm_squared();
                let gamma = g.column(i).dot(&g.column(j));
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let gi = g[(r, i)];
                    let gj = g[(r, j)];
                    g[(r, i)] = c * gi - s * gj;
                    g[(r, j)] = s * gi + c * gj;
                }
                for r in 0..n {
                    let vi = v[(r, i)];
                    let vj = v[(r, j)];
                    v[(r, i)] = c * vi - s * vj;
                    v[(r, j)] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = DVector::zeros(n);
    let mut u = DMatrix::<f64>::zeros(m, n);
    for i in 0..n {
        let norm = g.column(i).norm();
        sigma[i] = norm;
        if norm > 0.0 {
            u.column_mut(i).copy_from(&(g.column(i) / norm));
        }
    }
    // Sort descending by singular value.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut us = DMatrix::<f64>::zeros(m, n);
    let mut vs = DMatrix::<f64>::zeros(n, n);
    let mut ss = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        us.column_mut(dst).copy_from(&u.column(src));
        vs.column_mut(dst).copy_from(&v.column(src));
        ss[dst] = sigma[src];
    }
    // Zero singular values leave empty U columns; complete them to an
    // orthonormal set from the standard basis.
    let smax = ss[0];
    for i in 0..n {
        if ss[i] > smax * 1e-300 && us.column(i).norm() > 0.5 {
            continue;
        }
        for basis in 0..m {
            let mut cand = DVector::zeros(m);
            cand[basis] = 1.0;
            for c in 0..n {
                if c == i {
                    continue;
                }
                let proj = us.column(c).dot(&cand);
                cand -= us.column(c) * proj;
            }
            if cand.norm() > 0.5 {
                us.column_mut(i).copy_from(&cand.normalize());
                break;
            }
        }
    }
    // Deterministic sign convention.
    for i in 0..n {
        let (mut idx, mut best) = (0, 0.0);
        for r in 0..m {
            if us[(r, i)].abs() > best {
                best = us[(r, i)].abs();
                idx = r;
            }
        }
        if us[(idx, i)] < 0.0 {
            us.column_mut(i).neg_mut();
            vs.column_mut(i).neg_mut();
        }
    }
    (us, ss, vs)
}

/// Builds one adapter per layer from the rank-p truncated SVD of the
/// pretrained weights, with the cores initialized to zero.
pub fn build_adapter(params: &MlpParams, rank: usize) -> Result<Vec<LayerAdapter>, LowRankError> {
    params
        .layers()
        .iter()
        .map(|layer| {
            let (m, n) = (layer.w.nrows(), layer.w.ncols());
            if rank < 1 || rank > m.min(n) {
                return Err(LowRankError::RankOutOfRange { rank, rows: m, cols: n });
            }
            let (u, s, v) = svd_jacobi(&layer.w);
            Ok(LayerAdapter {
                u: u.columns(0, rank).into(),
                s: s.rows(0, rank).into(),
                v: v.columns(0, rank).into(),
                p: DMatrix::zeros(rank, rank),
            })
        })
        .collect()
}

/// The adapted weight `W + U Σ P Vᵀ`.
pub fn effective_weight(frozen_w: &DMatrix<f64>, a: &LayerAdapter) -> DMatrix<f64> {
    frozen_w + a.delta_weight()
}

/// Applies all adapters to the pretrained parameters, producing the
/// network actually evaluated online. Biases are unchanged.
pub fn effective_params(params: &MlpParams, adapters: &[LayerAdapter]) -> MlpParams {
    assert_eq!(params.n_layers(), adapters.len());
    let layers = params
        .layers()
        .iter()
        .zip(adapters)
        .map(|(l, a)| crate::net::Layer {
            w: effective_weight(&l.w, a),
            b: l.b.clone(),
        })
        .collect();
    MlpParams::from_layers(layers).expect("adapter shapes conform")
}

/// Total number of tunable adapter parameters.
pub fn adapter_dim(adapters: &[LayerAdapter]) -> usize {
    adapters.iter().map(|a| a.rank() * a.rank()).sum()
}

/// Flattens the cores into a single vector, layer-major and row-major
/// within each `P`.
pub fn flatten(adapters: &[LayerAdapter]) -> DVector<f64> {
    let mut out = DVector::zeros(adapter_dim(adapters));
    let mut k = 0;
    for a in adapters {
        let p = a.rank();
        for i in 0..p {
            for j in 0..p {
                out[k] = a.p[(i, j)];
                k += 1;
            }
        }
    }
    out
}

/// Writes a flat adaptation vector back into the cores (inverse of
/// [`flatten`]).
pub fn unflatten_into(vec: &DVector<f64>, adapters: &mut [LayerAdapter]) -> Result<(), LowRankError> {
    let expected = adapter_dim(adapters);
    if vec.len() != expected {
        return Err(LowRankError::LengthMismatch { got: vec.len(), expected });
    }
    let mut k = 0;
    for a in adapters.iter_mut() {
        let p = a.rank();
        for i in 0..p {
            for j in 0..p {
                a.p[(i, j)] = vec[k];
                k += 1;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adapter state file
// ---------------------------------------------------------------------------

const ADAPTER_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MatrixData {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

fn to_matrix_data(m: &DMatrix<f64>) -> MatrixData {
    MatrixData {
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.transpose().as_slice().to_vec(),
    }
}

fn from_matrix_data(d: &MatrixData) -> DMatrix<f64> {
    DMatrix::from_row_slice(d.rows, d.cols, &d.data)
}

#[derive(Serialize, Deserialize)]
struct AdapterLayerData {
    u: MatrixData,
    s: Vec<f64>,
    v: MatrixData,
    p: MatrixData,
}

#[derive(Serialize, Deserialize)]
struct AdapterFile {
    format_version: u32,
    rank: usize,
    layers: Vec<AdapterLayerData>,
    config_hash: String,
}

/// Serializes adapter state (frozen factors plus current cores).
pub fn save_adapters(
    path: &Path,
    adapters: &[LayerAdapter],
    config_hash: &str,
) -> Result<(), LowRankError> {
    let file = AdapterFile {
        format_version: ADAPTER_FORMAT_VERSION,
        rank: adapters.first().map_or(0, |a| a.rank()),
        layers: adapters
            .iter()
            .map(|a| AdapterLayerData {
                u: to_matrix_data(&a.u),
                s: a.s.as_slice().to_vec(),
                v: to_matrix_data(&a.v),
                p: to_matrix_data(&a.p),
            })
            .collect(),
        config_hash: config_hash.to_string(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_adapters(path: &Path) -> Result<Vec<LayerAdapter>, LowRankError> {
    let file: AdapterFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if file.format_version != ADAPTER_FORMAT_VERSION {
        return Err(LowRankError::Version(file.format_version));
    }
    Ok(file
        .layers
        .iter()
        .map(|l| LayerAdapter {
            u: from_matrix_data(&l.u),
            s: DVector::from_column_slice(&l.s),
            v: from_matrix_data(&l.v),
            p: from_matrix_data(&l.p),
        })
        .collect())
}
