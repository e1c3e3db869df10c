//! Layer normalization and the hypersphere embedding of tokens.
//!
//! With unit gain, zero bias and no variance floor, layer normalization maps
//! every d-vector onto the sphere of radius `sqrt(d)` centred at the origin.
//! On that sphere the inner product is a function of Euclidean distance
//! alone, `<u, v> = (2d - |u - v|^2) / 2`, which is what turns scaled
//! dot-product attention into a Gaussian kernel (see [`crate::attention`]).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Default tolerance (relative to `sqrt(d)`) for on-sphere checks.
pub const SPHERE_TOL: f64 = 1e-9;

/// `n x d` matrix of token embeddings, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    data: Array2<f64>,
}

impl TokenMatrix {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 1 {
            return Err(Error::ShapeMismatch {
                expected: "at least one token".into(),
                got: format!("{n}x{d}"),
            });
        }
        if d < 2 {
            return Err(Error::ShapeMismatch {
                expected: "feature dimension d >= 2".into(),
                got: format!("{n}x{d}"),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("token matrix".into()));
        }
        Ok(Self { data })
    }

    /// Builds a matrix from row vectors; all rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of length {d}"),
                got: "ragged rows".into(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::ShapeMismatch {
            expected: format!("{n}x{d}"),
            got: e.to_string(),
        })?;
        Self::new(data)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Applies [`layer_norm`] to every row.
    pub fn layer_normed(&self, params: &LayerNormParams) -> Result<Self> {
        let mut out = Array2::zeros(self.data.raw_dim());
        for (src, mut dst) in self.data.rows().into_iter().zip(out.rows_mut()) {
            dst.assign(&layer_norm(src, params)?);
        }
        Ok(Self { data: out })
    }
}

/// Scalar affine parameters and variance floor of a layer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNormParams {
    pub gain: f64,
    pub bias: f64,
    pub eps: f64,
}

impl Default for LayerNormParams {
    fn default() -> Self {
        Self {
            gain: 1.0,
            bias: 0.0,
            eps: 0.0,
        }
    }
}

impl LayerNormParams {
    pub fn new(gain: f64, bias: f64, eps: f64) -> Result<Self> {
        if !gain.is_finite() || !bias.is_finite() || !eps.is_finite() || eps < 0.0 {
            return Err(Error::BadConfig(format!(
                "layer norm params must be finite with eps >= 0 (gain={gain}, bias={bias}, eps={eps})"
            )));
        }
        Ok(Self { gain, bias, eps })
    }

    /// Floored variant used during training.
    pub fn training() -> Self {
        Self {
            eps: 1e-12,
            ..Self::default()
        }
    }
}

fn moments(v: ArrayView1<'_, f64>) -> (f64, f64) {
    let d = v.len() as f64;
    let mean = v.sum() / d;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, var)
}

/// `gain * (v - mean) / std + bias` with the population standard deviation
/// `std = sqrt(var + eps)`.
pub fn layer_norm(v: ArrayView1<'_, f64>, params: &LayerNormParams) -> Result<Array1<f64>> {
    let d = v.len();
    if d < 2 {
        return Err(Error::ShapeMismatch {
            expected: "vector of length >= 2".into(),
            got: d.to_string(),
        });
    }
    let (mean, var) = moments(v);
    if params.eps == 0.0 && var == 0.0 {
        return Err(Error::ZeroVariance(d));
    }
    let inv_std = 1.0 / (var + params.eps).sqrt();
    Ok(v.mapv(|x| params.gain * (x - mean) * inv_std + params.bias))
}

/// Vector-Jacobian product of [`layer_norm`]: given the upstream gradient
/// `dw` at output `w = layer_norm(v)`, returns `dL/dv`.
pub fn layer_norm_backward(
    v: ArrayView1<'_, f64>,
    params: &LayerNormParams,
    dw: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    if v.len() != dw.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("gradient of length {}", v.len()),
            got: dw.len().to_string(),
        });
    }
    let (mean, var) = moments(v);
    if params.eps == 0.0 && var == 0.0 {
        return Err(Error::ZeroVariance(v.len()));
    }
    let inv_std = 1.0 / (var + params.eps).sqrt();
    let xhat = v.mapv(|x| (x - mean) * inv_std);
    let d = v.len() as f64;
    let mean_dw = dw.sum() / d;
    let mean_dw_xhat = dw.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
    Ok(Array1::from_shape_fn(v.len(), |k| {
        params.gain * inv_std * (dw[k] - mean_dw - xhat[k] * mean_dw_xhat)
    }))
}

/// True iff every row norm is within `tol * sqrt(d)` of `sqrt(d)`.
pub fn assert_on_sphere(x: &TokenMatrix, tol: f64) -> bool {
    first_off_sphere(x.view(), tol).is_none()
}

pub(crate) fn first_off_sphere(x: ArrayView2<'_, f64>, tol: f64) -> Option<Error> {
    let radius = (x.ncols() as f64).sqrt();
    x.axis_iter(Axis(0)).enumerate().find_map(|(row, v)| {
        let norm = v.dot(&v).sqrt();
        ((norm - radius).abs() > tol * radius).then_some(Error::NotOnSphere { row, norm, radius })
    })
}

/// Inner product of two on-sphere tokens recovered from their distance:
/// `(2d - |u - v|^2) / 2`.
pub fn dot_from_distance(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("vectors of length {}", u.len()),
            got: v.len().to_string(),
        });
    }
    let d = u.len();
    let radius = (d as f64).sqrt();
    for (row, w) in [u, v].into_iter().enumerate() {
        let norm = w.dot(&w).sqrt();
        if (norm - radius).abs() > SPHERE_TOL * radius {
            return Err(Error::NotOnSphere { row, norm, radius });
        }
    }
    let dist2: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((2.0 * d as f64 - dist2) / 2.0)
}

/// Seeded i.i.d. standard-normal `n x d` tokens.
pub fn random_tokens(n: usize, d: usize, seed: u64) -> Result<TokenMatrix> {
    let mut rng = rng::stream(seed, 0);
    let data = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
    TokenMatrix::new(data)
}

/// Seeded tokens projected onto the radius-`sqrt(d)` sphere by layer norm.
pub fn random_sphere_tokens(n: usize, d: usize, seed: u64) -> Result<TokenMatrix> {
    random_tokens(n, d, seed)?.layer_normed(&LayerNormParams::default())
}
