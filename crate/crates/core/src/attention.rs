//! Single-head scaled dot-product self-attention with `Q = K = V = X`.
//!
//! ```text
//! logits = X X^T / sqrt(d)
//! P      = row_softmax(logits)        (row-stochastic: a Markov transition matrix)
//! Y      = P X
//! ```
//!
//! For tokens on the radius-`sqrt(d)` sphere, `<v_i, v_j> = d - |v_i - v_j|^2 / 2`,
//! so each unnormalized weight factors as `exp(sqrt(d)) * exp(-|v_i - v_j|^2 / (2 sqrt(d)))`.
//! The constant cancels under row normalization and `P` is a row-normalized
//! Gaussian kernel with `sigma^2 = sqrt(d)`; [`gaussian_kernel_rows`] builds it
//! from that formula directly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::geometry::{first_off_sphere, TokenMatrix, SPHERE_TOL};
use crate::markov::{validate_transition, TransitionMatrix};

/// Tolerance used to decide whether a vector is a probability distribution.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Updated tokens, `P X`.
    pub y: Array2<f64>,
    /// Attention weights.
    pub p: TransitionMatrix,
    /// `X X^T / sqrt(d)`.
    pub logits: Array2<f64>,
}

/// Numerically stable softmax (the row maximum is subtracted first).
pub fn softmax(a: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = a.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

/// `J[i][j] = s_i (delta_ij - s_j)`, the Jacobian of softmax at output `s`.
pub fn softmax_jacobian(s: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
    if let Some((i, v)) = s
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < -DISTRIBUTION_TOL)
    {
        return Err(Error::NotADistribution(format!("entry {i} is {v}")));
    }
    let sum = s.sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::NotADistribution(format!("sums to {sum}")));
    }
    let n = s.len();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let delta = if i == j { 1.0 } else { 0.0 };
        s[i] * (delta - s[j])
    }))
}

fn row_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut p = Array2::zeros(logits.raw_dim());
    for (src, mut dst) in logits.axis_iter(Axis(0)).zip(p.axis_iter_mut(Axis(0))) {
        dst.assign(&softmax(src));
    }
    p
}

pub fn attention_forward(x: &TokenMatrix) -> AttentionOutput {
    let xv = x.view();
    let scale = 1.0 / (x.d() as f64).sqrt();
    let logits = xv.dot(&xv.t()) * scale;
    let p = row_softmax(logits.view());
    let y = p.dot(&xv);
    let p = validate_transition(p).expect("softmax rows of finite logits are probability vectors");
    AttentionOutput { y, p, logits }
}

/// Gradient of a scalar loss with respect to `x`, given `dy = dL/dY`.
///
/// `x` enters three times (query, key, value):
///
/// ```text
/// dX  = P^T dY                                   value path
///     + (dS + dS^T) X / sqrt(d)                  query and key paths
/// dS_i = J(P_i) (dY X^T)_i                       row-wise softmax backward
/// ```
pub fn attention_backward(x: &TokenMatrix, dy: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if dy.dim() != (x.n(), x.d()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", x.n(), x.d()),
            got: format!("{}x{}", dy.nrows(), dy.ncols()),
        });
    }
    let xv = x.view();
    let fwd = attention_forward(x);
    let p = fwd.p.view();
    let dp = dy.dot(&xv.t());

    let mut ds = Array2::<f64>::zeros(p.raw_dim());
    for i in 0..x.n() {
        let pi = p.row(i);
        let dpi = dp.row(i);
        let inner = pi.dot(&dpi);
        for j in 0..x.n() {
            ds[[i, j]] = pi[j] * (dpi[j] - inner);
        }
    }

    let scale = 1.0 / (x.d() as f64).sqrt();
    let sym = &ds + &ds.t();
    Ok(p.t().dot(&dy) + sym.dot(&xv) * scale)
}

/// Row-normalized Gaussian kernel `exp(-|v_i - v_j|^2 / (2 sqrt(d)))`.
///
/// Only defined for on-sphere tokens, where it coincides with the attention
/// weights of [`attention_forward`].
pub fn gaussian_kernel_rows(x: &TokenMatrix) -> Result<TransitionMatrix> {
    if let Some(err) = first_off_sphere(x.view(), SPHERE_TOL) {
        return Err(err);
    }
    kernel_rows_with_bandwidth(x, 2.0 * (x.d() as f64).sqrt())
}

/// Row-normalized `exp(-|v_i - v_j|^2 / bandwidth)`, no sphere check.
pub(crate) fn kernel_rows_with_bandwidth(
    x: &TokenMatrix,
    bandwidth: f64,
) -> Result<TransitionMatrix> {
    let n = x.n();
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dist2: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            k[[i, j]] = (-dist2 / bandwidth).exp();
        }
    }
    for mut row in k.rows_mut() {
        let z = row.sum();
        row /= z;
    }
    validate_transition(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_sphere_tokens, random_tokens};
    use ndarray::array;

    fn max_abs(a: &Array2<f64>) -> f64 {
        a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(array![0.0, 0.0].view());
        assert_eq!(s, array![0.5, 0.5]);
        let s = softmax(array![2f64.ln(), 0.0].view());
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let a = array![0.3, -1.0, 2.2, 0.0];
        let shifted = a.mapv(|x| x + 123.5);
        let d = softmax(a.view()) - softmax(shifted.view());
        assert!(d.iter().all(|x| x.abs() < 1e-15));
        let big = softmax(array![1000.0, 999.0].view());
        assert!(big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn jacobian_examples() {
        let j = softmax_jacobian(array![0.5, 0.5].view()).unwrap();
        assert_eq!(j, array![[0.25, -0.25], [-0.25, 0.25]]);
        let j = softmax_jacobian(array![1.0, 0.0].view()).unwrap();
        assert!(j.iter().all(|x| *x == 0.0));
        assert!(matches!(
            softmax_jacobian(array![0.5, 0.6].view()),
            Err(Error::NotADistribution(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let a = array![1.0, 2.0, 3.0];
        let j = softmax_jacobian(softmax(a.view()).view()).unwrap();
        let h = 1e-6;
        for col in 0..3 {
            let mut ap = a.clone();
            ap[col] += h;
            let mut am = a.clone();
            am[col] -= h;
            let fd = (softmax(ap.view()) - softmax(am.view())) / (2.0 * h);
            for row in 0..3 {
                assert!((fd[row] - j[[row, col]]).abs() < 1e-6);
            }
        }
        for r in j.rows() {
            assert!(r.sum().abs() < 1e-14);
        }
        assert!(max_abs(&(&j - &j.t())) == 0.0);
    }

    #[test]
    fn single_token_is_fixed_point() {
        let x = TokenMatrix::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap();
        let out = attention_forward(&x);
        assert_eq!(out.p.as_array(), &array![[1.0]]);
        assert_eq!(out.y, *x.as_array());
        let dy = array![[0.5, 2.0, -1.0]];
        assert_eq!(attention_backward(&x, dy.view()).unwrap(), dy);
    }

    #[test]
    fn identical_tokens_give_uniform_rows() {
        let row = vec![0.4, -1.3, 0.9, 2.0];
        let x = TokenMatrix::from_rows(&vec![row.clone(); 5]).unwrap();
        let out = attention_forward(&x);
        assert!(out.p.as_array().iter().all(|v| (v - 0.2).abs() < 1e-15));
        for y in out.y.rows() {
            assert!(y.iter().zip(&row).all(|(a, b)| (a - b).abs() < 1e-14));
        }
        let on_sphere = x.layer_normed(&Default::default()).unwrap();
        let k = gaussian_kernel_rows(&on_sphere).unwrap();
        assert!(k.as_array().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn zero_upstream_gradient() {
        let x = random_tokens(4, 3, 5).unwrap();
        let dx = attention_backward(&x, Array2::zeros((4, 3)).view()).unwrap();
        assert!(dx.iter().all(|v| *v == 0.0));
        assert!(attention_backward(&x, Array2::zeros((3, 3)).view()).is_err());
    }

    #[test]
    fn kernel_rejects_off_sphere() {
        let x = random_sphere_tokens(6, 8, 1).unwrap();
        let mut raw = x.into_inner();
        raw.row_mut(2).mapv_inplace(|v| 2.0 * v);
        let x = TokenMatrix::new(raw).unwrap();
        assert!(matches!(
            gaussian_kernel_rows(&x),
            Err(Error::NotOnSphere { row: 2, .. })
        ));
    }

    #[test]
    fn permutation_equivariance() {
        let x = random_tokens(6, 4, 17).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = TokenMatrix::new(x.as_array().select(Axis(0), &perm)).unwrap();
        let y = attention_forward(&x).y.select(Axis(0), &perm);
        let yp = attention_forward(&permuted).y;
        assert!(max_abs(&(y - yp)) <= 1e-12);
    }
}
