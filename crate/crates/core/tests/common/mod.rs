#![allow(dead_code)]

use attnwalk::attention::attention_forward;
use attnwalk::geometry::TokenMatrix;
use attnwalk::kfac::KroneckerCapture;
use attnwalk::rng;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut attnwalk::rng::Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn rel_err(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    let scale = frob(want);
    let diff = frob(&(got - want));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn random_captures(p: usize, m: usize, batch: usize, seed: u64) -> Vec<KroneckerCapture> {
    let mut r = rng::stream(seed, 0x0c);
    (0..batch)
        .map(|_| {
            let a = Array1::from_shape_simple_fn(m, || gaussian(&mut r));
            let g = Array1::from_shape_simple_fn(p, || gaussian(&mut r));
            KroneckerCapture::new(a, g)
        })
        .collect()
}

pub fn random_matrix(p: usize, m: usize, seed: u64, stream: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, stream);
    Array2::from_shape_simple_fn((p, m), || gaussian(&mut r))
}

/// Batch mean of `(g g^T) ⊗ (a a^T)` plus `gamma I`, acting on row-major `vec`.
pub fn dense_fisher(captures: &[KroneckerCapture], gamma: f64) -> DMatrix<f64> {
    let p = captures[0].g.len();
    let m = captures[0].a.len();
    let mut f = DMatrix::<f64>::zeros(p * m, p * m);
    for c in captures {
        let g = DVector::from_iterator(p, c.g.iter().copied());
        let a = DVector::from_iterator(m, c.a.iter().copied());
        f += (&g * g.transpose()).kronecker(&(&a * a.transpose()));
    }
    f /= captures.len() as f64;
    f + DMatrix::identity(p * m, p * m) * gamma
}

pub fn vec_row_major(v: &Array2<f64>) -> DVector<f64> {
    DVector::from_iterator(v.len(), v.iter().copied())
}

pub fn unvec(v: &DVector<f64>, p: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_vec((p, m), v.iter().copied().collect()).expect("length p*m")
}

pub fn dense_solve(captures: &[KroneckerCapture], gamma: f64, b: &Array2<f64>) -> Array2<f64> {
    let f = dense_fisher(captures, gamma);
    let x = f
        .lu()
        .solve(&vec_row_major(b))
        .expect("damped Fisher is invertible");
    unvec(&x, b.nrows(), b.ncols())
}

pub fn dense_apply(captures: &[KroneckerCapture], gamma: f64, v: &Array2<f64>) -> Array2<f64> {
    unvec(
        &(dense_fisher(captures, gamma) * vec_row_major(v)),
        v.nrows(),
        v.ncols(),
    )
}

/// Central differences of `sum(Y^2) / 2` with respect to the tokens.
pub fn attention_loss_fd(x: &Array2<f64>, h: f64) -> Array2<f64> {
    let loss = |x: &Array2<f64>| {
        let y = attention_forward(&TokenMatrix::new(x.clone()).expect("finite")).y;
        0.5 * y.iter().map(|v| v * v).sum::<f64>()
    };
    let mut fd = Array2::zeros(x.raw_dim());
    for ((i, j), slot) in fd.indexed_iter_mut() {
        let mut plus = x.clone();
        plus[[i, j]] += h;
        let mut minus = x.clone();
        minus[[i, j]] -= h;
        *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
    }
    fd
}

/// Central-difference Jacobian of softmax, `J[i][j] = d s_i / d a_j`.
pub fn softmax_fd(a: &Array1<f64>, h: f64) -> Array2<f64> {
    let n = a.len();
    let mut j = Array2::zeros((n, n));
    for col in 0..n {
        let mut plus = a.clone();
        plus[col] += h;
        let mut minus = a.clone();
        minus[col] -= h;
        let d = (attnwalk::attention::softmax(plus.view())
            - attnwalk::attention::softmax(minus.view()))
            / (2.0 * h);
        j.column_mut(col).assign(&d);
    }
    j
}
