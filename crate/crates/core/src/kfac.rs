//! Matrix-free natural gradient for one linear block (CG-FAC).
//!
//! A block with weight `W` (`p x m`), input activation `a` (`m`) and
//! output gradient `g` (`p`) has the rank-one Fisher term
//! `(g g^T) ⊗ (a a^T)` under row-major vectorization of `W`. Applied to a
//! matrix `v` that term is `g (g^T v a) a^T`, so the damped, batch-averaged
//! Fisher
//!
//! ```text
//! F_γ v = mean_s[ g_s (g_s^T v a_s) a_s^T ] + γ v
//! ```
//!
//! costs `O(batch * p * m)` and never materializes the `pm x pm` matrix or
//! its Kronecker factors. Conjugate gradient on `F_γ x = ∇L` then gives the
//! natural-gradient direction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Damping used when a config does not set one.
pub const DEFAULT_GAMMA: f64 = 1e-2;
/// Relative residual at which CG stops by default.
pub const DEFAULT_REL_TOL: f64 = 1e-10;
/// Hard cap on CG iterations when none is configured.
pub const DEFAULT_MAX_ITERS_CAP: usize = 50;

/// One sample's (activation, output-gradient) pair for a block.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerCapture {
    /// Input activation, length `m`.
    pub a: Array1<f64>,
    /// Gradient of the loss with respect to the block output, length `p`.
    pub g: Array1<f64>,
}

impl KroneckerCapture {
    pub fn new(a: Array1<f64>, g: Array1<f64>) -> Self {
        Self { a, g }
    }
}

/// `F̂ + γI` represented by its captures.
#[derive(Debug, Clone, PartialEq)]
pub struct DampedFisher {
    captures: Vec<KroneckerCapture>,
    gamma: f64,
    p: usize,
    m: usize,
}

impl DampedFisher {
    pub fn new(captures: Vec<KroneckerCapture>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::BadConfig(format!(
                "damping must be positive and finite, got {gamma}"
            )));
        }
        let first = captures
            .first()
            .ok_or_else(|| Error::BadConfig("a damped Fisher needs at least one capture".into()))?;
        let (p, m) = (first.g.len(), first.a.len());
        for (k, c) in captures.iter().enumerate() {
            if c.g.len() != p || c.a.len() != m {
                return Err(Error::ShapeMismatch {
                    expected: format!("g of length {p}, a of length {m}"),
                    got: format!("capture {k}: g {}, a {}", c.g.len(), c.a.len()),
                });
            }
            if c.a.iter().chain(c.g.iter()).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("capture {k}")));
            }
        }
        Ok(Self {
            captures,
            gamma,
            p,
            m,
        })
    }

    /// `(p, m)`, the shape of the parameter block.
    pub fn shape(&self) -> (usize, usize) {
        (self.p, self.m)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn captures(&self) -> &[KroneckerCapture] {
        &self.captures
    }

    fn check_shape(&self, v: ArrayView2<'_, f64>, what: &str) -> Result<()> {
        if v.dim() != (self.p, self.m) {
            return Err(Error::ShapeMismatch {
                expected: format!("{what} of shape {}x{}", self.p, self.m),
                got: format!("{}x{}", v.nrows(), v.ncols()),
            });
        }
        Ok(())
    }
}

/// `F_γ v` without forming `F`.
pub fn fisher_vector_product(fisher: &DampedFisher, v: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    fisher.check_shape(v, "v")?;
    Ok(apply(fisher, v))
}

fn apply(fisher: &DampedFisher, v: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((fisher.p, fisher.m));
    for c in &fisher.captures {
        // theta = g^T v a
        let theta = c.g.dot(&v.dot(&c.a));
        if theta == 0.0 {
            continue;
        }
        for (i, mut row) in acc.rows_mut().into_iter().enumerate() {
            let gi = theta * c.g[i];
            if gi != 0.0 {
                row.scaled_add(gi, &c.a);
            }
        }
    }
    let inv_batch = 1.0 / fisher.captures.len() as f64;
    Zip::from(&mut acc)
        .and(&v)
        .for_each(|out, &vi| *out = *out * inv_batch + fisher.gamma * vi);
    acc
}

fn frob_dot(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |s, x, y| s + x * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    /// `None` means `min(p * m, 50)`.
    pub max_iters: Option<usize>,
    pub rel_tol: f64,
    /// Conjugate every new search direction against all previous ones
    /// instead of only the last. Identical iterates in exact arithmetic; in
    /// floating point it keeps the directions conjugate, so the solve still
    /// terminates within `p * m` iterations on ill-conditioned systems.
    #[serde(default = "full_conjugation_default")]
    pub full_conjugation: bool,
}

fn full_conjugation_default() -> bool {
    true
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: None,
            rel_tol: DEFAULT_REL_TOL,
            full_conjugation: full_conjugation_default(),
        }
    }
}

impl CgConfig {
    pub fn max_iters_for(&self, p: usize, m: usize) -> usize {
        self.max_iters
            .unwrap_or_else(|| (p * m).min(DEFAULT_MAX_ITERS_CAP))
    }
}

/// Loop variables of the CG iteration.
#[derive(Debug, Clone)]
pub struct CgState {
    pub x: Array2<f64>,
    pub r: Array2<f64>,
    pub p_dir: Array2<f64>,
    /// `|r|^2`.
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Array2<f64>,
    /// Number of Fisher-vector products spent inside the loop.
    pub iterations: usize,
    /// `|F_γ x - b|` at exit, from the recurrence.
    pub final_residual: f64,
    /// Residual norm before the loop and after every iteration.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Solves `F_γ x = b` by conjugate gradient from `x0`.
///
/// Stops once `|r| <= rel_tol * max(|b|, |r_0|)` or after the configured
/// number of iterations.
pub fn cg_solve(
    fisher: &DampedFisher,
    b: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    config: &CgConfig,
) -> Result<CgSolution> {
    fisher.check_shape(b, "b")?;
    fisher.check_shape(x0, "x0")?;
    if b.iter().chain(x0.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "CG right-hand side or initial guess".into(),
        ));
    }
    let max_iters = config.max_iters_for(fisher.p, fisher.m);

    let r = &b - &apply(fisher, x0);
    let rho = frob_dot(r.view(), r.view());
    let mut state = CgState {
        x: x0.to_owned(),
        p_dir: r.clone(),
        r,
        rho,
    };
    let b_norm = frob_dot(b, b).sqrt();
    let threshold = config.rel_tol * b_norm.max(rho.sqrt());
    let mut history = vec![rho.sqrt()];
    let mut iterations = 0;
    let mut converged = rho.sqrt() <= threshold;
    // (p_j, F p_j, p_j . F p_j) for every direction taken so far
    let mut taken: Vec<(Array2<f64>, Array2<f64>, f64)> = Vec::new();

    while !converged && iterations < max_iters {
        let u = apply(fisher, state.p_dir.view());
        let curvature = frob_dot(state.p_dir.view(), u.view());
        if curvature.is_nan() || curvature <= 0.0 {
            return Err(Error::Breakdown {
                iteration: iterations,
                curvature,
            });
        }
        let alpha = if config.full_conjugation {
            frob_dot(state.p_dir.view(), state.r.view()) / curvature
        } else {
            state.rho / curvature
        };
        state.x.scaled_add(alpha, &state.p_dir);
        state.r.scaled_add(-alpha, &u);
        let rho_next = frob_dot(state.r.view(), state.r.view());
        iterations += 1;
        history.push(rho_next.sqrt());
        if rho_next.sqrt() <= threshold {
            state.rho = rho_next;
            converged = true;
            break;
        }
        if config.full_conjugation {
            taken.push((
                std::mem::replace(&mut state.p_dir, state.r.clone()),
                u,
                curvature,
            ));
            for (p_j, u_j, s_j) in &taken {
                let c = frob_dot(state.p_dir.view(), u_j.view()) / s_j;
                state.p_dir.scaled_add(-c, p_j);
            }
        } else {
            let beta = rho_next / state.rho;
            Zip::from(&mut state.p_dir)
                .and(&state.r)
                .for_each(|p, &r| *p = r + beta * *p);
        }
        state.rho = rho_next;
    }

    Ok(CgSolution {
        x: state.x,
        iterations,
        final_residual: state.rho.sqrt(),
        residual_history: history,
        converged,
    })
}

/// `theta - eta * F_γ^{-1} grad`, with the CG solution returned for reuse as
/// the next warm start.
pub fn natural_gradient_step(
    theta: ArrayView2<'_, f64>,
    grad: ArrayView2<'_, f64>,
    fisher: &DampedFisher,
    eta: f64,
    config: &CgConfig,
    warm_start: Option<ArrayView2<'_, f64>>,
) -> Result<(Array2<f64>, CgSolution)> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::BadConfig(format!(
            "learning rate must be positive, got {eta}"
        )));
    }
    fisher.check_shape(theta, "theta")?;
    let zeros;
    let x0 = match warm_start {
        Some(w) => w,
        None => {
            zeros = Array2::zeros(grad.raw_dim());
            zeros.view()
        }
    };
    let sol = cg_solve(fisher, grad, x0, config)?;
    let mut next = theta.to_owned();
    next.scaled_add(-eta, &sol.x);
    Ok((next, sol))
}

/// Batch mean of `g a^T` over the captures: for a linear block this is the
/// loss gradient with respect to its weight.
pub fn capture_gradient(captures: &[KroneckerCapture]) -> Option<Array2<f64>> {
    let first = captures.first()?;
    let mut acc = Array2::<f64>::zeros((first.g.len(), first.a.len()));
    for c in captures {
        let g: ArrayView1<'_, f64> = c.g.view();
        for (i, mut row) in acc.rows_mut().into_iter().enumerate() {
            row.scaled_add(g[i], &c.a);
        }
    }
    Some(acc / captures.len() as f64)
}
