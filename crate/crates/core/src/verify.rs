//! Executable property suite over every module, used by `attnwalk verify`.
//!
//! Each check measures one scalar and compares it with a fixed tolerance.

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, attention_forward, gaussian_kernel_rows, kernel_rows_with_bandwidth,
    softmax, softmax_jacobian,
};
use crate::brownian::{
    correlation, ito_from_ensemble, mean_var, ols_slope, sample_ensemble, ItoFunction,
};
use crate::error::Result;
use crate::geometry::{
    dot_from_distance, layer_norm, random_sphere_tokens, random_tokens, LayerNormParams,
    TokenMatrix,
};
use crate::kfac::{cg_solve, fisher_vector_product, CgConfig, DampedFisher, KroneckerCapture};
use crate::markov::{
    diffusion_limit_check, empirical_k_step, evolve_distribution, k_step, validate_transition,
    validate_transition_with_tol, DiffusionSpec, TransitionMatrix, POWER_ROW_SUM_TOL,
};
use crate::rng;
use crate::trainer::{forward, synth_dataset, train_run, update_directions, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    /// Builds the kernel matrix with bandwidth `2d` instead of `2 sqrt(d)`.
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub markov_walks: usize,
    pub diffusion_steps: usize,
    pub diffusion_walkers: usize,
    pub brownian_paths: usize,
    pub brownian_steps: usize,
    pub perturb: Option<Perturbation>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            markov_walks: 100_000,
            diffusion_steps: 10_000,
            diffusion_walkers: 100_000,
            brownian_paths: 10_000,
            brownian_steps: 1000,
            perturb: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: measured <= tolerance,
            measured,
            tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub n_checks: usize,
    pub n_failed: usize,
    pub checks: Vec<CheckResult>,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Central-difference Jacobian of softmax at `a`; column `j` is `dS/da_j`.
pub fn softmax_fd_jacobian(a: &Array1<f64>, h: f64) -> Array2<f64> {
    let n = a.len();
    let mut jac = Array2::zeros((n, n));
    for j in 0..n {
        let mut ap = a.clone();
        ap[j] += h;
        let mut am = a.clone();
        am[j] -= h;
        let col = (softmax(ap.view()) - softmax(am.view())) / (2.0 * h);
        jac.column_mut(j).assign(&col);
    }
    jac
}

/// Central-difference gradient of `L(Y) = sum(Y^2) / 2` through attention.
pub fn attention_fd_gradient(x: &Array2<f64>, h: f64) -> Array2<f64> {
    let loss = |m: &Array2<f64>| {
        let y = attention_forward(&TokenMatrix::new(m.clone()).expect("finite")).y;
        0.5 * y.iter().map(|v| v * v).sum::<f64>()
    };
    let mut grad = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let mut xp = x.clone();
        xp[[i, j]] += h;
        let mut xm = x.clone();
        xm[[i, j]] -= h;
        grad[[i, j]] = (loss(&xp) - loss(&xm)) / (2.0 * h);
    }
    grad
}

/// Normwise relative error `max|a - b| / max|b|` (absolute when `b` is 0).
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = max_abs(b);
    let diff = max_abs_diff(a, b);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

fn random_chain(n: usize, rng: &mut rng::Rng) -> TransitionMatrix {
    let raw = Array2::from_shape_simple_fn((n, n), || rng.random::<f64>() + 1e-3);
    let sums = raw.sum_axis(Axis(1));
    validate_transition(Array2::from_shape_fn((n, n), |(i, j)| {
        raw[[i, j]] / sums[i]
    }))
    .expect("normalized rows")
}

fn random_captures(batch: usize, p: usize, m: usize, rng: &mut rng::Rng) -> Vec<KroneckerCapture> {
    (0..batch)
        .map(|_| {
            let a = Array1::from_shape_simple_fn(m, || StandardNormal.sample(rng));
            let g = Array1::from_shape_simple_fn(p, || StandardNormal.sample(rng));
            KroneckerCapture::new(a, g)
        })
        .collect()
}

fn frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn geometry_checks(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let params = LayerNormParams::default();
    for (k, d) in [2usize, 8, 64].into_iter().enumerate() {
        let x = random_tokens(1000, d, seed.wrapping_add(k as u64))?;
        let r = (d as f64).sqrt();
        let mut worst = 0.0f64;
        for v in x.view().rows() {
            let w = layer_norm(v, &params)?;
            worst = worst.max((w.dot(&w).sqrt() - r).abs() / r);
        }
        out.push(CheckResult::at_most(
            &format!("layer_norm_sphere_radius_d{d}"),
            worst,
            1e-9,
        ));
    }

    let x = random_tokens(200, 16, seed ^ 0x11)?;
    let mut worst = 0.0f64;
    for v in x.view().rows() {
        let once = layer_norm(v, &params)?;
        let twice = layer_norm(once.view(), &params)?;
        worst = worst.max((&once - &twice).iter().fold(0.0, |m, e| m.max(e.abs())));
    }
    out.push(CheckResult::at_most("layer_norm_idempotence", worst, 1e-12));

    let s = random_sphere_tokens(200, 16, seed ^ 0x12)?;
    let mut worst = 0.0f64;
    for i in 0..s.n() - 1 {
        let (u, v) = (s.row(i), s.row(i + 1));
        worst = worst.max((dot_from_distance(u, v)? - u.dot(&v)).abs() / 16.0);
    }
    out.push(CheckResult::at_most(
        "dot_from_distance_identity",
        worst,
        1e-9,
    ));
    Ok(())
}

fn attention_checks(
    seed: u64,
    perturb: Option<Perturbation>,
    out: &mut Vec<CheckResult>,
) -> Result<()> {
    let mut row_defect = 0.0f64;
    let mut track = |p: &TransitionMatrix| {
        row_defect = row_defect.max(p.max_row_defect());
        row_defect = row_defect.max(-p.as_array().iter().fold(0.0f64, |m, v| m.min(*v)));
    };

    let x = random_sphere_tokens(16, 32, seed ^ 0x21)?;
    let attn = attention_forward(&x);
    track(&attn.p);
    let kernel = match perturb {
        Some(Perturbation::Kernel) => kernel_rows_with_bandwidth(&x, 2.0 * x.d() as f64)?,
        None => gaussian_kernel_rows(&x)?,
    };
    track(&kernel);
    out.push(CheckResult::at_most(
        "kernel_equivalence_n16_d32",
        max_abs_diff(attn.p.as_array(), kernel.as_array()),
        1e-12,
    ));

    let mut rng = rng::stream(seed, 0x22);
    let mut jac_err = 0.0f64;
    let mut row_sums = 0.0f64;
    for k in 0..20 {
        let n = 2 + k % 7;
        let a = Array1::from_shape_simple_fn(n, || {
            2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
        });
        let jac = softmax_jacobian(softmax(a.view()).view())?;
        jac_err = jac_err.max(rel_err(&jac, &softmax_fd_jacobian(&a, 1e-6)));
        for r in jac.rows() {
            row_sums = row_sums.max(r.sum().abs());
        }
    }
    out.push(CheckResult::at_most(
        "softmax_jacobian_vs_fd",
        jac_err,
        1e-6,
    ));
    out.push(CheckResult::at_most(
        "softmax_jacobian_row_sums",
        row_sums,
        1e-14,
    ));

    let mut back_err = 0.0f64;
    let mut instance = 0u64;
    for n in 1..=5 {
        for d in 2..=4 {
            for _ in 0..2 {
                let x = random_tokens(n, d, seed.wrapping_add(0x2300 + instance))?;
                instance += 1;
                let fwd = attention_forward(&x);
                track(&fwd.p);
                let analytic = attention_backward(&x, fwd.y.view())?;
                back_err = back_err.max(rel_err(
                    &analytic,
                    &attention_fd_gradient(x.as_array(), 1e-6),
                ));
            }
        }
    }
    out.push(CheckResult::at_most(
        "attention_backward_vs_fd",
        back_err,
        1e-5,
    ));

    let x = random_tokens(8, 6, seed ^ 0x24)?;
    let mut perm: Vec<usize> = (0..8).collect();
    perm.rotate_left(3);
    perm.swap(0, 5);
    let y = attention_forward(&x).y.select(Axis(0), &perm);
    let yp = attention_forward(&TokenMatrix::new(x.as_array().select(Axis(0), &perm))?);
    track(&yp.p);
    out.push(CheckResult::at_most(
        "attention_permutation_equivariance",
        max_abs_diff(&y, &yp.y),
        1e-12,
    ));
    out.push(CheckResult::at_most(
        "attention_row_stochastic",
        row_defect,
        1e-12,
    ));
    Ok(())
}

fn markov_checks(cfg: &VerifyConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let seed = cfg.seed;
    let mut rng = rng::stream(seed, 0x31);
    let mut worst = 0.0f64;
    let mut closed = true;
    for n in 2..=6 {
        let m = random_chain(n, &mut rng);
        for k in [1u32, 2, 7, 16, 33, 64] {
            let mk = k_step(&m, k)?;
            worst = worst.max(mk.max_row_defect());
            closed &= validate_transition_with_tol(mk.into_inner(), POWER_ROW_SUM_TOL).is_ok();
        }
    }
    let mut check = CheckResult::at_most("k_step_stochastic_closure", worst, POWER_ROW_SUM_TOL);
    check.passed &= closed;
    out.push(check);

    let m = random_chain(5, &mut rng);
    let p0 = Array1::from_elem(5, 0.2);
    let mut ck = 0.0f64;
    for (s, t) in [(1, 1), (3, 5), (10, 7), (20, 20)] {
        let direct = evolve_distribution(&m, p0.view(), s + t)?;
        let mid = evolve_distribution(&m, p0.view(), s)?;
        let composed = evolve_distribution(&m, mid.view(), t)?;
        ck = ck.max(
            (&direct - &composed)
                .iter()
                .fold(0.0, |a, v| a.max(v.abs())),
        );
    }
    out.push(CheckResult::at_most("chapman_kolmogorov", ck, 1e-10));

    let chain = random_chain(3, &mut rng);
    let exact = k_step(&chain, 5)?;
    let empirical = empirical_k_step(&chain, 5, cfg.markov_walks, seed);
    out.push(CheckResult::at_most(
        "markov_k5_monte_carlo",
        max_abs_diff(exact.as_array(), &empirical),
        0.01,
    ));

    let diff = diffusion_limit_check(
        DiffusionSpec::default(),
        cfg.diffusion_steps,
        cfg.diffusion_walkers,
        seed,
    )?;
    let r = &diff.report;
    out.push(CheckResult::at_most(
        "diffusion_variance",
        (r.empirical_variance - r.analytic_variance).abs() / r.analytic_variance,
        0.05,
    ));
    out.push(CheckResult::at_most("diffusion_ks", r.ks_statistic, 0.02));
    Ok(())
}

fn brownian_checks(cfg: &VerifyConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let horizon = 1.0;
    let ens = sample_ensemble(horizon, cfg.brownian_steps, cfg.brownian_paths, cfg.seed)?;
    let np = cfg.brownian_paths as f64;

    let (mean_t, var_t) = mean_var(&ens.terminal);
    out.push(CheckResult::at_most(
        "brownian_terminal_mean",
        mean_t.abs(),
        3.0 * (horizon / np).sqrt(),
    ));
    out.push(CheckResult::at_most(
        "brownian_terminal_variance",
        (var_t - horizon).abs() / horizon,
        0.05,
    ));

    let tail: Vec<f64> = ens
        .terminal
        .iter()
        .zip(&ens.midpoint)
        .map(|(t, m)| t - m)
        .collect();
    out.push(CheckResult::at_most(
        "brownian_increment_independence",
        correlation(&ens.midpoint, &tail).abs(),
        0.05,
    ));

    let (qv_mean, qv_var) = mean_var(&ens.quadratic_variation);
    out.push(CheckResult::at_most(
        "quadratic_variation_mean",
        (qv_mean - horizon).abs(),
        0.005,
    ));
    let qv_sd_expected = (2.0 * horizon * horizon / cfg.brownian_steps as f64).sqrt();
    out.push(CheckResult::at_most(
        "quadratic_variation_std",
        (qv_var.sqrt() - qv_sd_expected).abs() / qv_sd_expected,
        0.2,
    ));

    let slope = ols_slope(&ens.time, &ens.variance_by_time);
    out.push(CheckResult::at_most(
        "brownian_variance_slope",
        (slope - 1.0).abs(),
        0.05,
    ));

    for (f, tol) in [
        (ItoFunction::Square, 0.05),
        (ItoFunction::Cube, 0.15),
        (ItoFunction::ExpMartingale, 0.05),
    ] {
        let r = ito_from_ensemble(f, &ens);
        out.push(CheckResult::at_most(
            &format!("ito_{}", f.to_string().replace('-', "_")),
            r.abs_error,
            tol,
        ));
    }
    Ok(())
}

fn kfac_checks(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = rng::stream(seed, 0x41);
    let (p, m, gamma) = (3, 4, 0.1);
    let fisher = DampedFisher::new(random_captures(8, p, m, &mut rng), gamma)?;
    let mut draw = || {
        Array2::from_shape_simple_fn((p, m), || {
            Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
    };
    let (u, v) = (draw(), draw());
    let fu = fisher_vector_product(&fisher, u.view())?;
    let fv = fisher_vector_product(&fisher, v.view())?;

    let (lhs, rhs) = (frob(&u, &fv), frob(&fu, &v));
    out.push(CheckResult::at_most(
        "fv_symmetry",
        (lhs - rhs).abs() / lhs.abs().max(rhs.abs()),
        1e-12,
    ));

    let (alpha, beta) = (1.7, -0.4);
    let combo = &u * alpha + &v * beta;
    let f_combo = fisher_vector_product(&fisher, combo.view())?;
    let expected = &fu * alpha + &fv * beta;
    out.push(CheckResult::at_most(
        "fv_linearity",
        rel_err(&f_combo, &expected),
        1e-12,
    ));

    let margin = (0..10)
        .map(|_| {
            let w = draw();
            let fw = fisher_vector_product(&fisher, w.view()).expect("shape");
            frob(&w, &fw) - gamma * frob(&w, &w)
        })
        .fold(f64::INFINITY, f64::min);
    out.push(CheckResult::at_most("fv_positive_definite", -margin, 1e-12));

    let b = draw();
    let cfg = CgConfig::default();
    let sol = cg_solve(&fisher, b.view(), Array2::zeros((p, m)).view(), &cfg)?;
    let residual = &b - &fisher_vector_product(&fisher, sol.x.view())?;
    let rel = frob(&residual, &residual).sqrt() / frob(&b, &b).sqrt();
    let mut check = CheckResult::at_most("cg_relative_residual", rel, 1e-8);
    check.passed &= sol.iterations <= p * m;
    out.push(check);

    let single = DampedFisher::new(random_captures(1, p, m, &mut rng), gamma)?;
    let sol = cg_solve(&single, b.view(), Array2::zeros((p, m)).view(), &cfg)?;
    let mut check =
        CheckResult::at_most("cg_single_capture_iterations", sol.iterations as f64, 2.0);
    check.passed &= sol.converged;
    out.push(check);
    Ok(())
}

fn trainer_checks(seed: u64, out: &mut Vec<CheckResult>) -> Result<()> {
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let data = synth_dataset(cfg.seed, cfg.n_tokens, cfg.vocab, cfg.classes, 64)?;
    // a few default SGD steps so that both blocks have a non-zero gradient
    let model = train_run(&TrainConfig {
        steps: 5,
        ..cfg.clone()
    })?
    .model;
    let batch = &data.samples[..cfg.batch_size];

    let pass = forward(&model, batch)?;
    let rebuilt = crate::kfac::capture_gradient(&pass.captures.head).expect("non-empty batch");
    out.push(CheckResult::at_most(
        "head_capture_reconstruction",
        max_abs_diff(&rebuilt, &pass.grads.head),
        1e-10,
    ));

    let big = TrainConfig {
        gamma: 1e6,
        eta: 1e6,
        ..cfg
    };
    let (sgd, cg) = update_directions(&model, batch, &big)?;
    let scaled_emb = &cg.embedding * big.gamma;
    let scaled_head = &cg.head * big.gamma;
    let err = rel_err(&scaled_emb, &sgd.embedding).max(rel_err(&scaled_head, &sgd.head));
    out.push(CheckResult::at_most(
        "cgfac_large_gamma_matches_sgd",
        err,
        1e-3,
    ));
    Ok(())
}

/// Runs every property check.
pub fn run_checks(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    geometry_checks(cfg.seed, &mut checks)?;
    attention_checks(cfg.seed, cfg.perturb, &mut checks)?;
    markov_checks(cfg, &mut checks)?;
    brownian_checks(cfg, &mut checks)?;
    kfac_checks(cfg.seed, &mut checks)?;
    trainer_checks(cfg.seed, &mut checks)?;
    let n_failed = checks.iter().filter(|c| !c.passed).count();
    Ok(VerifyReport {
        passed: n_failed == 0,
        n_checks: checks.len(),
        n_failed,
        checks,
    })
}
