// Matrix-free natural-gradient solve: the damped Kronecker-factored Fisher is
// only ever applied to vectors, and conjugate gradient inverts it.

use attnwalk::kfac::{cg_solve, natural_gradient_step, CgConfig, DampedFisher, KroneckerCapture};
use attnwalk::rng;
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

fn main() -> attnwalk::Result<()> {
    let (p, m, batch) = (3, 4, 8);
    let mut rng = rng::stream(1, 0);
    let mut normal = |len: usize| {
        Array1::from_shape_simple_fn(len, || {
            Distribution::<f64>::sample(&StandardNormal, &mut rng)
        })
    };
    let captures: Vec<KroneckerCapture> = (0..batch)
        .map(|_| KroneckerCapture::new(normal(m), normal(p)))
        .collect();
    let fisher = DampedFisher::new(captures, 0.1)?;

    let grad = Array2::from_shape_fn((p, m), |(i, j)| (i as f64 + 1.0) - 0.5 * j as f64);
    let sol = cg_solve(
        &fisher,
        grad.view(),
        Array2::zeros((p, m)).view(),
        &CgConfig::default(),
    )?;
    println!(
        "converged {} after {} iterations",
        sol.converged, sol.iterations
    );
    for (k, r) in sol.residual_history.iter().enumerate() {
        println!("  |r_{k}| = {r:.3e}");
    }

    let theta = Array2::zeros((p, m));
    let (next, first) = natural_gradient_step(
        theta.view(),
        grad.view(),
        &fisher,
        0.5,
        &CgConfig::default(),
        None,
    )?;
    let (_, warm) = natural_gradient_step(
        next.view(),
        grad.view(),
        &fisher,
        0.5,
        &CgConfig::default(),
        Some(first.x.view()),
    )?;
    println!(
        "cold start {} iterations, warm start {} iterations",
        first.iterations, warm.iterations
    );
    println!("updated parameters:\n{next:.4}");
    Ok(())
}
