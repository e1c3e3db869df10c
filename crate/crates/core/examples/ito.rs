// Brownian ensemble statistics and Monte Carlo checks of E[f(T, B_T)] from
// Ito's lemma.

use attnwalk::brownian::{correlation, ito_from_ensemble, mean_var, sample_ensemble, ItoFunction};

fn main() -> attnwalk::Result<()> {
    let ens = sample_ensemble(1.0, 1000, 10_000, 9)?;
    let (mean, var) = mean_var(&ens.terminal);
    let (qv, _) = mean_var(&ens.quadratic_variation);
    let half: Vec<f64> = ens
        .terminal
        .iter()
        .zip(&ens.midpoint)
        .map(|(t, m)| t - m)
        .collect();
    println!("B_1: mean {mean:.4}, variance {var:.4}; mean quadratic variation {qv:.4}");
    println!(
        "corr(B_1/2, B_1 - B_1/2) = {:.4}",
        correlation(&ens.midpoint, &half)
    );

    for f in [
        ItoFunction::Square,
        ItoFunction::Cube,
        ItoFunction::ExpMartingale,
    ] {
        let r = ito_from_ensemble(f, &ens);
        println!(
            "{:>14}: Monte Carlo {:+.4}, analytic {:+.4}, |error| {:.4} (3 sigma {:.4})",
            r.function.to_string(),
            r.mc_expectation,
            r.analytic_expectation,
            r.abs_error,
            r.three_sigma
        );
    }
    Ok(())
}
