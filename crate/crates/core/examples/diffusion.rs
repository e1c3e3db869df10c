// A symmetric lattice walk with spacing h and step time tau approaches
// Brownian motion with D = h^2 / (2 tau).

use attnwalk::markov::{diffusion_limit_check, DiffusionSpec};

fn main() -> attnwalk::Result<()> {
    for (h, tau) in [(1.0, 1.0), (0.1, 0.01)] {
        let spec = DiffusionSpec::new(h, tau)?;
        let outcome = diffusion_limit_check(spec, 2_000, 20_000, 5)?;
        let r = &outcome.report;
        println!(
            "h = {h}, tau = {tau}: D = {:.3}, T = {:.1}, var {:.4} vs 2DT {:.4}, KS {:.4}",
            r.diffusion_coefficient,
            r.horizon,
            r.empirical_variance,
            r.analytic_variance,
            r.ks_statistic
        );
    }
    Ok(())
}
