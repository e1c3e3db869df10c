// Attention weights as a Markov chain: exact k-step matrices against the
// empirical end-state frequencies of sampled walks.

use attnwalk::attention::attention_forward;
use attnwalk::geometry::random_sphere_tokens;
use attnwalk::markov::{empirical_k_step, evolve_distribution, k_step, sample_walk};
use ndarray::Array1;

fn main() -> attnwalk::Result<()> {
    let x = random_sphere_tokens(6, 4, 11)?;
    let p = attention_forward(&x).p;
    println!("one-step matrix:\n{:.3}", p.as_array());

    let walk = sample_walk(&p, 0, 12, 1)?;
    println!("a walk from token 0: {walk:?}");

    for k in [1u32, 5, 20] {
        let exact = k_step(&p, k)?;
        let empirical = empirical_k_step(&p, k as usize, 20_000, 2);
        let gap = (exact.as_array() - &empirical)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        println!(
            "k = {k:>2}: max row defect {:.1e}, max |exact - empirical| = {gap:.4}",
            exact.max_row_defect()
        );
    }

    let mut p0 = Array1::zeros(p.n());
    p0[0] = 1.0;
    let far = evolve_distribution(&p, p0.view(), 200)?;
    println!("distribution after 200 steps from token 0: {far:.4}");
    Ok(())
}
