// Layer norm without gain or bias maps every token onto the sphere of radius
// sqrt(d), where inner products are recovered from distances alone.

use attnwalk::geometry::{dot_from_distance, layer_norm, random_tokens, LayerNormParams};

fn main() -> attnwalk::Result<()> {
    let params = LayerNormParams::default();
    for d in [2, 8, 64] {
        let x = random_tokens(4, d, 7)?;
        let normed = x.layer_normed(&params)?;
        let radius = (d as f64).sqrt();
        let worst = normed
            .view()
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r).sqrt() - radius).abs())
            .fold(0.0f64, f64::max);
        println!("d = {d:>2}: radius {radius:.6}, max |norm - radius| = {worst:.2e}");

        let again = layer_norm(normed.row(0), &params)?;
        let drift = (&again - &normed.row(0))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let u = normed.row(1);
        let v = normed.row(2);
        let err = (u.dot(&v) - dot_from_distance(u, v)?).abs();
        println!(
            "        idempotence drift {drift:.2e}, <u,v> vs (2d - |u-v|^2)/2 error {err:.2e}"
        );
    }
    Ok(())
}
