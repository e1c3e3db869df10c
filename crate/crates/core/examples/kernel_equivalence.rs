// On the sphere, softmax attention weights are a row-normalized Gaussian
// kernel with variance sqrt(d). Off the sphere the two disagree.

use attnwalk::attention::{attention_forward, gaussian_kernel_rows};
use attnwalk::geometry::{random_sphere_tokens, random_tokens, LayerNormParams};

fn max_abs_diff(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn main() -> attnwalk::Result<()> {
    for (n, d) in [(4, 8), (16, 32), (32, 128)] {
        let x = random_sphere_tokens(n, d, 3)?;
        let attn = attention_forward(&x);
        let kernel = gaussian_kernel_rows(&x)?;
        println!(
            "n = {n:>2}, d = {d:>3}: max |P - K| = {:.2e}",
            max_abs_diff(attn.p.as_array(), kernel.as_array())
        );
    }

    let raw = random_tokens(8, 16, 3)?;
    match gaussian_kernel_rows(&raw) {
        Ok(_) => println!("raw tokens unexpectedly on the sphere"),
        Err(e) => println!("raw tokens: {e}"),
    }
    let normed = raw.layer_normed(&LayerNormParams::default())?;
    let k = gaussian_kernel_rows(&normed)?;
    println!(
        "after layer norm: max |P - K| = {:.2e}",
        max_abs_diff(attention_forward(&normed).p.as_array(), k.as_array())
    );
    Ok(())
}
