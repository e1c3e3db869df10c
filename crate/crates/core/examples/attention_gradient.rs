// Analytic attention backward pass against central finite differences of
// L = sum(Y^2) / 2, where dL/dY = Y.

use attnwalk::attention::{attention_backward, attention_forward};
use attnwalk::geometry::{random_tokens, TokenMatrix};
use ndarray::Array2;

fn loss(x: &Array2<f64>) -> f64 {
    let y = attention_forward(&TokenMatrix::new(x.clone()).expect("finite tokens")).y;
    0.5 * y.iter().map(|v| v * v).sum::<f64>()
}

fn main() -> attnwalk::Result<()> {
    for (seed, (n, d)) in [(4, 3), (6, 8), (10, 16)].into_iter().enumerate() {
        let x = random_tokens(n, d, seed as u64)?;
        let y = attention_forward(&x).y;
        let analytic = attention_backward(&x, y.view())?;

        let h = 1e-6;
        let base = x.as_array();
        let mut fd = Array2::zeros(base.raw_dim());
        for ((i, j), slot) in fd.indexed_iter_mut() {
            let mut plus = base.clone();
            plus[[i, j]] += h;
            let mut minus = base.clone();
            minus[[i, j]] -= h;
            *slot = (loss(&plus) - loss(&minus)) / (2.0 * h);
        }
        let num = (&analytic - &fd).iter().map(|v| v * v).sum::<f64>().sqrt();
        let den = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("n = {n:>2}, d = {d:>2}: relative error {:.2e}", num / den);
    }
    Ok(())
}
