// SGD and CG-FAC on the toy attention classifier, same data and seed.

use attnwalk::trainer::{train, Optimizer, TrainConfig};

fn main() -> attnwalk::Result<()> {
    for optimizer in [Optimizer::Sgd, Optimizer::Cgfac] {
        let cfg = TrainConfig {
            optimizer,
            ..TrainConfig::default()
        };
        let curve = train(&cfg)?;
        let checkpoints: Vec<String> = curve
            .records
            .iter()
            .step_by(40)
            .map(|r| format!("{:.4}", r.loss))
            .collect();
        let (first, last) = (
            curve.initial_loss().unwrap_or(f64::NAN),
            curve.final_loss().unwrap_or(f64::NAN),
        );
        println!(
            "{optimizer:?}: {} ... final {last:.5} ({:.4} of initial), {} CG iterations",
            checkpoints.join(" "),
            last / first,
            curve.total_cg_iterations()
        );
    }
    Ok(())
}
