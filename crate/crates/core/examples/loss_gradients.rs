//! Cross-entropy, focal and class-balanced focal loss on a small batch, with
//! the analytic logit gradient checked against central differences.

use longtail::losses::{batch_loss, cb_weight, LossSpec};
use longtail::matrix::Matrix;

fn main() -> longtail::Result<()> {
    let logits = Matrix::from_rows(&[
        vec![2.0, 0.5, -1.0],
        vec![-0.3, 0.1, 0.4],
        vec![3.5, -2.0, 0.0],
    ])?;
    let labels = [0, 2, 1];
    let counts = [900, 60, 4];

    println!(
        "class-balanced weights (beta 0.9): {:?}",
        counts.map(|n| cb_weight(n, 0.9))
    );

    let specs = [
        ("cross-entropy", LossSpec::cross_entropy()),
        ("focal 0.5", LossSpec::focal(0.5)),
        ("focal 2", LossSpec::focal(2.0)),
        ("cb-focal", LossSpec::cb_focal(2.0, 0.9)),
    ];
    let h = 1e-5;
    for (name, spec) in &specs {
        let v = batch_loss(&logits, &labels, &counts, spec)?;
        let mut worst = 0.0f64;
        for k in 0..logits.as_slice().len() {
            let mut plus = logits.clone();
            plus.as_mut_slice()[k] += h;
            let mut minus = logits.clone();
            minus.as_mut_slice()[k] -= h;
            let fd = (batch_loss(&plus, &labels, &counts, spec)?.total
                - batch_loss(&minus, &labels, &counts, spec)?.total)
                / (2.0 * h);
            worst = worst.max((fd - v.grad_logits.as_slice()[k]).abs());
        }
        println!(
            "{name:<14} loss {:.6}  per-instance {:?}  max |analytic - fd| {worst:.1e}",
            v.total,
            v.per_instance
                .iter()
                .map(|l| (l * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
