//! Learning-rate schedule of both training stages and AdamW on an
//! ill-conditioned quadratic.

use longtail::optim::{lr_at, optimizer_step, OptimSpec, OptimState};

fn main() -> longtail::Result<()> {
    let n: usize = 14_000;
    for (name, spec) in [
        ("stage 1", OptimSpec::stage1()),
        ("stage 2", OptimSpec::stage2()),
    ] {
        let per_epoch = n.div_ceil(spec.batch_size);
        let total = per_epoch * spec.epochs;
        let warm = per_epoch * spec.warmup_epochs;
        print!("{name}: {total} steps, lr at epoch");
        for e in (0..=spec.epochs).step_by(spec.epochs / 6) {
            print!(
                " {e}:{:.2e}",
                lr_at(e * per_epoch, total, warm, spec.lr_init)
            );
        }
        println!();
    }

    let scale = [1.0, 10.0, 100.0];
    let target = [1.0, -1.0, 0.5];
    let loss = |x: &[f64]| -> f64 { (0..3).map(|k| scale[k] * (x[k] - target[k]).powi(2)).sum() };
    let mut x = vec![0.0; 3];
    let spec = OptimSpec::stage1();
    let mut state = OptimState::new(&[3]);
    let steps = 400;
    for t in 0..steps {
        let g: Vec<f64> = (0..3)
            .map(|k| 2.0 * scale[k] * (x[k] - target[k]))
            .collect();
        optimizer_step(
            &mut [&mut x],
            &[&g],
            &mut state,
            &spec,
            lr_at(t, steps, 20, 0.05),
        )?;
        if t % 80 == 0 {
            println!("step {t:>3}: loss {:.3e}", loss(&x));
        }
    }
    println!("final x {x:.4?}, loss {:.3e}", loss(&x));
    Ok(())
}
