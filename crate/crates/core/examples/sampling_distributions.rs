//! Class sampling probabilities under instance-balanced (q = 1), square-root
//! (q = 1/2) and class-balanced (q = 0) sampling, next to the empirical
//! class frequencies of one sampled epoch.

use longtail::data::{generate_synthetic, SyntheticSpec};
use longtail::sampling::{bags_filter_batch, make_epoch_stream, sampling_weights, SamplerSpec};

fn main() -> longtail::Result<()> {
    let ds = generate_synthetic(&SyntheticSpec {
        num_classes: 6,
        head_count: 2000,
        imbalance_factor: 400.0,
        ..SyntheticSpec::default()
    })?;
    let counts = ds.class_counts();
    println!("counts {counts:?}");

    for q in [1.0, 0.5, 0.0] {
        let weights = sampling_weights(&counts, q)?;
        let stream = make_epoch_stream(ds.labels(), &SamplerSpec::new(&counts, q, 42)?, 50_000)?;
        let mut seen = vec![0usize; counts.len()];
        for &i in stream.indices() {
            seen[ds.labels()[i]] += 1;
        }
        println!("q = {q}");
        for (j, w) in weights.iter().enumerate() {
            println!(
                "  class {j}: p = {w:.4}  empirical = {:.4}",
                seen[j] as f64 / stream.len() as f64
            );
        }
    }

    // Grouped heads undersample out-of-group instances inside each batch.
    let groups = [4u8, 3, 3, 2, 2, 1];
    let batch: Vec<usize> = vec![0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 2, 3, 5];
    for g in 1..=4u8 {
        let kept = bags_filter_batch(&batch, g, &groups, 1.0, 7)?;
        let labels: Vec<usize> = kept.iter().map(|&p| batch[p]).collect();
        println!("group G{g} keeps labels {labels:?}");
    }
    Ok(())
}
