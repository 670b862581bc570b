//! Full comparison of all five methods on the default synthetic profile.
//!
//! Writes checkpoints, JSON reports, `comparison.{csv,txt}`, `f1_delta.csv`,
//! plot data and `manifest.json` to `$TMPDIR/longtail_compare` (or the
//! directory given as the first argument).

use std::fs;

use longtail::experiment::{run_experiment, ExperimentConfig};

fn main() -> longtail::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("longtail_compare"));
    let config = ExperimentConfig {
        one_stage: true,
        output_dir: out,
        ..ExperimentConfig::default()
    };
    println!("config digest {}", &config.digest()[..16]);

    let manifest = run_experiment(&config)?;
    print!(
        "{}",
        fs::read_to_string(config.output_dir.join("comparison.txt"))?
    );
    for run in &manifest.runs {
        println!("{:<24} {:.2}s", run.method, run.seconds);
    }
    let delta = fs::read_to_string(config.output_dir.join("f1_delta.csv"))?;
    println!("\nper-class F1 change over baseline (head classes first):");
    for line in delta.lines().take(6) {
        println!("  {line}");
    }
    println!("  ...\nall outputs in {}", config.output_dir.display());
    Ok(())
}
