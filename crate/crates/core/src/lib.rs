//! Long-tail classification lab.
//!
//! A small, fully deterministic classifier (optional MLP backbone plus linear
//! softmax heads) trained in the decoupled two-stage regime, with the usual
//! imbalance-handling tricks layered on top:
//!
//! - class-frequency-exponent re-sampling (`q = 1`, `1/2`, `0`),
//! - focal and class-balanced focal losses with exact analytic gradients,
//! - Balanced Group Softmax (grouped heads with an "others" output),
//! - the square-root sampling branch: an instance-sampled head and a
//!   square-root-sampled head merged by a per-class head/tail mask,
//!
//! and evaluation by count-decade bins, overall accuracy and macro F1.
//!
//! Each major capability has a runnable program under `examples/`:
//!
//! ```bash
//! cargo run --release -p longtail --example synthetic_dataset
//! cargo run --release -p longtail --example sampling_distributions
//! cargo run --release -p longtail --example loss_gradients
//! cargo run --release -p longtail --example warmup_cosine_adamw
//! cargo run --release -p longtail --example two_stage_training
//! cargo run --release -p longtail --example balanced_group_softmax
//! cargo run --release -p longtail --example square_root_branch
//! cargo run --release -p longtail --example evaluation_report
//! cargo run --release -p longtail --example compare_methods
//! cargo run --release -p longtail --example embeddings_and_checkpoints
//! ```

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod seed;

pub use error::{Error, Result};
pub use matrix::Matrix;
