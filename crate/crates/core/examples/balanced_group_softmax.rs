//! Balanced Group Softmax on frozen stage-1 features.
//!
//! Classes are grouped by training-count decade; each group gets a softmax
//! head with an extra "others" output. The second run designates class 0 as
//! background, which adds a two-way background/foreground head whose
//! foreground probability rescales every other class score.

use longtail::data::{synthetic_split, SplitSpec, SyntheticSpec};
use longtail::heads::{bags_train_heads, build_group_layout, LayoutKind};
use longtail::losses::LossSpec;
use longtail::metrics::evaluate;
use longtail::model::{predict, train_stage1, Architecture, Heads, TrainedModel};
use longtail::optim::OptimSpec;

fn main() -> longtail::Result<()> {
    let split = synthetic_split(&SyntheticSpec::default(), &SplitSpec::default())?;
    let arch = Architecture::identity(split.train.dim());
    let stage1 = train_stage1(
        &split.train,
        &arch,
        &OptimSpec::stage1(),
        &LossSpec::cross_entropy(),
    )?;

    for background in [None, Some(0)] {
        let layout = build_group_layout(
            &stage1.stats,
            background,
            LayoutKind::Bags {
                background_group: background.is_some(),
            },
        )?;
        for (k, members) in layout.groups.iter().enumerate() {
            if !members.is_empty() {
                println!("G{k}: classes {members:?}");
            }
        }
        let heads = bags_train_heads(&stage1, &split.train, &layout, &OptimSpec::stage2(), 8.0)?;
        let model = TrainedModel {
            heads: Heads::Bags(heads),
            ..stage1.clone()
        };
        let pred = predict(&model, split.test.features())?;
        let row = pred.scores.row(0);
        println!(
            "first test row scores sum to {:.3}",
            row.iter().sum::<f64>()
        );
        let report =
            evaluate(&pred.classes, split.test.labels(), &model.stats)?.labeled("bags", 0, "", "");
        print!("{}", report.render_text());
    }
    Ok(())
}
