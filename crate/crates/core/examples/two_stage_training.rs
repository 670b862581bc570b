//! Decoupled training: an MLP is trained end to end on the raw distribution,
//! then frozen while a new head is fitted under square-root sampling.

use longtail::data::{synthetic_split, SplitSpec, SyntheticSpec};
use longtail::losses::LossSpec;
use longtail::metrics::evaluate;
use longtail::model::{predict, train_stage1, train_stage2, Architecture, BalanceParams, Method};
use longtail::optim::OptimSpec;

fn main() -> longtail::Result<()> {
    let split = synthetic_split(&SyntheticSpec::default(), &SplitSpec::default())?;
    let arch = Architecture::mlp(split.train.dim(), &[64]);

    let stage1 = train_stage1(
        &split.train,
        &arch,
        &OptimSpec::stage1(),
        &LossSpec::cross_entropy(),
    )?;
    let first = stage1.log.first().unwrap();
    let last = stage1.log.last().unwrap();
    println!(
        "stage 1: loss {:.3} -> {:.3} over {} epochs",
        first.loss,
        last.loss,
        stage1.log.len()
    );

    let stage2 = train_stage2(
        &stage1,
        &split.train,
        Method::SqrtSamp,
        &OptimSpec::stage2(),
        &BalanceParams::default(),
    )?;
    assert_eq!(stage2.backbone.layers, stage1.backbone.layers);

    for model in [&stage1, &stage2] {
        let pred = predict(model, split.test.features())?;
        let report = evaluate(&pred.classes, split.test.labels(), &model.stats)?.labeled(
            model.method.tag(),
            0,
            "",
            "",
        );
        print!("{}", report.render_text());
    }
    Ok(())
}
