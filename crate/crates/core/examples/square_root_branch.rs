//! The square-root sampling branch: the stage-1 head keeps the head-group
//! classes, a square-root-sampled head supplies every other class score.

use longtail::data::{synthetic_split, SplitSpec, SyntheticSpec};
use longtail::heads::head_softmax;
use longtail::losses::LossSpec;
use longtail::model::{
    predict, ssb_mask, train_stage1, train_stage2, Architecture, BalanceParams, Heads, Method,
};
use longtail::optim::OptimSpec;

fn main() -> longtail::Result<()> {
    let split = synthetic_split(&SyntheticSpec::default(), &SplitSpec::default())?;
    let stage1 = train_stage1(
        &split.train,
        &Architecture::identity(split.train.dim()),
        &OptimSpec::stage1(),
        &LossSpec::cross_entropy(),
    )?;
    let ssb = train_stage2(
        &stage1,
        &split.train,
        Method::Ssb,
        &OptimSpec::stage2(),
        &BalanceParams::default(),
    )?;
    let mask = ssb_mask(&ssb).expect("ssb model");
    println!("head-group classes: {} of {}", mask.trace(), mask.len());

    let Heads::Ssb { instance, sqrt, .. } = &ssb.heads else {
        unreachable!()
    };
    let x = split.test.features();
    let h = ssb.backbone.forward(x)?;
    let pred = predict(&ssb, x)?;
    let i = (0..x.rows())
        .find(|&i| split.test.labels()[i] == 10)
        .unwrap();
    let p_i = head_softmax(instance, h.row(i));
    let p_sqrt = head_softmax(sqrt, h.row(i));
    println!(
        "{:>5} {:>5} {:>8} {:>8} {:>8}",
        "class", "head", "p_i", "p_sqrt", "p_r"
    );
    for j in 0..mask.len() {
        println!(
            "{j:>5} {:>5} {:>8.4} {:>8.4} {:>8.4}",
            mask.head[j],
            p_i[j],
            p_sqrt[j],
            pred.scores.get(i, j)
        );
    }
    println!(
        "true class 10, predicted {}, score sum {:.3}",
        pred.classes[i],
        pred.scores.row(i).iter().sum::<f64>()
    );
    Ok(())
}
