//! Binned accuracy and macro F1 on hand-made predictions.

use longtail::data::ClassStats;
use longtail::metrics::{compare_methods, evaluate};

fn main() -> longtail::Result<()> {
    // training counts put the classes in bins 4, 3, 2 and 1
    let stats = ClassStats::from_counts(vec![5000, 500, 50, 5])?;
    let truth = [0, 0, 0, 0, 1, 1, 1, 2, 2, 3];
    let head_heavy = [0, 0, 0, 0, 1, 1, 0, 0, 1, 0];
    let balanced = [0, 0, 0, 1, 1, 1, 2, 2, 2, 3];

    let a = evaluate(&head_heavy, &truth, &stats)?.labeled("head-heavy", 0, "demo", "");
    let b = evaluate(&balanced, &truth, &stats)?.labeled("balanced", 0, "demo", "");
    print!("{}", a.render_text());
    println!("confusion {:?}", a.confusion);
    println!("per-class F1 {:?}\n", b.per_class_f1);

    let table = compare_methods(&[a, b])?;
    print!("{}\n{}", table.render_text(), table.render_csv());
    Ok(())
}
