//! Precomputed embeddings in, checkpoint out, and back again.
//!
//! The embedding format is plain text: a `C=<classes> D=<dim>` header
//! (optionally `background=<class>`), a line of class names, then one
//! `label,f_1,...,f_D` row per instance.

use longtail::checkpoint::{load_model, save_model};
use longtail::data::{parse_embeddings, split_dataset, SplitSpec};
use longtail::losses::LossSpec;
use longtail::model::{predict, train_stage1, train_stage2, Architecture, BalanceParams, Method};
use longtail::optim::OptimSpec;

fn main() -> longtail::Result<()> {
    let mut text = String::from("C=3 D=2 background=2\ncat,dog,empty\n");
    for i in 0..150 {
        let t = i as f64 * 0.37;
        let (label, cx, cy) = match i % 10 {
            0 => (1, 3.0, 0.0),
            1..=3 => (2, 0.0, 3.0),
            _ => (0, 0.0, 0.0),
        };
        text += &format!("{label},{},{}\n", cx + t.sin(), cy + (1.7 * t).cos());
    }
    let ds = parse_embeddings(&text, "inline.emb".as_ref())?;
    println!(
        "{} instances, counts {:?}, background {:?}",
        ds.len(),
        ds.class_counts(),
        ds.background_class()
    );

    let split = split_dataset(&ds, &SplitSpec::default())?;
    let stage1 = train_stage1(
        &split.train,
        &Architecture::mlp(2, &[8]),
        &OptimSpec::stage1(),
        &LossSpec::cross_entropy(),
    )?;
    let bags = train_stage2(
        &stage1,
        &split.train,
        Method::Bags,
        &OptimSpec::stage2(),
        &BalanceParams::default(),
    )?;

    let path = std::env::temp_dir().join("longtail_bags.ckpt");
    save_model(&bags, &path)?;
    let restored = load_model(&path)?;
    assert_eq!(restored, bags);

    let before = predict(&bags, split.test.features())?;
    let after = predict(&restored, split.test.features())?;
    assert_eq!(before, after);
    println!(
        "checkpoint {} ({} bytes) restores {} test predictions exactly",
        path.display(),
        std::fs::metadata(&path)?.len(),
        after.classes.len()
    );
    Ok(())
}
