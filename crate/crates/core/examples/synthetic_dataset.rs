//! Generates the default long-tail profile (20 classes, largest 1000,
//! imbalance 200), prints the per-class counts with their count bins and
//! writes the training partition in embedding format.

use longtail::data::{
    compute_class_stats, load_embeddings, save_embeddings, synthetic_split, SplitSpec,
    SyntheticSpec,
};

fn main() -> longtail::Result<()> {
    let spec = SyntheticSpec::default();
    let split = synthetic_split(&spec, &SplitSpec::default())?;
    let stats = compute_class_stats(&split.train)?;

    println!("{:<10} {:>6} {:>4} {:>6}", "class", "train", "bin", "test");
    let test_counts = split.test.class_counts();
    for (j, name) in split.train.class_names().iter().enumerate() {
        println!(
            "{name:<10} {:>6} {:>4} {:>6}",
            stats.counts[j], stats.bins[j], test_counts[j]
        );
    }
    println!(
        "train {} / val {} / test {} instances, {} features",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.train.dim()
    );

    let path = std::env::temp_dir().join("longtail_train.emb");
    save_embeddings(&split.train, &path)?;
    let back = load_embeddings(&path)?;
    assert_eq!(back.digest(), split.train.digest());
    println!("wrote {} (sha256 {})", path.display(), &back.digest()[..16]);
    Ok(())
}
