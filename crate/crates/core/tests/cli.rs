use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use longtail::data::load_embeddings;
use longtail::experiment::RunManifest;

fn longtail(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longtail"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &[&str] = &[
    "--num-classes",
    "6",
    "--feature-dim",
    "4",
    "--head-count",
    "1100",
    "--imbalance-factor",
    "100",
    "--stage1-epochs",
    "3",
    "--stage2-epochs",
    "2",
];

#[test]
fn gen_writes_loadable_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    ok(&longtail(
        &[
            "gen",
            "--out",
            "d.emb",
            "--num-classes",
            "4",
            "--head-count",
            "50",
            "--imbalance-factor",
            "10",
        ],
        dir.path(),
    ));
    let ds = load_embeddings(dir.path().join("d.emb")).unwrap();
    assert_eq!(ds.class_counts(), vec![50, 23, 11, 5]);
}

#[test]
fn train_then_report_and_f1delta() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["baseline", "ssb"] {
        let mut args = vec!["train", "--method", m, "--output-dir", m];
        args.extend_from_slice(SMALL);
        let text = ok(&longtail(&args, dir.path()));
        assert!(text.contains(m));
        let manifest = RunManifest::load(&dir.path().join(m)).unwrap();
        assert_eq!(manifest.runs.len(), 1);
        assert!(manifest
            .runs
            .iter()
            .all(|r| dir.path().join(&r.report).exists()));
    }
    let text = ok(&longtail(
        &["report", "baseline", "ssb/ssb.report.json"],
        dir.path(),
    ));
    assert!(
        text.starts_with("method") && text.lines().count() == 3,
        "{text}"
    );
    let csv = ok(&longtail(
        &["report", "--csv", "baseline", "ssb"],
        dir.path(),
    ));
    assert!(csv.starts_with("method,Acc"));

    let delta = ok(&longtail(
        &[
            "f1delta",
            "--baseline",
            "baseline/baseline.report.json",
            "ssb/ssb.report.json",
            "baseline/baseline.report.json",
        ],
        dir.path(),
    ));
    let rows: Vec<&str> = delta.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.ends_with(",0.000000")));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("exp.toml"),
        "methods = [\"baseline\", \"bags\"]\noutput_dir = \"from_config\"\n\
         [dataset.synthetic]\nnum_classes = 5\nfeature_dim = 3\nhead_count = 200\n\
         imbalance_factor = 20.0\nclass_separation = 4.0\nnoise_sigma = 1.0\n\
         [stage1]\nepochs = 2\nwarmup_epochs = 1\n[stage2]\nepochs = 2\nwarmup_epochs = 1\n",
    )
    .unwrap();
    ok(&longtail(
        &[
            "compare",
            "--config",
            "exp.toml",
            "--output-dir",
            "from_flag",
        ],
        dir.path(),
    ));
    assert!(!dir.path().join("from_config").exists());
    let m = RunManifest::load(&dir.path().join("from_flag")).unwrap();
    assert_eq!(
        m.runs.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(),
        ["baseline", "bags"]
    );
    for t in &m.tables {
        assert!(dir.path().join(t).exists(), "{}", t.display());
    }
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "methodz = []\n").unwrap();
    let out = longtail(&["compare", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let out = longtail(
        &["train", "--method", "ssb", "--embeddings", "missing.emb"],
        dir.path(),
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load data"), "{err}");

    let out = longtail(
        &["f1delta", "--baseline", "nope.json", "also_nope.json"],
        dir.path(),
    );
    assert!(!out.status.success());
}
