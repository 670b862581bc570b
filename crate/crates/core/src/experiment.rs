//! End-to-end experiment runs: load or generate data, train the shared
//! stage-1 model, apply each balancing method, evaluate on the test split and
//! write checkpoints, reports, comparison tables and plot data.
//!
//! Configuration is a TOML document:
//!
//! ```toml
//! seed = 0
//! methods = ["baseline", "sqrt_samp", "cb_focal", "bags", "ssb"]
//! one_stage = false        # also train sqrt_samp / cb_focal from scratch
//! shared_stage1 = true     # false: every method gets its own stage-1 model
//! parallel = true          # stage-2 methods run concurrently
//! output_dir = "runs/demo"
//!
//! [dataset.synthetic]      # or: dataset = { embeddings = "train.emb" }
//! num_classes = 20
//! feature_dim = 16
//! head_count = 1000
//! imbalance_factor = 200.0
//! class_separation = 3.0
//! noise_sigma = 1.0
//!
//! [split]
//! train_fraction = 0.7
//! val_fraction = 0.15
//! test_fraction = 0.15
//!
//! [architecture]
//! hidden = []              # identity backbone; e.g. [64] for an MLP
//!
//! [stage1]                 # any OptimSpec field
//! epochs = 30
//!
//! [stage2]
//! epochs = 12
//!
//! [balance]
//! bags_beta = 8.0
//! ```
//!
//! Unknown keys are rejected. Missing sections take their defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_model;
use crate::data::{
    load_embeddings, split_dataset, synthetic_split, Split, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::metrics::{compare_methods, evaluate, EvalReport};
use crate::model::{
    predict, train_one_stage, train_stage1, train_stage2, Architecture, BalanceParams, Method,
    TrainedModel,
};
use crate::optim::OptimSpec;
use crate::seed::{derive_seed, derive_seed_str};

const STAGE1_TAG: u64 = 0x51;
const STAGE2_TAG: u64 = 0x52;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    /// An embedding file, split into train/val/test by the `split` section.
    Embeddings(PathBuf),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    /// Hidden widths of the ReLU backbone; empty means identity.
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub methods: Vec<Method>,
    pub one_stage: bool,
    pub shared_stage1: bool,
    pub parallel: bool,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    pub architecture: ArchitectureConfig,
    /// Its `seed` is mixed with the top-level seed, not used alone.
    pub stage1: OptimSpec,
    pub stage2: OptimSpec,
    pub balance: BalanceParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            methods: Method::ALL.to_vec(),
            one_stage: false,
            shared_stage1: true,
            parallel: true,
            output_dir: PathBuf::from("runs"),
            dataset: DatasetSource::Synthetic(SyntheticSpec::default()),
            split: SplitSpec::default(),
            architecture: ArchitectureConfig::default(),
            stage1: OptimSpec::stage1(),
            stage2: OptimSpec::stage2(),
            balance: BalanceParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let mut seen = self.methods.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config("methods must not repeat".into()));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.split.validate()?;
        if self.architecture.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.balance.cb_focal_loss().validate()?;
        if !(self.balance.bags_beta.is_finite() && self.balance.bags_beta > 0.0) {
            return Err(Error::Config("bags_beta must be > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of every result-affecting field; `output_dir` is excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn stage1_optim(&self) -> OptimSpec {
        let seed = derive_seed(derive_seed(self.seed, STAGE1_TAG), self.stage1.seed);
        self.stage1.clone().with_seed(seed)
    }

    pub fn stage2_optim(&self) -> OptimSpec {
        let seed = derive_seed(derive_seed(self.seed, STAGE2_TAG), self.stage2.seed);
        self.stage2.clone().with_seed(seed)
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Train, validation and test partitions for `config.dataset`.
pub fn load_split(config: &ExperimentConfig) -> Result<Split> {
    match &config.dataset {
        DatasetSource::Synthetic(spec) => synthetic_split(spec, &config.split),
        DatasetSource::Embeddings(path) => split_dataset(&load_embeddings(path)?, &config.split),
    }
}

/// SHA-256 over all three partitions.
pub fn split_digest(split: &Split) -> String {
    let mut h = Sha256::new();
    for part in [&split.train, &split.val, &split.test] {
        part.feed_digest(&mut h);
    }
    hex::encode(h.finalize())
}

/// One trained-and-evaluated configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Run {
    pub method: Method,
    pub one_stage: bool,
}

impl Run {
    /// Row label in tables and reports.
    pub fn label(&self) -> String {
        if self.one_stage {
            format!("{} (one-stage)", self.method)
        } else {
            self.method.to_string()
        }
    }

    /// File stem of the run's checkpoint and report.
    pub fn stem(&self) -> String {
        if self.one_stage {
            format!("{}.one_stage", self.method)
        } else {
            self.method.to_string()
        }
    }
}

/// Runs in output order: the requested methods in two-stage form, then the
/// single-stage variants when `one_stage` is set.
pub fn planned_runs(config: &ExperimentConfig) -> Vec<Run> {
    let mut runs: Vec<Run> = config
        .methods
        .iter()
        .map(|&method| Run {
            method,
            one_stage: false,
        })
        .collect();
    if config.one_stage {
        runs.extend(
            config
                .methods
                .iter()
                .filter(|m| matches!(m, Method::SqrtSamp | Method::CbFocal))
                .map(|&method| Run {
                    method,
                    one_stage: true,
                }),
        );
    }
    runs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub method: String,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: String,
    pub step: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_digest: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub runs: Vec<RunArtifact>,
    /// Tables and plot data written after all runs.
    pub tables: Vec<PathBuf>,
    pub stage1_seconds: Option<f64>,
    pub total_seconds: f64,
    pub failure: Option<Failure>,
}

impl RunManifest {
    pub fn path_in(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(Self::path_in(
            dir,
        ))?)?)
    }
}

fn step_err(run: &str, step: &str) -> impl FnOnce(Error) -> Error {
    let (method, step) = (run.to_string(), step.to_string());
    move |e| Error::Experiment {
        method,
        step,
        source: Box::new(e),
    }
}

struct Outcome {
    report: EvalReport,
    model: TrainedModel,
    artifact: RunArtifact,
}

/// Runs every planned method and writes all artifacts under `output_dir`.
///
/// On failure the artifacts written so far are kept and `manifest.json`
/// records the failing method and step.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    config.validate()?;
    let start = Instant::now();
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: config.digest(),
        dataset_digest: String::new(),
        seed: config.seed,
        runs: Vec::new(),
        tables: Vec::new(),
        stage1_seconds: None,
        total_seconds: 0.0,
        failure: None,
    };
    let result = execute(config, &mut manifest);
    manifest.total_seconds = start.elapsed().as_secs_f64();
    if let Err(Error::Experiment {
        method,
        step,
        source,
    }) = &result
    {
        manifest.failure = Some(Failure {
            method: method.clone(),
            step: step.clone(),
            message: source.to_string(),
        });
    } else if let Err(e) = &result {
        manifest.failure = Some(Failure {
            method: String::new(),
            step: "experiment".into(),
            message: e.to_string(),
        });
    }
    fs::write(
        RunManifest::path_in(out),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    result.map(|()| manifest)
}

fn execute(config: &ExperimentConfig, manifest: &mut RunManifest) -> Result<()> {
    let out = &config.output_dir;
    let split = load_split(config).map_err(step_err("", "load data"))?;
    let digest = split_digest(&split);
    manifest.dataset_digest = digest.clone();
    let cfg_digest = manifest.config_digest.clone();
    let arch = Architecture::mlp(split.train.dim(), &config.architecture.hidden);
    let runs = planned_runs(config);

    let needs_stage1 = runs.iter().any(|r| !r.one_stage);
    let shared = if needs_stage1 && config.shared_stage1 {
        let t = Instant::now();
        let m = train_stage1(
            &split.train,
            &arch,
            &config.stage1_optim(),
            &LossSpec::cross_entropy(),
        )
        .map_err(step_err("baseline", "stage 1"))?;
        manifest.stage1_seconds = Some(t.elapsed().as_secs_f64());
        info!("stage 1 done in {:.2}s", t.elapsed().as_secs_f64());
        Some(m)
    } else {
        None
    };

    let one = |run: &Run| -> Result<Outcome> {
        let t = Instant::now();
        let label = run.label();
        let model = if run.one_stage {
            train_one_stage(
                &split.train,
                &arch,
                &config.stage1_optim(),
                run.method,
                &config.balance,
            )
            .map_err(step_err(&label, "one-stage training"))?
        } else {
            let own;
            let stage1 = match &shared {
                Some(m) => m,
                None => {
                    let optim = config.stage1_optim();
                    let optim = optim
                        .clone()
                        .with_seed(derive_seed_str(optim.seed, run.method.tag()));
                    own = train_stage1(&split.train, &arch, &optim, &LossSpec::cross_entropy())
                        .map_err(step_err(&label, "stage 1"))?;
                    &own
                }
            };
            match run.method {
                Method::Baseline => stage1.clone(),
                m => train_stage2(
                    stage1,
                    &split.train,
                    m,
                    &config.stage2_optim(),
                    &config.balance,
                )
                .map_err(step_err(&label, "stage 2"))?,
            }
        };
        let pred = predict(&model, split.test.features()).map_err(step_err(&label, "predict"))?;
        let report = evaluate(&pred.classes, split.test.labels(), &model.stats)
            .map_err(step_err(&label, "evaluate"))?
            .labeled(
                label.clone(),
                config.seed,
                digest.clone(),
                cfg_digest.clone(),
            )
            .with_class_names(split.train.class_names());

        let checkpoint = out.join(format!("{}.ckpt", run.stem()));
        let report_path = out.join(format!("{}.report.json", run.stem()));
        save_model(&model, &checkpoint).map_err(step_err(&label, "save checkpoint"))?;
        report
            .to_json()
            .and_then(|s| Ok(fs::write(&report_path, s)?))
            .map_err(step_err(&label, "save report"))?;
        info!(
            "{label}: acc_all {:.4}, macro F1 {:.4}",
            report.acc_all, report.macro_f1
        );
        Ok(Outcome {
            artifact: RunArtifact {
                method: label,
                checkpoint,
                report: report_path,
                seconds: t.elapsed().as_secs_f64(),
            },
            report,
            model,
        })
    };

    let results: Vec<Result<Outcome>> = if config.parallel {
        runs.par_iter().map(one).collect()
    } else {
        runs.iter().map(one).collect()
    };
    let mut outcomes = Vec::with_capacity(results.len());
    let mut first_err = None;
    for r in results {
        match r {
            Ok(o) => {
                manifest.runs.push(o.artifact.clone());
                outcomes.push(o);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    manifest.tables = write_tables(
        out,
        &reports,
        &outcomes.iter().map(|o| &o.model).collect::<Vec<_>>(),
    )
    .map_err(step_err("", "write tables"))?;
    Ok(())
}

fn write_tables(
    out: &Path,
    reports: &[EvalReport],
    models: &[&TrainedModel],
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };

    let table = compare_methods(reports)?;
    put("comparison.csv", table.render_csv())?;
    put("comparison.txt", table.render_text())?;

    let mut bins = String::from("method\tbin\taccuracy\tsupport\n");
    for r in reports {
        for (b, acc) in &r.acc_bins {
            writeln!(bins, "{}\t{b}\t{acc:.6}\t{}", r.method, r.bin_support[b]).unwrap();
        }
    }
    put("plots/bin_accuracy.tsv", bins)?;

    let mut curves = String::from("method\tepoch\tloss\tlr\n");
    for (r, m) in reports.iter().zip(models) {
        for e in &m.log {
            writeln!(
                curves,
                "{}\t{}\t{:.8}\t{:.8e}",
                r.method, e.epoch, e.loss, e.lr
            )
            .unwrap();
        }
    }
    put("plots/training_loss.tsv", curves)?;

    if let Some(base) = reports.iter().find(|r| r.method == Method::Baseline.tag()) {
        let others: Vec<EvalReport> = reports
            .iter()
            .filter(|r| r.method != base.method)
            .cloned()
            .collect();
        if !others.is_empty() {
            let delta = emit_f1_delta(base, &others)?;
            put("f1_delta.csv", delta.render(','))?;
            put("plots/f1_delta.tsv", delta.render('\t'))?;
        }
    }
    Ok(written)
}

/// Per-class F1 change of each method over a baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct F1DeltaTable {
    pub methods: Vec<String>,
    pub rows: Vec<F1DeltaRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct F1DeltaRow {
    pub class: usize,
    pub name: String,
    pub train_count: usize,
    /// `F1(method) - F1(baseline)`, one per method.
    pub deltas: Vec<f64>,
}

/// One row per class, most frequent training class first (ties by index).
pub fn emit_f1_delta(baseline: &EvalReport, methods: &[EvalReport]) -> Result<F1DeltaTable> {
    let c = baseline.num_classes();
    for m in methods {
        if m.dataset_digest != baseline.dataset_digest {
            return Err(Error::DigestMismatch {
                expected: baseline.dataset_digest.clone(),
                found: m.dataset_digest.clone(),
            });
        }
        if m.num_classes() != c {
            return Err(Error::Shape(format!(
                "{} has {} classes, baseline {c}",
                m.method,
                m.num_classes()
            )));
        }
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        baseline.train_counts[b]
            .cmp(&baseline.train_counts[a])
            .then(a.cmp(&b))
    });
    let rows = order
        .into_iter()
        .map(|j| F1DeltaRow {
            class: j,
            name: baseline
                .class_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| j.to_string()),
            train_count: baseline.train_counts[j],
            deltas: methods
                .iter()
                .map(|m| m.per_class_f1[j] - baseline.per_class_f1[j])
                .collect(),
        })
        .collect();
    Ok(F1DeltaTable {
        methods: methods.iter().map(|m| m.method.clone()).collect(),
        rows,
    })
}

impl F1DeltaTable {
    /// Header `rank,class,name,train_count,<method>...`; `sep` is `,` or a tab.
    pub fn render(&self, sep: char) -> String {
        let mut s = ["rank", "class", "name", "train_count"].join(&sep.to_string());
        for m in &self.methods {
            write!(s, "{sep}{m}").unwrap();
        }
        s.push('\n');
        for (rank, r) in self.rows.iter().enumerate() {
            write!(
                s,
                "{rank}{sep}{}{sep}{}{sep}{}",
                r.class, r.name, r.train_count
            )
            .unwrap();
            for d in &r.deltas {
                write!(s, "{sep}{d:.6}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Reads `.report.json` files, either listed directly or found in directories.
pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            found.retain(|f| f.to_string_lossy().ends_with(".report.json"));
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::invalid("no report files found"));
    }
    files
        .iter()
        .map(|f| EvalReport::from_json(&fs::read_to_string(f)?))
        .collect()
}
