use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use longtail::data::{generate_synthetic, save_embeddings, SyntheticSpec};
use longtail::experiment::{
    emit_f1_delta, load_config, load_reports, run_experiment, DatasetSource, ExperimentConfig,
};
use longtail::metrics::{compare_methods, EvalReport};
use longtail::model::Method;

#[derive(Parser)]
#[command(
    name = "longtail",
    version,
    about = "Long-tail classification experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic long-tail training set in embedding format.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        /// Start from the synthetic section of this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate a single method.
    Train {
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Train and evaluate every configured method and write comparison tables.
    Compare {
        /// Comma-separated subset of baseline,sqrt_samp,cb_focal,bags,ssb.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Re-render the comparison table from stored reports.
    Report {
        /// Report files or run directories.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Per-class F1 change of each method over the baseline.
    F1delta {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(required = true)]
        methods: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct DataFlags {
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    head_count: Option<usize>,
    #[arg(long)]
    imbalance_factor: Option<f64>,
    #[arg(long)]
    class_separation: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl DataFlags {
    fn apply(&self, s: &mut SyntheticSpec) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        set!(
            num_classes,
            feature_dim,
            head_count,
            imbalance_factor,
            class_separation,
            noise_sigma
        );
        if let Some(v) = self.data_seed {
            s.seed = v;
        }
    }
}

#[derive(Args)]
struct RunFlags {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Embedding file to use instead of synthetic data.
    #[arg(long, conflicts_with_all = ["num_classes", "feature_dim", "head_count", "imbalance_factor", "class_separation", "noise_sigma", "data_seed"])]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    /// Hidden widths of the backbone, comma-separated; empty for identity.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Also train sqrt_samp and cb_focal from scratch.
    #[arg(long)]
    one_stage: bool,
    /// Train a separate stage-1 model for every method.
    #[arg(long)]
    independent_stage1: bool,
    /// Run methods one after another.
    #[arg(long)]
    sequential: bool,
}

impl RunFlags {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(p) = &self.embeddings {
            c.dataset = DatasetSource::Embeddings(p.clone());
        }
        if let DatasetSource::Synthetic(s) = &mut c.dataset {
            self.data.apply(s);
        }
        if let Some(h) = &self.hidden {
            c.architecture.hidden = h.clone();
        }
        if let Some(v) = self.stage1_epochs {
            c.stage1.epochs = v;
        }
        if let Some(v) = self.stage2_epochs {
            c.stage2.epochs = v;
        }
        if let Some(v) = self.lr {
            c.stage1.lr_init = v;
            c.stage2.lr_init = v;
        }
        if let Some(v) = self.batch_size {
            c.stage1.batch_size = v;
            c.stage2.batch_size = v;
        }
        c.one_stage |= self.one_stage;
        c.shared_stage1 &= !self.independent_stage1;
        c.parallel &= !self.sequential;
        Ok(c)
    }
}

fn run_and_print(config: ExperimentConfig) -> anyhow::Result<()> {
    config.validate()?;
    let manifest = run_experiment(&config)?;
    let reports: Vec<EvalReport> = manifest
        .runs
        .iter()
        .map(|r| Ok(EvalReport::from_json(&fs::read_to_string(&r.report)?)?))
        .collect::<anyhow::Result<_>>()?;
    print!("{}", compare_methods(&reports)?.render_text());
    println!("outputs in {}", config.output_dir.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { out, data, config } => {
            let mut spec = match config {
                Some(p) => match load_config(&p)?.dataset {
                    DatasetSource::Synthetic(s) => s,
                    DatasetSource::Embeddings(_) => {
                        bail!("{} has no synthetic dataset section", p.display())
                    }
                },
                None => SyntheticSpec::default(),
            };
            data.apply(&mut spec);
            let ds = generate_synthetic(&spec)?;
            save_embeddings(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {} instances of {} classes to {}",
                ds.len(),
                ds.num_classes(),
                out.display()
            );
        }
        Command::Train { method, run } => {
            let mut c = run.config()?;
            c.methods = vec![method];
            run_and_print(c)?;
        }
        Command::Compare { methods, run } => {
            let mut c = run.config()?;
            if let Some(m) = methods {
                c.methods = m;
            }
            run_and_print(c)?;
        }
        Command::Report { reports, csv } => {
            let table = compare_methods(&load_reports(&reports)?)?;
            print!(
                "{}",
                if csv {
                    table.render_csv()
                } else {
                    table.render_text()
                }
            );
        }
        Command::F1delta {
            baseline,
            methods,
            out,
        } => {
            let base = load_reports(&[baseline])?;
            let [base] = base.as_slice() else {
                bail!("--baseline must name exactly one report");
            };
            let table = emit_f1_delta(base, &load_reports(&methods)?)?;
            let csv = table.render(',');
            match out {
                Some(p) => {
                    fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
