//! Binned accuracy, overall accuracy and macro-averaged F1.
//!
//! Test instances are binned by the *training* count of their true class
//! (`[1,10)`, `[10,100)`, `[100,1000)`, `>= 1000`). Bins with no test
//! instances are left out of the report rather than reported as zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClassStats;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Row label, e.g. `ssb` or `sqrt_samp (one-stage)`.
    pub method: String,
    pub seed: u64,
    pub config_digest: String,
    pub dataset_digest: String,
    /// Accuracy per bin present in the test set.
    pub acc_bins: BTreeMap<u8, f64>,
    /// Test instances per present bin.
    pub bin_support: BTreeMap<u8, usize>,
    pub acc_all: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub train_counts: Vec<usize>,
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn labeled(
        mut self,
        method: impl Into<String>,
        seed: u64,
        dataset_digest: impl Into<String>,
        config_digest: impl Into<String>,
    ) -> Self {
        self.method = method.into();
        self.seed = seed;
        self.dataset_digest = dataset_digest.into();
        self.config_digest = config_digest.into();
        self
    }

    pub fn with_class_names(mut self, names: &[String]) -> Self {
        self.class_names = names.to_vec();
        self
    }

    pub fn num_classes(&self) -> usize {
        self.per_class_f1.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Human-readable summary of one report.
    pub fn render_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "method      {}", self.method).unwrap();
        for (b, acc) in &self.acc_bins {
            writeln!(
                s,
                "Acc{b}        {:>6.2}%  ({} test instances)",
                100.0 * acc,
                self.bin_support[b]
            )
            .unwrap();
        }
        writeln!(s, "Acc_all     {:>6.2}%", 100.0 * self.acc_all).unwrap();
        writeln!(s, "F1_macro    {:>6.2}%", 100.0 * self.macro_f1).unwrap();
        s
    }
}

/// F1 from confusion counts; zero whenever precision or recall is undefined.
fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    2.0 * tp / (2.0 * tp + fp + fn_)
}

pub fn evaluate(
    predictions: &[usize],
    true_labels: &[usize],
    stats: &ClassStats,
) -> Result<EvalReport> {
    if predictions.len() != true_labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            true_labels.len()
        )));
    }
    if true_labels.is_empty() {
        return Err(Error::NoInstances);
    }
    let c = stats.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    let mut correct_bins: BTreeMap<u8, usize> = BTreeMap::new();
    let mut support: BTreeMap<u8, usize> = BTreeMap::new();
    for (&p, &t) in predictions.iter().zip(true_labels) {
        if t >= c || p >= c {
            return Err(Error::invalid(format!(
                "label {t} / prediction {p} out of range for {c} classes"
            )));
        }
        confusion[t][p] += 1;
        let bin = stats.bins[t];
        *support.entry(bin).or_default() += 1;
        if p == t {
            *correct_bins.entry(bin).or_default() += 1;
        }
    }

    let acc_bins = support
        .iter()
        .map(|(&b, &n)| {
            (
                b,
                correct_bins.get(&b).copied().unwrap_or(0) as f64 / n as f64,
            )
        })
        .collect();
    let total = true_labels.len();
    let trace: usize = (0..c).map(|j| confusion[j][j]).sum();

    let per_class_f1: Vec<f64> = (0..c)
        .map(|j| {
            let tp = confusion[j][j];
            let row: usize = confusion[j].iter().sum();
            let col: usize = confusion.iter().map(|r| r[j]).sum();
            f1_score(tp, col - tp, row - tp)
        })
        .collect();
    let macro_f1 = per_class_f1.iter().sum::<f64>() / c as f64;

    Ok(EvalReport {
        method: String::new(),
        seed: 0,
        config_digest: String::new(),
        dataset_digest: String::new(),
        acc_bins,
        bin_support: support,
        acc_all: trace as f64 / total as f64,
        macro_f1,
        per_class_f1,
        confusion,
        train_counts: stats.counts.clone(),
        class_names: (0..c).map(|j| j.to_string()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    None,
    Best,
    Second,
}

impl Rank {
    fn tag(self) -> &'static str {
        match self {
            Rank::None => "",
            Rank::Best => "best",
            Rank::Second => "second",
        }
    }

    fn marker(self) -> &'static str {
        match self {
            Rank::None => " ",
            Rank::Best => "*",
            Rank::Second => "+",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub values: Vec<Option<f64>>,
    pub ranks: Vec<Rank>,
}

/// Methods side by side: one column per present bin, then `Acc_all` and `F1_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Ranks every column (best and second-best, ties share a rank). A table with
/// a single row carries no flags.
pub fn compare_methods(reports: &[EvalReport]) -> Result<ComparisonTable> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("no reports to compare"))?;
    for r in &reports[1..] {
        if r.dataset_digest != first.dataset_digest {
            return Err(Error::DigestMismatch {
                expected: first.dataset_digest.clone(),
                found: r.dataset_digest.clone(),
            });
        }
    }
    let bins: Vec<u8> = {
        let mut b: Vec<u8> = reports
            .iter()
            .flat_map(|r| r.acc_bins.keys().copied())
            .collect();
        b.sort_unstable();
        b.dedup();
        b
    };
    let mut columns: Vec<String> = bins.iter().map(|b| format!("Acc{b}")).collect();
    columns.push("Acc_all".into());
    columns.push("F1_m".into());

    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| {
            let mut values: Vec<Option<f64>> =
                bins.iter().map(|b| r.acc_bins.get(b).copied()).collect();
            values.push(Some(r.acc_all));
            values.push(Some(r.macro_f1));
            ComparisonRow {
                method: r.method.clone(),
                ranks: vec![Rank::None; values.len()],
                values,
            }
        })
        .collect();

    if rows.len() > 1 {
        for col in 0..columns.len() {
            let best = rows
                .iter()
                .filter_map(|r| r.values[col])
                .fold(f64::NEG_INFINITY, f64::max);
            let second = rows
                .iter()
                .filter_map(|r| r.values[col])
                .filter(|&v| v < best)
                .fold(f64::NEG_INFINITY, f64::max);
            for row in &mut rows {
                row.ranks[col] = match row.values[col] {
                    Some(v) if v == best => Rank::Best,
                    Some(v) if v == second => Rank::Second,
                    _ => Rank::None,
                };
            }
        }
    }
    Ok(ComparisonTable { columns, rows })
}

impl ComparisonTable {
    /// `method,<col>,<col>_rank,...` with values as fractions to 6 decimals.
    pub fn render_csv(&self) -> String {
        let mut s = String::from("method");
        for c in &self.columns {
            write!(s, ",{c},{c}_rank").unwrap();
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.method);
            for (v, r) in row.values.iter().zip(&row.ranks) {
                match v {
                    Some(v) => write!(s, ",{v:.6},{}", r.tag()).unwrap(),
                    None => s.push_str(",,"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Aligned percentages; `*` marks the best value of a column, `+` the second best.
    pub fn render_text(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut s = format!("{:<name_w$}", "method");
        for c in &self.columns {
            write!(s, " {c:>9}").unwrap();
        }
        s.push('\n');
        for row in &self.rows {
            write!(s, "{:<name_w$}", row.method).unwrap();
            for (v, r) in row.values.iter().zip(&row.ranks) {
                match v {
                    Some(v) => write!(s, " {:>8.2}{}", 100.0 * v, r.marker()).unwrap(),
                    None => write!(s, " {:>9}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }
}
