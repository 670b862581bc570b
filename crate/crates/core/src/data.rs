//! Datasets, synthetic long-tail generation, embedding files and per-class
//! count statistics.
//!
//! Class counts drive everything downstream: re-sampling probabilities,
//! class-balanced weights, BAGS/SSB group membership and the evaluation bins
//! all derive from the training-partition counts computed here.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng};

/// Feature rows with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
    background_class: Option<usize>,
    /// Per-row detector-crop flag from embedding files. Not used in training.
    crop: Vec<Option<bool>>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
        background_class: Option<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        Self::with_crop_flags(
            features,
            labels,
            class_names,
            background_class,
            vec![None; n],
        )
    }

    pub fn with_crop_flags(
        features: Matrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
        background_class: Option<usize>,
        crop: Vec<Option<bool>>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::NoInstances);
        }
        if features.rows() != labels.len() || crop.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows, {} labels, {} crop flags",
                features.rows(),
                labels.len(),
                crop.len()
            )));
        }
        if features.cols() == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        let c = class_names.len();
        if let Some(i) = labels.iter().position(|&l| l >= c) {
            return Err(Error::invalid(format!(
                "instance {i}: label {} out of range for {c} classes",
                labels[i]
            )));
        }
        if let Some(b) = background_class {
            if b >= c {
                return Err(Error::invalid(format!(
                    "background class {b} out of range for {c} classes"
                )));
            }
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            class_names,
            background_class,
            crop,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn background_class(&self) -> Option<usize> {
        self.background_class
    }

    pub fn crop_flags(&self) -> &[Option<bool>] {
        &self.crop
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Instances per class (may contain zeros).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::with_crop_flags(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_names.clone(),
            self.background_class,
            indices.iter().map(|&i| self.crop[i]).collect(),
        )
    }

    /// SHA-256 over shape, class names, labels and the exact feature bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.feed_digest(&mut h);
        hex::encode(h.finalize())
    }

    pub(crate) fn feed_digest(&self, h: &mut Sha256) {
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        for name in &self.class_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        h.update(
            self.background_class
                .map_or(u64::MAX, |b| b as u64)
                .to_le_bytes(),
        );
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in self.features.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
}

/// Count-decade index shared by evaluation bins and head groups:
/// 1 for `[1, 10)`, 2 for `[10, 100)`, 3 for `[100, 1000)`, 4 for `>= 1000`.
pub fn decade(count: usize) -> u8 {
    match count {
        0..=9 => 1,
        10..=99 => 2,
        100..=999 => 3,
        _ => 4,
    }
}

/// Training-partition class counts with their bin and group assignments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub counts: Vec<usize>,
    /// Evaluation bin per class, in `1..=4`.
    pub bins: Vec<u8>,
    /// Head group per class, in `1..=4`.
    pub groups: Vec<u8>,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::NoInstances);
        }
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass { class });
        }
        let bins: Vec<u8> = counts.iter().map(|&n| decade(n)).collect();
        let groups = bins.clone();
        Ok(Self {
            counts,
            bins,
            groups,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

pub fn compute_class_stats(dataset: &Dataset) -> Result<ClassStats> {
    ClassStats::from_counts(dataset.class_counts())
}

/// Parameters of the synthetic long-tail generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Instances of the largest class.
    pub head_count: usize,
    /// Largest over smallest class count.
    pub imbalance_factor: f64,
    /// Typical distance between class centroids.
    pub class_separation: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            feature_dim: 16,
            head_count: 1000,
            imbalance_factor: 200.0,
            class_separation: 4.5,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least 2 classes"));
        }
        if self.feature_dim < 1 {
            return Err(Error::invalid("feature_dim must be at least 1"));
        }
        if !(self.imbalance_factor.is_finite() && self.imbalance_factor > 1.0) {
            return Err(Error::invalid("imbalance_factor must be finite and > 1"));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::invalid("class_separation must be > 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::invalid("noise_sigma must be > 0"));
        }
        if (self.head_count as f64) / self.imbalance_factor < 1.0 {
            return Err(Error::invalid(format!(
                "head_count {} / imbalance_factor {} leaves the smallest class below one instance",
                self.head_count, self.imbalance_factor
            )));
        }
        Ok(())
    }

    /// Geometric count profile `round(head * factor^(-j / (C - 1)))`.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let last = (self.num_classes - 1) as f64;
        let counts: Vec<usize> = (0..self.num_classes)
            .map(|j| {
                let n = self.head_count as f64 * self.imbalance_factor.powf(-(j as f64) / last);
                n.round() as usize
            })
            .collect();
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!(
                "class {class} would have zero instances"
            )));
        }
        Ok(counts)
    }

    /// Class centroids on a sphere of radius `separation / sqrt(2)`, so the
    /// distance between two nearly orthogonal centroids is about `separation`.
    pub fn centroids(&self) -> Matrix {
        let mut r = rng(derive_seed(self.seed, 0xC3));
        let d = self.feature_dim;
        let radius = self.class_separation / std::f64::consts::SQRT_2;
        let mut m = Matrix::zeros(self.num_classes, d);
        for j in 0..self.num_classes {
            let row = m.row_mut(j);
            loop {
                for v in row.iter_mut() {
                    *v = r.sample(StandardNormal);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    row.iter_mut().for_each(|v| *v *= radius / norm);
                    break;
                }
            }
        }
        m
    }

    fn class_names(&self) -> Vec<String> {
        let width = (self.num_classes - 1).to_string().len().max(2);
        (0..self.num_classes)
            .map(|j| format!("class_{j:0width$}"))
            .collect()
    }

    fn sample(&self, counts: &[usize], stream: u64) -> Result<Dataset> {
        let centroids = self.centroids();
        let mut r = rng(derive_seed(self.seed, stream));
        let total: usize = counts.iter().sum();
        let d = self.feature_dim;
        let mut data = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        for (j, &n) in counts.iter().enumerate() {
            let c = centroids.row(j);
            for _ in 0..n {
                for &mu in c {
                    let z: f64 = r.sample(StandardNormal);
                    data.push(mu + self.noise_sigma * z);
                }
                labels.push(j);
            }
        }
        Dataset::new(
            Matrix::from_vec(total, d, data)?,
            labels,
            self.class_names(),
            None,
        )
    }
}

const TRAIN_STREAM: u64 = 1;

/// Draws the long-tail dataset described by `spec`. Rows are grouped by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let counts = spec.class_counts()?;
    spec.sample(&counts, TRAIN_STREAM)
}

/// Fresh draws from the same class-conditional distributions as
/// [`generate_synthetic`], with caller-chosen per-class counts.
/// `stream` must differ from the training stream (1) to get independent rows.
pub fn generate_heldout(spec: &SyntheticSpec, per_class: &[usize], stream: u64) -> Result<Dataset> {
    spec.validate()?;
    if per_class.len() != spec.num_classes {
        return Err(Error::Shape(format!(
            "{} held-out counts for {} classes",
            per_class.len(),
            spec.num_classes
        )));
    }
    if stream == TRAIN_STREAM {
        return Err(Error::invalid(
            "held-out stream collides with the training stream",
        ));
    }
    spec.sample(per_class, stream)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub stratified: bool,
    /// Floor on per-class held-out draws for synthetic sources.
    #[serde(default = "default_min_heldout")]
    pub min_heldout_per_class: usize,
}

fn default_true() -> bool {
    true
}

fn default_min_heldout() -> usize {
    20
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
            seed: 0,
            stratified: true,
            min_heldout_per_class: default_min_heldout(),
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::invalid(format!(
                    "{name} must lie in (0, 1), got {f}"
                )));
            }
        }
        let sum = self.train_fraction + self.val_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Partitions an existing dataset. Stratified splits keep every class with
/// at least 3 instances present in all three partitions; smaller classes go
/// entirely to training.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let mut r = rng(derive_seed(spec.seed, 0x5717));
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    if spec.stratified {
        let mut by_class = vec![Vec::new(); dataset.num_classes()];
        for (i, &l) in dataset.labels().iter().enumerate() {
            by_class[l].push(i);
        }
        for mut idx in by_class {
            idx.shuffle(&mut r);
            let n = idx.len();
            if n < 3 {
                train.extend(idx);
                continue;
            }
            let n_test = ((n as f64 * spec.test_fraction).round() as usize).clamp(1, n - 2);
            let n_val = ((n as f64 * spec.val_fraction).round() as usize).clamp(1, n - 1 - n_test);
            test.extend_from_slice(&idx[..n_test]);
            val.extend_from_slice(&idx[n_test..n_test + n_val]);
            train.extend_from_slice(&idx[n_test + n_val..]);
        }
    } else {
        let mut idx: Vec<usize> = (0..dataset.len()).collect();
        idx.shuffle(&mut r);
        let n = idx.len();
        let n_test = (n as f64 * spec.test_fraction).round() as usize;
        let n_val = (n as f64 * spec.val_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test.min(n)]);
        val.extend_from_slice(&idx[n_test.min(n)..(n_test + n_val).min(n)]);
        train.extend_from_slice(&idx[(n_test + n_val).min(n)..]);
    }
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }
    Ok(Split {
        train: dataset.subset(&train)?,
        val: dataset.subset(&val)?,
        test: dataset.subset(&test)?,
    })
}

/// Synthetic partitions whose training set has exactly the generator's count
/// profile. Validation and test rows are fresh draws, sized per class as
/// `max(round(n_j * fraction / train_fraction), min_heldout_per_class)`.
pub fn synthetic_split(spec: &SyntheticSpec, split: &SplitSpec) -> Result<Split> {
    split.validate()?;
    let train = generate_synthetic(spec)?;
    let counts = train.class_counts();
    let heldout = |fraction: f64| -> Vec<usize> {
        counts
            .iter()
            .map(|&n| {
                ((n as f64 * fraction / split.train_fraction).round() as usize)
                    .max(split.min_heldout_per_class)
                    .max(1)
            })
            .collect()
    };
    let val = generate_heldout(spec, &heldout(split.val_fraction), 2)?;
    let test = generate_heldout(spec, &heldout(split.test_fraction), 3)?;
    Ok(Split { train, val, test })
}

/// Reads an embedding file.
///
/// ```text
/// C=<int> D=<int> [background=<int>]
/// name_0,name_1,...
/// <label>,<f_1>,...,<f_D>[,crop=<0|1>]
/// ```
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_embeddings(&text, path)
}

pub fn parse_embeddings(text: &str, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    let (hl, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing header line `C=<int> D=<int>`".into()))?;
    let (mut c, mut d, mut background) = (None, None, None);
    for tok in header.split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| err(hl, format!("malformed header token `{tok}`")))?;
        let value: usize = value
            .parse()
            .map_err(|_| err(hl, format!("header value `{value}` is not an integer")))?;
        match key {
            "C" => c = Some(value),
            "D" => d = Some(value),
            "background" => background = Some(value),
            _ => return Err(err(hl, format!("unknown header key `{key}`"))),
        }
    }
    let c = c.ok_or_else(|| err(hl, "header lacks `C=`".into()))?;
    let d = d.ok_or_else(|| err(hl, "header lacks `D=`".into()))?;
    if c == 0 || d == 0 {
        return Err(err(hl, "C and D must be positive".into()));
    }

    let (nl, names_line) = lines
        .next()
        .ok_or_else(|| err(2, "missing class-name line".into()))?;
    let class_names: Vec<String> = names_line
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if class_names.len() != c {
        return Err(err(
            nl,
            format!("{} class names for C={c}", class_names.len()),
        ));
    }
    if let Some(b) = background {
        if b >= c {
            return Err(err(
                hl,
                format!("background class {b} out of range for C={c}"),
            ));
        }
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut crop = Vec::new();
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let mut crop_flag = None;
        if let Some(last) = fields.last() {
            if let Some(v) = last.strip_prefix("crop=") {
                crop_flag = Some(match v {
                    "0" => false,
                    "1" => true,
                    _ => return Err(err(ln, format!("crop flag must be 0 or 1, got `{v}`"))),
                });
                fields.pop();
            }
        }
        if fields.len() != d + 1 {
            return Err(err(
                ln,
                format!(
                    "expected label plus {d} features, found {} fields",
                    fields.len()
                ),
            ));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| err(ln, format!("label `{}` is not a class index", fields[0])))?;
        if label >= c {
            return Err(err(ln, format!("label {label} out of range for C={c}")));
        }
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| err(ln, format!("feature `{f}` is not a number")))?;
            if !v.is_finite() {
                return Err(err(ln, format!("non-finite feature `{f}`")));
            }
            data.push(v);
        }
        labels.push(label);
        crop.push(crop_flag);
    }
    if labels.is_empty() {
        return Err(Error::NoInstances);
    }
    let n = labels.len();
    Dataset::with_crop_flags(
        Matrix::from_vec(n, d, data)?,
        labels,
        class_names,
        background,
        crop,
    )
}

/// Writes `dataset` in the embedding format. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_embeddings(dataset: &Dataset, mut out: impl Write) -> Result<()> {
    let mut header = format!("C={} D={}", dataset.num_classes(), dataset.dim());
    if let Some(b) = dataset.background_class() {
        write!(header, " background={b}").expect("write to String");
    }
    writeln!(out, "{header}")?;
    writeln!(out, "{}", dataset.class_names().join(","))?;
    let mut line = String::new();
    for (i, row) in dataset.features().iter_rows().enumerate() {
        line.clear();
        write!(line, "{}", dataset.labels()[i]).expect("write to String");
        for v in row {
            write!(line, ",{v:?}").expect("write to String");
        }
        if let Some(flag) = dataset.crop_flags()[i] {
            write!(line, ",crop={}", u8::from(flag)).expect("write to String");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn save_embeddings(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_embeddings(dataset, &mut w)?;
    w.flush()?;
    Ok(())
}
