//! The classifier under study and its two-stage training.
//!
//! A model is an optional ReLU MLP backbone followed by one or more linear
//! softmax heads. Stage 1 trains backbone and head end-to-end on the raw
//! (instance-sampled) distribution. Stage 2 freezes the backbone and fits
//! fresh heads with a balancing method on top of the frozen features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_class_stats, ClassStats, Dataset};
use crate::error::{Error, Result};
use crate::heads::{self, BagsHeads, GroupLayout, LayoutKind, SsbMask};
use crate::losses::{batch_loss, LossSpec};
use crate::matrix::Matrix;
use crate::optim::{lr_at, optimizer_step, OptimSpec, OptimState};
use crate::sampling::{make_epoch_stream, SamplerSpec};
use crate::seed::{derive_seed, rng};

const HEAD_INIT_TAG: u64 = 0x4EAD;
const BACKBONE_INIT_TAG: u64 = 0xBAC6;
const EPOCH_TAG: u64 = 0xE90C;

/// Fully connected layer, `y = W x + b`, with `W` stored row-major as
/// `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Option<Matrix>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            out_dim,
            in_dim,
            weight: vec![0.0; out_dim * in_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Weights uniform in `[-a, a]` with `a = 1 / sqrt(in_dim)`, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let a = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..out_dim * in_dim)
            .map(|_| r.random_range(-a..=a))
            .collect();
        Self {
            out_dim,
            in_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *y = self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub(crate) fn forward_unchecked(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), self.out_dim);
        for i in 0..x.rows() {
            self.forward_row(x.row(i), y.row_mut(i));
        }
        y
    }

    pub(crate) fn backward(&self, x: &Matrix, grad_out: &Matrix, input_grad: bool) -> LinearGrads {
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.out_dim];
        let mut gx = input_grad.then(|| Matrix::zeros(x.rows(), self.in_dim));
        for i in 0..x.rows() {
            let xi = x.row(i);
            let go = grad_out.row(i);
            for (o, &g) in go.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = &mut gw[o * self.in_dim..(o + 1) * self.in_dim];
                for (w, &xv) in row.iter_mut().zip(xi) {
                    *w += g * xv;
                }
                if let Some(gx) = gx.as_mut() {
                    let w = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                    for (d, &wv) in gx.row_mut(i).iter_mut().zip(w) {
                        *d += g * wv;
                    }
                }
            }
        }
        LinearGrads {
            weight: gw,
            bias: gb,
            input: gx,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden layer widths; empty means the features feed the head directly.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[usize]) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
        }
    }
}

/// ReLU MLP feature extractor. Every layer is followed by a rectifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub input_dim: usize,
    pub layers: Vec<Linear>,
    pub frozen: bool,
}

impl Backbone {
    pub fn identity(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: Vec::new(),
            frozen: false,
        }
    }

    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut layers = Vec::with_capacity(arch.hidden.len());
        let mut fan_in = arch.input_dim;
        for (l, &width) in arch.hidden.iter().enumerate() {
            layers.push(Linear::init(width, fan_in, derive_seed(seed, l as u64)));
            fan_in = width;
        }
        Self {
            input_dim: arch.input_dim,
            layers,
            frozen: false,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            hidden: self.layers.iter().map(|l| l.out_dim).collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "backbone expects {} features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_unchecked(&h);
            relu_in_place(&mut h);
        }
        Ok(h)
    }

    /// Activations `[x, a_1, ..., a_L]` kept for backpropagation.
    fn forward_cached(&self, x: Matrix) -> Vec<Matrix> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let mut h = layer.forward_unchecked(acts.last().expect("non-empty"));
            relu_in_place(&mut h);
            acts.push(h);
        }
        acts
    }

    /// Gradients per layer, in layer order, given d(loss)/d(output).
    fn backward(&self, acts: &[Matrix], mut grad: Matrix) -> Vec<LinearGrads> {
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            // a_l = relu(z_l); a_l > 0 exactly where z_l > 0.
            for (g, &a) in grad.as_mut_slice().iter_mut().zip(acts[l + 1].as_slice()) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            let g = layer.backward(&acts[l], &grad, l > 0);
            grad = g.input.clone().unwrap_or_else(|| Matrix::zeros(0, 0));
            out.push(g);
        }
        out.reverse();
        out
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    SqrtSamp,
    CbFocal,
    Bags,
    Ssb,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::SqrtSamp,
        Method::CbFocal,
        Method::Bags,
        Method::Ssb,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::SqrtSamp => "sqrt_samp",
            Method::CbFocal => "cb_focal",
            Method::Bags => "bags",
            Method::Ssb => "ssb",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

/// Hyperparameters of the balancing methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceParams {
    pub focal_gamma: f64,
    pub cb_beta: f64,
    /// "Others" undersampling factor for grouped heads.
    pub bags_beta: f64,
}

impl Default for BalanceParams {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            cb_beta: 0.9,
            bags_beta: 8.0,
        }
    }
}

impl BalanceParams {
    pub fn cb_focal_loss(&self) -> LossSpec {
        LossSpec::cb_focal(self.focal_gamma, self.cb_beta)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Heads {
    Single(Linear),
    /// Instance-sampled head `f_i` and square-root-sampled head `f_sqrt`.
    Ssb {
        instance: Linear,
        sqrt: Linear,
        layout: GroupLayout,
    },
    Bags(BagsHeads),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub backbone: Backbone,
    pub heads: Heads,
    pub log: Vec<EpochLog>,
    pub stats: ClassStats,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub scores: Matrix,
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        self.stats.num_classes()
    }

    /// Logits of every head, in head order (`f_i` before `f_sqrt`; BAGS
    /// heads by group index).
    pub fn forward_heads(&self, features: &Matrix) -> Result<Vec<Matrix>> {
        let h = self.backbone.forward(features)?;
        Ok(match &self.heads {
            Heads::Single(head) => vec![head.forward(&h)?],
            Heads::Ssb { instance, sqrt, .. } => vec![instance.forward(&h)?, sqrt.forward(&h)?],
            Heads::Bags(b) => b
                .heads
                .iter()
                .flatten()
                .map(|head| head.forward(&h))
                .collect::<Result<_>>()?,
        })
    }

    /// Logits of a single-head model.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        match &self.heads {
            Heads::Single(_) => Ok(self.forward_heads(features)?.remove(0)),
            _ => Err(Error::invalid(format!(
                "{} model has several heads; use forward_heads or scores",
                self.method
            ))),
        }
    }

    /// Final per-class score vectors: softmax for single-head models, the
    /// remapped group probabilities for BAGS, the masked merge for SSB.
    pub fn scores(&self, features: &Matrix) -> Result<Matrix> {
        let h = self.backbone.forward(features)?;
        let c = self.num_classes();
        let rows: Vec<Vec<f64>> = (0..h.rows())
            .into_par_iter()
            .map(|i| self.score_row(h.row(i)))
            .collect::<Result<_>>()?;
        let mut out = Matrix::zeros(h.rows(), c);
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r);
        }
        Ok(out)
    }

    fn score_row(&self, h: &[f64]) -> Result<Vec<f64>> {
        let c = self.num_classes();
        let head_probs = |head: &Linear| heads::head_softmax(head, h);
        match &self.heads {
            Heads::Single(head) => {
                if head.out_dim != c {
                    return Err(Error::Shape(format!(
                        "head has {} outputs for {c} classes",
                        head.out_dim
                    )));
                }
                Ok(head_probs(head))
            }
            Heads::Ssb {
                instance,
                sqrt,
                layout,
            } => heads::ssb_aggregate(&head_probs(instance), &head_probs(sqrt), &layout.ssb_mask()),
            Heads::Bags(b) => b.score_row(h),
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = j;
        }
    }
    best
}

pub fn predict(model: &TrainedModel, features: &Matrix) -> Result<Prediction> {
    let scores = model.scores(features)?;
    let classes = scores.iter_rows().map(argmax).collect();
    Ok(Prediction { classes, scores })
}

/// Epoch/batch driver shared by every trainer.
///
/// Each epoch is `N` draws from the class-exponent sampler with exponent
/// `q`, seeded from `optim.seed` and the epoch index; the learning rate
/// follows [`lr_at`] per step. `step` receives the batch's instance indices,
/// the learning rate and the global step, and returns the batch loss.
pub(crate) fn run_schedule<F>(
    labels: &[usize],
    counts: &[usize],
    q: f64,
    optim: &OptimSpec,
    mut step: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&[usize], f64, usize) -> Result<f64>,
{
    optim.validate()?;
    if optim.epochs == 0 {
        return Ok(Vec::new());
    }
    let n = labels.len();
    let sampler = SamplerSpec::new(counts, q, optim.seed)?;
    let steps_per_epoch = n.div_ceil(optim.batch_size);
    let total = optim.epochs * steps_per_epoch;
    let warmup = optim.warmup_epochs * steps_per_epoch;
    let mut log = Vec::with_capacity(optim.epochs);
    let mut global = 0;
    for epoch in 0..optim.epochs {
        let seed = derive_seed(derive_seed(optim.seed, EPOCH_TAG), epoch as u64);
        let stream = make_epoch_stream(labels, &sampler.with_seed(seed), n)?;
        let mut sum = 0.0;
        let mut lr = 0.0;
        let mut batches = 0;
        for batch in stream.batches(optim.batch_size) {
            lr = lr_at(global, total, warmup, optim.lr_init);
            let loss = match step(batch, lr, global) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            sum += loss;
            batches += 1;
            global += 1;
        }
        log.push(EpochLog {
            epoch,
            loss: sum / batches as f64,
            lr,
        });
    }
    Ok(log)
}

/// Fits a freshly initialized linear softmax head on fixed `features`.
///
/// This is exactly what stage 2 does on top of a frozen backbone; with an
/// identity backbone it is the whole model.
pub fn train_linear_head(
    features: &Matrix,
    labels: &[usize],
    counts: &[usize],
    q: f64,
    loss: &LossSpec,
    optim: &OptimSpec,
) -> Result<(Linear, Vec<EpochLog>)> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows, {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut head = Linear::init(
        counts.len(),
        features.cols(),
        derive_seed(optim.seed, HEAD_INIT_TAG),
    );
    let mut state = OptimState::new(&[head.weight.len(), head.bias.len()]);
    let log = run_schedule(labels, counts, q, optim, |batch, lr, _| {
        let x = features.select_rows(batch);
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let z = head.forward_unchecked(&x);
        let value = batch_loss(&z, &y, counts, loss)?;
        let g = head.backward(&x, &value.grad_logits, false);
        optimizer_step(
            &mut [&mut head.weight, &mut head.bias],
            &[&g.weight, &g.bias],
            &mut state,
            optim,
            lr,
        )?;
        Ok(value.total)
    })?;
    Ok((head, log))
}

/// Trains backbone and a single head jointly under sampling exponent `q`.
pub fn train_end_to_end(
    dataset: &Dataset,
    arch: &Architecture,
    optim: &OptimSpec,
    loss: &LossSpec,
    q: f64,
    method: Method,
) -> Result<TrainedModel> {
    if arch.input_dim != dataset.dim() {
        return Err(Error::Shape(format!(
            "architecture expects {} features, dataset has {}",
            arch.input_dim,
            dataset.dim()
        )));
    }
    let stats = compute_class_stats(dataset)?;
    let counts = stats.counts.clone();
    let mut backbone = Backbone::init(arch, derive_seed(optim.seed, BACKBONE_INIT_TAG));
    let mut head = Linear::init(
        counts.len(),
        backbone.output_dim(),
        derive_seed(optim.seed, HEAD_INIT_TAG),
    );
    let mut sizes: Vec<usize> = backbone
        .layers
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    sizes.extend([head.weight.len(), head.bias.len()]);
    let mut state = OptimState::new(&sizes);
    let features = dataset.features();
    let labels = dataset.labels();

    let log = run_schedule(labels, &counts, q, optim, |batch, lr, _| {
        let acts = backbone.forward_cached(features.select_rows(batch));
        let h = acts.last().expect("non-empty");
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let z = head.forward_unchecked(h);
        let value = batch_loss(&z, &y, &counts, loss)?;
        let hg = head.backward(h, &value.grad_logits, !backbone.layers.is_empty());
        let bg = match hg.input {
            Some(ref gin) => backbone.backward(&acts, gin.clone()),
            None => Vec::new(),
        };

        let mut params: Vec<&mut [f64]> = Vec::with_capacity(sizes.len());
        for layer in backbone.layers.iter_mut() {
            params.push(&mut layer.weight);
            params.push(&mut layer.bias);
        }
        params.push(&mut head.weight);
        params.push(&mut head.bias);
        let mut grads: Vec<&[f64]> = Vec::with_capacity(sizes.len());
        for g in &bg {
            grads.push(&g.weight);
            grads.push(&g.bias);
        }
        grads.push(&hg.weight);
        grads.push(&hg.bias);
        optimizer_step(&mut params, &grads, &mut state, optim, lr)?;
        Ok(value.total)
    })?;

    Ok(TrainedModel {
        backbone,
        heads: Heads::Single(head),
        log,
        stats,
        method,
    })
}

/// Stage 1: end-to-end training on the raw distribution (`q = 1`).
pub fn train_stage1(
    dataset: &Dataset,
    arch: &Architecture,
    optim: &OptimSpec,
    loss: &LossSpec,
) -> Result<TrainedModel> {
    train_end_to_end(dataset, arch, optim, loss, 1.0, Method::Baseline)
}

/// Single-stage training with a balancing method applied from scratch.
/// Only the sampling (`sqrt_samp`) and re-weighting (`cb_focal`) methods
/// have a single-stage form.
pub fn train_one_stage(
    dataset: &Dataset,
    arch: &Architecture,
    optim: &OptimSpec,
    method: Method,
    params: &BalanceParams,
) -> Result<TrainedModel> {
    match method {
        Method::SqrtSamp => train_end_to_end(
            dataset,
            arch,
            optim,
            &LossSpec::cross_entropy(),
            0.5,
            method,
        ),
        Method::CbFocal => {
            train_end_to_end(dataset, arch, optim, &params.cb_focal_loss(), 1.0, method)
        }
        other => Err(Error::invalid(format!("{other} has no single-stage form"))),
    }
}

/// Stage 2: freezes the stage-1 backbone and trains new head(s) for `method`.
///
/// - `sqrt_samp`: one fresh head, square-root sampling, cross-entropy.
/// - `cb_focal`: one fresh head, instance sampling, class-balanced focal loss.
/// - `bags`: grouped heads with "others" outputs.
/// - `ssb`: a fresh square-root-sampled head next to the stage-1 head.
pub fn train_stage2(
    model: &TrainedModel,
    dataset: &Dataset,
    method: Method,
    optim: &OptimSpec,
    params: &BalanceParams,
) -> Result<TrainedModel> {
    let Heads::Single(stage1_head) = &model.heads else {
        return Err(Error::invalid("stage 2 needs a single-head stage-1 model"));
    };
    let stats = compute_class_stats(dataset)?;
    if stats.num_classes() != model.num_classes() {
        return Err(Error::Shape(format!(
            "model has {} classes, dataset {}",
            model.num_classes(),
            stats.num_classes()
        )));
    }
    let mut backbone = model.backbone.clone();
    backbone.frozen = true;
    let features = backbone.forward(dataset.features())?;
    let labels = dataset.labels();
    let counts = &stats.counts;

    let (heads, log) = match method {
        Method::SqrtSamp => {
            let (head, log) = train_linear_head(
                &features,
                labels,
                counts,
                0.5,
                &LossSpec::cross_entropy(),
                optim,
            )?;
            (Heads::Single(head), log)
        }
        Method::CbFocal => {
            let (head, log) = train_linear_head(
                &features,
                labels,
                counts,
                1.0,
                &params.cb_focal_loss(),
                optim,
            )?;
            (Heads::Single(head), log)
        }
        Method::Ssb => {
            let (sqrt, log) = train_linear_head(
                &features,
                labels,
                counts,
                0.5,
                &LossSpec::cross_entropy(),
                optim,
            )?;
            let layout =
                heads::build_group_layout(&stats, dataset.background_class(), LayoutKind::Ssb)?;
            (
                Heads::Ssb {
                    instance: stage1_head.clone(),
                    sqrt,
                    layout,
                },
                log,
            )
        }
        Method::Bags => {
            let kind = LayoutKind::Bags {
                background_group: dataset.background_class().is_some(),
            };
            let layout = heads::build_group_layout(&stats, dataset.background_class(), kind)?;
            let (bags, log) =
                heads::train_bags_on_features(&features, labels, &layout, optim, params.bags_beta)?;
            (Heads::Bags(bags), log)
        }
        Method::Baseline => {
            return Err(Error::invalid(
                "baseline is the stage-1 model; it has no stage 2",
            ))
        }
    };
    Ok(TrainedModel {
        backbone,
        heads,
        log,
        stats,
        method,
    })
}

/// Parses a stage-2 method tag and runs [`train_stage2`].
pub fn train_stage2_by_tag(
    model: &TrainedModel,
    dataset: &Dataset,
    tag: &str,
    optim: &OptimSpec,
    params: &BalanceParams,
) -> Result<TrainedModel> {
    let method: Method = tag.parse()?;
    train_stage2(model, dataset, method, optim, params)
}

/// The SSB mask of a model, when it has one.
pub fn ssb_mask(model: &TrainedModel) -> Option<SsbMask> {
    match &model.heads {
        Heads::Ssb { layout, .. } => Some(layout.ssb_mask()),
        _ => None,
    }
}
