//! Multi-branch long-tail heads.
//!
//! Classes are grouped by training count with half-open limits
//! `s_l <= n_j < s_h`, by default `[0,10) [10,100) [100,1000) [1000,inf)`.
//!
//! *Balanced Group Softmax* gives every group its own softmax head with one
//! extra "others" output (always the last), trains each head on batches whose
//! out-of-group instances are undersampled, and at inference drops the
//! "others" probabilities, maps the rest back to class order and, when a
//! background group `G0` exists, multiplies them by the foreground
//! probability.
//!
//! The *square-root sampling branch* keeps the stage-1 head `f_i` and adds a
//! square-root-sampled head `f_sqrt`; the final score takes the coordinates
//! of head-group classes from `softmax(f_i)` and every other coordinate from
//! `softmax(f_sqrt)`. The result does not sum to one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassStats, Dataset};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, softmax, softmax_into, LossSpec};
use crate::matrix::Matrix;
use crate::model::{run_schedule, EpochLog, Linear, TrainedModel};
use crate::optim::{optimizer_step, OptimSpec, OptimState};
use crate::seed::derive_seed;

const BAGS_TAG: u64 = 0xBA65;

/// Count range `[lower, upper)` of one group; `upper = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLimit {
    pub lower: usize,
    pub upper: Option<usize>,
}

impl GroupLimit {
    pub fn contains(&self, n: usize) -> bool {
        n >= self.lower && self.upper.is_none_or(|u| n < u)
    }
}

pub fn default_group_limits() -> Vec<GroupLimit> {
    vec![
        GroupLimit {
            lower: 0,
            upper: Some(10),
        },
        GroupLimit {
            lower: 10,
            upper: Some(100),
        },
        GroupLimit {
            lower: 100,
            upper: Some(1000),
        },
        GroupLimit {
            lower: 1000,
            upper: None,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayoutKind {
    /// No background group; every class is placed by its count.
    Ssb,
    /// Grouped heads, optionally with a background group `G0`.
    Bags { background_group: bool },
}

/// Assignment of classes to count groups. Group `0` is the background group
/// (empty unless `has_background_group`), groups `1..=K` follow `limits`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLayout {
    pub limits: Vec<GroupLimit>,
    pub has_background_group: bool,
    pub background_class: Option<usize>,
    /// Group index of every class.
    pub class_group: Vec<u8>,
    /// Class lists per group, ascending, indexed `0..=K`.
    pub groups: Vec<Vec<usize>>,
}

impl GroupLayout {
    pub fn num_groups(&self) -> usize {
        self.limits.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_group.len()
    }

    /// Index of the unbounded (head) group.
    pub fn head_group(&self) -> u8 {
        self.limits.len() as u8
    }

    /// Position of `class` inside its group's head.
    pub fn local_index(&self, class: usize) -> usize {
        let g = self.class_group[class] as usize;
        self.groups[g]
            .binary_search(&class)
            .expect("class listed in its group")
    }

    pub fn ssb_mask(&self) -> SsbMask {
        let head = self.head_group();
        SsbMask {
            head: self.class_group.iter().map(|&g| g == head).collect(),
        }
    }
}

pub fn build_group_layout(
    stats: &ClassStats,
    background_class: Option<usize>,
    kind: LayoutKind,
) -> Result<GroupLayout> {
    build_group_layout_with_limits(stats, background_class, kind, &default_group_limits())
}

/// Assigns each class to the group whose limits contain its training count.
/// Limits must start at 0, be contiguous and end unbounded.
pub fn build_group_layout_with_limits(
    stats: &ClassStats,
    background_class: Option<usize>,
    kind: LayoutKind,
    limits: &[GroupLimit],
) -> Result<GroupLayout> {
    validate_limits(limits)?;
    let c = stats.num_classes();
    if let Some(b) = background_class {
        if b >= c {
            return Err(Error::invalid(format!(
                "background class {b} out of range for {c} classes"
            )));
        }
    }
    let use_g0 = match kind {
        LayoutKind::Ssb => false,
        LayoutKind::Bags { background_group } => background_group,
    };
    if use_g0 && background_class.is_none() {
        return Err(Error::invalid(
            "background group requested but no background class is designated",
        ));
    }

    let mut class_group = Vec::with_capacity(c);
    let mut groups = vec![Vec::new(); limits.len() + 1];
    for (j, &n) in stats.counts.iter().enumerate() {
        let g = if use_g0 && background_class == Some(j) {
            0
        } else {
            1 + limits
                .iter()
                .position(|l| l.contains(n))
                .expect("contiguous limits cover every count")
        };
        class_group.push(g as u8);
        groups[g].push(j);
    }
    Ok(GroupLayout {
        limits: limits.to_vec(),
        has_background_group: use_g0,
        background_class: if use_g0 { background_class } else { None },
        class_group,
        groups,
    })
}

fn validate_limits(limits: &[GroupLimit]) -> Result<()> {
    if limits.is_empty() || limits.len() > 250 {
        return Err(Error::invalid("between 1 and 250 groups are supported"));
    }
    if limits[0].lower != 0 {
        return Err(Error::invalid("the first group must start at 0"));
    }
    for w in limits.windows(2) {
        match w[0].upper {
            Some(u) if u == w[1].lower && u > w[0].lower => {}
            _ => {
                return Err(Error::invalid(
                    "group limits must be contiguous and increasing",
                ))
            }
        }
    }
    let last = limits.last().expect("non-empty");
    if last.upper.is_some() {
        return Err(Error::invalid("the last group must be unbounded"));
    }
    Ok(())
}

/// Diagonal mask selecting head-group classes; stored as one flag per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsbMask {
    pub head: Vec<bool>,
}

impl SsbMask {
    pub fn len(&self) -> usize {
        self.head.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty()
    }

    pub fn trace(&self) -> usize {
        self.head.iter().filter(|&&h| h).count()
    }

    /// Dense `C x C` form of the mask.
    pub fn to_matrix(&self) -> Matrix {
        let c = self.head.len();
        let mut m = Matrix::zeros(c, c);
        for (a, &h) in self.head.iter().enumerate() {
            if h {
                m.set(a, a, 1.0);
            }
        }
        m
    }
}

/// `p_r[a] = p_i[a]` for head-group classes, `p_sqrt[a]` otherwise.
pub fn ssb_aggregate(p_i: &[f64], p_sqrt: &[f64], mask: &SsbMask) -> Result<Vec<f64>> {
    if p_i.len() != mask.len() || p_sqrt.len() != mask.len() {
        return Err(Error::Shape(format!(
            "instance {} / sqrt {} / mask {} lengths differ",
            p_i.len(),
            p_sqrt.len(),
            mask.len()
        )));
    }
    Ok(mask
        .head
        .iter()
        .zip(p_i.iter().zip(p_sqrt))
        .map(|(&h, (&a, &b))| if h { a } else { b })
        .collect())
}

/// One head per non-empty group; `heads[0]` is the background head when the
/// layout has one (outputs: background, foreground).
#[derive(Clone, Debug, PartialEq)]
pub struct BagsHeads {
    pub layout: GroupLayout,
    pub heads: Vec<Option<Linear>>,
}

impl BagsHeads {
    pub(crate) fn score_row(&self, h: &[f64]) -> Result<Vec<f64>> {
        let logits: Vec<Option<Vec<f64>>> = self
            .heads
            .iter()
            .map(|head| {
                head.as_ref().map(|head| {
                    let mut z = vec![0.0; head.out_dim];
                    head.forward_row(h, &mut z);
                    z
                })
            })
            .collect();
        bags_infer(&self.layout, &logits)
    }
}

/// Softmax within every group, then [`bags_remap`].
/// `group_logits[k]` holds the logits of group `k`'s head, or `None` if it has none.
pub fn bags_infer(layout: &GroupLayout, group_logits: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    let probs = group_logits
        .iter()
        .map(|z| z.as_deref().map(softmax).transpose())
        .collect::<Result<Vec<_>>>()?;
    bags_remap(layout, &probs)
}

/// Maps per-group probabilities back to class order, dropping "others".
pub fn bags_remap(layout: &GroupLayout, group_probs: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    if group_probs.len() != layout.groups.len() {
        return Err(Error::Shape(format!(
            "{} group outputs for {} groups",
            group_probs.len(),
            layout.groups.len()
        )));
    }
    let foreground = if layout.has_background_group {
        let p0 = group_probs[0]
            .as_ref()
            .ok_or_else(|| Error::invalid("background group has no head output"))?;
        if p0.len() != 2 {
            return Err(Error::Shape(format!(
                "background head has {} outputs, expected 2",
                p0.len()
            )));
        }
        Some((p0[0], p0[1]))
    } else {
        None
    };

    let mut scores = vec![0.0; layout.num_classes()];
    for (k, members) in layout.groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if k == 0 {
            let (bg, _) = foreground.expect("G0 members imply a background group");
            for &j in members {
                scores[j] = bg;
            }
            continue;
        }
        let p = group_probs[k]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("group {k} has classes but no head output")))?;
        if p.len() != members.len() + 1 {
            return Err(Error::Shape(format!(
                "group {k}: {} outputs for {} classes plus others",
                p.len(),
                members.len()
            )));
        }
        let scale = foreground.map_or(1.0, |(_, fg)| fg);
        for (local, &j) in members.iter().enumerate() {
            scores[j] = p[local] * scale;
        }
    }
    Ok(scores)
}

/// Trains grouped heads on top of a stage-1 model's frozen backbone.
pub fn bags_train_heads(
    model: &TrainedModel,
    dataset: &Dataset,
    layout: &GroupLayout,
    optim: &OptimSpec,
    bags_beta: f64,
) -> Result<BagsHeads> {
    let h = model.backbone.forward(dataset.features())?;
    Ok(train_bags_on_features(&h, dataset.labels(), layout, optim, bags_beta)?.0)
}

/// Trains one head per non-empty group on fixed features.
///
/// All heads see the same instance-sampled batch sequence; each filters it
/// with its own seed, so heads train independently (here, in parallel) and
/// the result does not depend on scheduling.
pub fn train_bags_on_features(
    features: &Matrix,
    labels: &[usize],
    layout: &GroupLayout,
    optim: &OptimSpec,
    bags_beta: f64,
) -> Result<(BagsHeads, Vec<EpochLog>)> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows, {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let c = layout.num_classes();
    let mut counts = vec![0usize; c];
    for &l in labels {
        if l >= c {
            return Err(Error::invalid(format!(
                "label {l} out of range for {c} classes"
            )));
        }
        counts[l] += 1;
    }
    for (k, members) in layout.groups.iter().enumerate() {
        if members.is_empty() && (k > 0 || layout.has_background_group) {
            log::warn!("group G{k} has no classes; its head is skipped");
        }
    }

    let trained: Vec<Option<(Linear, Vec<EpochLog>)>> = (0..layout.groups.len())
        .into_par_iter()
        .map(|k| {
            if layout.groups[k].is_empty() {
                return Ok(None);
            }
            train_group_head(features, labels, &counts, layout, k, optim, bags_beta).map(Some)
        })
        .collect::<Result<_>>()?;

    let mut log: Vec<EpochLog> = Vec::new();
    let mut n_heads = 0.0;
    for (_, head_log) in trained.iter().flatten() {
        n_heads += 1.0;
        if log.is_empty() {
            log = head_log
                .iter()
                .map(|e| EpochLog { loss: 0.0, ..*e })
                .collect();
        }
        for (acc, e) in log.iter_mut().zip(head_log) {
            acc.loss += e.loss;
        }
    }
    for e in &mut log {
        e.loss /= n_heads;
    }
    let heads = trained.into_iter().map(|t| t.map(|(h, _)| h)).collect();
    Ok((
        BagsHeads {
            layout: layout.clone(),
            heads,
        },
        log,
    ))
}

fn train_group_head(
    features: &Matrix,
    labels: &[usize],
    counts: &[usize],
    layout: &GroupLayout,
    k: usize,
    optim: &OptimSpec,
    bags_beta: f64,
) -> Result<(Linear, Vec<EpochLog>)> {
    let head_seed = derive_seed(derive_seed(optim.seed, BAGS_TAG), k as u64);
    let members = &layout.groups[k];
    let others = members.len();
    // Background head: [background, foreground]; "others" is index 1.
    let out_dim = if k == 0 { 2 } else { others + 1 };
    let target = |class: usize| -> usize {
        if layout.class_group[class] as usize == k {
            if k == 0 {
                0
            } else {
                layout.local_index(class)
            }
        } else if k == 0 {
            1
        } else {
            others
        }
    };

    let mut head = Linear::init(out_dim, features.cols(), head_seed);
    let mut state = OptimState::new(&[head.weight.len(), head.bias.len()]);
    let loss = LossSpec::cross_entropy();
    let local_counts = vec![1; out_dim];
    let log = run_schedule(labels, counts, 1.0, optim, |batch, lr, step| {
        let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let kept: Vec<usize> = if k == 0 {
            (0..batch.len()).collect()
        } else {
            crate::sampling::bags_filter_batch(
                &batch_labels,
                k as u8,
                &layout.class_group,
                bags_beta,
                derive_seed(head_seed, step as u64),
            )?
        };
        let rows: Vec<usize> = kept.iter().map(|&p| batch[p]).collect();
        let y: Vec<usize> = kept.iter().map(|&p| target(batch_labels[p])).collect();
        let x = features.select_rows(&rows);
        let z = head.forward_unchecked(&x);
        let value = batch_loss(&z, &y, &local_counts, &loss)?;
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

/// Softmax of a head's logits for one feature row.
pub fn head_softmax(head: &Linear, h: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; head.out_dim];
    head.forward_row(h, &mut z);
    let mut p = vec![0.0; head.out_dim];
    softmax_into(&z, &mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(counts: &[usize]) -> ClassStats {
        ClassStats::from_counts(counts.to_vec()).unwrap()
    }

    #[test]
    fn ssb_layout_from_counts() {
        let l = build_group_layout(&stats(&[5000, 500, 50, 5]), None, LayoutKind::Ssb).unwrap();
        assert_eq!(l.class_group, vec![4, 3, 2, 1]);
        let q = l.ssb_mask();
        assert_eq!(q.trace(), 1);
        assert_eq!(q.head, vec![true, false, false, false]);
    }

    #[test]
    fn mask_extremes() {
        let l = build_group_layout(&stats(&[1000, 4000, 99_999]), None, LayoutKind::Ssb).unwrap();
        assert_eq!(l.ssb_mask().to_matrix(), Matrix::identity(3));
        let l = build_group_layout(&stats(&[999, 1, 10]), None, LayoutKind::Ssb).unwrap();
        assert_eq!(l.ssb_mask().to_matrix(), Matrix::zeros(3, 3));
    }

    #[test]
    fn ssb_ignores_background_designation() {
        let l = build_group_layout(&stats(&[2000, 20]), Some(0), LayoutKind::Ssb).unwrap();
        assert!(!l.has_background_group);
        assert_eq!(l.class_group, vec![4, 2]);
        assert!(l.groups[0].is_empty());
    }

    #[test]
    fn bags_background_group() {
        let l = build_group_layout(
            &stats(&[2000, 20, 3]),
            Some(0),
            LayoutKind::Bags {
                background_group: true,
            },
        )
        .unwrap();
        assert_eq!(l.class_group, vec![0, 2, 1]);
        assert_eq!(l.groups[0], vec![0]);
        assert!(build_group_layout(
            &stats(&[5, 5]),
            None,
            LayoutKind::Bags {
                background_group: true
            }
        )
        .is_err());
    }

    #[test]
    fn ssb_aggregate_selects_coordinates() {
        let mask = SsbMask {
            head: vec![true, false],
        };
        let p = ssb_aggregate(&[0.7, 0.3], &[0.4, 0.6], &mask).unwrap();
        assert_eq!(p, vec![0.7, 0.6]);
        assert!((p.iter().sum::<f64>() - 1.3).abs() < 1e-15);
        let all = SsbMask {
            head: vec![true, true],
        };
        assert_eq!(
            ssb_aggregate(&[0.7, 0.3], &[0.4, 0.6], &all).unwrap(),
            vec![0.7, 0.3]
        );
        let none = SsbMask {
            head: vec![false, false],
        };
        assert_eq!(
            ssb_aggregate(&[0.7, 0.3], &[0.4, 0.6], &none).unwrap(),
            vec![0.4, 0.6]
        );
        assert!(ssb_aggregate(&[1.0], &[0.4, 0.6], &none).is_err());
    }

    fn one_group_layout(counts: &[usize]) -> GroupLayout {
        build_group_layout_with_limits(
            &stats(counts),
            None,
            LayoutKind::Bags {
                background_group: false,
            },
            &[GroupLimit {
                lower: 0,
                upper: None,
            }],
        )
        .unwrap()
    }

    #[test]
    fn bags_remap_drops_others() {
        let l = one_group_layout(&[3, 7]);
        let s = bags_remap(&l, &[None, Some(vec![0.5, 0.3, 0.2])]).unwrap();
        assert_eq!(s, vec![0.5, 0.3]);
    }

    #[test]
    fn bags_foreground_rescaling() {
        let l = build_group_layout_with_limits(
            &stats(&[50, 3, 7]),
            Some(0),
            LayoutKind::Bags {
                background_group: true,
            },
            &[GroupLimit {
                lower: 0,
                upper: None,
            }],
        )
        .unwrap();
        let s = bags_remap(&l, &[Some(vec![0.2, 0.8]), Some(vec![0.5, 0.3, 0.2])]).unwrap();
        assert!((s[1] - 0.4).abs() < 1e-15 && (s[2] - 0.24).abs() < 1e-15);
        assert!((s[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn bags_infer_applies_group_softmax() {
        let l = one_group_layout(&[3, 7]);
        let logits = vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let s = bags_infer(&l, &[None, Some(logits)]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_limits_rejected() {
        let s = stats(&[1, 2]);
        let kind = LayoutKind::Ssb;
        let gap = [
            GroupLimit {
                lower: 0,
                upper: Some(10),
            },
            GroupLimit {
                lower: 20,
                upper: None,
            },
        ];
        assert!(build_group_layout_with_limits(&s, None, kind, &gap).is_err());
        let bounded = [GroupLimit {
            lower: 0,
            upper: Some(10),
        }];
        assert!(build_group_layout_with_limits(&s, None, kind, &bounded).is_err());
        assert!(build_group_layout_with_limits(&s, None, kind, &[]).is_err());
    }
}
