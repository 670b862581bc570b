//! Class-frequency-exponent re-sampling and the BAGS in-batch "others"
//! undersampler.
//!
//! Class `j` is drawn with probability `n_j^q / sum_i n_i^q`: `q = 1` is
//! instance-balanced (the raw distribution), `q = 1/2` square-root sampling
//! and `q = 0` class-balanced sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng;

/// Per-class sampling probabilities `p_j = n_j^q / sum_i n_i^q`.
pub fn sampling_weights(counts: &[usize], q: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("no classes to sample from"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!(
            "sampling exponent q={q} outside [0, 1]"
        )));
    }
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass { class });
    }
    let raw: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(q)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    pub q: f64,
    pub class_probs: Vec<f64>,
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(counts: &[usize], q: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            q,
            class_probs: sampling_weights(counts, q)?,
            seed,
        })
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// `q = 1` epochs are plain permutations of the data.
    pub fn is_instance_balanced(&self) -> bool {
        self.q == 1.0
    }
}

/// Instance indices for one epoch, in visiting order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochStream {
    indices: Vec<usize>,
}

impl EpochStream {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = &[usize]> {
        self.indices.chunks(batch_size.max(1))
    }
}

/// Builds an epoch over instances with the given `labels`.
///
/// For `q < 1` every draw picks a class from `sampler.class_probs`, then an
/// instance of that class uniformly, with replacement. For `q = 1` the epoch
/// is a seeded permutation of all instances (repeated if `epoch_len > N`).
pub fn make_epoch_stream(
    labels: &[usize],
    sampler: &SamplerSpec,
    epoch_len: usize,
) -> Result<EpochStream> {
    if epoch_len == 0 {
        return Err(Error::invalid("epoch length must be at least 1"));
    }
    if labels.is_empty() {
        return Err(Error::NoInstances);
    }
    let mut r = rng(sampler.seed);
    if sampler.is_instance_balanced() {
        let n = labels.len();
        let mut indices = Vec::with_capacity(epoch_len);
        let mut perm: Vec<usize> = (0..n).collect();
        while indices.len() < epoch_len {
            perm.shuffle(&mut r);
            let take = (epoch_len - indices.len()).min(n);
            indices.extend_from_slice(&perm[..take]);
        }
        return Ok(EpochStream { indices });
    }

    let c = sampler.class_probs.len();
    let mut members = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::invalid(format!(
                "label {l} out of range for {c} classes"
            )));
        }
        members[l].push(i);
    }
    for (j, m) in members.iter().enumerate() {
        if m.is_empty() && sampler.class_probs[j] > 0.0 {
            return Err(Error::EmptyClass { class: j });
        }
    }
    let classes = WeightedIndex::new(&sampler.class_probs)
        .map_err(|e| Error::invalid(format!("class probabilities: {e}")))?;
    let indices = (0..epoch_len)
        .map(|_| {
            let pool = &members[classes.sample(&mut r)];
            pool[r.random_range(0..pool.len())]
        })
        .collect();
    Ok(EpochStream { indices })
}

/// Positions of `batch_labels` kept when training the head of `group`.
///
/// In-group instances are always kept. Out-of-group ("others") instances are
/// subsampled uniformly to at most `ceil(bags_beta * n_k)`, where `n_k` is the
/// in-group count of the batch; a batch without in-group instances keeps up
/// to `ceil(bags_beta)` others. `class_groups[j]` is the group of class `j`.
/// Returned positions are ascending.
pub fn bags_filter_batch(
    batch_labels: &[usize],
    group: u8,
    class_groups: &[u8],
    bags_beta: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(bags_beta.is_finite() && bags_beta > 0.0) {
        return Err(Error::invalid(format!(
            "bags beta must be > 0, got {bags_beta}"
        )));
    }
    let mut kept = Vec::with_capacity(batch_labels.len());
    let mut others = Vec::new();
    for (pos, &l) in batch_labels.iter().enumerate() {
        let g = *class_groups
            .get(l)
            .ok_or_else(|| Error::invalid(format!("label {l} has no group")))?;
        if g == group {
            kept.push(pos);
        } else {
            others.push(pos);
        }
    }
    let quota = if kept.is_empty() {
        bags_beta.ceil()
    } else {
        (bags_beta * kept.len() as f64).ceil()
    };
    let quota = (quota as usize).min(others.len());
    if quota == others.len() {
        kept.extend(others);
    } else {
        let mut r = rng(seed);
        kept.extend(
            index::sample(&mut r, others.len(), quota)
                .into_iter()
                .map(|i| others[i]),
        );
    }
    kept.sort_unstable();
    Ok(kept)
}
