//! Sampled vocabularies: positive set, negative set, and the compact label
//! mapping used by sampled-softmax lattices.
//!
//! Two strategies are supported. Batched sampling pools the positives of a
//! whole minibatch and shares one negative set; example-wise sampling builds
//! one vocabulary per example, each from its own distribution.

use std::collections::BTreeMap;

use crate::ctc::CtcPosterior;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, sample_without_replacement, SeededRng};
use crate::rnnt_loss::TargetSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingStrategy {
    Batched,
    ExampleWise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionSource {
    Uniform,
    JointCtc,
    IntermediateCtc,
    SelfConditionedCtc,
}

/// Distribution over the vocabulary used to draw negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    weights: Vec<f64>,
    source: DistributionSource,
}

impl SamplingDistribution {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn source(&self) -> DistributionSource {
        self.source
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.len()
    }
}

/// The label subset one lattice is computed over.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledVocab {
    positive: Vec<usize>,
    negative: Vec<usize>,
    ids: Vec<usize>,
    to_compact: BTreeMap<usize, usize>,
    strategy: SamplingStrategy,
}

impl SampledVocab {
    /// `positive` must start with blank. Compact order is blank first, then
    /// every other sampled id ascending.
    pub fn new(
        positive: Vec<usize>,
        negative: Vec<usize>,
        strategy: SamplingStrategy,
    ) -> Result<Self> {
        let blank = *positive
            .first()
            .ok_or_else(|| Error::Invalid("positive set must contain blank".into()))?;
        let mut rest: Vec<usize> = positive[1..].iter().chain(&negative).copied().collect();
        rest.sort_unstable();
        if rest.windows(2).any(|w| w[0] == w[1]) || rest.contains(&blank) {
            return Err(Error::Invalid(
                "positive and negative sets overlap or repeat an id".into(),
            ));
        }
        let mut ids = Vec::with_capacity(rest.len() + 1);
        ids.push(blank);
        ids.extend(rest);
        let to_compact = ids.iter().enumerate().map(|(c, &id)| (id, c)).collect();
        Ok(SampledVocab {
            positive,
            negative,
            ids,
            to_compact,
            strategy,
        })
    }

    /// Vocabulary covering every id in `0..vocab_size`.
    pub fn full(vocab_size: usize, blank_id: usize, strategy: SamplingStrategy) -> Result<Self> {
        let negative = (0..vocab_size).filter(|&v| v != blank_id).collect();
        SampledVocab::new(vec![blank_id], negative, strategy)
    }

    pub fn positive(&self) -> &[usize] {
        &self.positive
    }

    pub fn negative(&self) -> &[usize] {
        &self.negative
    }

    /// Vocabulary id of each compact index.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn to_compact(&self, vocab_id: usize) -> Option<usize> {
        self.to_compact.get(&vocab_id).copied()
    }

    pub fn contains(&self, vocab_id: usize) -> bool {
        self.to_compact.contains_key(&vocab_id)
    }

    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy
    }
}

/// Blank followed by the distinct target labels in ascending order.
pub fn build_positive_set<'a>(
    targets: impl IntoIterator<Item = &'a TargetSeq>,
    blank_id: usize,
) -> Vec<usize> {
    let mut labels: Vec<usize> = targets
        .into_iter()
        .flat_map(|t| t.labels().iter().copied())
        .filter(|&l| l != blank_id)
        .collect();
    labels.sort_unstable();
    labels.dedup();
    let mut out = Vec::with_capacity(labels.len() + 1);
    out.push(blank_id);
    out.extend(labels);
    out
}

fn remaining_count(vocab_size: usize, positive: &[usize]) -> Result<usize> {
    let inside = positive.iter().filter(|&&p| p < vocab_size).count();
    if inside >= vocab_size {
        return Err(Error::NoNegatives(vocab_size));
    }
    Ok(vocab_size - inside)
}

/// Equal weight on every label outside `positive`.
pub fn make_uniform_distribution(
    vocab_size: usize,
    positive: &[usize],
) -> Result<SamplingDistribution> {
    let remaining = remaining_count(vocab_size, positive)?;
    let w = 1.0 / remaining as f64;
    let mut weights = vec![w; vocab_size];
    for &p in positive {
        if p < vocab_size {
            weights[p] = 0.0;
        }
    }
    Ok(SamplingDistribution {
        weights,
        source: DistributionSource::Uniform,
    })
}

/// Frame-averaged posterior with `positive` zeroed and renormalised. Falls
/// back to uniform when no mass is left outside the positive set.
pub fn make_ctc_distribution(
    posterior: &CtcPosterior,
    positive: &[usize],
    source: DistributionSource,
) -> Result<SamplingDistribution> {
    let vocab_size = posterior.vocab();
    remaining_count(vocab_size, positive)?;
    let mut weights = posterior.frame_average();
    for &p in positive {
        if p < vocab_size {
            weights[p] = 0.0;
        }
    }
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) || !mass.is_finite() {
        let mut uniform = make_uniform_distribution(vocab_size, positive)?;
        uniform.source = source;
        return Ok(uniform);
    }
    let inv = 1.0 / mass;
    weights.iter_mut().for_each(|w| *w *= inv);
    Ok(SamplingDistribution { weights, source })
}

fn draw(
    positive: Vec<usize>,
    dist: &SamplingDistribution,
    total_size: usize,
    strategy: SamplingStrategy,
    rng: &mut SeededRng,
) -> Result<SampledVocab> {
    let vocab_size = dist.vocab_size();
    if total_size > vocab_size {
        return Err(Error::SampleExceedsVocab {
            total_size,
            vocab_size,
        });
    }
    if total_size < positive.len() {
        return Err(Error::PositiveOverflow {
            total_size,
            positive: positive.len(),
        });
    }
    if let Some(&p) = positive
        .iter()
        .find(|&&p| p >= vocab_size || dist.weights[p] != 0.0)
    {
        return Err(Error::Invalid(format!(
            "sampling distribution puts weight on positive label {p}"
        )));
    }
    let negative = if total_size == positive.len() {
        Vec::new()
    } else {
        sample_without_replacement(&dist.weights, total_size - positive.len(), rng)?
    };
    SampledVocab::new(positive, negative, strategy)
}

/// One vocabulary for a single example.
pub fn sample_example(
    target: &TargetSeq,
    dist: &SamplingDistribution,
    total_size: usize,
    rng: &mut SeededRng,
) -> Result<SampledVocab> {
    let positive = build_positive_set([target], target.blank_id());
    draw(positive, dist, total_size, SamplingStrategy::ExampleWise, rng)
}

/// One vocabulary shared by a minibatch; positives pooled over all targets.
pub fn sample_batched(
    targets: &[TargetSeq],
    blank_id: usize,
    dist: &SamplingDistribution,
    total_size: usize,
    rng: &mut SeededRng,
) -> Result<SampledVocab> {
    let positive = build_positive_set(targets, blank_id);
    draw(positive, dist, total_size, SamplingStrategy::Batched, rng)
}

/// Independent vocabularies per example, each from its own distribution and
/// its own random stream (`example_rng(seed, epoch, first_index + i)`).
pub fn sample_example_wise(
    targets: &[TargetSeq],
    dists: &[SamplingDistribution],
    total_size: usize,
    seed: u64,
    epoch: u64,
    first_index: u64,
) -> Result<Vec<SampledVocab>> {
    if targets.len() != dists.len() {
        return Err(Error::Shape(format!(
            "{} targets but {} distributions",
            targets.len(),
            dists.len()
        )));
    }
    targets
        .iter()
        .zip(dists)
        .enumerate()
        .map(|(i, (target, dist))| {
            let mut rng = example_rng(seed, epoch, first_index + i as u64);
            sample_example(target, dist, total_size, &mut rng)
        })
        .collect()
}

const EXAMPLE_TAG: u64 = 0x5eed_0001;
const BATCH_TAG: u64 = 0x5eed_0002;

/// Random stream for the example at `index` within `epoch`.
pub fn example_rng(seed: u64, epoch: u64, index: u64) -> SeededRng {
    SeededRng::new(derive_seed(seed, EXAMPLE_TAG, epoch), index)
}

/// Random stream for minibatch `batch` within `epoch`.
pub fn batch_rng(seed: u64, epoch: u64, batch: u64) -> SeededRng {
    SeededRng::new(derive_seed(seed, BATCH_TAG, epoch), batch)
}
