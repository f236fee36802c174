//! CTC loss with analytic gradient, a brute-force oracle, and per-frame
//! posteriors.
//!
//! Used both as the joint CTC loss on the final encoder output and as the
//! intermediate CTC loss on the middle layer; the two differ only in which
//! logits are passed in.

use crate::error::{Error, Result};
use crate::numerics::{log_add, log_softmax_into, softmax_in_place, LOG_ZERO};
use crate::rnnt_loss::{LossResult, TargetSeq};

/// Per-frame unnormalised scores, `T x |V|` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcLogits {
    frames: usize,
    vocab: usize,
    data: Vec<f64>,
}

impl CtcLogits {
    pub fn new(frames: usize, vocab: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::NoFrames);
        }
        if vocab == 0 || data.len() != frames * vocab {
            return Err(Error::Shape(format!(
                "CTC logits have {} entries, expected {frames}x{vocab}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("CTC logit {i} is not finite")));
        }
        Ok(CtcLogits { frames, vocab, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

/// Per-frame label distributions, `T x |V|`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosterior {
    frames: usize,
    vocab: usize,
    probs: Vec<f64>,
}

impl CtcPosterior {
    /// Validates that every row is a distribution (within 1e-10).
    pub fn new(frames: usize, vocab: usize, probs: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::NoFrames);
        }
        if vocab == 0 || probs.len() != frames * vocab {
            return Err(Error::Shape(format!(
                "posterior has {} entries, expected {frames}x{vocab}",
                probs.len()
            )));
        }
        for (t, row) in probs.chunks(vocab).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Invalid(format!(
                    "posterior frame {t} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(CtcPosterior { frames, vocab, probs })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.probs[t * self.vocab..(t + 1) * self.vocab]
    }

    /// Arithmetic mean of the frame distributions.
    pub fn frame_average(&self) -> Vec<f64> {
        let mut avg = vec![0.0; self.vocab];
        for row in self.probs.chunks(self.vocab) {
            for (a, p) in avg.iter_mut().zip(row) {
                *a += p;
            }
        }
        let inv = 1.0 / self.frames as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        avg
    }

    /// Stacks the frames of several posteriors over the same vocabulary.
    pub fn concat(parts: &[&CtcPosterior]) -> Result<CtcPosterior> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("no posteriors to concatenate".into()))?;
        if parts.iter().any(|p| p.vocab != first.vocab) {
            return Err(Error::Shape("posteriors disagree on vocabulary size".into()));
        }
        Ok(CtcPosterior {
            frames: parts.iter().map(|p| p.frames).sum(),
            vocab: first.vocab,
            probs: parts.iter().flat_map(|p| p.probs.iter().copied()).collect(),
        })
    }
}

/// Row-wise softmax of the logits.
pub fn ctc_posterior(logits: &CtcLogits) -> CtcPosterior {
    let mut probs = logits.data.clone();
    for row in probs.chunks_mut(logits.vocab) {
        softmax_in_place(row);
    }
    CtcPosterior {
        frames: logits.frames,
        vocab: logits.vocab,
        probs,
    }
}

/// Fewest frames that can emit `labels`: one per label plus a separating
/// blank between equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(logits: &CtcLogits, target: &TargetSeq) -> Result<()> {
    for &l in target.labels().iter().chain(std::iter::once(&target.blank_id())) {
        if l >= logits.vocab {
            return Err(Error::LabelOutOfRange {
                label: l,
                vocab_size: logits.vocab,
            });
        }
    }
    let required = min_frames(target.labels());
    if required > logits.frames {
        return Err(Error::Unreachable {
            target_len: target.len(),
            required,
            frames: logits.frames,
        });
    }
    Ok(())
}

/// Negative log-probability of `target` summed over all CTC paths, with its
/// gradient with respect to the logits.
pub fn ctc_loss(logits: &CtcLogits, target: &TargetSeq) -> Result<LossResult> {
    check_target(logits, target)?;
    let frames = logits.frames;
    let vocab = logits.vocab;
    let blank = target.blank_id();

    // Extended sequence: blank, y1, blank, y2, ..., yU, blank.
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target.labels() {
        ext.push(y);
        ext.push(blank);
    }
    let width = ext.len();
    let can_skip: Vec<bool> = (0..width)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();

    let mut logp = vec![0.0; frames * vocab];
    for t in 0..frames {
        let o = t * vocab;
        log_softmax_into(&logits.data[o..o + vocab], &mut logp[o..o + vocab]);
    }
    let lp = |t: usize, s: usize| logp[t * vocab + ext[s]];

    let mut alpha = vec![LOG_ZERO; frames * width];
    alpha[0] = lp(0, 0);
    if width > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        for s in 0..width {
            let prev = &alpha[(t - 1) * width..t * width];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip[s] {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * width + s] = a + lp(t, s);
        }
    }
    let last = (frames - 1) * width;
    let log_likelihood = if width > 1 {
        log_add(alpha[last + width - 1], alpha[last + width - 2])
    } else {
        alpha[last]
    };

    let mut beta = vec![LOG_ZERO; frames * width];
    beta[last + width - 1] = lp(frames - 1, width - 1);
    if width > 1 {
        beta[last + width - 2] = lp(frames - 1, width - 2);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..width {
            let next = &beta[(t + 1) * width..(t + 2) * width];
            let mut b = next[s];
            if s + 1 < width {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < width && can_skip[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            beta[t * width + s] = b + lp(t, s);
        }
    }

    let mut grad: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
    for t in 0..frames {
        for s in 0..width {
            let occ = alpha[t * width + s] + beta[t * width + s] - lp(t, s) - log_likelihood;
            grad[t * vocab + ext[s]] -= occ.exp();
        }
    }

    Ok(LossResult {
        loss: -log_likelihood,
        grad,
    })
}

/// Largest `|V|^T` accepted by [`ctc_loss_bruteforce`].
pub const BRUTEFORCE_MAX_STRINGS: u64 = 1_000_000;

/// Collapses repeats, then drops blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Reference loss by enumerating every frame-label string.
pub fn ctc_loss_bruteforce(logits: &CtcLogits, target: &TargetSeq) -> Result<f64> {
    let strings = (logits.vocab as u64).checked_pow(logits.frames as u32);
    if strings.is_none_or(|n| n > BRUTEFORCE_MAX_STRINGS) {
        return Err(Error::TooLarge(format!(
            "{}^{} frame strings exceed {BRUTEFORCE_MAX_STRINGS}",
            logits.vocab, logits.frames
        )));
    }
    for &l in target.labels() {
        if l >= logits.vocab {
            return Err(Error::LabelOutOfRange {
                label: l,
                vocab_size: logits.vocab,
            });
        }
    }
    let vocab = logits.vocab;
    let mut logp = vec![0.0; logits.data.len()];
    for t in 0..logits.frames {
        let o = t * vocab;
        log_softmax_into(&logits.data[o..o + vocab], &mut logp[o..o + vocab]);
    }
    let mut path = vec![0usize; logits.frames];
    let mut total = LOG_ZERO;
    loop {
        if collapse(&path, target.blank_id()) == target.labels() {
            let score: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| logp[t * vocab + k])
                .sum();
            total = log_add(total, score);
        }
        // Odometer increment over |V|^T strings.
        let mut pos = 0;
        loop {
            if pos == path.len() {
                return Ok(-total);
            }
            path[pos] += 1;
            if path[pos] < vocab {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}
