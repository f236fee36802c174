//! Transducer loss over a `T x (U+1) x L` logit lattice.
//!
//! The forward variable `alpha(t, u)` is the log-probability of reaching node
//! `(t, u)` having emitted `y_1..y_u`; the backward variable `beta(t, u)` is
//! the log-probability of finishing from `(t, u)`, including the final blank
//! out of `(T-1, U)`. The gradient with respect to a logit `s(t, u, k)` is
//!
//! ```text
//! dL/ds(t,u,k) = p(t,u,k) * occ(t,u) - [k = blank] * flow_blank(t,u) - [k = y_{u+1}] * flow_label(t,u)
//! ```
//!
//! where `occ` is the posterior occupancy of the node and the flows are the
//! posterior probabilities of the blank and label transitions leaving it.
//!
//! When the lattice carries a label map, the label axis holds only the
//! sampled vocabulary and the softmax normaliser runs over it alone.

use crate::error::{Error, Result};
use crate::numerics::{log_add, log_softmax_into, log_sum_exp_unchecked, LOG_ZERO};

/// Target label sequence `y_1..y_U` with its blank id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSeq {
    labels: Vec<usize>,
    blank_id: usize,
}

impl TargetSeq {
    pub fn new(labels: Vec<usize>, blank_id: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l == blank_id) {
            return Err(Error::BlankInTarget { label });
        }
        Ok(TargetSeq { labels, blank_id })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unnormalised joint outputs `s(t, u, l)`, row-major over `(t, u, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLattice {
    frames: usize,
    target_len: usize,
    labels: usize,
    data: Vec<f64>,
    label_map: Option<Vec<usize>>,
}

impl LogitLattice {
    /// `label_map[l]` is the vocabulary id of compact label index `l`; `None`
    /// means the label axis is the full vocabulary.
    pub fn new(
        frames: usize,
        target_len: usize,
        labels: usize,
        data: Vec<f64>,
        label_map: Option<Vec<usize>>,
    ) -> Result<Self> {
        if labels == 0 {
            return Err(Error::Shape("label axis is empty".into()));
        }
        let expected = frames * (target_len + 1) * labels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "lattice data has {} entries, expected {frames}x{}x{labels} = {expected}",
                data.len(),
                target_len + 1
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("lattice entry {i} is not finite")));
        }
        if let Some(map) = &label_map {
            if map.len() != labels {
                return Err(Error::Shape(format!(
                    "label map has {} entries for a label axis of {labels}",
                    map.len()
                )));
            }
            let mut sorted = map.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Shape("label map is not injective".into()));
            }
        }
        Ok(LogitLattice {
            frames,
            target_len,
            labels,
            data,
            label_map,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn label_map(&self) -> Option<&[usize]> {
        self.label_map.as_deref()
    }

    #[inline]
    pub fn offset(&self, t: usize, u: usize) -> usize {
        (t * (self.target_len + 1) + u) * self.labels
    }

    /// Logits of node `(t, u)`.
    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        let o = self.offset(t, u);
        &self.data[o..o + self.labels]
    }

    /// Compact index of a vocabulary id.
    pub fn compact_index(&self, vocab_id: usize) -> Option<usize> {
        match &self.label_map {
            Some(map) => map.iter().position(|&v| v == vocab_id),
            None => (vocab_id < self.labels).then_some(vocab_id),
        }
    }

    /// Copy of this lattice restricted to the given vocabulary ids, in that
    /// order. Only valid on a full-vocabulary lattice.
    pub fn gather(&self, ids: &[usize]) -> Result<LogitLattice> {
        if self.label_map.is_some() {
            return Err(Error::Invalid("gather from an already sampled lattice".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.labels) {
            return Err(Error::LabelOutOfRange {
                label: id,
                vocab_size: self.labels,
            });
        }
        let nodes = self.frames * (self.target_len + 1);
        let mut data = Vec::with_capacity(nodes * ids.len());
        for n in 0..nodes {
            let row = &self.data[n * self.labels..(n + 1) * self.labels];
            data.extend(ids.iter().map(|&id| row[id]));
        }
        LogitLattice::new(
            self.frames,
            self.target_len,
            ids.len(),
            data,
            Some(ids.to_vec()),
        )
    }
}

/// Loss value and its gradient, laid out like the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Compact indices of blank and of each target label.
fn resolve_labels(lattice: &LogitLattice, target: &TargetSeq) -> Result<(usize, Vec<usize>)> {
    if lattice.frames == 0 {
        return Err(Error::NoFrames);
    }
    if lattice.target_len != target.len() {
        return Err(Error::Shape(format!(
            "lattice U axis is {} but the target has {} labels",
            lattice.target_len + 1,
            target.len()
        )));
    }
    let blank = lattice
        .compact_index(target.blank_id())
        .ok_or(Error::LabelNotInLattice {
            label: target.blank_id(),
        })?;
    if lattice.label_map.is_some() && blank != 0 {
        return Err(Error::Shape(format!(
            "blank must sit at compact index 0, found at {blank}"
        )));
    }
    let ys = target
        .labels()
        .iter()
        .map(|&y| {
            lattice
                .compact_index(y)
                .ok_or(Error::LabelNotInLattice { label: y })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((blank, ys))
}

/// Negative log-likelihood of `target` under the lattice, with the exact
/// gradient with respect to every logit.
pub fn transducer_loss(lattice: &LogitLattice, target: &TargetSeq) -> Result<LossResult> {
    let (blank, ys) = resolve_labels(lattice, target)?;
    let frames = lattice.frames;
    let big_u = lattice.target_len;
    let width = big_u + 1;
    let labels = lattice.labels;
    let idx = |t: usize, u: usize| t * width + u;

    // Per-node log-softmax; kept for the gradient.
    let mut logp = vec![0.0; lattice.data.len()];
    for n in 0..frames * width {
        let o = n * labels;
        log_softmax_into(&lattice.data[o..o + labels], &mut logp[o..o + labels]);
    }
    let lp_blank = |t: usize, u: usize| logp[idx(t, u) * labels + blank];
    let lp_label = |t: usize, u: usize| logp[idx(t, u) * labels + ys[u]];

    let mut alpha = vec![LOG_ZERO; frames * width];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..width {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = LOG_ZERO;
            if t > 0 {
                a = alpha[idx(t - 1, u)] + lp_blank(t - 1, u);
            }
            if u > 0 {
                a = log_add(a, alpha[idx(t, u - 1)] + lp_label(t, u - 1));
            }
            alpha[idx(t, u)] = a;
        }
    }
    let log_likelihood = alpha[idx(frames - 1, big_u)] + lp_blank(frames - 1, big_u);

    let mut beta = vec![LOG_ZERO; frames * width];
    for t in (0..frames).rev() {
        for u in (0..width).rev() {
            let via_blank = if t + 1 < frames {
                beta[idx(t + 1, u)]
            } else if u == big_u {
                0.0
            } else {
                LOG_ZERO
            };
            let mut b = via_blank + lp_blank(t, u);
            if u < big_u {
                b = log_add(b, beta[idx(t, u + 1)] + lp_label(t, u));
            }
            beta[idx(t, u)] = b;
        }
    }

    let mut grad = vec![0.0; lattice.data.len()];
    for t in 0..frames {
        for u in 0..width {
            let a = alpha[idx(t, u)];
            let occ = (a + beta[idx(t, u)] - log_likelihood).exp();
            let o = idx(t, u) * labels;
            let g = &mut grad[o..o + labels];
            for (gk, &lp) in g.iter_mut().zip(&logp[o..o + labels]) {
                *gk = lp.exp() * occ;
            }
            let next_blank = if t + 1 < frames {
                beta[idx(t + 1, u)]
            } else if u == big_u {
                0.0
            } else {
                LOG_ZERO
            };
            g[blank] -= (a + lp_blank(t, u) + next_blank - log_likelihood).exp();
            if u < big_u {
                g[ys[u]] -= (a + lp_label(t, u) + beta[idx(t, u + 1)] - log_likelihood).exp();
            }
        }
    }

    Ok(LossResult {
        loss: -log_likelihood,
        grad,
    })
}

/// Largest `T + U` accepted by [`transducer_loss_bruteforce`].
pub const BRUTEFORCE_MAX_STEPS: usize = 16;

/// Reference loss by explicit enumeration of every alignment path.
pub fn transducer_loss_bruteforce(lattice: &LogitLattice, target: &TargetSeq) -> Result<f64> {
    let (blank, ys) = resolve_labels(lattice, target)?;
    if lattice.frames + lattice.target_len > BRUTEFORCE_MAX_STEPS {
        return Err(Error::TooLarge(format!(
            "T + U = {} exceeds {BRUTEFORCE_MAX_STEPS}",
            lattice.frames + lattice.target_len
        )));
    }
    let mut path_scores = Vec::new();
    for_each_alignment(lattice.frames, lattice.target_len, &mut |moves| {
        let (mut t, mut u) = (0, 0);
        let mut score = 0.0;
        for &is_label in moves {
            let node = lattice.node(t, u);
            let norm = log_sum_exp_unchecked(node);
            if is_label {
                score += node[ys[u]] - norm;
                u += 1;
            } else {
                score += node[blank] - norm;
                t += 1;
            }
        }
        path_scores.push(score);
    });
    Ok(-log_sum_exp_unchecked(&path_scores))
}

/// Calls `visit` with every move sequence of `frames` blanks and
/// `target_len` labels whose last move is a blank (`true` = label move).
pub fn for_each_alignment(frames: usize, target_len: usize, visit: &mut dyn FnMut(&[bool])) {
    fn rec(
        blanks_left: usize,
        labels_left: usize,
        moves: &mut Vec<bool>,
        visit: &mut dyn FnMut(&[bool]),
    ) {
        if blanks_left == 1 && labels_left == 0 {
            moves.push(false);
            visit(moves);
            moves.pop();
            return;
        }
        if labels_left > 0 {
            moves.push(true);
            rec(blanks_left, labels_left - 1, moves, visit);
            moves.pop();
        }
        if blanks_left > 1 {
            moves.push(false);
            rec(blanks_left - 1, labels_left, moves, visit);
            moves.pop();
        }
    }
    if frames == 0 {
        return;
    }
    let mut moves = Vec::with_capacity(frames + target_len);
    rec(frames, target_len, &mut moves, visit);
}

/// Denominator floor used by [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference check of the analytic gradient, returning the
/// largest relative error over all logits.
pub fn grad_check(lattice: &LogitLattice, target: &TargetSeq, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon {epsilon} must be positive")));
    }
    let analytic = transducer_loss(lattice, target)?.grad;
    let mut probe = lattice.clone();
    let mut worst = 0.0f64;
    for i in 0..lattice.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + epsilon;
        let up = transducer_loss(&probe, target)?.loss;
        probe.data[i] = orig - epsilon;
        let down = transducer_loss(&probe, target)?.loss;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn random_lattice(rng: &mut SeededRng, t: usize, u: usize, v: usize) -> LogitLattice {
        let data = (0..t * (u + 1) * v).map(|_| rng.open01() * 6.0 - 3.0).collect();
        LogitLattice::new(t, u, v, data, None).unwrap()
    }

    fn random_target(rng: &mut SeededRng, u: usize, v: usize) -> TargetSeq {
        let labels = (0..u).map(|_| 1 + (rng.open01() * (v - 1) as f64) as usize).collect();
        TargetSeq::new(labels, 0).unwrap()
    }

    fn binomial(n: usize, k: usize) -> usize {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn single_forced_blank() {
        let lattice = LogitLattice::new(1, 0, 3, vec![0.3, -1.0, 2.0], None).unwrap();
        let target = TargetSeq::new(vec![], 0).unwrap();
        let res = transducer_loss(&lattice, &target).unwrap();
        let p = crate::numerics::softmax(&[0.3, -1.0, 2.0]).unwrap();
        assert!((res.loss + p[0].ln()).abs() < 1e-14);
        let bf = transducer_loss_bruteforce(&lattice, &target).unwrap();
        assert!((bf - res.loss).abs() < 1e-14);
    }

    #[test]
    fn uniform_two_by_one_is_ln4() {
        let lattice = LogitLattice::new(2, 1, 2, vec![0.0; 8], None).unwrap();
        let target = TargetSeq::new(vec![1], 0).unwrap();
        let res = transducer_loss(&lattice, &target).unwrap();
        assert!((res.loss - 4f64.ln()).abs() < 1e-12);
        let bf = transducer_loss_bruteforce(&lattice, &target).unwrap();
        assert!((bf - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_count_is_binomial() {
        for t in 1..=5 {
            for u in 0..=5 {
                let mut count = 0;
                for_each_alignment(t, u, &mut |moves| {
                    assert_eq!(moves.len(), t + u);
                    assert!(!moves[moves.len() - 1]);
                    count += 1;
                });
                assert_eq!(count, binomial(t + u - 1, u), "T={t} U={u}");
            }
        }
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = SeededRng::new(3, 0);
        for _ in 0..100 {
            let t = 1 + (rng.open01() * 4.0) as usize;
            let u = (rng.open01() * 4.0) as usize;
            let v = 2 + (rng.open01() * 4.0) as usize;
            let lattice = random_lattice(&mut rng, t, u, v);
            let target = random_target(&mut rng, u, v);
            let dp = transducer_loss(&lattice, &target).unwrap().loss;
            let bf = transducer_loss_bruteforce(&lattice, &target).unwrap();
            assert!(relative_error(dp, bf) <= 1e-9, "{dp} vs {bf}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(4, 0);
        for _ in 0..30 {
            let t = 1 + (rng.open01() * 3.0) as usize;
            let u = (rng.open01() * 3.0) as usize;
            let v = 2 + (rng.open01() * 3.0) as usize;
            let lattice = random_lattice(&mut rng, t, u, v);
            let target = random_target(&mut rng, u, v);
            let err = grad_check(&lattice, &target, 1e-5).unwrap();
            assert!(err <= 1e-4, "grad error {err}");
        }
    }

    #[test]
    fn gradient_sums_to_zero_per_node() {
        let mut rng = SeededRng::new(5, 0);
        let lattice = random_lattice(&mut rng, 4, 3, 5);
        let target = random_target(&mut rng, 3, 5);
        let res = transducer_loss(&lattice, &target).unwrap();
        for node in res.grad.chunks(5) {
            assert!(node.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_lattice_with_full_map_equals_full() {
        let mut rng = SeededRng::new(6, 0);
        let lattice = random_lattice(&mut rng, 3, 2, 5);
        let target = random_target(&mut rng, 2, 5);
        let full = transducer_loss(&lattice, &target).unwrap();
        let sampled = lattice.gather(&[0, 3, 1, 4, 2]).unwrap();
        let res = transducer_loss(&sampled, &target).unwrap();
        assert!(relative_error(full.loss, res.loss) <= 1e-12);
    }

    #[test]
    fn sampled_loss_lower_bounds_full() {
        let mut rng = SeededRng::new(7, 0);
        let lattice = random_lattice(&mut rng, 3, 2, 6);
        let target = TargetSeq::new(vec![2, 5], 0).unwrap();
        let full = transducer_loss(&lattice, &target).unwrap().loss;
        let sampled = transducer_loss(&lattice.gather(&[0, 2, 5, 3]).unwrap(), &target)
            .unwrap()
            .loss;
        assert!(sampled <= full);
    }

    #[test]
    fn errors() {
        let target = TargetSeq::new(vec![1], 0).unwrap();
        let empty = LogitLattice::new(0, 1, 2, vec![], None).unwrap();
        assert!(matches!(transducer_loss(&empty, &target), Err(Error::NoFrames)));

        let lattice = LogitLattice::new(2, 0, 2, vec![0.0; 4], None).unwrap();
        assert!(matches!(transducer_loss(&lattice, &target), Err(Error::Shape(_))));

        let lattice = LogitLattice::new(1, 1, 2, vec![0.0; 4], Some(vec![0, 3])).unwrap();
        assert!(matches!(
            transducer_loss(&lattice, &target),
            Err(Error::LabelNotInLattice { label: 1 })
        ));

        let lattice = LogitLattice::new(1, 1, 2, vec![0.0; 4], Some(vec![1, 0])).unwrap();
        assert!(matches!(transducer_loss(&lattice, &target), Err(Error::Shape(_))));

        assert!(TargetSeq::new(vec![1, 0], 0).is_err());
        assert!(LogitLattice::new(1, 0, 2, vec![0.0, f64::NAN], None).is_err());
        assert!(LogitLattice::new(1, 0, 2, vec![0.0; 2], Some(vec![0, 0])).is_err());

        let big = LogitLattice::new(10, 7, 2, vec![0.0; 160], None).unwrap();
        let t7 = TargetSeq::new(vec![1; 7], 0).unwrap();
        assert!(matches!(transducer_loss_bruteforce(&big, &t7), Err(Error::TooLarge(_))));
    }

    #[test]
    fn relabeling_non_target_ids_is_invariant() {
        let mut rng = SeededRng::new(8, 0);
        let lattice = random_lattice(&mut rng, 3, 2, 6);
        let target = TargetSeq::new(vec![1, 2], 0).unwrap();
        // Swap vocabulary ids 4 and 5 (neither blank nor target).
        let swapped = lattice.gather(&[0, 1, 2, 3, 5, 4]).unwrap();
        let swapped = LogitLattice::new(3, 2, 6, swapped.data().to_vec(), None).unwrap();
        let a = transducer_loss(&lattice, &target).unwrap().loss;
        let b = transducer_loss(&swapped, &target).unwrap().loss;
        assert!(relative_error(a, b) <= 1e-12);
    }
}
