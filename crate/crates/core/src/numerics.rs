//! Log-space arithmetic, softmax and seeded sampling without replacement.
//!
//! Zero probability is represented by IEEE negative infinity ([`LOG_ZERO`]).
//! Every routine here treats it as absorbing: adding it to a finite value
//! yields `LOG_ZERO`, and `log_sum_exp` of an all-`LOG_ZERO` list is
//! `LOG_ZERO` rather than NaN.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Log of zero probability.
pub const LOG_ZERO: f64 = f64::NEG_INFINITY;

/// A probability in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Prob(f64);

impl Prob {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Prob(value))
        } else {
            Err(Error::Invalid(format!("probability {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn ln(self) -> LogProb {
        LogProb(self.0.ln())
    }
}

/// A log-probability, `<= 0`, with `LOG_ZERO` for impossible events.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub const ZERO: LogProb = LogProb(LOG_ZERO);
    pub const ONE: LogProb = LogProb(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if value <= 0.0 {
            Ok(LogProb(value))
        } else {
            Err(Error::Invalid(format!("log-probability {value} is positive")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn exp(self) -> Prob {
        Prob(self.0.exp())
    }
}

impl std::ops::Add for LogProb {
    type Output = LogProb;

    /// Product of the underlying probabilities.
    fn add(self, rhs: LogProb) -> LogProb {
        LogProb(self.0 + rhs.0)
    }
}

/// Deterministic random stream identified by `(seed, stream)`.
///
/// Distinct stream ids under one seed give independent sequences, so
/// per-example streams can be consumed in any order or on any thread.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw from the open interval `(0, 1)`.
    pub fn open01(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gumbel draw.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.open01().ln()).ln()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Mixes a seed with a domain tag and index into a fresh 64-bit seed
/// (splitmix64 finaliser).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(sum_i exp(values[i]))` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(log_sum_exp_unchecked(values))
}

pub(crate) fn log_sum_exp_unchecked(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(LOG_ZERO, f64::max);
    if max == LOG_ZERO {
        return LOG_ZERO;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of a finite logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(i) = logits.iter().position(|v| v.is_nan()) {
        return Err(Error::NotANumber(i));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked softmax over a non-empty slice.
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in values.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax over a non-empty slice, written to `out`. Returns the log
/// normaliser.
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let norm = log_sum_exp_unchecked(logits);
    for (o, &s) in out.iter_mut().zip(logits) {
        *o = s - norm;
    }
    norm
}

/// Draws `k` distinct indices with probability proportional to `weights`
/// (successive sampling without replacement) using Gumbel-top-k.
///
/// One Gumbel variate is consumed per positive-weight index, in index
/// order. The result is sorted ascending. Zero-weight indices are never
/// returned.
pub fn sample_without_replacement(
    weights: &[f64],
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vec<usize>> {
    if let Some(i) = weights.iter().position(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::Invalid(format!(
            "weight {} at index {i} is not a non-negative number",
            weights[i]
        )));
    }
    let support = weights.iter().filter(|&&w| w > 0.0).count();
    if k > support {
        return Err(Error::InsufficientSupport {
            requested: k,
            support,
        });
    }
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| (w.ln() + rng.gumbel(), i))
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn lse_single_and_pair() {
        assert_eq!(log_sum_exp(&[0.7]).unwrap(), 0.7);
        let v = log_sum_exp(&[-3.2, -3.2]).unwrap();
        assert!((v - (-3.2 + 2f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn lse_empty_is_error() {
        assert!(matches!(log_sum_exp(&[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn lse_absorbs_log_zero() {
        assert_eq!(log_sum_exp(&[LOG_ZERO, LOG_ZERO]).unwrap(), LOG_ZERO);
        assert_eq!(log_sum_exp(&[LOG_ZERO, 1.5]).unwrap(), 1.5);
        assert_eq!(log_add(LOG_ZERO, LOG_ZERO), LOG_ZERO);
        assert_eq!(log_add(-2.0, LOG_ZERO), -2.0);
    }

    #[test]
    fn lse_matches_naive_sum() {
        let mut rng = SeededRng::new(11, 0);
        for _ in 0..100 {
            let v: Vec<f64> = (0..8).map(|_| rng.open01() * 20.0 - 10.0).collect();
            let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
            let got = log_sum_exp(&v).unwrap();
            assert!((got - naive).abs() <= 1e-12 * naive.abs().max(1.0), "{got} {naive}");
        }
    }

    #[test]
    fn lse_no_overflow_at_extremes() {
        let v = log_sum_exp(&[1e6, 1e6, -1e6]).unwrap();
        assert!((v - (1e6 + 2f64.ln())).abs() < 1e-6);
        let v = log_sum_exp(&[-1e6, -1e6]).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let p = softmax(&[2.0; 7]).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::NotANumber(1))));
    }

    #[test]
    fn sampling_full_support() {
        let mut rng = SeededRng::new(1, 2);
        let got = sample_without_replacement(&[0.3, 0.0, 2.0, 1.0], 3, &mut rng).unwrap();
        assert_eq!(got, vec![0, 2, 3]);
    }

    #[test]
    fn sampling_excludes_zero_weight() {
        for seed in 0..200 {
            let mut rng = SeededRng::new(seed, 0);
            let got = sample_without_replacement(&[1.0, 0.0, 1.0], 2, &mut rng).unwrap();
            assert_eq!(got, vec![0, 2]);
        }
    }

    #[test]
    fn sampling_rejects_oversized_k() {
        let mut rng = SeededRng::new(0, 0);
        let err = sample_without_replacement(&[1.0, 0.0, 1.0], 3, &mut rng).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientSupport {
                requested: 3,
                support: 2
            }
        ));
    }

    #[test]
    fn first_draw_marginal_matches_weights() {
        let draws = 100_000u64;
        let hits = (0..draws)
            .filter(|&seed| {
                let mut rng = SeededRng::new(seed, 0);
                sample_without_replacement(&[1.0, 2.0, 1.0], 1, &mut rng).unwrap() == [1]
            })
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.01, "freq {freq}");
    }

    #[test]
    fn second_order_inclusion_matches_enumeration() {
        // Inclusion probability of each index for k = 2 under successive
        // sampling, enumerated over ordered draws.
        let w = [1.0, 2.0, 3.0, 4.0];
        let total: f64 = w.iter().sum();
        let mut incl = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    let p = w[i] / total * w[j] / (total - w[i]);
                    incl[i] += p;
                    incl[j] += p;
                }
            }
        }
        let n = 60_000u64;
        let mut counts = [0usize; 4];
        for seed in 0..n {
            let mut rng = SeededRng::new(seed, 7);
            for i in sample_without_replacement(&w, 2, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for i in 0..4 {
            let f = counts[i] as f64 / n as f64;
            assert!((f - incl[i]).abs() < 0.01, "index {i}: {f} vs {}", incl[i]);
        }
    }

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let draw = |seed, stream| {
            let mut r = SeededRng::new(seed, stream);
            [r.next_u64(), r.next_u64(), r.next_u64()]
        };
        assert_eq!(draw(5, 1), draw(5, 1));
        assert_ne!(draw(5, 1), draw(5, 2));
        assert_ne!(draw(5, 1), draw(6, 1));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_is_monotone(logits in prop::collection::vec(-30.0f64..30.0, 2..12)) {
            let p = softmax(&logits).unwrap();
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] < logits[j] {
                        prop_assert!(p[i] <= p[j]);
                    }
                }
            }
        }

        #[test]
        fn sampling_is_deterministic(
            weights in prop::collection::vec(0.0f64..5.0, 1..30),
            seed in any::<u64>(),
            stream in any::<u64>(),
        ) {
            let support = weights.iter().filter(|&&w| w > 0.0).count();
            let k = support / 2;
            let a = sample_without_replacement(&weights, k, &mut SeededRng::new(seed, stream)).unwrap();
            let b = sample_without_replacement(&weights, k, &mut SeededRng::new(seed, stream)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), k);
            prop_assert!(a.iter().all(|&i| weights[i] > 0.0));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
