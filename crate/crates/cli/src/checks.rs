//! Oracle and invariant checks shared by `selftest` and the acceptance
//! suite. Each check draws its own random instances from a seed and returns
//! a pass/fail outcome with a one-line detail.

use tkit_core::ctc::{ctc_loss, ctc_loss_bruteforce, min_frames, CtcLogits, CtcPosterior};
use tkit_core::dataio::Utterance;
use tkit_core::decode::{build_ctc_constraint, DecodeConstraint, Decoder};
use tkit_core::memory_model::{logit_tensor_bytes, LogitMeter, MemConfig};
use tkit_core::model::{LossWeights, ModelDims, OutputGrads, ToyModel, BLANK};
use tkit_core::numerics::SeededRng;
use tkit_core::rnnt_loss::{
    relative_error, transducer_loss, transducer_loss_bruteforce, LogitLattice, TargetSeq,
};
use tkit_core::sampler::{
    build_positive_set, example_rng, make_ctc_distribution, make_uniform_distribution,
    sample_batched, sample_example, sample_example_wise, DistributionSource, SampledVocab,
};

use crate::config::TrainConfig;
use crate::trainer::{compute_gradients, StepId, Workers};

/// Deliberate defect for demonstrating that checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Negate every analytic gradient before comparison.
    GradSignFlip,
}

impl Fault {
    fn apply(self, grad: &mut [f64]) {
        if self == Fault::GradSignFlip {
            grad.iter_mut().for_each(|g| *g = -*g);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckOutcome { name, passed, detail }
    }

    fn error(name: &'static str, err: impl std::fmt::Display) -> Self {
        CheckOutcome::new(name, false, format!("error: {err}"))
    }
}

fn below(rng: &mut SeededRng, n: usize) -> usize {
    ((rng.open01() * n as f64) as usize).min(n - 1)
}

fn in_range(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + below(rng, hi - lo + 1)
}

fn random_values(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (2.0 * rng.open01() - 1.0) * scale).collect()
}

fn random_target(rng: &mut SeededRng, len: usize, vocab: usize) -> TargetSeq {
    let labels = (0..len).map(|_| in_range(rng, 1, vocab - 1)).collect();
    TargetSeq::new(labels, BLANK).expect("labels are non-blank")
}

fn random_lattice(rng: &mut SeededRng, t: usize, u: usize, v: usize) -> LogitLattice {
    LogitLattice::new(t, u, v, random_values(rng, t * (u + 1) * v, 3.0), None).expect("valid shape")
}

/// Largest relative error between `analytic` and central differences of
/// `f` around `x`.
fn finite_difference(x: &[f64], analytic: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// Transducer DP loss against alignment enumeration.
pub fn rnnt_oracle(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "rnnt-oracle";
    let mut rng = SeededRng::new(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = in_range(&mut rng, 1, 4);
        let u = in_range(&mut rng, 0, 3);
        let v = in_range(&mut rng, 2, 5);
        let lat = random_lattice(&mut rng, t, u, v);
        let target = random_target(&mut rng, u, v);
        let (dp, brute) = match (transducer_loss(&lat, &target), transducer_loss_bruteforce(&lat, &target)) {
            (Ok(a), Ok(b)) => (a.loss, b),
            (Err(e), _) | (_, Err(e)) => return CheckOutcome::error(NAME, e),
        };
        worst = worst.max(relative_error(dp, brute));
    }
    CheckOutcome::new(NAME, worst <= 1e-9, format!("{instances} instances, max rel err {worst:.2e} (tol 1e-9)"))
}

/// CTC DP loss against path enumeration, with `V^T <= 1e5`.
pub fn ctc_oracle(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "ctc-oracle";
    let mut rng = SeededRng::new(seed, 2);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = in_range(&mut rng, 2, 6);
        let max_t = (1..=12).take_while(|&t| (v as f64).powi(t as i32) <= 1e5).last().unwrap_or(1);
        let t = in_range(&mut rng, 1, max_t);
        let target = loop {
            let len = in_range(&mut rng, 0, t);
            let cand = random_target(&mut rng, len, v);
            if min_frames(cand.labels()) <= t {
                break cand;
            }
        };
        let logits = CtcLogits::new(t, v, random_values(&mut rng, t * v, 3.0)).expect("valid shape");
        let (dp, brute) = match (ctc_loss(&logits, &target), ctc_loss_bruteforce(&logits, &target)) {
            (Ok(a), Ok(b)) => (a.loss, b),
            (Err(e), _) | (_, Err(e)) => return CheckOutcome::error(NAME, e),
        };
        worst = worst.max(relative_error(dp, brute));
    }
    CheckOutcome::new(NAME, worst <= 1e-9, format!("{instances} instances, max rel err {worst:.2e} (tol 1e-9)"))
}

fn grad_outcome(name: &'static str, instances: usize, worst: f64, tol: f64) -> CheckOutcome {
    CheckOutcome::new(
        name,
        worst <= tol,
        format!("{instances} instances, max rel err {worst:.2e} (tol {tol:.0e})"),
    )
}

/// Transducer loss gradient over the full vocabulary.
pub fn grad_transducer_full(instances: usize, seed: u64, fault: Fault) -> CheckOutcome {
    const NAME: &str = "grad-transducer-full";
    let mut rng = SeededRng::new(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (t, u, v) = (in_range(&mut rng, 1, 4), in_range(&mut rng, 0, 3), in_range(&mut rng, 2, 6));
        let lat = random_lattice(&mut rng, t, u, v);
        let target = random_target(&mut rng, u, v);
        let mut grad = match transducer_loss(&lat, &target) {
            Ok(r) => r.grad,
            Err(e) => return CheckOutcome::error(NAME, e),
        };
        fault.apply(&mut grad);
        let err = finite_difference(lat.data(), &grad, 1e-5, |x| {
            let probe = LogitLattice::new(t, u, v, x.to_vec(), None).expect("valid shape");
            transducer_loss(&probe, &target).expect("valid lattice").loss
        });
        worst = worst.max(err);
    }
    grad_outcome(NAME, instances, worst, 1e-4)
}

/// Transducer loss gradient over a sampled label axis.
pub fn grad_transducer_sampled(instances: usize, seed: u64, fault: Fault) -> CheckOutcome {
    const NAME: &str = "grad-transducer-sampled";
    let mut rng = SeededRng::new(seed, 4);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (t, u, vocab) = (in_range(&mut rng, 1, 4), in_range(&mut rng, 0, 3), in_range(&mut rng, 6, 12));
        let target = random_target(&mut rng, u, vocab);
        let positive = build_positive_set([&target], BLANK);
        let total = in_range(&mut rng, positive.len(), vocab - 1);
        let sampled = make_uniform_distribution(vocab, &positive)
            .and_then(|d| sample_example(&target, &d, total, &mut rng));
        let sv = match sampled {
            Ok(s) => s,
            Err(e) => return CheckOutcome::error(NAME, e),
        };
        let l = sv.len();
        let map = sv.ids().to_vec();
        let data = random_values(&mut rng, t * (u + 1) * l, 3.0);
        let lat = LogitLattice::new(t, u, l, data, Some(map.clone())).expect("valid shape");
        let mut grad = match transducer_loss(&lat, &target) {
            Ok(r) => r.grad,
            Err(e) => return CheckOutcome::error(NAME, e),
        };
        fault.apply(&mut grad);
        let err = finite_difference(lat.data(), &grad, 1e-5, |x| {
            let probe = LogitLattice::new(t, u, l, x.to_vec(), Some(map.clone())).expect("valid shape");
            transducer_loss(&probe, &target).expect("valid lattice").loss
        });
        worst = worst.max(err);
    }
    grad_outcome(NAME, instances, worst, 1e-4)
}

/// CTC loss gradient.
pub fn grad_ctc(instances: usize, seed: u64, fault: Fault) -> CheckOutcome {
    const NAME: &str = "grad-ctc";
    let mut rng = SeededRng::new(seed, 5);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (t, v) = (in_range(&mut rng, 1, 6), in_range(&mut rng, 2, 6));
        let target = loop {
            let len = in_range(&mut rng, 0, t);
            let cand = random_target(&mut rng, len, v);
            if min_frames(cand.labels()) <= t {
                break cand;
            }
        };
        let logits = CtcLogits::new(t, v, random_values(&mut rng, t * v, 3.0)).expect("valid shape");
        let mut grad = match ctc_loss(&logits, &target) {
            Ok(r) => r.grad,
            Err(e) => return CheckOutcome::error(NAME, e),
        };
        fault.apply(&mut grad);
        let err = finite_difference(logits.data(), &grad, 1e-5, |x| {
            let probe = CtcLogits::new(t, v, x.to_vec()).expect("valid shape");
            ctc_loss(&probe, &target).expect("reachable").loss
        });
        worst = worst.max(err);
    }
    grad_outcome(NAME, instances, worst, 1e-4)
}

fn weighted_model_loss(
    m: &ToyModel,
    x: &[f64],
    frames: usize,
    target: &TargetSeq,
    vocab: Option<&SampledVocab>,
    sc: bool,
    grads: Option<&mut ToyModel>,
) -> tkit_core::Result<f64> {
    let w = LossWeights::default();
    let (lat, cache) = m.forward(x, frames, target, vocab, sc)?;
    let rnnt = transducer_loss(&lat, target)?;
    let ctc = ctc_loss(&cache.encoded.ctc_logits, target)?;
    let inter = ctc_loss(&cache.encoded.inter_logits, target)?;
    if let Some(g) = grads {
        let up = OutputGrads {
            lattice: Some(&rnnt.grad),
            ctc: Some(&ctc.grad),
            inter_ctc: Some(&inter.grad),
        };
        m.backward(&cache, up, w, g)?;
    }
    Ok(w.transducer * rnnt.loss + w.ctc * ctc.loss + w.inter_ctc * inter.loss)
}

/// End-to-end gradient of the weighted transducer + CTC + intermediate CTC
/// loss of a small model with respect to every parameter, cycling through
/// full and sampled lattices with and without self-conditioning.
pub fn grad_model(instances: usize, seed: u64, fault: Fault) -> CheckOutcome {
    const NAME: &str = "grad-model";
    let dims = ModelDims {
        input_dim: 3,
        hidden: 4,
        vocab_size: 6,
    };
    let mut rng = SeededRng::new(seed, 6);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let model = ToyModel::new(dims, seed.wrapping_add(i as u64)).expect("valid dims");
        let frames = in_range(&mut rng, 2, 4);
        let x = random_values(&mut rng, frames * dims.input_dim, 1.0);
        let target = loop {
            let len = in_range(&mut rng, 1, frames);
            let cand = random_target(&mut rng, len, dims.vocab_size);
            if min_frames(cand.labels()) <= frames {
                break cand;
            }
        };
        let sc = i % 2 == 1;
        let vocab = if i % 4 >= 2 {
            let positive = build_positive_set([&target], BLANK);
            let d = make_uniform_distribution(dims.vocab_size, &positive).expect("has negatives");
            let total = (positive.len() + 1).min(dims.vocab_size - 1).max(positive.len());
            Some(sample_example(&target, &d, total, &mut rng).expect("valid sample"))
        } else {
            None
        };
        let mut grads = model.zeros_like();
        if let Err(e) = weighted_model_loss(&model, &x, frames, &target, vocab.as_ref(), sc, Some(&mut grads)) {
            return CheckOutcome::error(NAME, e);
        }
        let mut flat: Vec<f64> = grads.params().iter().flat_map(|p| p.data().to_vec()).collect();
        fault.apply(&mut flat);
        let theta: Vec<f64> = model.params().iter().flat_map(|p| p.data().to_vec()).collect();
        let err = finite_difference(&theta, &flat, 1e-5, |th| {
            let mut probe = model.clone();
            let mut k = 0;
            for p in probe.params_mut() {
                let n = p.len();
                p.data_mut().copy_from_slice(&th[k..k + n]);
                k += n;
            }
            weighted_model_loss(&probe, &x, frames, &target, vocab.as_ref(), sc, None).expect("valid forward")
        });
        worst = worst.max(err);
    }
    grad_outcome(NAME, instances, worst, 1e-3)
}

/// Sampled loss with a vocabulary drawn to cover every label equals the
/// full loss; a proper subset never raises the loss.
pub fn sampled_equals_full(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "sampled-equals-full";
    let mut rng = SeededRng::new(seed, 7);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for _ in 0..instances {
        let (t, u, v) = (in_range(&mut rng, 1, 6), in_range(&mut rng, 0, 4), in_range(&mut rng, 3, 12));
        let lat = random_lattice(&mut rng, t, u, v);
        let target = random_target(&mut rng, u, v);
        let positive = build_positive_set([&target], BLANK);
        if positive.len() >= v {
            continue;
        }
        let full = transducer_loss(&lat, &target).expect("valid lattice").loss;
        let dist = make_uniform_distribution(v, &positive).expect("has negatives");
        let subset_size = positive.len() + below(&mut rng, v - positive.len());
        let mut sampled_loss = |total: usize| -> tkit_core::Result<f64> {
            let sv = sample_example(&target, &dist, total, &mut rng)?;
            transducer_loss(&lat.gather(sv.ids())?, &target).map(|r| r.loss)
        };
        let (same, subset) = match (sampled_loss(v), sampled_loss(subset_size)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CheckOutcome::error(NAME, e),
        };
        worst = worst.max(relative_error(same, full));
        if subset > full {
            violations += 1;
        }
    }
    CheckOutcome::new(
        NAME,
        worst <= 1e-12 && violations == 0,
        format!("{instances} instances, max rel err {worst:.2e} (tol 1e-12), subset violations {violations}"),
    )
}

/// Structural properties of batched and example-wise vocabularies.
pub fn sampler_properties(trials: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "sampler-properties";
    let mut rng = SeededRng::new(seed, 8);
    let mut failures = Vec::new();
    for trial in 0..trials {
        let vocab = in_range(&mut rng, 8, 40);
        let batch = in_range(&mut rng, 1, 4);
        let targets: Vec<TargetSeq> = (0..batch)
            .map(|_| {
                let len = in_range(&mut rng, 0, 4);
                random_target(&mut rng, len, vocab)
            })
            .collect();
        let pooled = build_positive_set(&targets, BLANK);
        if pooled.len() >= vocab {
            continue;
        }
        let total = in_range(&mut rng, pooled.len(), vocab);

        // Posterior with some labels at exactly zero probability.
        let frames = 3;
        let zeroed: Vec<bool> = (0..vocab).map(|v| v != BLANK && rng.open01() < 0.3).collect();
        let mut probs = Vec::with_capacity(frames * vocab);
        for _ in 0..frames {
            let row: Vec<f64> = (0..vocab).map(|v| if zeroed[v] { 0.0 } else { rng.open01() + 0.01 }).collect();
            let z: f64 = row.iter().sum();
            probs.extend(row.into_iter().map(|p| p / z));
        }
        let post = CtcPosterior::new(frames, vocab, probs).expect("rows sum to one");

        let batched = make_ctc_distribution(&post, &pooled, DistributionSource::JointCtc).and_then(|d| {
            let support = d.weights().iter().filter(|&&w| w > 0.0).count();
            let total = total.min(pooled.len() + support);
            let a = sample_batched(&targets, BLANK, &d, total, &mut example_rng(seed, trial as u64, 0))?;
            let b = sample_batched(&targets, BLANK, &d, total, &mut example_rng(seed, trial as u64, 0))?;
            Ok((d, a, b))
        });
        let (dist, a, b) = match batched {
            Ok(x) => x,
            Err(e) => return CheckOutcome::error(NAME, e),
        };
        let has_mass = (0..vocab).any(|v| !zeroed[v] && !pooled.contains(&v));
        if has_mass && (0..vocab).any(|v| zeroed[v] && dist.weights()[v] != 0.0) {
            failures.push(format!("trial {trial}: zero posterior mass got sampling weight"));
        }
        if a != b {
            failures.push(format!("trial {trial}: batched draw not deterministic"));
        }
        let check = |sv: &SampledVocab, weights: &[f64], what: &str| -> Vec<String> {
            let mut bad = Vec::new();
            if sv.positive().first() != Some(&BLANK) || sv.ids()[0] != BLANK {
                bad.push(format!("trial {trial}: {what} blank not positive"));
            }
            if sv.negative().iter().any(|n| sv.positive().contains(n)) {
                bad.push(format!("trial {trial}: {what} positive/negative overlap"));
            }
            if sv.negative().iter().any(|&n| weights[n] == 0.0) {
                bad.push(format!("trial {trial}: {what} drew a zero-weight label"));
            }
            bad
        };
        failures.extend(check(&a, dist.weights(), "batched"));

        let dists: tkit_core::Result<Vec<_>> = targets
            .iter()
            .map(|t| make_ctc_distribution(&post, &build_positive_set([t], BLANK), DistributionSource::JointCtc))
            .collect();
        let dists = match dists {
            Ok(d) => d,
            Err(e) => return CheckOutcome::error(NAME, e),
        };
        // Every example must have enough positive-weight labels to fill
        // the shared sample size.
        let sizes: Vec<(usize, usize)> = targets
            .iter()
            .zip(&dists)
            .map(|(t, d)| (build_positive_set([t], BLANK).len(), d.weights().iter().filter(|&&w| w > 0.0).count()))
            .collect();
        let max_pos = sizes.iter().map(|s| s.0).max().unwrap_or(1);
        let cap = sizes.iter().map(|s| s.0 + s.1).min().unwrap_or(max_pos);
        if cap < max_pos {
            continue;
        }
        let ew_total = total.clamp(max_pos, cap);
        let ew = sample_example_wise(&targets, &dists, ew_total, seed, trial as u64, 0);
        let ew2 = sample_example_wise(&targets, &dists, ew_total, seed, trial as u64, 0);
        match (ew, ew2) {
            (Ok(x), Ok(y)) => {
                if x != y {
                    failures.push(format!("trial {trial}: example-wise draw not deterministic"));
                }
                for (sv, d) in x.iter().zip(&dists) {
                    failures.extend(check(sv, d.weights(), "example-wise"));
                    if !sv.positive().iter().all(|p| a.positive().contains(p)) {
                        failures.push(format!("trial {trial}: example positives not within batch positives"));
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => return CheckOutcome::error(NAME, e),
        }
    }
    let passed = failures.is_empty();
    let detail = match failures.first() {
        None => format!("{trials} trials, all properties hold"),
        Some(f) => format!("{} failures, first: {f}", failures.len()),
    };
    CheckOutcome::new(NAME, passed, detail)
}

fn decode_trial(
    dec: &Decoder<'_>,
    x: &[f64],
    frames: usize,
    trial: usize,
    vocab: usize,
    rng: &mut SeededRng,
) -> tkit_core::Result<Vec<&'static str>> {
    let mut failed = Vec::new();
    let utt = dec.prepare(x, frames)?;
    let free = dec.greedy(&utt, None)?;
    let all = DecodeConstraint::new(vocab, 0..vocab)?;
    if dec.greedy(&utt, Some(&all))?.labels != free.labels {
        failed.push("all-allowed greedy differs from unconstrained");
    }
    if dec.beam_search(&utt, 1, None)?.labels != free.labels {
        failed.push("beam=1 differs from greedy");
    }
    if trial % 10 == 0 {
        let b = dec.beam_search(&utt, 3, None)?;
        if dec.beam_search(&utt, 3, Some(&all))?.labels != b.labels {
            failed.push("all-allowed beam differs from unconstrained");
        }
    }
    let constraint = if trial % 2 == 0 {
        build_ctc_constraint(&utt.ctc_posterior, 1 + below(rng, vocab - 1))?
    } else {
        let labels: Vec<usize> = (1..vocab).filter(|_| rng.open01() < 0.5).collect();
        DecodeConstraint::new(vocab, labels)?
    };
    let g = dec.greedy(&utt, Some(&constraint))?;
    let b = dec.beam_search(&utt, 2, Some(&constraint))?;
    if g.labels.iter().chain(&b.labels).any(|&l| !constraint.allows(l)) {
        failed.push("emitted a disallowed label");
    }
    Ok(failed)
}

/// Constraint and beam identities of the decoder on random small models.
/// Every trial also checks that constrained greedy and beam decoding emit
/// only allowed labels.
pub fn decode_identities(trials: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "decode-identities";
    let dims = ModelDims {
        input_dim: 3,
        hidden: 6,
        vocab_size: 8,
    };
    let mut rng = SeededRng::new(seed, 9);
    let mut failures = Vec::new();
    let mut model = ToyModel::zeros(dims).expect("valid dims");
    for trial in 0..trials {
        if trial % 250 == 0 {
            model = ToyModel::new(dims, seed.wrapping_add(trial as u64)).expect("valid dims");
            // Sharpen the output layer so that labels actually get emitted.
            model.joint_out.data_mut().iter_mut().for_each(|w| *w *= 6.0);
            model.joint_b.data_mut().iter_mut().for_each(|w| *w *= 3.0);
        }
        let frames = in_range(&mut rng, 1, 6);
        let x = random_values(&mut rng, frames * dims.input_dim, 2.0);
        let dec = Decoder::new(&model, trial % 2 == 1);
        match decode_trial(&dec, &x, frames, trial, dims.vocab_size, &mut rng) {
            Ok(f) => failures.extend(f.into_iter().map(|w| format!("trial {trial}: {w}"))),
            Err(e) => return CheckOutcome::error(NAME, e),
        }
    }
    let detail = match failures.first() {
        None => format!("{trials} trials, all identities hold"),
        Some(f) => format!("{} failures, first: {f}", failures.len()),
    };
    CheckOutcome::new(NAME, failures.is_empty(), detail)
}

/// Synthetic batch with fixed frame count and target length.
pub fn synthetic_batch(
    batch: usize,
    frames: usize,
    target_len: usize,
    vocab: usize,
    feature_dim: usize,
    seed: u64,
) -> Vec<Utterance> {
    let mut rng = SeededRng::new(seed, 10);
    (0..batch)
        .map(|i| Utterance {
            id: format!("bench-{i}"),
            frames,
            features: random_values(&mut rng, frames * feature_dim, 1.0),
            target: random_target(&mut rng, target_len, vocab),
        })
        .collect()
}

/// Measured peak logit bytes of one training step and the closed form
/// for the same shape (logits plus their gradient, 8-byte elements).
pub fn measure_step(
    model: &ToyModel,
    cfg: &TrainConfig,
    batch: &[Utterance],
) -> crate::error::Result<(u64, u64, crate::trainer::StepOutcome)> {
    let meter = LogitMeter::new();
    let indexed: Vec<(u64, &Utterance)> = batch.iter().enumerate().map(|(i, u)| (i as u64, u)).collect();
    let mut grads = model.zeros_like();
    let out = compute_gradients(model, cfg, &indexed, StepId { epoch: 1, batch: 0 }, &meter, Workers::inline(), &mut grads)?;
    let sampled = cfg.sampling.strategy.map(|_| cfg.sampling.total_size as u64);
    let u0 = &batch[0];
    let formula = logit_tensor_bytes(&MemConfig {
        frames: u0.frames as u64,
        target_len: u0.target.len() as u64,
        vocab_size: model.dims().vocab_size as u64,
        sampled_size: sampled.filter(|&s| s < model.dims().vocab_size as u64),
        batch: batch.len() as u64,
        hidden: model.dims().hidden as u64,
        input_dim: model.dims().input_dim as u64,
        element_bytes: std::mem::size_of::<f64>() as u64,
        self_condition: cfg.self_condition,
        count_logit_grad: true,
    });
    Ok((out.peak_logit_bytes, formula, out))
}

/// Instrumented logit memory of full and sampled steps against the formula.
pub fn memory_meter(seed: u64) -> CheckOutcome {
    const NAME: &str = "memory-meter";
    let (batch, frames, u, vocab, f, total) = (3, 12, 4, 60, 5, 15);
    let model = ToyModel::new(ModelDims { input_dim: f, hidden: 8, vocab_size: vocab }, seed).expect("valid dims");
    let data = synthetic_batch(batch, frames, u, vocab, f, seed);
    let full_cfg = TrainConfig::default();
    let mut sampled_cfg = TrainConfig::default();
    sampled_cfg.sampling.strategy = Some(tkit_core::sampler::SamplingStrategy::ExampleWise);
    sampled_cfg.sampling.total_size = total;
    let (full, sampled) = match (measure_step(&model, &full_cfg, &data), measure_step(&model, &sampled_cfg, &data)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return CheckOutcome::error(NAME, e),
    };
    let within = |(m, f, _): &(u64, u64, _)| (*m as f64 - *f as f64).abs() <= 0.01 * *f as f64;
    let ratio_ok = full.0 * total as u64 == sampled.0 * vocab as u64;
    CheckOutcome::new(
        NAME,
        within(&full) && within(&sampled) && ratio_ok,
        format!(
            "full {} B (formula {}), sampled {} B (formula {}), ratio {:.4} vs {:.4}",
            full.0,
            full.1,
            sampled.0,
            sampled.1,
            full.0 as f64 / sampled.0 as f64,
            vocab as f64 / total as f64
        ),
    )
}

/// The whole suite at selftest scale.
pub fn run_all(seed: u64, fault: Fault) -> Vec<CheckOutcome> {
    vec![
        rnnt_oracle(50, seed),
        ctc_oracle(50, seed),
        grad_transducer_full(10, seed, fault),
        grad_transducer_sampled(10, seed, fault),
        grad_ctc(10, seed, fault),
        grad_model(4, seed, fault),
        sampled_equals_full(50, seed),
        sampler_properties(100, seed),
        decode_identities(500, seed),
        memory_meter(seed),
    ]
}

/// Fixed-width table, one row per check.
pub fn render_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(5).max(5);
    let mut s = format!("{:<width$}  {:<6}  {}\n", "check", "result", "detail");
    for o in outcomes {
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<width$}  {:<6}  {}\n", o.name, verdict, o.detail));
    }
    s
}
