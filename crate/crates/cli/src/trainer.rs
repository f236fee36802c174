//! Minibatch training of the toy transducer and its evaluation.
//!
//! A step runs in phases so that every logit lattice of the batch is alive
//! at the same time, as it would be in a batched implementation: encode and
//! predict all examples, draw the sampled vocabularies, build every
//! lattice, compute every loss and lattice gradient, then backpropagate.
//! Lattices and their gradients are registered with a [`LogitMeter`], so
//! the meter's peak is the logit memory of the step.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rayon::ThreadPool;

use tkit_core::ctc::{ctc_loss, ctc_posterior, CtcPosterior};
use tkit_core::dataio::{token_error_rate, Dataset, Utterance};
use tkit_core::decode::{build_ctc_constraint, Decoder};
use tkit_core::memory_model::LogitMeter;
use tkit_core::model::{ForwardCache, OutputGrads, ToyModel, BLANK};
use tkit_core::numerics::{derive_seed, SeededRng};
use tkit_core::rnnt_loss::transducer_loss;
use tkit_core::sampler::{
    batch_rng, build_positive_set, example_rng, make_ctc_distribution, make_uniform_distribution,
    sample_batched, sample_example, DistributionSource, SampledVocab, SamplingDistribution,
    SamplingStrategy,
};
use tkit_core::Error;

use crate::config::{distribution_name, strategy_name, AdamConfig, DecodeConfig, DecodeMode, TrainConfig};
use crate::error::{CliError, Result};

const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: ToyModel,
    v: ToyModel,
    steps: u64,
}

impl Adam {
    pub fn new(model: &ToyModel, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: model.zeros_like(),
            v: model.zeros_like(),
            steps: 0,
        }
    }

    /// Clips `grads` in place and applies one update with the learning rate
    /// multiplied by `lr_scale`. Returns the norm before clipping.
    pub fn update(&mut self, model: &mut ToyModel, grads: &mut ToyModel, lr_scale: f64) -> f64 {
        let norm = grads.global_norm();
        if norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        self.steps += 1;
        let lr = self.cfg.lr * lr_scale;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let params = model.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.params()).zip(ms).zip(vs) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
        norm
    }
}

/// Where a step runs: inline, or on a rayon pool.
#[derive(Clone, Copy)]
pub struct Workers<'a> {
    pool: Option<&'a ThreadPool>,
}

impl<'a> Workers<'a> {
    pub fn inline() -> Self {
        Workers { pool: None }
    }

    pub fn pool(pool: &'a ThreadPool) -> Self {
        Workers { pool: Some(pool) }
    }

    /// Maps `f` over `0..n` keeping index order in the output.
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        match self.pool {
            Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }
}

/// Builds a pool for `workers > 1`; `None` means run inline.
pub fn build_pool(workers: usize) -> Result<Option<ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| CliError::field("--workers", e.to_string()))
}

/// Identifies a step for the random streams that drive sampling.
#[derive(Debug, Clone, Copy)]
pub struct StepId {
    pub epoch: u64,
    pub batch: u64,
}

/// Batch totals from one step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepOutcome {
    pub examples: usize,
    pub loss_transducer: f64,
    pub loss_ctc: f64,
    pub loss_inter: f64,
    /// Examples whose target cannot fit a CTC path in their frames.
    pub ctc_skipped: usize,
    /// Vocabularies whose positive set alone exceeded the sample size.
    pub positive_overflow: usize,
    /// Label-axis size of each example's lattice.
    pub label_sizes: Vec<usize>,
    pub peak_logit_bytes: u64,
}

impl StepOutcome {
    pub fn weighted_loss(&self, cfg: &TrainConfig) -> f64 {
        let w = cfg.weights;
        w.transducer * self.loss_transducer + w.ctc * self.loss_ctc + w.inter_ctc * self.loss_inter
    }
}

fn sampling_distribution(
    source: DistributionSource,
    vocab_size: usize,
    positive: &[usize],
    posterior: impl FnOnce() -> tkit_core::Result<CtcPosterior>,
) -> tkit_core::Result<SamplingDistribution> {
    match source {
        DistributionSource::Uniform => make_uniform_distribution(vocab_size, positive),
        src => make_ctc_distribution(&posterior()?, positive, src),
    }
}

/// Applies the overflow and full-coverage rules, then draws.
fn draw_vocab(
    positive: Vec<usize>,
    vocab_size: usize,
    total_size: usize,
    strategy: SamplingStrategy,
    overflow: &mut usize,
    draw: impl FnOnce() -> tkit_core::Result<SampledVocab>,
) -> tkit_core::Result<Option<SampledVocab>> {
    if positive.len() >= vocab_size {
        return Ok(None);
    }
    if positive.len() > total_size {
        *overflow += 1;
        return SampledVocab::new(positive, Vec::new(), strategy).map(Some);
    }
    draw().map(Some)
}

/// Sampled vocabulary of each example, `None` meaning the full softmax.
fn choose_vocabs(
    cfg: &TrainConfig,
    vocab_size: usize,
    batch: &[(u64, &Utterance)],
    posteriors: &[Option<CtcPosterior>],
    step: StepId,
    overflow: &mut usize,
) -> tkit_core::Result<Vec<Option<SampledVocab>>> {
    let s = &cfg.sampling;
    let strategy = match s.strategy {
        Some(st) => st,
        None => return Ok(vec![None; batch.len()]),
    };
    let src = s.distribution;
    match strategy {
        SamplingStrategy::Batched => {
            let targets: Vec<_> = batch.iter().map(|(_, u)| u.target.clone()).collect();
            let positive = build_positive_set(&targets, BLANK);
            let vocab = draw_vocab(positive.clone(), vocab_size, s.total_size, strategy, overflow, || {
                let dist = sampling_distribution(src, vocab_size, &positive, || {
                    let parts: Vec<&CtcPosterior> = posteriors.iter().flatten().collect();
                    CtcPosterior::concat(&parts)
                })?;
                let mut rng = batch_rng(cfg.seed, step.epoch, step.batch);
                sample_batched(&targets, BLANK, &dist, s.total_size, &mut rng)
            })?;
            Ok(vec![vocab; batch.len()])
        }
        SamplingStrategy::ExampleWise => batch
            .iter()
            .zip(posteriors)
            .map(|((index, u), post)| {
                let positive = build_positive_set([&u.target], BLANK);
                draw_vocab(positive.clone(), vocab_size, s.total_size, strategy, overflow, || {
                    let dist = sampling_distribution(src, vocab_size, &positive, || {
                        Ok(post.clone().expect("posterior computed for ctc sources"))
                    })?;
                    let mut rng = example_rng(cfg.seed, step.epoch, *index);
                    sample_example(&u.target, &dist, s.total_size, &mut rng)
                })
            })
            .collect(),
    }
}

/// Sums the gradient of the weighted batch loss into `grads` (averaged over
/// the batch). `batch` pairs each utterance with its dataset index, which
/// names its example-wise random stream.
pub fn compute_gradients(
    model: &ToyModel,
    cfg: &TrainConfig,
    batch: &[(u64, &Utterance)],
    step: StepId,
    meter: &LogitMeter,
    workers: Workers<'_>,
    grads: &mut ToyModel,
) -> Result<StepOutcome> {
    let n = batch.len();
    let vocab_size = model.dims().vocab_size;
    let sc = cfg.self_condition;
    let w = cfg.weights;
    meter.reset_peak();

    let fwd = workers.map(n, |i| {
        let u = batch[i].1;
        let enc = model.encode(&u.features, u.frames, sc)?;
        let pred = model.predict(u.target.labels())?;
        Ok((enc, pred))
    })?;

    let uses_ctc_dist = cfg.sampling.strategy.is_some() && cfg.sampling.distribution != DistributionSource::Uniform;
    let posteriors: Vec<Option<CtcPosterior>> = fwd
        .iter()
        .map(|(enc, _)| {
            uses_ctc_dist.then(|| match cfg.sampling.distribution {
                DistributionSource::JointCtc => ctc_posterior(&enc.ctc_logits),
                _ => ctc_posterior(&enc.inter_logits),
            })
        })
        .collect();
    let mut out = StepOutcome {
        examples: n,
        ..StepOutcome::default()
    };
    let vocabs = choose_vocabs(cfg, vocab_size, batch, &posteriors, step, &mut out.positive_overflow)?;
    drop(posteriors);

    let lattices = workers.map(n, |i| {
        let (enc, pred) = &fwd[i];
        let (lat, jc) = model.joint_logits(&enc.h_enc, &pred.h_pre, vocabs[i].as_ref())?;
        Ok((meter.hold(lat), jc))
    })?;
    out.label_sizes = lattices.iter().map(|(l, _)| l.labels()).collect();

    let losses = workers.map(n, |i| {
        let (enc, _) = &fwd[i];
        let target = &batch[i].1.target;
        let rnnt = transducer_loss(&lattices[i].0, target)?;
        let aux = |logits, weight: f64| -> Result<Option<_>> {
            if weight == 0.0 {
                return Ok(None);
            }
            match ctc_loss(logits, target) {
                Ok(r) => Ok(Some(r)),
                Err(Error::Unreachable { .. }) => Ok(None),
                Err(e) => Err(e.into()),
            }
        };
        let ctc = aux(&enc.ctc_logits, w.ctc)?;
        let inter = aux(&enc.inter_logits, w.inter_ctc)?;
        let skipped = (w.ctc != 0.0 && ctc.is_none()) || (w.inter_ctc != 0.0 && inter.is_none());
        Ok((rnnt.loss, meter.hold(rnnt.grad), ctc, inter, skipped))
    })?;

    let mut caches = Vec::with_capacity(n);
    for ((enc, pred), (_, joint)) in fwd.into_iter().zip(lattices) {
        caches.push(ForwardCache {
            encoded: enc,
            predicted: pred,
            joint,
        });
    }

    let per_example = workers.map(n, |i| {
        let (_, d_lat, ctc, inter, _) = &losses[i];
        let mut g = model.zeros_like();
        let upstream = OutputGrads {
            lattice: Some(d_lat.as_slice()),
            ctc: ctc.as_ref().map(|r| r.grad.as_slice()),
            inter_ctc: inter.as_ref().map(|r| r.grad.as_slice()),
        };
        model.backward(&caches[i], upstream, w, &mut g)?;
        Ok(g)
    })?;

    for (g, (rnnt, _, ctc, inter, skipped)) in per_example.iter().zip(&losses) {
        grads.add_scaled(g, 1.0);
        out.loss_transducer += rnnt;
        out.loss_ctc += ctc.as_ref().map_or(0.0, |r| r.loss);
        out.loss_inter += inter.as_ref().map_or(0.0, |r| r.loss);
        out.ctc_skipped += usize::from(*skipped);
    }
    grads.scale(1.0 / n as f64);
    drop(losses);
    out.peak_logit_bytes = meter.peak();
    Ok(out)
}

/// Per-epoch summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub loss_transducer: f64,
    pub loss_ctc: f64,
    pub loss_inter: f64,
    pub dev_ter: Option<f64>,
    pub peak_logit_bytes: u64,
    pub mean_label_size: f64,
    pub ctc_skipped: usize,
    pub positive_overflow: usize,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        let ter = self.dev_ter.map_or("na".to_string(), |t| format!("{t:.6}"));
        format!(
            "epoch={} steps={} loss_transducer={:.9} loss_ctc={:.9} loss_inter={:.9} dev_ter={ter} \
             peak_logit_bytes={} mean_label_size={:.3} ctc_skipped={} positive_overflow={}",
            self.epoch,
            self.steps,
            self.loss_transducer,
            self.loss_ctc,
            self.loss_inter,
            self.peak_logit_bytes,
            self.mean_label_size,
            self.ctc_skipped,
            self.positive_overflow,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    /// Mean transducer loss of every step, in order.
    pub step_losses: Vec<f64>,
    /// Dev metrics under the configured decoder, after the last epoch.
    pub final_eval: Option<EvalReport>,
    pub log: Vec<String>,
}

/// Checks that a dataset fits the model and the sampling settings.
pub fn check_compatible(model: &ToyModel, ds: &Dataset, cfg: &TrainConfig, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Ok(());
    }
    let d = model.dims();
    if ds.vocab_size != d.vocab_size {
        return Err(CliError::field(
            "vocab_size",
            format!("{what} has vocab_size {} but the model has {}", ds.vocab_size, d.vocab_size),
        ));
    }
    if ds.feature_dim != d.input_dim {
        return Err(CliError::field(
            "feature_dim",
            format!("{what} has feature_dim {} but the model expects {}", ds.feature_dim, d.input_dim),
        ));
    }
    if let Some(v) = cfg.vocab_size {
        if v != ds.vocab_size {
            return Err(CliError::field(
                "model.vocab_size",
                format!("config says {v} but {what} has {}", ds.vocab_size),
            ));
        }
    }
    if cfg.sampling.strategy.is_some() && cfg.sampling.total_size > ds.vocab_size {
        return Err(CliError::field(
            "sampling.total_size",
            format!("{} exceeds the vocabulary size {} of {what}", cfg.sampling.total_size, ds.vocab_size),
        ));
    }
    Ok(())
}

/// Trains `model` in place, passing each log line to `sink` as it is made.
/// Log lines carry no timing, so equal seeds give equal logs.
pub fn train(
    model: &mut ToyModel,
    train_set: &Dataset,
    dev_set: &Dataset,
    cfg: &TrainConfig,
    workers: Workers<'_>,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model, train_set, cfg, "training data")?;
    check_compatible(model, dev_set, cfg, "dev data")?;

    let mut log = Vec::new();
    let mut emit = |line: String, log: &mut Vec<String>| {
        sink(&line);
        log.push(line);
    };
    emit(
        format!(
            "start params={} train_utts={} dev_utts={} vocab_size={} hidden={} self_condition={} \
             strategy={} distribution={} total_size={} batch_size={} epochs={} seed={}",
            model.num_params(),
            train_set.len(),
            dev_set.len(),
            model.dims().vocab_size,
            model.dims().hidden,
            cfg.self_condition,
            strategy_name(cfg.sampling.strategy),
            distribution_name(cfg.sampling.distribution),
            cfg.sampling.total_size,
            cfg.batch_size,
            cfg.epochs,
            cfg.seed,
        ),
        &mut log,
    );

    let meter = LogitMeter::new();
    let mut adam = Adam::new(model, cfg.optim.clone());
    let mut grads = model.zeros_like();
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let lr_scale = |step: usize| {
        let progress = step as f64 / (total_steps.max(2) - 1) as f64;
        1.0 - (1.0 - cfg.optim.final_lr_scale) * progress
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = SeededRng::new(derive_seed(cfg.seed, SHUFFLE_TAG, epoch as u64), 0);
        order.shuffle(&mut rng);

        let mut stats = EpochStats {
            epoch,
            steps: 0,
            loss_transducer: 0.0,
            loss_ctc: 0.0,
            loss_inter: 0.0,
            dev_ter: None,
            peak_logit_bytes: 0,
            mean_label_size: 0.0,
            ctc_skipped: 0,
            positive_overflow: 0,
        };
        let mut seen = 0usize;
        let mut label_total = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(u64, &Utterance)> =
                chunk.iter().map(|&i| (i as u64, &train_set.utterances[i])).collect();
            grads.fill_zero();
            let step = StepId {
                epoch: epoch as u64,
                batch: b as u64,
            };
            let out = compute_gradients(model, cfg, &batch, step, &meter, workers, &mut grads)?;
            if !out.weighted_loss(cfg).is_finite() {
                return Err(CliError::NonFinite {
                    what: "loss",
                    epoch,
                    step: b,
                });
            }
            adam.update(model, &mut grads, lr_scale(step_losses.len()));
            if !model.is_finite() {
                return Err(CliError::NonFinite {
                    what: "parameter",
                    epoch,
                    step: b,
                });
            }
            step_losses.push(out.loss_transducer / out.examples as f64);
            stats.steps += 1;
            stats.loss_transducer += out.loss_transducer;
            stats.loss_ctc += out.loss_ctc;
            stats.loss_inter += out.loss_inter;
            stats.ctc_skipped += out.ctc_skipped;
            stats.positive_overflow += out.positive_overflow;
            stats.peak_logit_bytes = stats.peak_logit_bytes.max(out.peak_logit_bytes);
            label_total += out.label_sizes.iter().sum::<usize>();
            seen += out.examples;
        }
        if seen > 0 {
            let n = seen as f64;
            stats.loss_transducer /= n;
            stats.loss_ctc /= n;
            stats.loss_inter /= n;
            stats.mean_label_size = label_total as f64 / n;
        }
        if !dev_set.is_empty() {
            let greedy = DecodeConfig {
                mode: DecodeMode::Greedy,
                ctc_top_k: 0,
                ..cfg.decode.clone()
            };
            stats.dev_ter = Some(evaluate(model, dev_set, cfg.self_condition, &greedy, workers)?.ter);
        }
        emit(stats.log_line(), &mut log);
        epochs.push(stats);
    }

    let final_eval = if cfg.epochs > 0 && !dev_set.is_empty() {
        let report = evaluate(model, dev_set, cfg.self_condition, &cfg.decode, workers)?;
        emit(
            format!(
                "final dev_ter={:.6} edits={} ref_tokens={} mode={} beam={} ctc_top_k={}",
                report.ter,
                report.edits,
                report.ref_tokens,
                mode_name(cfg.decode.mode),
                cfg.decode.beam,
                cfg.decode.ctc_top_k
            ),
            &mut log,
        );
        Some(report)
    } else {
        None
    };

    Ok(TrainOutcome {
        epochs,
        step_losses,
        final_eval,
        log,
    })
}

pub fn mode_name(m: DecodeMode) -> &'static str {
    match m {
        DecodeMode::Greedy => "greedy",
        DecodeMode::Beam => "beam",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UttOutput {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ter: f64,
    pub edits: usize,
    pub ref_tokens: usize,
    pub outputs: Vec<UttOutput>,
}

/// Decodes every utterance and scores the corpus token error rate.
pub fn evaluate(
    model: &ToyModel,
    ds: &Dataset,
    self_condition: bool,
    decode: &DecodeConfig,
    workers: Workers<'_>,
) -> Result<EvalReport> {
    let vocab_size = model.dims().vocab_size;
    if decode.ctc_top_k >= vocab_size {
        return Err(CliError::field(
            "decode.ctc_top_k",
            format!("{} must be below the vocabulary size {vocab_size}", decode.ctc_top_k),
        ));
    }
    if decode.beam == 0 {
        return Err(CliError::field("decode.beam", "must be at least 1"));
    }
    let dec = Decoder::new(model, self_condition);
    let outputs = workers.map(ds.len(), |i| {
        let u = &ds.utterances[i];
        let prepared = dec.prepare(&u.features, u.frames)?;
        let constraint = match decode.ctc_top_k {
            0 => None,
            k => Some(build_ctc_constraint(&prepared.ctc_posterior, k)?),
        };
        let hyp = match decode.mode {
            DecodeMode::Greedy => dec.greedy(&prepared, constraint.as_ref())?,
            DecodeMode::Beam => dec.beam_search(&prepared, decode.beam, constraint.as_ref())?,
        };
        Ok(UttOutput {
            id: u.id.clone(),
            reference: u.target.labels().to_vec(),
            hypothesis: hyp.labels,
        })
    })?;
    let pairs: Vec<(&[usize], &[usize])> =
        outputs.iter().map(|o| (o.reference.as_slice(), o.hypothesis.as_slice())).collect();
    let edits = pairs
        .iter()
        .map(|(r, h)| tkit_core::dataio::edit_distance(r, h))
        .sum();
    let ref_tokens = pairs.iter().map(|(r, _)| r.len()).sum();
    Ok(EvalReport {
        ter: token_error_rate(&pairs),
        edits,
        ref_tokens,
        outputs,
    })
}
