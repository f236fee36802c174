//! Flat `key=value` configuration with dotted section prefixes.
//!
//! ```text
//! # comment
//! sampling.strategy = example-wise
//! [optim]
//! lr = 0.003          # same as optim.lr
//! ```
//!
//! Unknown keys, duplicates and unparsable values are errors that name the
//! offending key and line.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use tkit_core::dataio::SynthSpec;
use tkit_core::memory_model::MemConfig;
use tkit_core::model::LossWeights;
use tkit_core::sampler::{DistributionSource, SamplingStrategy};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Learning-rate multiplier reached linearly by the last step.
    pub final_lr_scale: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            final_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// `None` trains with the full softmax.
    pub strategy: Option<SamplingStrategy>,
    pub distribution: DistributionSource,
    pub total_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: None,
            distribution: DistributionSource::JointCtc,
            total_size: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    /// 0 disables the CTC constraint.
    pub ctc_top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Greedy,
            beam: 4,
            ctc_top_k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub self_condition: bool,
    /// Checked against the dataset when set.
    pub vocab_size: Option<usize>,
    pub optim: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub sampling: SamplingConfig,
    pub weights: LossWeights,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 48,
            self_condition: false,
            vocab_size: None,
            optim: AdamConfig::default(),
            epochs: 10,
            batch_size: 8,
            seed: 0,
            dev_fraction: 0.1,
            sampling: SamplingConfig::default(),
            weights: LossWeights::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(CliError::field(key, msg));
        if self.hidden == 0 {
            return bad("model.hidden", "must be positive".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad("optim.lr", format!("must be positive, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return bad("optim.beta1", format!("must be in [0, 1), got {}", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return bad("optim.beta2", format!("must be in [0, 1), got {}", o.beta2));
        }
        if !(o.eps > 0.0) {
            return bad("optim.eps", format!("must be positive, got {}", o.eps));
        }
        if !(o.clip_norm > 0.0) {
            return bad("optim.clip_norm", format!("must be positive, got {}", o.clip_norm));
        }
        if !(o.final_lr_scale > 0.0 && o.final_lr_scale <= 1.0) {
            return bad("optim.final_lr_scale", format!("must be in (0, 1], got {}", o.final_lr_scale));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return bad("train.dev_fraction", format!("must be in [0, 1), got {}", self.dev_fraction));
        }
        if self.sampling.strategy.is_some() && self.sampling.total_size < 2 {
            return bad("sampling.total_size", "must be at least 2".into());
        }
        if let Some(v) = self.vocab_size {
            if self.sampling.strategy.is_some() && self.sampling.total_size > v {
                return bad(
                    "sampling.total_size",
                    format!("{} exceeds model.vocab_size {v}", self.sampling.total_size),
                );
            }
        }
        if self.sampling.strategy.is_some()
            && self.sampling.distribution == DistributionSource::SelfConditionedCtc
            && !self.self_condition
        {
            return bad("sampling.distribution", "sc-ctc requires model.self_condition = true".into());
        }
        let w = self.weights;
        for (key, v) in [("loss.transducer", w.transducer), ("loss.ctc", w.ctc), ("loss.inter_ctc", w.inter_ctc)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !(w.transducer > 0.0) {
            return bad("loss.transducer", "must be positive".into());
        }
        if self.decode.beam == 0 {
            return bad("decode.beam", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Memory-sweep settings for `memplot`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemSweep {
    pub base: MemConfig,
    pub sampled_sizes: Vec<u64>,
}

impl Default for MemSweep {
    fn default() -> Self {
        MemSweep {
            base: MemConfig::default(),
            sampled_sizes: vec![100, 200, 300, 500, 1000, 2000],
        }
    }
}

/// Synthetic-batch settings for `bench`.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batch: usize,
    pub frames: usize,
    pub target_len: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch: 4,
            frames: 40,
            target_len: 8,
            vocab_size: 200,
            feature_dim: 24,
            repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub synth: SynthSpec,
    /// Utterances written by `gen-data`.
    pub synth_count: usize,
    pub mem: MemSweep,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            synth_count: 1000,
            mem: MemSweep::default(),
            bench: BenchConfig::default(),
        }
    }
}

struct Entries {
    source: String,
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str, source: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                source_name: source.into(),
                line: lineno,
                key: line.into(),
                msg: "expected key = value".into(),
            })?;
            let key = key.trim();
            let key = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some((first, _)) = map.insert(key.clone(), (lineno, value.trim().to_string())) {
                return Err(CliError::Config {
                    source_name: source.into(),
                    line: lineno,
                    key,
                    msg: format!("duplicate key (first set on line {first})"),
                });
            }
        }
        Ok(Entries {
            source: source.into(),
            map,
        })
    }

    fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some((line, value)) = self.map.remove(key) {
            *slot = value.parse().map_err(|e: T::Err| CliError::Config {
                source_name: self.source.clone(),
                line,
                key: key.into(),
                msg: format!("cannot parse {value:?}: {e}"),
            })?;
        }
        Ok(())
    }

    fn take_with<T>(&mut self, key: &str, slot: &mut T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<()> {
        if let Some((line, value)) = self.map.remove(key) {
            *slot = parse(&value).map_err(|msg| CliError::Config {
                source_name: self.source.clone(),
                line,
                key: key.into(),
                msg,
            })?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.map.into_iter().next() {
            Some((key, (line, _))) => Err(CliError::Config {
                source_name: self.source,
                line,
                key,
                msg: "unknown key".into(),
            }),
            None => Ok(()),
        }
    }
}

pub fn parse_strategy(s: &str) -> std::result::Result<Option<SamplingStrategy>, String> {
    match s {
        "none" | "full" => Ok(None),
        "batched" => Ok(Some(SamplingStrategy::Batched)),
        "example-wise" => Ok(Some(SamplingStrategy::ExampleWise)),
        _ => Err(format!("unknown strategy {s:?} (none, batched, example-wise)")),
    }
}

pub fn parse_distribution(s: &str) -> std::result::Result<DistributionSource, String> {
    match s {
        "uniform" => Ok(DistributionSource::Uniform),
        "joint-ctc" => Ok(DistributionSource::JointCtc),
        "inter-ctc" => Ok(DistributionSource::IntermediateCtc),
        "sc-ctc" => Ok(DistributionSource::SelfConditionedCtc),
        _ => Err(format!("unknown distribution {s:?} (uniform, joint-ctc, inter-ctc, sc-ctc)")),
    }
}

pub fn strategy_name(s: Option<SamplingStrategy>) -> &'static str {
    match s {
        None => "none",
        Some(SamplingStrategy::Batched) => "batched",
        Some(SamplingStrategy::ExampleWise) => "example-wise",
    }
}

pub fn distribution_name(d: DistributionSource) -> &'static str {
    match d {
        DistributionSource::Uniform => "uniform",
        DistributionSource::JointCtc => "joint-ctc",
        DistributionSource::IntermediateCtc => "inter-ctc",
        DistributionSource::SelfConditionedCtc => "sc-ctc",
    }
}

fn parse_mode(s: &str) -> std::result::Result<DecodeMode, String> {
    match s {
        "greedy" => Ok(DecodeMode::Greedy),
        "beam" => Ok(DecodeMode::Beam),
        _ => Err(format!("unknown decode mode {s:?} (greedy, beam)")),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<u64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("bad list entry {x:?}: {e}")))
        .collect()
}

impl Config {
    pub fn parse(text: &str, source: &str) -> Result<Config> {
        let mut e = Entries::parse(text, source)?;
        let mut c = Config::default();

        let t = &mut c.train;
        e.take("model.hidden", &mut t.hidden)?;
        e.take("model.self_condition", &mut t.self_condition)?;
        e.take_with("model.vocab_size", &mut t.vocab_size, |s| {
            s.parse().map(Some).map_err(|e| format!("cannot parse {s:?}: {e}"))
        })?;
        e.take("optim.lr", &mut t.optim.lr)?;
        e.take("optim.beta1", &mut t.optim.beta1)?;
        e.take("optim.beta2", &mut t.optim.beta2)?;
        e.take("optim.eps", &mut t.optim.eps)?;
        e.take("optim.clip_norm", &mut t.optim.clip_norm)?;
        e.take("optim.final_lr_scale", &mut t.optim.final_lr_scale)?;
        let mut kind = String::from("adam");
        e.take("optim.kind", &mut kind)?;
        if kind != "adam" {
            return Err(CliError::field("optim.kind", format!("only adam is supported, got {kind:?}")));
        }
        e.take("train.epochs", &mut t.epochs)?;
        e.take("train.batch_size", &mut t.batch_size)?;
        e.take("train.seed", &mut t.seed)?;
        e.take("train.dev_fraction", &mut t.dev_fraction)?;
        e.take_with("sampling.strategy", &mut t.sampling.strategy, parse_strategy)?;
        e.take_with("sampling.distribution", &mut t.sampling.distribution, parse_distribution)?;
        e.take("sampling.total_size", &mut t.sampling.total_size)?;
        e.take("loss.transducer", &mut t.weights.transducer)?;
        e.take("loss.ctc", &mut t.weights.ctc)?;
        e.take("loss.inter_ctc", &mut t.weights.inter_ctc)?;
        e.take_with("decode.mode", &mut t.decode.mode, parse_mode)?;
        e.take("decode.beam", &mut t.decode.beam)?;
        e.take("decode.ctc_top_k", &mut t.decode.ctc_top_k)?;

        let s = &mut c.synth;
        e.take("synth.count", &mut c.synth_count)?;
        e.take("synth.vocab_size", &mut s.vocab_size)?;
        e.take("synth.feature_dim", &mut s.feature_dim)?;
        e.take("synth.zipf_exponent", &mut s.zipf_exponent)?;
        e.take("synth.mean_target_len", &mut s.mean_target_len)?;
        e.take("synth.max_target_len", &mut s.max_target_len)?;
        e.take("synth.min_frames_per_label", &mut s.min_frames_per_label)?;
        e.take("synth.max_frames_per_label", &mut s.max_frames_per_label)?;
        e.take("synth.noise", &mut s.noise)?;
        e.take("synth.seed", &mut s.seed)?;

        let m = &mut c.mem.base;
        e.take("mem.frames", &mut m.frames)?;
        e.take("mem.target_len", &mut m.target_len)?;
        e.take("mem.vocab_size", &mut m.vocab_size)?;
        e.take("mem.batch", &mut m.batch)?;
        e.take("mem.hidden", &mut m.hidden)?;
        e.take("mem.input_dim", &mut m.input_dim)?;
        e.take("mem.element_bytes", &mut m.element_bytes)?;
        e.take("mem.self_condition", &mut m.self_condition)?;
        e.take("mem.count_logit_grad", &mut m.count_logit_grad)?;
        e.take_with("mem.sweep", &mut c.mem.sampled_sizes, parse_list)?;

        let b = &mut c.bench;
        e.take("bench.batch", &mut b.batch)?;
        e.take("bench.frames", &mut b.frames)?;
        e.take("bench.target_len", &mut b.target_len)?;
        e.take("bench.vocab_size", &mut b.vocab_size)?;
        e.take("bench.feature_dim", &mut b.feature_dim)?;
        e.take("bench.repeats", &mut b.repeats)?;

        e.finish()?;
        c.train.validate()?;
        c.synth.validate().map_err(|err| CliError::field("synth", err.to_string()))?;
        c.mem.base.validate().map_err(|err| CliError::field("mem", err.to_string()))?;
        if let Some(&s) = c.mem.sampled_sizes.iter().find(|&&s| s == 0 || s > c.mem.base.vocab_size) {
            return Err(CliError::field("mem.sweep", format!("sampled size {s} outside 1..={}", c.mem.base.vocab_size)));
        }
        let b = &c.bench;
        if b.batch == 0 || b.frames == 0 || b.target_len == 0 || b.vocab_size < 2 || b.feature_dim == 0 || b.repeats == 0 {
            return Err(CliError::field("bench", "batch, frames, target_len, feature_dim and repeats must be positive, vocab_size >= 2"));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Config::parse(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_dotted_keys() {
        let c = Config::parse(
            "# top\nsampling.strategy = example-wise\n[optim]\nlr = 0.003 # inline\n[train]\nepochs=3\nmodel.hidden=16\n",
            "t.cfg",
        )
        .unwrap();
        assert_eq!(c.train.sampling.strategy, Some(SamplingStrategy::ExampleWise));
        assert_eq!(c.train.optim.lr, 0.003);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.hidden, 16);
        assert_eq!(Config::parse("", "empty").unwrap(), Config::default());
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("train.epoch = 3", "train.epoch"),
            ("optim.lr = fast", "optim.lr"),
            ("optim.lr = -1", "optim.lr"),
            ("sampling.strategy = random", "sampling.strategy"),
            ("train.seed = 1\ntrain.seed = 2", "train.seed"),
            ("model.self_condition = false\nsampling.strategy=batched\nsampling.distribution = sc-ctc", "sampling.distribution"),
            ("mem.sweep = 100,5000", "mem.sweep"),
            ("just words", "just words"),
        ] {
            let msg = Config::parse(text, "x.cfg").unwrap_err().to_string();
            assert!(msg.contains(key), "{text:?} gave {msg}");
            assert!(!msg.contains('\n'));
        }
    }
}
