//! Subcommand bodies. Each writes its report to `out` and returns an error
//! carrying a one-line diagnostic on bad input.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use tkit_core::dataio::{generate, load_dataset, save_dataset, Dataset};
use tkit_core::memory_model::{memory_report, MemConfig};
use tkit_core::model::{ModelDims, ToyModel};
use tkit_core::numerics::derive_seed;
use tkit_core::sampler::SamplingStrategy;

use crate::checks::{measure_step, render_table, run_all, synthetic_batch, Fault};
use crate::config::{Config, TrainConfig};
use crate::error::{CliError, Result};
use crate::trainer::{build_pool, check_compatible, evaluate, mode_name, train, Workers};

const MODEL_INIT_TAG: u64 = 0x494e_4954;

fn write_err(e: std::io::Error) -> CliError {
    CliError::io("<output>", e)
}

pub fn gen_data(cfg: &Config, count: Option<usize>, seed: Option<u64>, path: &Path, out: &mut dyn Write) -> Result<()> {
    let mut spec = cfg.synth.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let n = count.unwrap_or(cfg.synth_count);
    let ds = generate(&spec, n)?;
    save_dataset(&ds, path)?;
    let labels: usize = ds.utterances.iter().map(|u| u.target.len()).sum();
    let frames: usize = ds.utterances.iter().map(|u| u.frames).sum();
    writeln!(
        out,
        "wrote={} utterances={} labels={} frames={} vocab_size={} feature_dim={} seed={}",
        path.display(),
        ds.len(),
        labels,
        frames,
        ds.vocab_size,
        ds.feature_dim,
        spec.seed
    )
    .map_err(write_err)
}

/// Seeded initial model for a dataset.
pub fn init_model(cfg: &TrainConfig, ds: &Dataset) -> Result<ToyModel> {
    let dims = ModelDims {
        input_dim: ds.feature_dim,
        hidden: cfg.hidden,
        vocab_size: ds.vocab_size,
    };
    Ok(ToyModel::new(dims, derive_seed(cfg.seed, MODEL_INIT_TAG, 0))?)
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub dev: Option<&'a Path>,
    pub checkpoint: &'a Path,
    pub seed: Option<u64>,
    pub workers: usize,
    pub log: Option<&'a Path>,
}

pub fn train_cmd(cfg: &Config, args: &TrainArgs<'_>, out: &mut dyn Write) -> Result<()> {
    let mut tc = cfg.train.clone();
    if let Some(s) = args.seed {
        tc.seed = s;
    }
    let data = load_dataset(args.data)?;
    if data.is_empty() {
        return Err(CliError::field("--data", format!("{} holds no utterances", args.data.display())));
    }
    let (train_set, dev_set) = match args.dev {
        Some(p) => (data, load_dataset(p)?),
        None => data.split(tc.dev_fraction),
    };
    let mut model = init_model(&tc, &train_set)?;
    let pool = build_pool(args.workers)?;
    let workers = pool.as_ref().map_or(Workers::inline(), Workers::pool);

    let mut log_file = match args.log {
        Some(p) => Some((p, std::fs::File::create(p).map_err(|e| CliError::io(p, e))?)),
        None => None,
    };
    let mut io_err = None;
    let mut sink = |line: &str| {
        let r = writeln!(out, "{line}").map_err(write_err).and_then(|_| match &mut log_file {
            Some((p, f)) => writeln!(f, "{line}").map_err(|e| CliError::io(*p, e)),
            None => Ok(()),
        });
        if let (Err(e), None) = (r, &io_err) {
            io_err = Some(e);
        }
    };
    train(&mut model, &train_set, &dev_set, &tc, workers, &mut sink)?;
    if let Some(e) = io_err {
        return Err(e);
    }
    model.save(args.checkpoint)?;
    log::info!("checkpoint written to {}", args.checkpoint.display());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub outputs: Option<&'a Path>,
    pub workers: usize,
}

pub fn eval_cmd(cfg: &Config, args: &EvalArgs<'_>, out: &mut dyn Write) -> Result<()> {
    let model = ToyModel::load(args.checkpoint)?;
    let ds = load_dataset(args.data)?;
    check_compatible(&model, &ds, &cfg.train, &args.data.display().to_string())?;
    let pool = build_pool(args.workers)?;
    let workers = pool.as_ref().map_or(Workers::inline(), Workers::pool);
    let d = &cfg.train.decode;
    let report = evaluate(&model, &ds, cfg.train.self_condition, d, workers)?;
    if let Some(p) = args.outputs {
        let mut f = std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| CliError::io(p, e))?);
        for o in &report.outputs {
            let line = serde_json::json!({"id": o.id, "reference": o.reference, "hypothesis": o.hypothesis});
            writeln!(f, "{line}").map_err(|e| CliError::io(p, e))?;
        }
        f.flush().map_err(|e| CliError::io(p, e))?;
    }
    writeln!(
        out,
        "eval utterances={} ter={:.6} edits={} ref_tokens={} mode={} beam={} ctc_top_k={}",
        ds.len(),
        report.ter,
        report.edits,
        report.ref_tokens,
        mode_name(d.mode),
        d.beam,
        d.ctc_top_k
    )
    .map_err(write_err)
}

pub const MEMPLOT_HEADER: &str = "label,vocab_size,sampled_size,component,bytes";

/// Memory report rows for the full softmax and each swept sample size.
pub fn memplot(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let base = MemConfig {
        sampled_size: None,
        ..cfg.mem.base
    };
    writeln!(out, "{MEMPLOT_HEADER}").map_err(write_err)?;
    let rows = std::iter::once(("full", base)).chain(cfg.mem.sampled_sizes.iter().map(|&s| {
        (
            "sampled",
            MemConfig {
                sampled_size: Some(s),
                ..base
            },
        )
    }));
    for (label, mc) in rows {
        let report = memory_report(&mc)?;
        for (component, bytes) in report.rows() {
            writeln!(out, "{label},{},{},{component},{bytes}", mc.vocab_size, mc.label_axis()).map_err(write_err)?;
        }
    }
    Ok(())
}

pub const BENCH_HEADER: &str =
    "mode,batch,frames,target_len,vocab_size,label_size,peak_logit_bytes,formula_bytes,step_ms,loss";

/// Times full and sampled training steps on a synthetic batch.
pub fn bench(cfg: &Config, seed: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let b = &cfg.bench;
    let seed = seed.unwrap_or(cfg.train.seed);
    let dims = ModelDims {
        input_dim: b.feature_dim,
        hidden: cfg.train.hidden,
        vocab_size: b.vocab_size,
    };
    let model = ToyModel::new(dims, derive_seed(seed, MODEL_INIT_TAG, 0))?;
    let batch = synthetic_batch(b.batch, b.frames, b.target_len, b.vocab_size, b.feature_dim, seed);

    let mut full = cfg.train.clone();
    full.sampling.strategy = None;
    let mut sampled = cfg.train.clone();
    sampled.sampling.strategy = Some(sampled.sampling.strategy.unwrap_or(SamplingStrategy::ExampleWise));
    if sampled.sampling.total_size > b.vocab_size {
        return Err(CliError::field(
            "sampling.total_size",
            format!("{} exceeds bench.vocab_size {}", sampled.sampling.total_size, b.vocab_size),
        ));
    }

    writeln!(out, "{BENCH_HEADER}").map_err(write_err)?;
    for (mode, tc) in [("full", &full), ("sampled", &sampled)] {
        let mut total_ms = 0.0;
        let mut last = None;
        for _ in 0..b.repeats {
            let start = Instant::now();
            last = Some(measure_step(&model, tc, &batch)?);
            total_ms += start.elapsed().as_secs_f64() * 1e3;
        }
        let (peak, formula, step) = last.expect("repeats >= 1");
        let label_size = step.label_sizes.iter().copied().max().unwrap_or(0);
        writeln!(
            out,
            "{mode},{},{},{},{},{label_size},{peak},{formula},{:.3},{:.9}",
            b.batch,
            b.frames,
            b.target_len,
            b.vocab_size,
            total_ms / b.repeats as f64,
            step.loss_transducer / step.examples as f64
        )
        .map_err(write_err)?;
    }
    Ok(())
}

/// Runs the check suite; `Ok(false)` when any check fails.
pub fn selftest(seed: u64, fault: Fault, out: &mut dyn Write) -> Result<bool> {
    let outcomes = run_all(seed, fault);
    write!(out, "{}", render_table(&outcomes)).map_err(write_err)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    writeln!(out, "selftest checks={} failed={failed}", outcomes.len()).map_err(write_err)?;
    Ok(failed == 0)
}
