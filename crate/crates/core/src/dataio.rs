//! Synthetic transducer task, JSON-Lines dataset files and token error rate.
//!
//! Each label owns a Gaussian prototype vector. An utterance repeats each
//! target label's prototype for a few frames, adds noise, and marks the
//! first frame of every segment in the last feature channel so that
//! repeated labels stay separable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BLANK;
use crate::numerics::{derive_seed, SeededRng};
use crate::rnnt_loss::TargetSeq;

pub const DATASET_FORMAT: &str = "tkit-dataset";
pub const DATASET_VERSION: u32 = 1;

const TAG_PROTOTYPE: u64 = 0x5052_4f54;
const TAG_UTTERANCE: u64 = 0x5554_5452;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: usize,
    /// Row-major `frames x feature_dim`.
    pub features: Vec<f64>,
    pub target: TargetSeq,
}

impl Utterance {
    pub fn feature_dim(&self) -> usize {
        self.features.len() / self.frames.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn empty() -> Self {
        Dataset {
            vocab_size: 0,
            feature_dim: 0,
            utterances: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Splits off the last `fraction` of utterances (at least one when
    /// `fraction > 0` and two or more exist).
    pub fn split(mut self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.utterances.len();
        let mut k = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && n >= 2 {
            k = k.clamp(1, n - 1);
        }
        let tail = self.utterances.split_off(n - k.min(n));
        let dev = Dataset {
            vocab_size: self.vocab_size,
            feature_dim: self.feature_dim,
            utterances: tail,
        };
        (self, dev)
    }
}

/// Parameters of the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Including blank, which is never emitted as a target.
    pub vocab_size: usize,
    /// Including the trailing onset channel.
    pub feature_dim: usize,
    pub zipf_exponent: f64,
    pub mean_target_len: f64,
    pub max_target_len: usize,
    pub min_frames_per_label: usize,
    pub max_frames_per_label: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab_size: 200,
            feature_dim: 24,
            zipf_exponent: 1.0,
            mean_target_len: 4.0,
            max_target_len: 12,
            min_frames_per_label: 1,
            max_frames_per_label: 4,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.feature_dim < 2 {
            return bad(format!("feature_dim must be at least 2, got {}", self.feature_dim));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("zipf exponent must be finite and >= 0, got {}", self.zipf_exponent));
        }
        if !(self.mean_target_len >= 1.0 && self.mean_target_len.is_finite()) {
            return bad(format!("mean target length must be >= 1, got {}", self.mean_target_len));
        }
        if self.max_target_len == 0 {
            return bad("max_target_len must be positive".into());
        }
        if self.min_frames_per_label == 0 || self.min_frames_per_label > self.max_frames_per_label {
            return bad(format!(
                "frames-per-label range {}..={} is empty or starts at zero",
                self.min_frames_per_label, self.max_frames_per_label
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        Ok(())
    }

    /// Zipf law over the non-blank ids; rank `r` maps to id `r`.
    pub fn label_distribution(&self) -> Result<Zipf<f64>> {
        Zipf::new((self.vocab_size - 1) as f64, self.zipf_exponent)
            .map_err(|e| Error::Invalid(format!("zipf: {e}")))
    }

    /// Probability of each id under [`Self::label_distribution`] (blank 0).
    pub fn label_pmf(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.vocab_size];
        let mut z = 0.0;
        for (k, pk) in p.iter_mut().enumerate().skip(1) {
            *pk = (k as f64).powf(-self.zipf_exponent);
            z += *pk;
        }
        p.iter_mut().for_each(|x| *x /= z);
        p
    }

    /// `vocab_size x (feature_dim - 1)` prototype table, row 0 unused.
    pub fn prototypes(&self) -> Vec<f64> {
        let d = self.feature_dim - 1;
        let mut rng = SeededRng::new(derive_seed(self.seed, TAG_PROTOTYPE, 0), 0);
        (0..self.vocab_size * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

/// Generates `n` utterances; each one draws from its own seeded stream.
pub fn generate(spec: &SynthSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let zipf = spec.label_distribution()?;
    let poisson = if spec.mean_target_len > 1.0 {
        Some(Poisson::new(spec.mean_target_len - 1.0).map_err(|e| Error::Invalid(format!("poisson: {e}")))?)
    } else {
        None
    };
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Invalid(format!("noise: {e}")))?;
    let protos = spec.prototypes();
    let d = spec.feature_dim - 1;

    let utterances = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::new(derive_seed(spec.seed, TAG_UTTERANCE, i as u64), 0);
            let extra = poisson.map_or(0, |p| p.sample(&mut rng) as usize);
            let len = (1 + extra).min(spec.max_target_len);
            let labels: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng) as usize).collect();

            let mut features = Vec::new();
            let mut frames = 0;
            for &y in &labels {
                let span = rng.random_range(spec.min_frames_per_label..=spec.max_frames_per_label);
                for f in 0..span {
                    let proto = &protos[y * d..(y + 1) * d];
                    features.extend(proto.iter().map(|&p| p + noise.sample(&mut rng)));
                    features.push(if f == 0 { 1.0 } else { 0.0 });
                    frames += 1;
                }
            }
            let target = TargetSeq::new(labels, BLANK).expect("zipf ids are never blank");
            Utterance {
                id: format!("utt-{i:06}"),
                frames,
                features,
                target,
            }
        })
        .collect();

    Ok(Dataset {
        vocab_size: spec.vocab_size,
        feature_dim: spec.feature_dim,
        utterances,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    vocab_size: usize,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    target: Vec<usize>,
    features: Vec<Vec<f64>>,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        vocab_size: ds.vocab_size,
        feature_dim: ds.feature_dim,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for u in &ds.utterances {
        let rec = Record {
            id: u.id.clone(),
            target: u.target.labels().to_vec(),
            features: u.features.chunks(ds.feature_dim.max(1)).map(<[f64]>::to_vec).collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(ds, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// Reads a dataset; `path` only labels errors.
pub fn read_dataset<R: BufRead>(reader: R, path: &Path) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: Header = match lines.next() {
        None => return Ok(Dataset::empty()),
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::file(path, format!("malformed header on line 1: {e}")))?
        }
    };
    if header.format != DATASET_FORMAT {
        return Err(Error::file(
            path,
            format!("bad magic: format is {:?}, expected {DATASET_FORMAT:?}", header.format),
        ));
    }
    if header.version != DATASET_VERSION {
        return Err(Error::file(
            path,
            format!("unsupported version {} (expected {DATASET_VERSION})", header.version),
        ));
    }
    if header.vocab_size < 2 || header.feature_dim == 0 {
        return Err(Error::file(path, "header has vocab_size < 2 or feature_dim 0"));
    }

    let mut utterances = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::file(path, format!("line {lineno}: {e}")))?;
        let at = |msg: String| Error::file(path, format!("line {lineno} ({}): {msg}", rec.id));
        if rec.features.is_empty() {
            return Err(at("utterance has no frames".into()));
        }
        if let Some(r) = rec.features.iter().position(|r| r.len() != header.feature_dim) {
            return Err(at(format!(
                "frame {r} has {} values, expected {}",
                rec.features[r].len(),
                header.feature_dim
            )));
        }
        if let Some(&y) = rec.target.iter().find(|&&y| y >= header.vocab_size) {
            return Err(at(format!("label {y} >= vocab_size {}", header.vocab_size)));
        }
        let target = TargetSeq::new(rec.target.clone(), BLANK).map_err(|e| at(e.to_string()))?;
        utterances.push(Utterance {
            frames: rec.features.len(),
            features: rec.features.concat(),
            id: rec.id,
            target,
        });
    }
    Ok(Dataset {
        vocab_size: header.vocab_size,
        feature_dim: header.feature_dim,
        utterances,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(f), path)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Corpus token error rate: total edits over total reference length.
pub fn token_error_rate<R: AsRef<[usize]>, H: AsRef<[usize]>>(pairs: &[(R, H)]) -> f64 {
    let (edits, len) = pairs.iter().fold((0usize, 0usize), |(e, n), (r, h)| {
        (e + edit_distance(r.as_ref(), h.as_ref()), n + r.as_ref().len())
    });
    if len == 0 {
        return if edits == 0 { 0.0 } else { f64::INFINITY };
    }
    edits as f64 / len as f64
}
