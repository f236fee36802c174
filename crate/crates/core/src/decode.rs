//! Greedy and beam-search transducer decoding, optionally restricted to a
//! vocabulary subset taken from the frame-averaged CTC posterior.
//!
//! Scores are log-probabilities of the emission path under the model's full
//! softmax; a constraint only removes choices, it does not renormalise.

use std::collections::HashMap;
use std::rc::Rc;

use crate::ctc::{ctc_posterior, CtcPosterior};
use crate::error::{Error, Result};
use crate::model::{ToyModel, BLANK};
use crate::numerics::log_softmax_into;

/// Default cap on consecutive label emissions within one frame.
pub const MAX_SYMBOLS_PER_FRAME: usize = 10;

/// A decoded label sequence with the log-probability of its path.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub score: f64,
    /// Prediction-network state after the last emitted label.
    pub pred_state: Vec<f64>,
}

/// Labels the decoder may emit. Blank is always allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConstraint {
    allowed: Vec<usize>,
    mask: Vec<bool>,
    k: Option<usize>,
}

impl DecodeConstraint {
    pub fn new(vocab_size: usize, labels: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut mask = vec![false; vocab_size];
        mask[BLANK] = true;
        for l in labels {
            if l >= vocab_size {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    vocab_size,
                });
            }
            mask[l] = true;
        }
        let allowed = (0..vocab_size).filter(|&v| mask[v]).collect();
        Ok(DecodeConstraint {
            allowed,
            mask,
            k: None,
        })
    }

    /// Allowed ids in ascending order (blank first).
    pub fn allowed(&self) -> &[usize] {
        &self.allowed
    }

    pub fn allows(&self, id: usize) -> bool {
        self.mask.get(id).copied().unwrap_or(false)
    }

    pub fn k(&self) -> Option<usize> {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.mask.len()
    }
}

/// Blank plus the `k` non-blank labels with the highest frame-averaged
/// posterior; ties go to the smaller id.
pub fn build_ctc_constraint(posterior: &CtcPosterior, k: usize) -> Result<DecodeConstraint> {
    let vocab = posterior.vocab();
    if k == 0 || k >= vocab {
        return Err(Error::Invalid(format!(
            "top-k of {k} outside 1..={} for vocabulary {vocab}",
            vocab - 1
        )));
    }
    let avg = posterior.frame_average();
    let mut ranked: Vec<usize> = (0..vocab).filter(|&v| v != BLANK).collect();
    ranked.sort_by(|&a, &b| avg[b].total_cmp(&avg[a]).then(a.cmp(&b)));
    let mut c = DecodeConstraint::new(vocab, ranked.into_iter().take(k))?;
    c.k = Some(k);
    Ok(c)
}

/// Encoder-side quantities shared by all decoding passes of one utterance.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    frames: usize,
    enc_proj: Vec<f64>,
    pub ctc_posterior: CtcPosterior,
}

impl PreparedUtterance {
    pub fn frames(&self) -> usize {
        self.frames
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'m> {
    model: &'m ToyModel,
    pub self_condition: bool,
    pub max_symbols_per_frame: usize,
}

/// Log-softmax scorer over the full vocabulary at one lattice node.
struct Scorer<'m> {
    model: &'m ToyModel,
    ids: Vec<usize>,
    j: Vec<f64>,
    logits: Vec<f64>,
}

impl<'m> Scorer<'m> {
    fn new(model: &'m ToyModel) -> Self {
        let d = model.dims();
        Scorer {
            model,
            ids: (0..d.vocab_size).collect(),
            j: vec![0.0; d.hidden],
            logits: vec![0.0; d.vocab_size],
        }
    }

    fn log_probs(&mut self, enc_proj: &[f64], pred_proj: &[f64], out: &mut [f64]) {
        self.model
            .joint_node(enc_proj, pred_proj, &self.ids, &mut self.j, &mut self.logits);
        log_softmax_into(&self.logits, out);
    }
}

#[derive(Clone)]
struct Partial {
    labels: Vec<usize>,
    score: f64,
    t: usize,
    emitted: usize,
    /// Prediction state and its joint projection, shared until a label
    /// extends the prefix.
    state: Rc<(Vec<f64>, Vec<f64>)>,
    /// Label appended since `state` was computed.
    pending: Option<usize>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m ToyModel, self_condition: bool) -> Self {
        Decoder {
            model,
            self_condition,
            max_symbols_per_frame: MAX_SYMBOLS_PER_FRAME,
        }
    }

    pub fn prepare(&self, features: &[f64], frames: usize) -> Result<PreparedUtterance> {
        let encoded = self.model.encode(features, frames, self.self_condition)?;
        Ok(PreparedUtterance {
            frames,
            enc_proj: self.model.joint_enc_proj(&encoded.h_enc),
            ctc_posterior: ctc_posterior(&encoded.ctc_logits),
        })
    }

    fn check_constraint(&self, constraint: Option<&DecodeConstraint>) -> Result<()> {
        match constraint {
            Some(c) if c.vocab_size() != self.model.dims().vocab_size => Err(Error::Shape(format!(
                "constraint over {} labels for a model with {}",
                c.vocab_size(),
                self.model.dims().vocab_size
            ))),
            _ => Ok(()),
        }
    }

    fn start_state(&self) -> (Vec<f64>, Vec<f64>) {
        let g = self.model.pred_start.data().to_vec();
        let p = self.model.joint_pred_proj(&g);
        (g, p)
    }

    fn advance_state(&self, prev: &[f64], label: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = vec![0.0; prev.len()];
        self.model.predict_step(prev, label, &mut g)?;
        let p = self.model.joint_pred_proj(&g);
        Ok((g, p))
    }

    /// Best allowed choice at one node: argmax with ties to the smaller id;
    /// blank is forced once the per-frame emission cap is reached.
    fn pick(&self, logp: &[f64], emitted: usize, constraint: Option<&DecodeConstraint>) -> usize {
        if emitted >= self.max_symbols_per_frame {
            return BLANK;
        }
        let mut best = BLANK;
        for (v, &lp) in logp.iter().enumerate() {
            if lp > logp[best] && constraint.is_none_or(|c| c.allows(v)) {
                best = v;
            }
        }
        best
    }

    pub fn greedy(
        &self,
        utt: &PreparedUtterance,
        constraint: Option<&DecodeConstraint>,
    ) -> Result<Hypothesis> {
        self.check_constraint(constraint)?;
        let h = self.model.dims().hidden;
        let mut scorer = Scorer::new(self.model);
        let mut logp = vec![0.0; self.model.dims().vocab_size];
        let (mut g, mut pp) = self.start_state();
        let mut labels = Vec::new();
        let mut score = 0.0;
        let (mut t, mut emitted) = (0, 0);
        while t < utt.frames {
            scorer.log_probs(&utt.enc_proj[t * h..(t + 1) * h], &pp, &mut logp);
            let choice = self.pick(&logp, emitted, constraint);
            score += logp[choice];
            if choice == BLANK {
                t += 1;
                emitted = 0;
            } else {
                labels.push(choice);
                (g, pp) = self.advance_state(&g, choice)?;
                emitted += 1;
            }
        }
        Ok(Hypothesis {
            labels,
            score,
            pred_state: g,
        })
    }

    /// Path-level beam search. Each round expands every unfinished
    /// hypothesis by blank and by every allowed label, merges candidates
    /// that reach the same `(t, emissions in frame, labels)` keeping the
    /// better score, and keeps the `beam` best by score (ties: shorter or
    /// lexicographically smaller label sequence first). The greedy path is
    /// also a candidate for the final answer, so the result never scores
    /// below greedy decoding.
    pub fn beam_search(
        &self,
        utt: &PreparedUtterance,
        beam: usize,
        constraint: Option<&DecodeConstraint>,
    ) -> Result<Hypothesis> {
        if beam == 0 {
            return Err(Error::Invalid("beam must be at least 1".into()));
        }
        self.check_constraint(constraint)?;
        let greedy = self.greedy(utt, constraint)?;
        let h = self.model.dims().hidden;
        let vocab = self.model.dims().vocab_size;
        let mut scorer = Scorer::new(self.model);
        let mut logp = vec![0.0; vocab];

        let mut hyps = vec![Partial {
            labels: Vec::new(),
            score: 0.0,
            t: 0,
            emitted: 0,
            state: Rc::new(self.start_state()),
            pending: None,
        }];
        while hyps.iter().any(|p| p.t < utt.frames) {
            let mut candidates: Vec<Partial> = Vec::new();
            for hyp in hyps {
                if hyp.t >= utt.frames {
                    candidates.push(hyp);
                    continue;
                }
                scorer.log_probs(&utt.enc_proj[hyp.t * h..(hyp.t + 1) * h], &hyp.state.1, &mut logp);
                candidates.push(Partial {
                    labels: hyp.labels.clone(),
                    score: hyp.score + logp[BLANK],
                    t: hyp.t + 1,
                    emitted: 0,
                    state: Rc::clone(&hyp.state),
                    pending: None,
                });
                if hyp.emitted >= self.max_symbols_per_frame {
                    continue;
                }
                for (v, &lp) in logp.iter().enumerate() {
                    if v == BLANK || constraint.is_some_and(|c| !c.allows(v)) {
                        continue;
                    }
                    let mut labels = hyp.labels.clone();
                    labels.push(v);
                    candidates.push(Partial {
                        labels,
                        score: hyp.score + lp,
                        t: hyp.t,
                        emitted: hyp.emitted + 1,
                        state: Rc::clone(&hyp.state),
                        pending: Some(v),
                    });
                }
            }

            let mut best: HashMap<(usize, usize, Vec<usize>), usize> = HashMap::new();
            let mut merged: Vec<Partial> = Vec::with_capacity(candidates.len());
            for c in candidates {
                let key = (c.t, c.emitted, c.labels.clone());
                match best.get(&key) {
                    Some(&i) if merged[i].score >= c.score => {}
                    Some(&i) => merged[i] = c,
                    None => {
                        best.insert(key, merged.len());
                        merged.push(c);
                    }
                }
            }
            merged.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then_with(|| a.labels.cmp(&b.labels))
                    .then(a.t.cmp(&b.t))
            });
            merged.truncate(beam);
            for p in merged.iter_mut() {
                if let Some(label) = p.pending.take() {
                    p.state = Rc::new(self.advance_state(&p.state.0, label)?);
                }
            }
            hyps = merged;
        }

        let top = hyps.into_iter().next().expect("beam is never empty");
        if greedy.score > top.score {
            return Ok(greedy);
        }
        Ok(Hypothesis {
            labels: top.labels,
            score: top.score,
            pred_state: top.state.0.clone(),
        })
    }
}

/// Greedy decoding with the default emission cap.
pub fn greedy_decode(
    model: &ToyModel,
    features: &[f64],
    frames: usize,
    self_condition: bool,
    constraint: Option<&DecodeConstraint>,
) -> Result<Vec<usize>> {
    let dec = Decoder::new(model, self_condition);
    let utt = dec.prepare(features, frames)?;
    Ok(dec.greedy(&utt, constraint)?.labels)
}

/// Beam search with the default emission cap.
pub fn beam_search(
    model: &ToyModel,
    features: &[f64],
    frames: usize,
    self_condition: bool,
    beam: usize,
    constraint: Option<&DecodeConstraint>,
) -> Result<Hypothesis> {
    let dec = Decoder::new(model, self_condition);
    let utt = dec.prepare(features, frames)?;
    dec.beam_search(&utt, beam, constraint)
}
