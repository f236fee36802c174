//! Toy transducer: two-layer tanh encoder with intermediate and final CTC
//! heads, a one-layer tanh prediction network, and an additive tanh joint.
//!
//! ```text
//! h1_t  = tanh(W1x x_t + W1h h1_{t-1} + b1)                 (intermediate output)
//! z_t   = Wi h1_t + bi                                      (intermediate CTC logits)
//! a_t   = h1_t + Wsc softmax(z_t)   if self-conditioning, else h1_t
//! h2_t  = tanh(W2x a_t + W2h h2_{t-1} + b2)                 (encoder output)
//! c_t   = Wc h2_t + bc                                      (joint CTC logits)
//! g_0   = start,  g_u = tanh(Px E[y_u] + Ph g_{u-1} + bp)   (prediction output)
//! j_tu  = tanh(We h2_t + Wp g_u + bj)
//! s_tuv = O_v . j_tu
//! ```
//!
//! Vocabulary id 0 is blank. The prediction network embeds only non-blank
//! ids; row `v - 1` of the embedding belongs to id `v`.

use std::io::{Read, Write};
use std::path::Path;

use crate::ctc::CtcLogits;
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, SeededRng};
use crate::rnnt_loss::{LogitLattice, TargetSeq};
use crate::sampler::SampledVocab;
use crate::tensor::{axpy, dot, Matrix};

pub const BLANK: usize = 0;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TKIT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    /// Output vocabulary including blank.
    pub vocab_size: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.vocab_size < 2 {
            return Err(Error::Invalid(format!(
                "model dims must be positive with vocab_size >= 2, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Relative weights of the three training losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub transducer: f64,
    pub ctc: f64,
    pub inter_ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            transducer: 1.0,
            ctc: 0.5,
            inter_ctc: 0.3,
        }
    }
}

macro_rules! params {
    ($($name:ident),* $(,)?) => {
        /// Parameters of the toy transducer. The same type doubles as the
        /// gradient accumulator.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ToyModel {
            dims: ModelDims,
            $(pub $name: Matrix,)*
        }

        impl ToyModel {
            /// Parameter names in declaration (and checkpoint) order.
            pub const PARAM_NAMES: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn params(&self) -> Vec<&Matrix> {
                vec![$(&self.$name),*]
            }

            pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
                vec![$(&mut self.$name),*]
            }
        }
    };
}

params!(
    enc1_wx, enc1_wh, enc1_b, inter_w, inter_b, sc_w, enc2_wx, enc2_wh, enc2_b, ctc_w, ctc_b,
    pred_embed, pred_start, pred_wx, pred_wh, pred_b, joint_we, joint_wp, joint_b, joint_out,
);

/// Output of [`ToyModel::encode`].
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final encoder output, `T x H`.
    pub h_enc: Vec<f64>,
    /// Layer-1 output, `T x H`.
    pub h_inter: Vec<f64>,
    pub inter_logits: CtcLogits,
    pub ctc_logits: CtcLogits,
    pub cache: EncoderCache,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    frames: usize,
    x: Vec<f64>,
    /// Intermediate softmax, only filled when self-conditioning.
    q: Vec<f64>,
    /// Layer-2 input.
    a: Vec<f64>,
    self_condition: bool,
}

/// Output of [`ToyModel::predict`]: `(U+1) x H` states and the history.
#[derive(Debug, Clone)]
pub struct Predicted {
    pub h_pre: Vec<f64>,
    pub history: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct JointCache {
    frames: usize,
    states: usize,
    ids: Vec<usize>,
    /// Joint hidden activations, `T x (U+1) x H`.
    j: Vec<f64>,
}

impl JointCache {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Everything kept from one training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub encoded: Encoded,
    pub predicted: Predicted,
    pub joint: JointCache,
}

/// Upstream gradients into the model outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct OutputGrads<'a> {
    pub lattice: Option<&'a [f64]>,
    pub ctc: Option<&'a [f64]>,
    pub inter_ctc: Option<&'a [f64]>,
}

fn tanh_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// `d_pre = d_out * (1 - out^2)`.
fn tanh_backward(out: &[f64], d_out: &[f64], d_pre: &mut [f64]) {
    for ((dp, &o), &d) in d_pre.iter_mut().zip(out).zip(d_out) {
        *dp = d * (1.0 - o * o);
    }
}

impl ToyModel {
    /// Seeded initialisation, uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Biases use the fan-in of their layer; the embedding and the start
    /// state use fan-in 1 and `H` respectively.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let ModelDims {
            input_dim: f,
            hidden: h,
            vocab_size: v,
        } = dims;
        let mut stream = 0u64;
        let mut init = |rows: usize, cols: usize, fan_in: usize| {
            let mut rng = SeededRng::new(seed, stream);
            stream += 1;
            Matrix::uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), &mut rng)
        };
        Ok(ToyModel {
            dims,
            enc1_wx: init(h, f, f + h),
            enc1_wh: init(h, h, f + h),
            enc1_b: init(h, 1, f + h),
            inter_w: init(v, h, h),
            inter_b: init(v, 1, h),
            sc_w: init(h, v, v),
            enc2_wx: init(h, h, 2 * h),
            enc2_wh: init(h, h, 2 * h),
            enc2_b: init(h, 1, 2 * h),
            ctc_w: init(v, h, h),
            ctc_b: init(v, 1, h),
            pred_embed: init(v - 1, h, 1),
            pred_start: init(h, 1, h),
            pred_wx: init(h, h, 2 * h),
            pred_wh: init(h, h, 2 * h),
            pred_b: init(h, 1, 2 * h),
            joint_we: init(h, h, 2 * h),
            joint_wp: init(h, h, 2 * h),
            joint_b: init(h, 1, 2 * h),
            joint_out: init(v, h, h),
        })
    }

    /// All-zero parameters of the given shape (gradient accumulator).
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        let mut m = ToyModel::new(dims, 0)?;
        m.params_mut().into_iter().for_each(|p| p.fill(0.0));
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        m.params_mut().into_iter().for_each(|p| p.fill(0.0));
        m
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.fill(0.0));
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ToyModel, scale: f64) {
        for (p, o) in self.params_mut().into_iter().zip(other.params()) {
            axpy(scale, o.data(), p.data_mut());
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.data().iter().all(|x| x.is_finite()))
    }

    /// Runs the encoder over `frames` rows of `features` (`T x F`).
    pub fn encode(&self, features: &[f64], frames: usize, self_condition: bool) -> Result<Encoded> {
        let ModelDims {
            input_dim: f,
            hidden: h,
            vocab_size: v,
        } = self.dims;
        if frames == 0 {
            return Err(Error::NoFrames);
        }
        if features.len() != frames * f {
            return Err(Error::Shape(format!(
                "features have {} values, expected {frames}x{f}",
                features.len()
            )));
        }

        let mut h1 = vec![0.0; frames * h];
        for t in 0..frames {
            let (prev, cur) = h1.split_at_mut(t * h);
            let out = &mut cur[..h];
            out.copy_from_slice(self.enc1_b.data());
            self.enc1_wx.gemv_add(&features[t * f..(t + 1) * f], out);
            if t > 0 {
                self.enc1_wh.gemv_add(&prev[(t - 1) * h..], out);
            }
            tanh_in_place(out);
        }

        let mut inter = vec![0.0; frames * v];
        for t in 0..frames {
            let out = &mut inter[t * v..(t + 1) * v];
            out.copy_from_slice(self.inter_b.data());
            self.inter_w.gemv_add(&h1[t * h..(t + 1) * h], out);
        }

        let mut a = h1.clone();
        let mut q = Vec::new();
        if self_condition {
            q = inter.clone();
            for t in 0..frames {
                let qt = &mut q[t * v..(t + 1) * v];
                softmax_in_place(qt);
                self.sc_w.gemv_add(qt, &mut a[t * h..(t + 1) * h]);
            }
        }

        let mut h2 = vec![0.0; frames * h];
        for t in 0..frames {
            let (prev, cur) = h2.split_at_mut(t * h);
            let out = &mut cur[..h];
            out.copy_from_slice(self.enc2_b.data());
            self.enc2_wx.gemv_add(&a[t * h..(t + 1) * h], out);
            if t > 0 {
                self.enc2_wh.gemv_add(&prev[(t - 1) * h..], out);
            }
            tanh_in_place(out);
        }

        let mut ctc = vec![0.0; frames * v];
        for t in 0..frames {
            let out = &mut ctc[t * v..(t + 1) * v];
            out.copy_from_slice(self.ctc_b.data());
            self.ctc_w.gemv_add(&h2[t * h..(t + 1) * h], out);
        }

        Ok(Encoded {
            h_enc: h2,
            h_inter: h1,
            inter_logits: CtcLogits::new(frames, v, inter)?,
            ctc_logits: CtcLogits::new(frames, v, ctc)?,
            cache: EncoderCache {
                frames,
                x: features.to_vec(),
                q,
                a,
                self_condition,
            },
        })
    }

    fn check_text_label(&self, label: usize) -> Result<()> {
        if label == BLANK || label >= self.dims.vocab_size {
            return Err(Error::LabelOutOfRange {
                label,
                vocab_size: self.dims.vocab_size,
            });
        }
        Ok(())
    }

    /// One prediction-network step from `prev` after consuming `label`.
    pub fn predict_step(&self, prev: &[f64], label: usize, out: &mut [f64]) -> Result<()> {
        self.check_text_label(label)?;
        out.copy_from_slice(self.pred_b.data());
        self.pred_wx.gemv_add(self.pred_embed.row(label - 1), out);
        self.pred_wh.gemv_add(prev, out);
        tanh_in_place(out);
        Ok(())
    }

    /// Prediction states for every prefix of `history`; row 0 is the start
    /// state.
    pub fn predict(&self, history: &[usize]) -> Result<Predicted> {
        let h = self.dims.hidden;
        let mut h_pre = vec![0.0; (history.len() + 1) * h];
        h_pre[..h].copy_from_slice(self.pred_start.data());
        for (u, &label) in history.iter().enumerate() {
            let (prev, cur) = h_pre.split_at_mut((u + 1) * h);
            self.predict_step(&prev[u * h..], label, &mut cur[..h])?;
        }
        Ok(Predicted {
            h_pre,
            history: history.to_vec(),
        })
    }

    /// Encoder-side joint projection `We h_enc_t`, `T x H`.
    pub fn joint_enc_proj(&self, h_enc: &[f64]) -> Vec<f64> {
        let h = self.dims.hidden;
        let mut out = vec![0.0; h_enc.len()];
        for (o, x) in out.chunks_exact_mut(h).zip(h_enc.chunks_exact(h)) {
            self.joint_we.gemv_add(x, o);
        }
        out
    }

    /// Prediction-side joint projection `Wp g + bj`, one row per state.
    pub fn joint_pred_proj(&self, h_pre: &[f64]) -> Vec<f64> {
        let h = self.dims.hidden;
        let mut out = vec![0.0; h_pre.len()];
        for (o, g) in out.chunks_exact_mut(h).zip(h_pre.chunks_exact(h)) {
            o.copy_from_slice(self.joint_b.data());
            self.joint_wp.gemv_add(g, o);
        }
        out
    }

    /// Joint hidden `tanh(enc_proj + pred_proj)` and the logits of the given
    /// vocabulary ids.
    pub fn joint_node(&self, enc_proj: &[f64], pred_proj: &[f64], ids: &[usize], j: &mut [f64], logits: &mut [f64]) {
        for ((jk, &e), &p) in j.iter_mut().zip(enc_proj).zip(pred_proj) {
            *jk = (e + p).tanh();
        }
        for (s, &id) in logits.iter_mut().zip(ids) {
            *s = dot(self.joint_out.row(id), j);
        }
    }

    /// Logit lattice over the full vocabulary (`vocab = None`) or over the
    /// ids of a sampled vocabulary. Only the selected output rows are read.
    pub fn joint_logits(
        &self,
        h_enc: &[f64],
        h_pre: &[f64],
        vocab: Option<&SampledVocab>,
    ) -> Result<(LogitLattice, JointCache)> {
        let h = self.dims.hidden;
        let v = self.dims.vocab_size;
        if h_enc.is_empty() || h_enc.len() % h != 0 || h_pre.is_empty() || h_pre.len() % h != 0 {
            return Err(Error::Shape(format!(
                "joint inputs of {} and {} values are not multiples of H = {h}",
                h_enc.len(),
                h_pre.len()
            )));
        }
        let frames = h_enc.len() / h;
        let states = h_pre.len() / h;
        let ids: Vec<usize> = match vocab {
            Some(sv) => {
                if let Some(&bad) = sv.ids().iter().find(|&&id| id >= v) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        vocab_size: v,
                    });
                }
                sv.ids().to_vec()
            }
            None => (0..v).collect(),
        };
        let labels = ids.len();
        let enc_proj = self.joint_enc_proj(h_enc);
        let pred_proj = self.joint_pred_proj(h_pre);
        let mut j = vec![0.0; frames * states * h];
        let mut data = vec![0.0; frames * states * labels];
        for t in 0..frames {
            for u in 0..states {
                let n = t * states + u;
                self.joint_node(
                    &enc_proj[t * h..(t + 1) * h],
                    &pred_proj[u * h..(u + 1) * h],
                    &ids,
                    &mut j[n * h..(n + 1) * h],
                    &mut data[n * labels..(n + 1) * labels],
                );
            }
        }
        let label_map = vocab.map(|_| ids.clone());
        let lattice = LogitLattice::new(frames, states - 1, labels, data, label_map)?;
        Ok((
            lattice,
            JointCache {
                frames,
                states,
                ids,
                j,
            },
        ))
    }

    /// Full training forward pass for one utterance.
    pub fn forward(
        &self,
        features: &[f64],
        frames: usize,
        target: &TargetSeq,
        vocab: Option<&SampledVocab>,
        self_condition: bool,
    ) -> Result<(LogitLattice, ForwardCache)> {
        let encoded = self.encode(features, frames, self_condition)?;
        let predicted = self.predict(target.labels())?;
        let (lattice, joint) = self.joint_logits(&encoded.h_enc, &predicted.h_pre, vocab)?;
        Ok((
            lattice,
            ForwardCache {
                encoded,
                predicted,
                joint,
            },
        ))
    }

    /// Backpropagates the joint network. Returns `(d_h_enc, d_h_pre)`.
    pub fn joint_backward(
        &self,
        cache: &JointCache,
        h_enc: &[f64],
        h_pre: &[f64],
        d_logits: &[f64],
        grads: &mut ToyModel,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.dims.hidden;
        let labels = cache.ids.len();
        if d_logits.len() != cache.frames * cache.states * labels
            || h_enc.len() != cache.frames * h
            || h_pre.len() != cache.states * h
        {
            return Err(Error::Shape("joint backward inputs do not match the cache".into()));
        }
        let mut d_enc_proj = vec![0.0; cache.frames * h];
        let mut d_pred_proj = vec![0.0; cache.states * h];
        let mut dj = vec![0.0; h];
        let mut dpre = vec![0.0; h];
        for t in 0..cache.frames {
            for u in 0..cache.states {
                let n = t * cache.states + u;
                let j = &cache.j[n * h..(n + 1) * h];
                let ds = &d_logits[n * labels..(n + 1) * labels];
                dj.fill(0.0);
                for (&g, &id) in ds.iter().zip(&cache.ids) {
                    if g != 0.0 {
                        axpy(g, self.joint_out.row(id), &mut dj);
                        axpy(g, j, grads.joint_out.row_mut(id));
                    }
                }
                tanh_backward(j, &dj, &mut dpre);
                axpy(1.0, &dpre, &mut d_enc_proj[t * h..(t + 1) * h]);
                axpy(1.0, &dpre, &mut d_pred_proj[u * h..(u + 1) * h]);
            }
        }
        let mut d_h_enc = vec![0.0; cache.frames * h];
        for t in 0..cache.frames {
            let d = &d_enc_proj[t * h..(t + 1) * h];
            grads.joint_we.add_outer(d, &h_enc[t * h..(t + 1) * h]);
            self.joint_we.gemv_t_add(d, &mut d_h_enc[t * h..(t + 1) * h]);
        }
        let mut d_h_pre = vec![0.0; cache.states * h];
        for u in 0..cache.states {
            let d = &d_pred_proj[u * h..(u + 1) * h];
            grads.joint_wp.add_outer(d, &h_pre[u * h..(u + 1) * h]);
            axpy(1.0, d, grads.joint_b.data_mut());
            self.joint_wp.gemv_t_add(d, &mut d_h_pre[u * h..(u + 1) * h]);
        }
        Ok((d_h_enc, d_h_pre))
    }

    /// Backpropagates the prediction network given `d_h_pre`.
    pub fn predictor_backward(
        &self,
        predicted: &Predicted,
        d_h_pre: &[f64],
        grads: &mut ToyModel,
    ) -> Result<()> {
        let h = self.dims.hidden;
        let states = predicted.history.len() + 1;
        if d_h_pre.len() != states * h || predicted.h_pre.len() != states * h {
            return Err(Error::Shape("predictor backward inputs do not match the cache".into()));
        }
        let g = &predicted.h_pre;
        let mut carry = vec![0.0; h];
        let mut dg = vec![0.0; h];
        let mut dpre = vec![0.0; h];
        for u in (1..states).rev() {
            dg.copy_from_slice(&d_h_pre[u * h..(u + 1) * h]);
            axpy(1.0, &carry, &mut dg);
            tanh_backward(&g[u * h..(u + 1) * h], &dg, &mut dpre);
            let label = predicted.history[u - 1];
            grads.pred_wx.add_outer(&dpre, self.pred_embed.row(label - 1));
            self.pred_wx.gemv_t_add(&dpre, grads.pred_embed.row_mut(label - 1));
            grads.pred_wh.add_outer(&dpre, &g[(u - 1) * h..u * h]);
            axpy(1.0, &dpre, grads.pred_b.data_mut());
            carry.fill(0.0);
            self.pred_wh.gemv_t_add(&dpre, &mut carry);
        }
        let start = grads.pred_start.data_mut();
        axpy(1.0, &d_h_pre[..h], start);
        axpy(1.0, &carry, start);
        Ok(())
    }

    /// Backpropagates the encoder and both CTC heads. Any of the upstream
    /// gradients may be absent.
    pub fn encoder_backward(
        &self,
        encoded: &Encoded,
        d_h_enc: Option<&[f64]>,
        d_ctc_logits: Option<&[f64]>,
        d_inter_logits: Option<&[f64]>,
        grads: &mut ToyModel,
    ) -> Result<()> {
        let ModelDims {
            input_dim: f,
            hidden: h,
            vocab_size: v,
        } = self.dims;
        let cache = &encoded.cache;
        let frames = cache.frames;
        for (len, what) in [
            (d_h_enc.map(<[f64]>::len), frames * h),
            (d_ctc_logits.map(<[f64]>::len), frames * v),
            (d_inter_logits.map(<[f64]>::len), frames * v),
        ] {
            if len.is_some_and(|l| l != what) {
                return Err(Error::Shape("encoder backward inputs do not match the cache".into()));
            }
        }
        let h1 = &encoded.h_inter;
        let h2 = &encoded.h_enc;

        // External gradient into h2: joint path plus CTC head.
        let mut d_h2 = match d_h_enc {
            Some(d) => d.to_vec(),
            None => vec![0.0; frames * h],
        };
        if let Some(dc) = d_ctc_logits {
            for t in 0..frames {
                let d = &dc[t * v..(t + 1) * v];
                grads.ctc_w.add_outer(d, &h2[t * h..(t + 1) * h]);
                axpy(1.0, d, grads.ctc_b.data_mut());
                self.ctc_w.gemv_t_add(d, &mut d_h2[t * h..(t + 1) * h]);
            }
        }

        // Layer 2, through time.
        let mut d_a = vec![0.0; frames * h];
        let mut carry = vec![0.0; h];
        let mut dh = vec![0.0; h];
        let mut dpre = vec![0.0; h];
        for t in (0..frames).rev() {
            dh.copy_from_slice(&d_h2[t * h..(t + 1) * h]);
            axpy(1.0, &carry, &mut dh);
            tanh_backward(&h2[t * h..(t + 1) * h], &dh, &mut dpre);
            grads.enc2_wx.add_outer(&dpre, &cache.a[t * h..(t + 1) * h]);
            axpy(1.0, &dpre, grads.enc2_b.data_mut());
            self.enc2_wx.gemv_t_add(&dpre, &mut d_a[t * h..(t + 1) * h]);
            carry.fill(0.0);
            if t > 0 {
                grads.enc2_wh.add_outer(&dpre, &h2[(t - 1) * h..t * h]);
                self.enc2_wh.gemv_t_add(&dpre, &mut carry);
            }
        }

        // Layer-2 input back to h1, through the self-conditioning path and
        // the intermediate head.
        let mut d_h1 = d_a.clone();
        let mut dz = vec![0.0; v];
        let mut dq = vec![0.0; v];
        for t in 0..frames {
            dz.fill(0.0);
            if let Some(di) = d_inter_logits {
                dz.copy_from_slice(&di[t * v..(t + 1) * v]);
            }
            if cache.self_condition {
                let q = &cache.q[t * v..(t + 1) * v];
                let da = &d_a[t * h..(t + 1) * h];
                grads.sc_w.add_outer(da, q);
                dq.fill(0.0);
                self.sc_w.gemv_t_add(da, &mut dq);
                let mean = dot(q, &dq);
                for ((z, &qk), &dqk) in dz.iter_mut().zip(q).zip(&dq) {
                    *z += qk * (dqk - mean);
                }
            }
            if d_inter_logits.is_some() || cache.self_condition {
                grads.inter_w.add_outer(&dz, &h1[t * h..(t + 1) * h]);
                axpy(1.0, &dz, grads.inter_b.data_mut());
                self.inter_w.gemv_t_add(&dz, &mut d_h1[t * h..(t + 1) * h]);
            }
        }

        // Layer 1, through time.
        carry.fill(0.0);
        for t in (0..frames).rev() {
            dh.copy_from_slice(&d_h1[t * h..(t + 1) * h]);
            axpy(1.0, &carry, &mut dh);
            tanh_backward(&h1[t * h..(t + 1) * h], &dh, &mut dpre);
            grads.enc1_wx.add_outer(&dpre, &cache.x[t * f..(t + 1) * f]);
            axpy(1.0, &dpre, grads.enc1_b.data_mut());
            carry.fill(0.0);
            if t > 0 {
                grads.enc1_wh.add_outer(&dpre, &h1[(t - 1) * h..t * h]);
                self.enc1_wh.gemv_t_add(&dpre, &mut carry);
            }
        }
        Ok(())
    }

    /// Accumulates into `grads` the gradient of
    /// `w.transducer * L_transducer + w.ctc * L_ctc + w.inter_ctc * L_inter`
    /// given the loss gradients with respect to the lattice and the two CTC
    /// logit tables.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: OutputGrads<'_>,
        weights: LossWeights,
        grads: &mut ToyModel,
    ) -> Result<()> {
        if grads.dims != self.dims {
            return Err(Error::Shape("gradient accumulator has different dims".into()));
        }
        let scaled = |g: Option<&[f64]>, w: f64| -> Option<Vec<f64>> {
            g.filter(|_| w != 0.0)
                .map(|g| g.iter().map(|x| x * w).collect())
        };
        let d_lattice = scaled(upstream.lattice, weights.transducer);
        let d_ctc = scaled(upstream.ctc, weights.ctc);
        let d_inter = scaled(upstream.inter_ctc, weights.inter_ctc);

        let mut d_h_enc = None;
        if let Some(d) = &d_lattice {
            let (de, dp) = self.joint_backward(
                &cache.joint,
                &cache.encoded.h_enc,
                &cache.predicted.h_pre,
                d,
                grads,
            )?;
            self.predictor_backward(&cache.predicted, &dp, grads)?;
            d_h_enc = Some(de);
        }
        self.encoder_backward(
            &cache.encoded,
            d_h_enc.as_deref(),
            d_ctc.as_deref(),
            d_inter.as_deref(),
            grads,
        )
    }

    /// Writes the little-endian checkpoint: magic, version, dims (u32 each),
    /// then every parameter array in declaration order as f64.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for d in [self.dims.input_dim, self.dims.hidden, self.dims.vocab_size] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for p in self.params() {
            for x in p.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.num_params());
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header".to_string())?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("bad magic, not a checkpoint".into());
        }
        let mut word = [0u8; 4];
        let mut next_u32 = |r: &mut &[u8]| -> std::result::Result<u32, String> {
            r.read_exact(&mut word).map_err(|_| "truncated header".to_string())?;
            Ok(u32::from_le_bytes(word))
        };
        let version = next_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let dims = ModelDims {
            input_dim: next_u32(&mut r)? as usize,
            hidden: next_u32(&mut r)? as usize,
            vocab_size: next_u32(&mut r)? as usize,
        };
        let mut model = ToyModel::zeros(dims).map_err(|e| e.to_string())?;
        let expected = 8 * model.num_params();
        if r.len() != expected {
            return Err(format!(
                "parameter block has {} bytes, expected {expected}",
                r.len()
            ));
        }
        let mut values = r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for p in model.params_mut() {
            for x in p.data_mut() {
                *x = values.next().unwrap();
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ToyModel::from_checkpoint_bytes(&bytes).map_err(|msg| Error::file(path, msg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss;
    use crate::rnnt_loss::{relative_error, transducer_loss};
    use crate::sampler::SamplingStrategy;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 3,
            hidden: 4,
            vocab_size: 6,
        }
    }

    fn features(frames: usize, f: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed, 99);
        (0..frames * f).map(|_| rng.open01() * 2.0 - 1.0).collect()
    }

    fn check_param_grads(
        model: &ToyModel,
        analytic: &ToyModel,
        eps: f64,
        tol: f64,
        loss: &dyn Fn(&ToyModel) -> f64,
    ) {
        let mut probe = model.clone();
        for (pi, name) in ToyModel::PARAM_NAMES.iter().enumerate() {
            for i in 0..model.params()[pi].len() {
                let orig = model.params()[pi].data()[i];
                probe.params_mut()[pi].data_mut()[i] = orig + eps;
                let up = loss(&probe);
                probe.params_mut()[pi].data_mut()[i] = orig - eps;
                let down = loss(&probe);
                probe.params_mut()[pi].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.params()[pi].data()[i];
                let err = relative_error(a, numeric);
                assert!(err <= tol, "{name}[{i}]: analytic {a} numeric {numeric} err {err}");
            }
        }
    }

    #[test]
    fn zero_model_zero_input_gives_zero_encoding() {
        let m = ToyModel::zeros(dims()).unwrap();
        let enc = m.encode(&[0.0; 3], 1, true).unwrap();
        assert!(enc.h_enc.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let m = ToyModel::new(dims(), 1).unwrap();
        assert!(matches!(m.encode(&[0.0; 4], 1, false), Err(Error::Shape(_))));
        assert!(matches!(m.encode(&[], 0, false), Err(Error::NoFrames)));
    }

    #[test]
    fn self_condition_off_ignores_sc_map() {
        let m = ToyModel::new(dims(), 1).unwrap();
        let mut m2 = m.clone();
        m2.sc_w.fill(3.0);
        let x = features(4, 3, 0);
        let a = m.encode(&x, 4, false).unwrap();
        let b = m2.encode(&x, 4, false).unwrap();
        assert_eq!(a.h_enc, b.h_enc);
        let c = m2.encode(&x, 4, true).unwrap();
        assert_ne!(a.h_enc, c.h_enc);
        assert_eq!(a.h_enc.len(), c.h_enc.len());

        let mut grads = m.zeros_like();
        let ones = vec![1.0; a.h_enc.len()];
        m.encoder_backward(&a, Some(&ones), None, None, &mut grads).unwrap();
        assert!(grads.sc_w.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        for sc in [false, true] {
            let m = ToyModel::new(dims(), 2).unwrap();
            let x = features(3, 3, 1);
            let mut rng = SeededRng::new(5, 5);
            let w: Vec<f64> = (0..12).map(|_| rng.open01() - 0.5).collect();
            let wi: Vec<f64> = (0..18).map(|_| rng.open01() - 0.5).collect();
            let scalar = |m: &ToyModel| {
                let e = m.encode(&x, 3, sc).unwrap();
                dot(&e.h_enc, &w) + dot(e.inter_logits.data(), &wi)
            };
            let enc = m.encode(&x, 3, sc).unwrap();
            let mut grads = m.zeros_like();
            m.encoder_backward(&enc, Some(&w), None, Some(&wi), &mut grads).unwrap();
            check_param_grads(&m, &grads, 1e-5, 1e-4, &scalar);
        }
    }

    #[test]
    fn predict_prefix_property() {
        let m = ToyModel::new(dims(), 3).unwrap();
        assert_eq!(m.predict(&[]).unwrap().h_pre, m.pred_start.data());
        let full = m.predict(&[2, 5, 1]).unwrap().h_pre;
        let part = m.predict(&[2, 5]).unwrap().h_pre;
        assert_eq!(&full[..part.len()], &part[..]);
        assert!(matches!(m.predict(&[0]), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(m.predict(&[6]), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn predictor_gradient_matches_finite_differences() {
        let m = ToyModel::new(dims(), 4).unwrap();
        let hist = [3, 1, 3];
        let mut rng = SeededRng::new(6, 6);
        let w: Vec<f64> = (0..16).map(|_| rng.open01() - 0.5).collect();
        let scalar = |m: &ToyModel| dot(&m.predict(&hist).unwrap().h_pre, &w);
        let pred = m.predict(&hist).unwrap();
        let mut grads = m.zeros_like();
        m.predictor_backward(&pred, &w, &mut grads).unwrap();
        check_param_grads(&m, &grads, 1e-5, 1e-4, &scalar);
    }

    #[test]
    fn sampled_joint_gathers_full_rows_exactly() {
        let m = ToyModel::new(dims(), 5).unwrap();
        let enc = m.encode(&features(3, 3, 2), 3, false).unwrap();
        let pred = m.predict(&[4, 2]).unwrap();
        let (full, _) = m.joint_logits(&enc.h_enc, &pred.h_pre, None).unwrap();
        assert_eq!(full.labels(), 6);
        let sv = SampledVocab::new(vec![0, 2, 4], vec![5], SamplingStrategy::ExampleWise).unwrap();
        let (sampled, _) = m.joint_logits(&enc.h_enc, &pred.h_pre, Some(&sv)).unwrap();
        assert_eq!(sampled.labels(), 4);
        assert_eq!(sampled, full.gather(sv.ids()).unwrap());
        assert_eq!(sampled.data().len() * 6, full.data().len() * 4);

        let bad = SampledVocab::new(vec![0], vec![9], SamplingStrategy::ExampleWise).unwrap();
        assert!(m.joint_logits(&enc.h_enc, &pred.h_pre, Some(&bad)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = ToyModel::new(dims(), 6).unwrap();
        let target = TargetSeq::new(vec![1, 2], 0).unwrap();
        let (lat, cache) = m.forward(&features(3, 3, 3), 3, &target, None, true).unwrap();
        let zl = vec![0.0; lat.data().len()];
        let zc = vec![0.0; 18];
        let mut grads = m.zeros_like();
        let up = OutputGrads {
            lattice: Some(&zl),
            ctc: Some(&zc),
            inter_ctc: Some(&zc),
        };
        m.backward(&cache, up, LossWeights::default(), &mut grads).unwrap();
        assert_eq!(grads.global_norm(), 0.0);
    }

    fn total_loss(
        m: &ToyModel,
        x: &[f64],
        target: &TargetSeq,
        vocab: Option<&SampledVocab>,
        sc: bool,
        w: LossWeights,
        grads: Option<&mut ToyModel>,
    ) -> f64 {
        let (lat, cache) = m.forward(x, 3, target, vocab, sc).unwrap();
        let rnnt = transducer_loss(&lat, target).unwrap();
        let ctc = ctc_loss(&cache.encoded.ctc_logits, target).unwrap();
        let inter = ctc_loss(&cache.encoded.inter_logits, target).unwrap();
        if let Some(g) = grads {
            let up = OutputGrads {
                lattice: Some(&rnnt.grad),
                ctc: Some(&ctc.grad),
                inter_ctc: Some(&inter.grad),
            };
            m.backward(&cache, up, w, g).unwrap();
        }
        w.transducer * rnnt.loss + w.ctc * ctc.loss + w.inter_ctc * inter.loss
    }

    #[test]
    fn end_to_end_gradient_all_configurations() {
        let m = ToyModel::new(dims(), 7).unwrap();
        let x = features(3, 3, 4);
        let target = TargetSeq::new(vec![3, 1], 0).unwrap();
        let sv = SampledVocab::new(vec![0, 1, 3], vec![5], SamplingStrategy::ExampleWise).unwrap();
        for vocab in [None, Some(&sv)] {
            for sc in [false, true] {
                let w = LossWeights::default();
                let mut grads = m.zeros_like();
                total_loss(&m, &x, &target, vocab, sc, w, Some(&mut grads));
                let f = |p: &ToyModel| total_loss(p, &x, &target, vocab, sc, w, None);
                check_param_grads(&m, &grads, 1e-5, 1e-3, &f);
            }
        }
    }

    #[test]
    fn zero_aux_weights_match_transducer_only() {
        let m = ToyModel::new(dims(), 8).unwrap();
        let x = features(3, 3, 5);
        let target = TargetSeq::new(vec![2], 0).unwrap();
        let w = LossWeights {
            transducer: 1.0,
            ctc: 0.0,
            inter_ctc: 0.0,
        };
        let mut a = m.zeros_like();
        total_loss(&m, &x, &target, None, false, w, Some(&mut a));

        let (lat, cache) = m.forward(&x, 3, &target, None, false).unwrap();
        let rnnt = transducer_loss(&lat, &target).unwrap();
        let mut b = m.zeros_like();
        let up = OutputGrads {
            lattice: Some(&rnnt.grad),
            ..Default::default()
        };
        m.backward(&cache, up, w, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = ToyModel::new(dims(), 9).unwrap();
        let bytes = m.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"TKIT");
        assert_eq!(bytes.len(), 20 + 8 * m.num_params());
        assert_eq!(ToyModel::from_checkpoint_bytes(&bytes).unwrap(), m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ToyModel::from_checkpoint_bytes(&bad).unwrap_err().contains("magic"));
        assert!(ToyModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ToyModel::new(dims(), 10).unwrap();
        assert_eq!(a, ToyModel::new(dims(), 10).unwrap());
        assert_ne!(a, ToyModel::new(dims(), 11).unwrap());
        let bound = 1.0 / (6f64).sqrt();
        assert!(a.inter_w.data().iter().all(|x| x.abs() <= 1.0 / 2.0));
        assert!(a.sc_w.data().iter().all(|x| x.abs() <= bound));
    }
}
