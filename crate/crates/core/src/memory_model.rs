//! Analytic training-memory accounting, plus a live counter for logit
//! buffers.
//!
//! Closed forms, with `B` batch, `T` frames, `U` target length, `V`
//! vocabulary, `L` label-axis size (`V` or the sampled size), `H` hidden,
//! `F` input width and `e` bytes per element:
//!
//! ```text
//! logit_tensor = B*T*(U+1)*L*e              (x2 when the logit gradient is counted)
//! encoder      = e*[P_enc  + B*T*(F + 3H + 2V) + (B*T*V if self-conditioning)]
//! predictor    = e*[P_pred + B*(U+1)*H]
//! joint        = e*[P_joint + B*(T*H + (U+1)*H + T*(U+1)*H)]
//! gradients    = e*(P_enc + P_pred + P_joint)
//!
//! P_enc   = F*H + H*H + H  +  2*(V*H + V)  +  H*V  +  2*H*H + H
//! P_pred  = (V-1)*H + H + 2*H*H + H
//! P_joint = 2*H*H + H + V*H
//! ```
//!
//! Encoder activations are the stored input, layer-1 output, layer-2 input
//! and output, and both CTC heads' logits; the self-conditioning softmax
//! adds one more `T x V` table. Only activations kept for backprop count.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemConfig {
    pub frames: u64,
    pub target_len: u64,
    pub vocab_size: u64,
    pub sampled_size: Option<u64>,
    pub batch: u64,
    pub hidden: u64,
    pub input_dim: u64,
    pub element_bytes: u64,
    pub self_condition: bool,
    /// Count the logit gradient alongside the logits.
    pub count_logit_grad: bool,
}

impl Default for MemConfig {
    fn default() -> Self {
        MemConfig {
            frames: 500,
            target_len: 100,
            vocab_size: 2000,
            sampled_size: None,
            batch: 1,
            hidden: 256,
            input_dim: 80,
            element_bytes: 4,
            self_condition: false,
            count_logit_grad: false,
        }
    }
}

impl MemConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("vocab_size", self.vocab_size),
            ("batch", self.batch),
            ("hidden", self.hidden),
            ("input_dim", self.input_dim),
            ("element_bytes", self.element_bytes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("memory config field {name} must be positive")));
        }
        if let Some(s) = self.sampled_size {
            if s == 0 || s > self.vocab_size {
                return Err(Error::Invalid(format!(
                    "sampled_size {s} must be in 1..={}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Label-axis size of the logit tensor.
    pub fn label_axis(&self) -> u64 {
        self.sampled_size.unwrap_or(self.vocab_size)
    }

    pub fn encoder_params(&self) -> u64 {
        let (f, h, v) = (self.input_dim, self.hidden, self.vocab_size);
        (f * h + h * h + h) + 2 * (v * h + v) + h * v + (2 * h * h + h)
    }

    pub fn predictor_params(&self) -> u64 {
        let (h, v) = (self.hidden, self.vocab_size);
        (v - 1) * h + h + 2 * h * h + h
    }

    pub fn joint_params(&self) -> u64 {
        let (h, v) = (self.hidden, self.vocab_size);
        2 * h * h + h + v * h
    }
}

/// Bytes of the logit tensor for one training step.
pub fn logit_tensor_bytes(cfg: &MemConfig) -> u64 {
    let base = cfg.batch * cfg.frames * (cfg.target_len + 1) * cfg.label_axis() * cfg.element_bytes;
    if cfg.count_logit_grad {
        2 * base
    } else {
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub encoder: u64,
    pub predictor: u64,
    pub joint: u64,
    pub logit_tensor: u64,
    pub gradients: u64,
    pub total: u64,
}

impl MemoryReport {
    pub const COMPONENTS: [&'static str; 6] =
        ["encoder", "predictor", "joint", "logit_tensor", "gradients", "total"];

    /// `(component, bytes)` in [`Self::COMPONENTS`] order.
    pub fn rows(&self) -> [(&'static str, u64); 6] {
        [
            ("encoder", self.encoder),
            ("predictor", self.predictor),
            ("joint", self.joint),
            ("logit_tensor", self.logit_tensor),
            ("gradients", self.gradients),
            ("total", self.total),
        ]
    }

    /// Encoder plus predictor, the reference line the logit tensor is
    /// compared against.
    pub fn encoder_and_predictor(&self) -> u64 {
        self.encoder + self.predictor
    }
}

pub fn memory_report(cfg: &MemConfig) -> Result<MemoryReport> {
    cfg.validate()?;
    let MemConfig {
        frames: t,
        target_len: u,
        vocab_size: v,
        batch: b,
        hidden: h,
        input_dim: f,
        element_bytes: e,
        ..
    } = *cfg;
    let mut enc_acts = b * t * (f + 3 * h + 2 * v);
    if cfg.self_condition {
        enc_acts += b * t * v;
    }
    let encoder = e * (cfg.encoder_params() + enc_acts);
    let predictor = e * (cfg.predictor_params() + b * (u + 1) * h);
    let joint = e * (cfg.joint_params() + b * (t * h + (u + 1) * h + t * (u + 1) * h));
    let logit_tensor = logit_tensor_bytes(cfg);
    let gradients = e * (cfg.encoder_params() + cfg.predictor_params() + cfg.joint_params());
    Ok(MemoryReport {
        encoder,
        predictor,
        joint,
        logit_tensor,
        gradients,
        total: encoder + predictor + joint + logit_tensor + gradients,
    })
}

#[derive(Debug, Default)]
struct MeterState {
    live: AtomicU64,
    peak: AtomicU64,
}

/// Counts bytes held by live logit buffers and remembers the peak.
#[derive(Debug, Clone, Default)]
pub struct LogitMeter {
    state: Arc<MeterState>,
}

impl LogitMeter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `bytes` until the returned guard is dropped.
    pub fn track(&self, bytes: u64) -> MeterGuard {
        let live = self.state.live.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.state.peak.fetch_max(live, Ordering::SeqCst);
        MeterGuard {
            state: Arc::clone(&self.state),
            bytes,
        }
    }

    /// Wraps a float buffer, counting its length times 8 bytes.
    pub fn hold<T: AsRef<[f64]>>(&self, value: T) -> Metered<T> {
        let bytes = (value.as_ref().len() * std::mem::size_of::<f64>()) as u64;
        Metered {
            guard: self.track(bytes),
            value,
        }
    }

    pub fn live(&self) -> u64 {
        self.state.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> u64 {
        self.state.peak.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current live total.
    pub fn reset_peak(&self) {
        self.state.peak.store(self.live(), Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct MeterGuard {
    state: Arc<MeterState>,
    bytes: u64,
}

impl MeterGuard {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Drop for MeterGuard {
    fn drop(&mut self) {
        self.state.live.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// A value whose buffer is counted by a [`LogitMeter`] while it lives.
#[derive(Debug)]
pub struct Metered<T> {
    guard: MeterGuard,
    value: T,
}

impl<T> Metered<T> {
    pub fn bytes(&self) -> u64 {
        self.guard.bytes
    }
}

impl<T> std::ops::Deref for Metered<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.value
    }
}

impl AsRef<[f64]> for crate::rnnt_loss::LogitLattice {
    fn as_ref(&self) -> &[f64] {
        self.data()
    }
}
