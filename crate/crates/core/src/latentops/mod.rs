//! Latent-space organisation: frame compilation, variance pruning,
//! feature augmentation and the keyed feature container.

pub mod augment;
pub mod container;
pub mod prune;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{kernels, Tensor};
use crate::posespace::codebook::PAD;
use crate::rng;

pub use augment::{augment, AugmentConfig};
pub use container::{container_read, container_write, Container, Record};
pub use prune::{apply_mask, build_prune_mask, PruneMask};

/// Frames `start..=end` carry gloss `gloss`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GlossSpan {
    pub gloss: usize,
    pub start: usize,
    pub end: usize,
}

impl GlossSpan {
    pub fn new(gloss: usize, start: usize, end: usize) -> Self {
        Self { gloss, start, end }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Per-frame latents with alignment and validity.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    /// `T x d`
    pub z: Tensor,
    pub align: Vec<usize>,
    pub mask: Vec<bool>,
    pub spans: Vec<GlossSpan>,
}

impl LatentSequence {
    /// Wraps raw latents; alignment starts as PAD and every frame is valid.
    pub fn new(z: Tensor, spans: Vec<GlossSpan>) -> Result<Self> {
        if z.rank() != 2 {
            return Err(dim_err("latent sequence must be T x d"));
        }
        let t = z.rows();
        for s in &spans {
            if s.start > s.end || s.end >= t {
                return Err(Error::Contract(format!("span {s:?} outside 0..{t}")));
            }
        }
        if spans.windows(2).any(|w| w[1].start < w[0].start || w[1].start < w[0].end) {
            return Err(Error::Contract("spans unsorted or overlapping".into()));
        }
        Ok(Self {
            z,
            align: vec![PAD; t],
            mask: vec![true; t],
            spans,
        })
    }

    pub fn frames(&self) -> usize {
        self.z.rows()
    }

    pub fn width(&self) -> usize {
        self.z.cols()
    }

    /// Gloss labels in span order.
    pub fn glosses(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.gloss).collect()
    }

    pub fn to_record(&self, key: impl Into<String>) -> Result<Record> {
        Record::from_f64(key, self.frames(), self.width(), self.spans.clone(), self.z.data())
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        let z = Tensor::new(&[r.rows, r.cols], r.to_f64())?;
        let mut s = Self::new(z, r.spans.clone())?;
        s.fill_alignment();
        Ok(s)
    }

    pub fn fill_alignment(&mut self) {
        self.align = (0..self.frames()).map(|t| gloss_align(t, &self.spans)).collect();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    /// Whitening coefficient.
    pub gamma: f64,
    /// Frame drop probability.
    pub rho: f64,
    pub seed: u64,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            rho: 0.05,
            seed: 0,
        }
    }
}

impl CompileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Parameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Parameter(format!("rho must be in [0,1], got {}", self.rho)));
        }
        Ok(())
    }
}

/// Decay of the running mean used by the cross-covariance.
pub const MEAN_DECAY: f64 = 0.99;
const NORM_EPS: f64 = 1e-5;

/// Elementwise cross-covariance of consecutive frames around `mean`.
pub fn cross_cov(z_t: &[f64], z_prev: &[f64], mean: &[f64]) -> Result<Vec<f64>> {
    if z_t.len() != z_prev.len() || z_t.len() != mean.len() {
        return Err(dim_err("cross_cov width mismatch"));
    }
    Ok(z_t
        .iter()
        .zip(z_prev)
        .zip(mean)
        .map(|((a, b), m)| (a - m) * (b - m))
        .collect())
}

/// Gloss covering frame `t`; the earliest-starting span wins, PAD if none.
pub fn gloss_align(t: usize, spans: &[GlossSpan]) -> usize {
    spans
        .iter()
        .filter(|s| s.contains(t))
        .min_by_key(|s| s.start)
        .map_or(PAD, |s| s.gloss)
}

/// Whether frame `t` is dropped under `(seed, rho)`.
pub fn drops_frame(seed: u64, t: usize, rho: f64) -> bool {
    rng::unit(seed, "frame-drop", &[t as u64]) < rho
}

/// Normalise, whiten, drop and align every frame.
///
/// The running mean starts at the first normalised frame and is updated
/// after each frame; frame 0 has no predecessor and is not whitened.
pub fn compile(seq: &LatentSequence, cfg: &CompileConfig) -> Result<LatentSequence> {
    cfg.validate()?;
    let (t_len, d) = (seq.frames(), seq.width());
    if t_len == 0 {
        return Err(Error::EmptyInput("compile of empty sequence".into()));
    }
    let mut out = seq.clone();
    let mut prev: Vec<f64> = Vec::new();
    let mut mean: Vec<f64> = Vec::new();
    for t in 0..t_len {
        let src = seq.z.row(t);
        let (mu, inv) = kernels::mean_inv_std(src, NORM_EPS);
        let normed: Vec<f64> = src.iter().map(|v| (v - mu) * inv).collect();
        let mut z = normed.clone();
        if t == 0 {
            mean = normed.clone();
        } else if cfg.gamma > 0.0 {
            let c = cross_cov(&normed, &prev, &mean)?;
            z.iter_mut().zip(&c).for_each(|(v, c)| *v -= cfg.gamma * c);
        }
        for (m, v) in mean.iter_mut().zip(&normed) {
            *m = MEAN_DECAY * *m + (1.0 - MEAN_DECAY) * v;
        }
        prev = normed;
        if drops_frame(cfg.seed, t, cfg.rho) {
            z.iter_mut().for_each(|v| *v = 0.0);
            out.mask[t] = false;
        }
        out.z.data_mut()[t * d..(t + 1) * d].copy_from_slice(&z);
        out.align[t] = gloss_align(t, &seq.spans);
    }
    Ok(out)
}

/// The stochastic-drop step on its own, for sequences compiled earlier.
pub fn frame_drop(seq: &LatentSequence, rho: f64, seed: u64) -> LatentSequence {
    let mut out = seq.clone();
    let d = seq.width();
    for t in 0..seq.frames() {
        if drops_frame(seed, t, rho) {
            out.z.data_mut()[t * d..(t + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            out.mask[t] = false;
        }
    }
    out
}
