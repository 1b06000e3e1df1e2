//! Stage 2: rendered frames to the five pose tracks.
//!
//! Each frame is cut into square patches, embedded, mixed by one patch-level
//! attention block and flattened into a per-frame feature. A temporal
//! attention block then runs across frames, and one head per track predicts
//! that track's pose vector.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{self, Dropout, EncoderBlock, LayerNorm, Linear, Mlp, MultiHeadAttention, Session};
use crate::numcore::{cosine_lr, AdamConfig, OptimizerState, ParamId, ParamStore, StoreGrads, Tensor, Var};
use crate::posespace::{PoseTracks, TrackDims, NUM_TRACKS};
use crate::rng;
use crate::synth::{FrameGrid, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vid2PoseArch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_v: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dims: TrackDims,
}

impl Vid2PoseArch {
    pub fn desk(dims: TrackDims) -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 1,
            patch: 4,
            d_v: 48,
            heads: 4,
            ffn: 96,
            dims,
        }
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    fn check(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Patching {
                height: self.height,
                width: self.width,
                patch: self.patch,
            });
        }
        if !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::Parameter("d_v must divide into heads".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Vid2Pose {
    pub arch: Vid2PoseArch,
    pub embed: Linear,
    pub patch_pos: ParamId,
    pub ln1: LayerNorm,
    pub patch_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub patch_ffn: Mlp,
    pub flatten: Linear,
    pub temporal: EncoderBlock,
    pub heads: Vec<Mlp>,
}

impl Vid2Pose {
    pub fn new(arch: Vid2PoseArch, seed: u64) -> Result<(Self, ParamStore)> {
        arch.check()?;
        let mut r = rng::stream(seed, "stage2-init");
        let mut s = ParamStore::new();
        let dv = arch.d_v;
        let p = arch.patches();
        let embed = Linear::new(&mut s, "patch.embed", arch.patch_len(), dv, &mut r);
        let patch_pos = s.add_uniform("patch.pos", &[p, dv], dv, &mut r);
        let ln1 = LayerNorm::new(&mut s, "patch.ln1", dv);
        let patch_attn = MultiHeadAttention::new(&mut s, "patch.attn", dv, arch.heads, &mut r);
        let ln2 = LayerNorm::new(&mut s, "patch.ln2", dv);
        let patch_ffn = Mlp::new(&mut s, "patch.ffn", dv, arch.ffn, dv, &mut r);
        let flatten = Linear::new(&mut s, "frame.proj", p * dv, dv, &mut r);
        let temporal = EncoderBlock::new(&mut s, "temporal", dv, arch.heads, arch.ffn, &mut r);
        let heads = (0..NUM_TRACKS)
            .map(|i| Mlp::new(&mut s, &format!("head{i}"), dv, dv, arch.dims.0[i], &mut r))
            .collect();
        Ok((
            Self {
                arch,
                embed,
                patch_pos,
                ln1,
                patch_attn,
                ln2,
                patch_ffn,
                flatten,
                temporal,
                heads,
            },
            s,
        ))
    }

    /// Reorders a `T x HWC` frame matrix into `T*P x patch_len` patch rows.
    pub fn patchify(&self, frames: &FrameGrid) -> Result<Tensor> {
        let a = &self.arch;
        if frames.height != a.height || frames.width != a.width || frames.channels != a.channels {
            return Err(Error::Patching {
                height: frames.height,
                width: frames.width,
                patch: a.patch,
            });
        }
        let (pe, c, w) = (a.patch, a.channels, a.width);
        let per_row = a.width / pe;
        let p = a.patches();
        let mut out = Vec::with_capacity(frames.frames.len());
        for t in 0..frames.len() {
            let img = frames.frames.row(t);
            for k in 0..p {
                let (py, px) = (k / per_row, k % per_row);
                for y in 0..pe {
                    let start = ((py * pe + y) * w + px * pe) * c;
                    out.extend_from_slice(&img[start..start + pe * c]);
                }
            }
        }
        Tensor::new(&[frames.len() * p, a.patch_len()], out)
    }

    /// One `d_v` feature per frame.
    pub fn spatial_encode(&self, s: &mut Session, frames: &FrameGrid) -> Result<Var> {
        let t = frames.len();
        let p = self.arch.patches();
        let dv = self.arch.d_v;
        let patches = self.patchify(frames)?;
        let x = s.g.constant(&patches);
        let tok = self.embed.forward(s, x)?;
        let pos = s.p(self.patch_pos);
        let pos_all = if t == 1 {
            pos
        } else {
            s.g.concat_rows(&vec![pos; t])?
        };
        let x = s.g.add(tok, pos_all)?;
        let h = self.ln1.forward(s, x)?;
        let q = self.patch_attn.q.forward(s, h)?;
        let k = self.patch_attn.k.forward(s, h)?;
        let v = self.patch_attn.v.forward(s, h)?;
        let mut outs = Vec::with_capacity(t);
        for f in 0..t {
            let (a, b) = (f * p, (f + 1) * p);
            let qf = s.g.slice_rows(q, a, b)?;
            let kf = s.g.slice_rows(k, a, b)?;
            let vf = s.g.slice_rows(v, a, b)?;
            outs.push(self.patch_attn.attend(s, qf, kf, vf, None)?.out);
        }
        let attn = if t == 1 { outs[0] } else { s.g.concat_rows(&outs)? };
        let x = s.g.add(x, attn)?;
        let h = self.ln2.forward(s, x)?;
        let f = self.patch_ffn.forward(s, h)?;
        let x = s.g.add(x, f)?;
        let idx = (0..t * p * dv).collect();
        let flat = s.g.gather(x, idx, t, p * dv)?;
        self.flatten.forward(s, flat)
    }

    /// Attention across frames, shape preserving.
    pub fn temporal_attend(&self, s: &mut Session, v: Var) -> Result<(Var, Vec<Var>)> {
        let x = nn::add_positions(s, v)?;
        self.temporal.forward(s, x, None)
    }

    pub fn project_tracks(&self, s: &mut Session, v: Var) -> Result<Vec<Var>> {
        if s.g.shape(v).1 != self.arch.d_v {
            return Err(dim_err("temporal feature width differs from d_v"));
        }
        self.heads.iter().map(|h| h.forward(s, v)).collect()
    }

    pub fn forward(&self, s: &mut Session, frames: &FrameGrid) -> Result<Vec<Var>> {
        let v = self.spatial_encode(s, frames)?;
        let (v, _) = self.temporal_attend(s, v)?;
        self.project_tracks(s, v)
    }

    pub fn predict(&self, store: &ParamStore, frames: &FrameGrid) -> Result<PoseTracks> {
        let mut s = Session::eval(store);
        let outs = self.forward(&mut s, frames)?;
        PoseTracks::new(std::array::from_fn(|i| s.g.value(outs[i]).clone()))
    }
}

/// `Σ_i ‖P̂_i − P_i‖²` over tracks and frames.
pub fn reconstruction_loss(g: &mut crate::numcore::Graph, pred: &[Var], truth: &PoseTracks) -> Result<Var> {
    if pred.len() != NUM_TRACKS {
        return Err(dim_err("expected five predicted tracks"));
    }
    let mut acc: Option<Var> = None;
    for (i, &p) in pred.iter().enumerate() {
        let t = &truth.tracks[i];
        if g.shape(p) != (t.rows(), t.cols()) {
            return Err(dim_err(format!(
                "track {i}: predicted {:?} vs target {:?}",
                g.shape(p),
                t.shape()
            )));
        }
        let tv = g.constant(t);
        let d = g.sub(p, tv)?;
        let sq = g.square(d);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("five tracks"))
}

/// Mean squared error per dimension, over every frame and track dimension.
pub fn per_dim_mse(pred: &PoseTracks, truth: &PoseTracks) -> Result<f64> {
    if pred.dims() != truth.dims() || pred.frames() != truth.frames() {
        return Err(dim_err("pose track shapes differ"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (a, b) in pred.tracks.iter().zip(&truth.tracks) {
        sum += a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        n += a.len();
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr_frac: f64,
    pub warmup_frac: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            lr: 1e-3,
            min_lr_frac: 0.01,
            warmup_frac: 0.1,
            adam: AdamConfig {
                clip_norm: 1.0,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-utterance reconstruction loss.
    pub loss: f64,
}

/// Trains the Stage-2 weights. The Stage-1 store is frozen for the whole
/// run and its content hash is checked before returning.
pub fn train_stage2(
    model: &Vid2Pose,
    store: &mut ParamStore,
    stage1: &mut ParamStore,
    data: &[(&Utterance, &FrameGrid)],
    cfg: &Stage2TrainConfig,
    mut on_epoch: impl FnMut(&Stage2EpochLog),
) -> Result<Vec<Stage2EpochLog>> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no Stage-2 training utterances".into()));
    }
    stage1.freeze();
    let frozen_hash = stage1.content_hash();
    let batch = cfg.batch.max(1);
    let per_epoch = data.len().div_ceil(batch) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let warmup = (total as f64 * cfg.warmup_frac).round() as u64;
    let mut opt = OptimizerState::new(store, cfg.adam);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = crate::posespace::train::shuffled(data.len(), cfg.seed, "stage2-order", epoch);
        let (mut sum, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(batch) {
            let grads = {
                let mut s = Session::train(store, Dropout::default(), rng::stream(cfg.seed, "stage2"));
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (u, frames) = data[i];
                    let pred = model.forward(&mut s, frames)?;
                    losses.push(reconstruction_loss(&mut s.g, &pred, &u.tracks)?);
                }
                let mut acc = losses[0];
                for &l in &losses[1..] {
                    acc = s.g.add(acc, l)?;
                }
                let loss = s.g.scale(acc, 1.0 / chunk.len() as f64);
                let v = s.g.scalar_value(loss);
                if !v.is_finite() {
                    return Err(Error::Divergence(format!("Stage-2 loss {v} at epoch {epoch}")));
                }
                sum += v * chunk.len() as f64;
                let g = s.g.backward(loss)?;
                s.g.store_grads(&g, store)
            };
            lr = cosine_lr(opt.step_count() + 1, total, warmup, cfg.lr, cfg.min_lr_frac);
            opt.step(store, &grads, lr)?;
        }
        let log = Stage2EpochLog {
            epoch,
            lr,
            loss: sum / data.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    if stage1.content_hash() != frozen_hash {
        return Err(Error::Contract("Stage-1 weights changed during Stage-2 training".into()));
    }
    Ok(logs)
}

/// Reconstruction gradients never touch the Stage-1 store; this helper
/// makes that explicit for callers that want to try.
pub fn update_frozen(stage1: &mut ParamStore) -> Result<()> {
    let grads = StoreGrads::zeros_like(stage1);
    OptimizerState::new(stage1, AdamConfig::default()).step(stage1, &grads, 1e-3)?;
    Ok(())
}
