//! Joint KD + CTC + decoder training for the latent recognizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::ctc_greedy_decode;
use crate::error::{contract, Error, Result};
use crate::evalkit::edit_counts;
use crate::latentops::{build_prune_mask, frame_drop, LatentSequence, PruneMask};
use crate::nn::{Dropout, Session};
use crate::numcore::{AdamConfig, OptimizerState, ParamStore, StoreGrads, Tensor, Var};
use crate::posespace::codebook::{BOS, EOS, RESERVED};
use crate::posespace::text_loss;
use crate::posespace::train::shuffled;
use crate::rng;

use super::ctc::ctc_loss;
use super::losses::{class_weights, kd_loss, lipschitz_reg, noam_lr};
use super::model::{pooled_len, BnUpdate, Recognizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch: usize,
    pub warmup: u64,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    pub prune_every: usize,
    pub prune_tau: f64,
    pub lambda_kd: f64,
    pub lambda_ctc: f64,
    pub lambda_lip: f64,
    pub lip_radius: f64,
    pub dropout: Dropout,
    pub label_smoothing: f64,
    /// Frame-drop rate applied per batch.
    pub rho: f64,
    /// Epochs of teacher-only training before the joint phase; 0 co-trains.
    pub teacher_epochs: usize,
    pub average_top: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            warmup: 600,
            lr_scale: 1.0,
            prune_every: 5,
            prune_tau: 0.01,
            lambda_kd: 1.0,
            lambda_ctc: 1.0,
            lambda_lip: 0.01,
            lip_radius: 10.0,
            dropout: Dropout {
                attn: 0.3,
                relu: 0.5,
                res: 0.4,
            },
            label_smoothing: 0.1,
            rho: 0.05,
            teacher_epochs: 0,
            average_top: 5,
            adam: AdamConfig {
                beta2: 0.98,
                eps: 1e-9,
                clip_norm: 5.0,
                weight_decay: 0.3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.warmup < 1 {
            return bad("warmup must be at least 1".into());
        }
        let d = self.dropout;
        for (name, p) in [("p_attn", d.attn), ("p_relu", d.relu), ("p_res", d.res), ("rho", self.rho)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.batch == 0 || self.epochs == 0 || self.average_top == 0 {
            return bad("batch, epochs and average_top must be positive".into());
        }
        if self.lip_radius < 0.0 || self.prune_tau < 0.0 || self.lr_scale <= 0.0 {
            return bad("lip_radius and prune_tau must be non-negative, lr_scale positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CslrEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub kd: f64,
    pub ctc: f64,
    pub xent: f64,
    pub lip: f64,
    pub teacher_ctc: f64,
    pub total: f64,
    pub dev_wer: f64,
    pub effective_width: usize,
}

#[derive(Clone, Debug)]
pub struct CslrOutcome {
    pub logs: Vec<CslrEpochLog>,
    pub mask: PruneMask,
    /// Epochs whose snapshots were averaged into the final weights.
    pub averaged: Vec<usize>,
}

pub struct BatchLoss {
    pub total: Var,
    /// kd, ctc, xent, lip, teacher ctc (batch means).
    pub parts: [f64; 5],
    pub bn: Vec<BnUpdate>,
}

/// Frame weight for each pooled output position: the class weight of the
/// gloss aligned with the centre of its input window, 1 elsewhere.
pub fn output_weights(seq: &LatentSequence, weights: &[f64]) -> Vec<f64> {
    let t = seq.frames();
    (0..pooled_len(t))
        .map(|o| {
            let g = seq.align[(4 * o + 2).min(t - 1)];
            if g >= RESERVED {
                weights.get(g - RESERVED).copied().unwrap_or(1.0)
            } else {
                1.0
            }
        })
        .collect()
}

/// Add-one smoothed gloss frequencies over the training targets.
pub fn gloss_priors(data: &[LatentSequence], vocab: usize) -> Vec<f64> {
    let mut counts = vec![1.0; vocab - RESERVED];
    for s in data {
        for g in s.glosses() {
            if g >= RESERVED && g < vocab {
                counts[g - RESERVED] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

pub fn batch_loss(
    model: &Recognizer,
    s: &mut Session,
    batch: &[&LatentSequence],
    weights: &[f64],
    sched: &TrainSchedule,
    teacher_only: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(contract("empty CSLR batch"));
    }
    let inputs = batch.iter().map(|q| model.input(s, &q.z)).collect::<Result<Vec<_>>>()?;
    let teacher = model.teacher_logits(s, &inputs)?;
    let (hs, bn) = if teacher_only {
        (Vec::new(), Vec::new())
    } else {
        model.conv_stack(s, &inputs)?
    };
    let mut terms = Vec::with_capacity(batch.len());
    let mut parts = [0.0; 5];
    for (i, q) in batch.iter().enumerate() {
        let target = q.glosses();
        let tlp = s.g.log_softmax_rows(teacher[i]);
        let t_ctc = ctc_loss(&mut s.g, tlp, &target)?;
        parts[4] += s.g.scalar_value(t_ctc);
        if teacher_only {
            terms.push(t_ctc);
            continue;
        }
        let u = model.birnn(s, hs[i])?;
        let mut prefix = vec![BOS];
        prefix.extend(&target);
        let out = model.refine_forward(s, u, &prefix)?;
        let slp = s.g.log_softmax_rows(out.ctc_logits);
        let ctc = ctc_loss(&mut s.g, slp, &target)?;
        let t_val = s.g.value(teacher[i]).clone();
        let kd = kd_loss(&mut s.g, out.ctc_logits, &t_val, &output_weights(q, weights))?;
        let mut gold = target.clone();
        gold.push(EOS);
        let xent = text_loss(&mut s.g, out.dec_logits, &gold, sched.label_smoothing)?;
        let lip = lipschitz_reg(&mut s.g, out.enc, sched.lip_radius)?;
        for (k, v) in [kd, ctc, xent, lip].into_iter().enumerate() {
            parts[k] += s.g.scalar_value(v);
        }
        let a = s.g.scale(kd, sched.lambda_kd);
        let b = s.g.scale(ctc, sched.lambda_ctc);
        let c = s.g.scale(lip, sched.lambda_lip);
        let d = s.g.scale(t_ctc, sched.lambda_ctc);
        let mut sum = s.g.add(a, b)?;
        for v in [xent, c, d] {
            sum = s.g.add(sum, v)?;
        }
        terms.push(sum);
    }
    let n = batch.len() as f64;
    let stacked = s.g.concat_rows(&terms)?;
    let total = s.g.mean(stacked);
    parts.iter_mut().for_each(|p| *p /= n);
    Ok(BatchLoss { total, parts, bn })
}

/// Corpus WER of greedy CTC readouts.
pub fn greedy_wer(model: &Recognizer, store: &ParamStore, data: &[LatentSequence]) -> Result<f64> {
    let (mut errs, mut n) = (0, 0);
    for q in data {
        let hyp = ctc_greedy_decode(&model.ctc_log_probs(store, &q.z)?);
        let c = edit_counts(&hyp, &q.glosses());
        errs += c.errors();
        n += c.n;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("dev set has no reference glosses".into()));
    }
    Ok(errs as f64 / n as f64)
}

/// Elementwise mean of checkpoints that share parameter names and shapes.
/// The input order does not matter; the output is sorted by name.
pub fn average_checkpoints(checkpoints: &[Vec<(String, Tensor)>]) -> Result<Vec<(String, Tensor)>> {
    let Some(first) = checkpoints.first() else {
        return Err(Error::EmptyInput("no checkpoints to average".into()));
    };
    let maps: Vec<BTreeMap<&str, &Tensor>> = checkpoints
        .iter()
        .map(|c| c.iter().map(|(n, t)| (n.as_str(), t)).collect())
        .collect();
    let reference = &maps[0];
    if reference.len() != first.len() {
        return Err(Error::CheckpointIncompatible("duplicate parameter names".into()));
    }
    for (k, m) in maps.iter().enumerate().skip(1) {
        if m.len() != reference.len() || m.len() != checkpoints[k].len() {
            return Err(Error::CheckpointIncompatible(format!("checkpoint {k} has a different parameter set")));
        }
        for (name, t) in reference {
            match m.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                Some(o) => {
                    return Err(Error::CheckpointIncompatible(format!(
                        "{name}: shape {:?} vs {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::CheckpointIncompatible(format!("checkpoint {k} lacks {name}"))),
            }
        }
    }
    let k = checkpoints.len() as f64;
    Ok(reference
        .iter()
        .map(|(name, t)| {
            let mut acc = vec![0.0; t.len()];
            for m in &maps {
                acc.iter_mut().zip(m[name].data()).for_each(|(a, v)| *a += v);
            }
            let data = acc.into_iter().map(|a| a / k).collect();
            (name.to_string(), Tensor::new(t.shape(), data).expect("shape preserved"))
        })
        .collect())
}

/// Dev WER, epoch and named parameters of one end-of-epoch state.
type Snapshot = (f64, usize, Vec<(String, Tensor)>);

/// Trains `model` in place. The final weights are the mean of the
/// `average_top` snapshots with the lowest greedy dev WER.
pub fn train_cslr(
    model: &Recognizer,
    store: &mut ParamStore,
    train: &[LatentSequence],
    dev: &[LatentSequence],
    sched: &TrainSchedule,
    mut on_epoch: impl FnMut(&CslrEpochLog),
) -> Result<CslrOutcome> {
    sched.validate()?;
    if train.is_empty() {
        return Err(contract("empty CSLR training set"));
    }
    if let Some(q) = train.iter().chain(dev).find(|q| q.glosses().iter().any(|&g| g >= model.arch.vocab)) {
        return Err(Error::Codebook(format!("a sequence of {} frames has glosses outside the codebook", q.frames())));
    }
    let weights = class_weights(&gloss_priors(train, model.arch.vocab))?;
    let mut mask = PruneMask::all_ones(model.arch.d_in);
    model.set_mask(store, &mask.mask)?;
    let mut opt = OptimizerState::new(store, sched.adam);
    let mut snapshots: Vec<Snapshot> = Vec::new();
    let mut logs = Vec::new();
    let total_epochs = sched.teacher_epochs + sched.epochs;
    for epoch in 0..total_epochs {
        let teacher_only = epoch < sched.teacher_epochs;
        let joint_epoch = epoch.saturating_sub(sched.teacher_epochs);
        if !teacher_only && sched.prune_every > 0 && joint_epoch > 0 && joint_epoch % sched.prune_every == 0 {
            mask = build_prune_mask(train, sched.prune_tau)?;
            model.set_mask(store, &mask.mask)?;
        }
        let order = shuffled(train.len(), sched.seed, "cslr-order", epoch);
        let mut sums = [0.0; 6];
        let mut lr = 0.0;
        let batches = order.chunks(sched.batch).count();
        for (b, chunk) in order.chunks(sched.batch).enumerate() {
            let dropped: Vec<LatentSequence> = chunk
                .iter()
                .map(|&i| frame_drop(&train[i], sched.rho, rng::derive(sched.seed, "cslr-drop", &[epoch as u64, i as u64])))
                .collect();
            let batch: Vec<&LatentSequence> = dropped.iter().collect();
            let (grads, bn) = {
                let r = rng::keyed(sched.seed, "cslr-dropout", &[epoch as u64, b as u64]);
                let mut s = Session::train(store, sched.dropout, r);
                let loss = batch_loss(model, &mut s, &batch, &weights, sched, teacher_only)?;
                let total = s.g.scalar_value(loss.total);
                if !total.is_finite() {
                    return Err(Error::Divergence(format!("CSLR loss {total} at epoch {epoch}, batch {b}")));
                }
                for (acc, v) in sums.iter_mut().zip(loss.parts.iter().chain([&total])) {
                    *acc += v;
                }
                let g = s.g.backward(loss.total)?;
                (s.g.store_grads(&g, store), loss.bn)
            };
            lr = sched.lr_scale * noam_lr(opt.step_count() + 1, model.arch.d_model, sched.warmup)?;
            opt.step(store, &grads, lr)?;
            for u in &bn {
                u.apply(store);
            }
        }
        let dev_wer = if teacher_only || dev.is_empty() {
            f64::NAN
        } else {
            greedy_wer(model, store, dev)?
        };
        let k = batches as f64;
        let log = CslrEpochLog {
            epoch,
            lr,
            kd: sums[0] / k,
            ctc: sums[1] / k,
            xent: sums[2] / k,
            lip: sums[3] / k,
            teacher_ctc: sums[4] / k,
            total: sums[5] / k,
            dev_wer,
            effective_width: mask.effective_width,
        };
        on_epoch(&log);
        logs.push(log);
        if !teacher_only {
            let key = if dev_wer.is_nan() { f64::INFINITY } else { dev_wer };
            snapshots.push((key, epoch, store.named_tensors()));
            snapshots.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
            snapshots.truncate(sched.average_top);
        }
    }
    let averaged: Vec<usize> = snapshots.iter().map(|s| s.1).collect();
    let cks: Vec<Vec<(String, Tensor)>> = snapshots.into_iter().map(|s| s.2).collect();
    store.load_named(&average_checkpoints(&cks)?)?;
    model.set_mask(store, &mask.mask)?;
    Ok(CslrOutcome { logs, mask, averaged })
}

/// Drops gradient entries of non-trainable tensors, for inspection.
pub fn trainable_grads(store: &ParamStore, grads: &StoreGrads) -> Vec<(String, Vec<f64>)> {
    store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .filter_map(|id| grads.get(id).map(|g| (store.name(id).to_string(), g.to_vec())))
        .collect()
}
