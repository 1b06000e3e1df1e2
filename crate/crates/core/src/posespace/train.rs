//! Stage-1 training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dropout, Session};
use crate::numcore::{cosine_lr, AdamConfig, OptimizerState, ParamStore, StoreGrads, Var};
use crate::rng;
use crate::synth::Utterance;

use super::codebook::EOS;
use super::losses::{composite_stage1_loss, contrastive_loss, text_loss, word_match_loss, LossWeights};
use super::model::Stage1Model;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1TrainConfig {
    pub epochs: usize,
    pub micro_batch: usize,
    pub accumulate: usize,
    pub lr: f64,
    pub min_lr_frac: f64,
    pub warmup_frac: f64,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub weights: LossWeights,
    pub tau_c: f64,
    pub tf_start: f64,
    pub tf_end: f64,
    pub seed: u64,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            micro_batch: 8,
            accumulate: 4,
            lr: 1e-3,
            min_lr_frac: 0.05,
            warmup_frac: 0.05,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            weights: LossWeights::default(),
            tau_c: 0.2,
            tf_start: 0.5,
            tf_end: 0.0,
            seed: 0,
        }
    }
}

impl Stage1TrainConfig {
    /// Linear decay from `tf_start` at epoch 0 to `tf_end` at the last epoch.
    pub fn teacher_forcing(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tf_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.tf_start + (self.tf_end - self.tf_start) * f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1EpochLog {
    pub epoch: usize,
    pub teacher_forcing: f64,
    pub lr: f64,
    pub text: f64,
    pub word: f64,
    pub contrast: f64,
    pub total: f64,
}

pub struct BatchLoss {
    pub total: Var,
    pub text: f64,
    pub word: f64,
    pub contrast: f64,
}

/// Composite loss of one micro-batch recorded on `s`.
pub fn batch_loss(
    model: &Stage1Model,
    s: &mut Session,
    batch: &[&Utterance],
    tf: f64,
    cfg: &Stage1TrainConfig,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty Stage-1 batch".into()));
    }
    let n = batch.len() as f64;
    let emb = s.p(model.embed);
    let mut texts = Vec::with_capacity(batch.len());
    let mut words = Vec::with_capacity(batch.len());
    let mut span_means = Vec::new();
    let mut span_glosses = Vec::new();
    for u in batch {
        let (z, _) = model.latents_var(s, &u.tracks)?;
        let mut targets = u.glosses.clone();
        targets.push(EOS);
        let gold = targets.clone();
        let logits = model.decode_logits(s, z, targets.len(), |s, k, pred| match s.draw() {
            Some(r) if r < tf => gold[k - 1],
            _ => pred,
        })?;
        texts.push(text_loss(&mut s.g, logits, &targets, cfg.label_smoothing)?);
        let probs = s.g.softmax_rows(logits);
        let pred_emb = s.g.matmul(probs, emb)?;
        let true_emb = s.g.select_rows(emb, &targets)?;
        words.push(word_match_loss(&mut s.g, pred_emb, true_emb)?);
        for span in &u.spans {
            let seg = s.g.slice_rows(z, span.start, span.end + 1)?;
            span_means.push(s.g.col_mean(seg));
            span_glosses.push(span.gloss);
        }
    }
    let mut distinct = span_glosses.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let positives: Vec<usize> = span_glosses
        .iter()
        .map(|g| distinct.binary_search(g).expect("gloss present"))
        .collect();
    let pooled = s.g.concat_rows(&span_means)?;
    let pose = model.contrast_proj.forward(s, pooled)?;
    let cands = s.g.select_rows(emb, &distinct)?;
    let contrast = contrastive_loss(&mut s.g, pose, cands, &positives, cfg.tau_c)?;
    let text = sum_scaled(s, &texts, 1.0 / n)?;
    let word = sum_scaled(s, &words, 1.0 / n)?;
    let total = composite_stage1_loss(&mut s.g, text, word, contrast, &cfg.weights)?;
    Ok(BatchLoss {
        text: s.g.scalar_value(text),
        word: s.g.scalar_value(word),
        contrast: s.g.scalar_value(contrast),
        total,
    })
}

fn sum_scaled(s: &mut Session, xs: &[Var], k: f64) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = s.g.add(acc, x)?;
    }
    Ok(s.g.scale(acc, k))
}

/// Trains `store` in place and returns one record per epoch.
pub fn train_stage1(
    model: &Stage1Model,
    store: &mut ParamStore,
    data: &[&Utterance],
    cfg: &Stage1TrainConfig,
    mut on_epoch: impl FnMut(&Stage1EpochLog),
) -> Result<Vec<Stage1EpochLog>> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no Stage-1 training utterances".into()));
    }
    let vocab = model.arch.vocab;
    if let Some(u) = data.iter().find(|u| u.glosses.iter().any(|&g| g >= vocab)) {
        return Err(Error::Codebook(format!("utterance {} has a gloss outside the codebook", u.id)));
    }
    let mb = cfg.micro_batch.max(1);
    let accum = cfg.accumulate.max(1);
    let micro_per_epoch = data.len().div_ceil(mb);
    let steps_per_epoch = micro_per_epoch.div_ceil(accum) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let warmup = ((total_steps as f64) * cfg.warmup_frac).round() as u64;
    let mut opt = OptimizerState::new(store, cfg.adam);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let tf = cfg.teacher_forcing(epoch);
        let order = shuffled(data.len(), cfg.seed, "stage1-order", epoch);
        let mut acc = StoreGrads::zeros_like(store);
        let mut pending = 0;
        let (mut sums, mut lr) = ([0.0; 4], 0.0);
        for (b, chunk) in order.chunks(mb).enumerate() {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| data[i]).collect();
            let grads = {
                let r = rng::keyed(cfg.seed, "stage1-tf", &[epoch as u64, b as u64]);
                let mut s = Session::train(store, Dropout::default(), r);
                let loss = batch_loss(model, &mut s, &batch, tf, cfg)?;
                let total = s.g.scalar_value(loss.total);
                if !total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "Stage-1 loss {total} at epoch {epoch}, batch {b}"
                    )));
                }
                for (acc, v) in sums.iter_mut().zip([loss.text, loss.word, loss.contrast, total]) {
                    *acc += v;
                }
                let g = s.g.backward(loss.total)?;
                s.g.store_grads(&g, store)
            };
            acc.accumulate(&grads);
            pending += 1;
            if pending == accum || b + 1 == micro_per_epoch {
                acc.scale(1.0 / pending as f64);
                lr = cosine_lr(opt.step_count() + 1, total_steps, warmup, cfg.lr, cfg.min_lr_frac);
                opt.step(store, &acc, lr)?;
                acc = StoreGrads::zeros_like(store);
                pending = 0;
            }
        }
        let k = micro_per_epoch as f64;
        let log = Stage1EpochLog {
            epoch,
            teacher_forcing: tf,
            lr,
            text: sums[0] / k,
            word: sums[1] / k,
            contrast: sums[2] / k,
            total: sums[3] / k,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Seeded Fisher-Yates permutation of `0..n` for one epoch.
pub fn shuffled(n: usize, seed: u64, name: &str, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(seed, name, &[epoch as u64]));
    order
}
