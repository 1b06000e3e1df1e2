//! Beam search over decoder steps with an attention-entropy penalty, and
//! CTC collapse / greedy / prefix-search readouts.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::kernels::{argmax, log_add, log_softmax_in_place};
use crate::numcore::{ParamStore, Tensor};
use crate::posespace::codebook::{BLANK, BOS, EOS, PAD};
use crate::recognizer::Recognizer;

/// Anything that scores the next token after a prefix.
pub trait StepModel {
    fn vocab(&self) -> usize;

    /// Next-token logits after `prefix` and the cross-attention row of each head.
    fn step(&self, prefix: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    pub alpha: f64,
    pub top_k: usize,
    pub max_len: usize,
    pub top_p: Option<f64>,
    pub repetition_penalty: Option<f64>,
    /// Finished scores are divided by `len^lp` when ranking.
    pub length_penalty: Option<f64>,
    /// Tokens never proposed (their probability mass is simply dropped).
    pub banned: Vec<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 8,
            alpha: 0.1,
            top_k: 50,
            max_len: 12,
            top_p: None,
            repetition_penalty: None,
            length_penalty: None,
            banned: vec![BLANK, BOS, PAD],
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.beam == 0 || self.top_k == 0 || self.max_len == 0 {
            return bad("beam, top_k and max_len must be at least 1".into());
        }
        if !(self.alpha >= 0.0) {
            return bad(format!("entropy penalty {} must be non-negative", self.alpha));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("top_p {p} outside (0, 1]"));
            }
        }
        if let Some(r) = self.repetition_penalty {
            if !(r >= 1.0) {
                return bad(format!("repetition penalty {r} below 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
    pub entropies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeResult {
    /// Output tokens without BOS / EOS.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub per_step_entropy: Vec<f64>,
    /// No hypothesis emitted EOS within `max_len`.
    pub truncated: bool,
}

/// Mean over heads of the Shannon entropy (nats) of each attention row.
pub fn attn_entropy(heads: &[Vec<f64>]) -> f64 {
    if heads.is_empty() {
        return 0.0;
    }
    let h: f64 = heads
        .iter()
        .map(|row| row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
        .sum();
    h / heads.len() as f64
}

fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Candidate next tokens with their log-probabilities after filtering.
fn proposals(logits: &mut [f64], prefix: &[usize], cfg: &DecodeConfig) -> Vec<(usize, f64)> {
    if let Some(r) = cfg.repetition_penalty {
        for &t in prefix.iter().skip(1) {
            if let Some(l) = logits.get_mut(t) {
                *l = if *l > 0.0 { *l / r } else { *l * r };
            }
        }
    }
    log_softmax_in_place(logits);
    let mut cand: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .filter(|(t, _)| !cfg.banned.contains(t))
        .map(|(t, &lp)| (t, lp))
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.top_k);
    if let Some(p) = cfg.top_p {
        let mut mass = 0.0;
        let mut keep = 0;
        for (_, lp) in &cand {
            keep += 1;
            mass += lp.exp();
            if mass >= p {
                break;
            }
        }
        cand.truncate(keep);
    }
    cand
}

fn final_key(h: &BeamHypothesis, cfg: &DecodeConfig) -> f64 {
    match cfg.length_penalty {
        Some(lp) => h.score / ((h.tokens.len() - 1) as f64).powf(lp),
        None => h.score,
    }
}

pub fn beam_search(model: &impl StepModel, cfg: &DecodeConfig) -> Result<(DecodeResult, Vec<BeamHypothesis>)> {
    cfg.validate()?;
    let mut live = vec![BeamHypothesis {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
        entropies: Vec::new(),
    }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut next = Vec::new();
        for h in &live {
            let (mut logits, attn) = model.step(&h.tokens)?;
            if logits.len() != model.vocab() {
                return Err(Error::Dimension("step logits width differs from the vocabulary".into()));
            }
            let ent = attn_entropy(&attn);
            for (w, lp) in proposals(&mut logits, &h.tokens, cfg) {
                let mut tokens = h.tokens.clone();
                tokens.push(w);
                let mut entropies = h.entropies.clone();
                entropies.push(ent);
                let cand = BeamHypothesis {
                    tokens,
                    score: h.score + lp - cfg.alpha * ent,
                    finished: w == EOS,
                    entropies,
                };
                if cand.finished {
                    done.push(cand);
                } else {
                    next.push(cand);
                }
            }
        }
        next.sort_by(rank);
        next.truncate(cfg.beam);
        live = next;
        if live.is_empty() {
            break;
        }
        if cfg.length_penalty.is_none() {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= live[0].score {
                break;
            }
        }
    }
    done.sort_by(|a, b| final_key(b, cfg).total_cmp(&final_key(a, cfg)).then_with(|| a.tokens.cmp(&b.tokens)));
    let (best, truncated) = match done.first() {
        Some(h) => (h.clone(), false),
        None => match live.first() {
            Some(h) => (h.clone(), true),
            None => {
                return Ok((
                    DecodeResult {
                        tokens: Vec::new(),
                        score: f64::NEG_INFINITY,
                        per_step_entropy: Vec::new(),
                        truncated: true,
                    },
                    done,
                ))
            }
        },
    };
    let tokens = best.tokens.iter().copied().filter(|&t| t != BOS && t != EOS).collect();
    Ok((
        DecodeResult {
            tokens,
            score: best.score,
            per_step_entropy: best.entropies.clone(),
            truncated,
        },
        done,
    ))
}

/// Best gloss sequence under the entropy-penalised beam.
pub fn beam_decode(model: &impl StepModel, cfg: &DecodeConfig) -> Result<DecodeResult> {
    Ok(beam_search(model, cfg)?.0)
}

/// Recognizer decoder bound to one sequence's encoder states.
pub struct RecognizerStep<'a> {
    pub model: &'a Recognizer,
    pub store: &'a ParamStore,
    pub enc: &'a Tensor,
}

impl StepModel for RecognizerStep<'_> {
    fn vocab(&self) -> usize {
        self.model.arch.vocab
    }

    fn step(&self, prefix: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.model.decoder_step(self.store, self.enc, prefix)
    }
}

/// Encodes `z` and beam-decodes it.
pub fn decode_sequence(model: &Recognizer, store: &ParamStore, z: &Tensor, cfg: &DecodeConfig) -> Result<DecodeResult> {
    let enc = model.encode_sequence(store, z)?;
    if enc.enc.rows() == 0 {
        return Err(Error::EmptyInput("no encoder states".into()));
    }
    beam_decode(
        &RecognizerStep {
            model,
            store,
            enc: &enc.enc,
        },
        cfg,
    )
}

/// Merge consecutive repeats, then drop blanks.
pub fn ctc_collapse(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    ctc_collapse(&path)
}

/// CTC prefix beam search without a language model.
pub fn ctc_prefix_search(log_probs: &Tensor, beam: usize) -> Vec<usize> {
    let ninf = f64::NEG_INFINITY;
    // prefix -> (log p ending in blank, log p ending in non-blank)
    let mut beams: Vec<(Vec<usize>, (f64, f64))> = vec![(Vec::new(), (0.0, ninf))];
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, (pb, pnb)) in &beams {
            let total = log_add(*pb, *pnb);
            for (c, &lp) in row.iter().enumerate() {
                if c == BLANK {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.0 = log_add(e.0, total + lp);
                    continue;
                }
                let last = prefix.last().copied();
                let mut ext = prefix.clone();
                ext.push(c);
                let e = next.entry(ext).or_insert((ninf, ninf));
                e.1 = log_add(e.1, if last == Some(c) { pb + lp } else { total + lp });
                if last == Some(c) {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pnb + lp);
                }
            }
        }
        let mut v: Vec<_> = next.into_iter().collect();
        v.sort_by(|a, b| log_add(b.1 .0, b.1 .1).total_cmp(&log_add(a.1 .0, a.1 .1)).then_with(|| a.0.cmp(&b.0)));
        v.truncate(beam.max(1));
        beams = v;
    }
    beams.into_iter().next().map(|b| b.0).unwrap_or_default()
}

/// One line of `decode.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub glosses: Vec<String>,
    pub score: f64,
    pub per_step_entropy: Vec<f64>,
}
