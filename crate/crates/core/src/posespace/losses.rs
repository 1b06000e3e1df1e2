//! Stage-1 objectives, recorded on a [`Graph`] so they can be trained.

use crate::error::{dim_err, Error, Result};
use crate::numcore::{Graph, Var};

/// Mean label-smoothed cross-entropy of `logits` (`N x V`) against `targets`.
pub fn text_loss(g: &mut Graph, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let (n, v) = g.shape(logits);
    if targets.len() != n {
        return Err(dim_err(format!("{} targets for {n} positions", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Codebook(format!("target index {bad} outside vocabulary of {v}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter(format!("label smoothing must be in [0,1), got {eps}")));
    }
    let off = eps / v as f64;
    let mut q = vec![off; n * v];
    for (i, &t) in targets.iter().enumerate() {
        q[i * v + t] += 1.0 - eps;
    }
    let logp = g.log_softmax_rows(logits);
    let weighted = g.mul_const(logp, q)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Scales every row to unit length. Errors on a zero row.
pub fn unit_rows(g: &mut Graph, a: Var) -> Result<Var> {
    let (m, _) = g.shape(a);
    let norms = g.row_norm(a);
    if g.value(norms).data().iter().any(|&x| x <= 1e-12) {
        return Err(Error::DegenerateInput("zero-norm embedding".into()));
    }
    let ones = g.constant_rows(m, 1, vec![1.0; m]);
    let inv = g.div(ones, norms)?;
    g.mul_col(a, inv)
}

/// `(1/B) Σ (1 − cos(pred_b, true_b))` over the rows of two `B x d` matrices.
pub fn word_match_loss(g: &mut Graph, pred: Var, truth: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(truth) {
        return Err(dim_err("word match shapes differ"));
    }
    let b = g.shape(pred).0;
    let a = unit_rows(g, pred)?;
    let t = unit_rows(g, truth)?;
    let prod = g.mul(a, t)?;
    let cos = g.sum(prod);
    let mean = g.scale(cos, -1.0 / b as f64);
    Ok(g.add_scalar(mean, 1.0))
}

/// InfoNCE over cosine similarities: row `i` of `pose` should pick
/// candidate `positives[i]` among the rows of `candidates`. Mean over rows.
pub fn contrastive_loss(
    g: &mut Graph,
    pose: Var,
    candidates: Var,
    positives: &[usize],
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    let (n, d) = g.shape(pose);
    let (j, d2) = g.shape(candidates);
    if d != d2 || positives.len() != n {
        return Err(dim_err("contrastive shapes"));
    }
    if positives.iter().any(|&p| p >= j) {
        return Err(Error::Contract("positive is not among the candidates".into()));
    }
    let a = unit_rows(g, pose)?;
    let c = unit_rows(g, candidates)?;
    let sims = g.matmul_bt(a, c)?;
    let scaled = g.scale(sims, 1.0 / tau);
    let logp = g.log_softmax_rows(scaled);
    let picked = g.pick(logp, positives)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub text: f64,
    pub word: f64,
    pub contrast: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            text: 1.0,
            word: 1.0,
            contrast: 1.0,
        }
    }
}

pub fn composite_stage1_loss(
    g: &mut Graph,
    text: Var,
    word: Var,
    contrast: Var,
    w: &LossWeights,
) -> Result<Var> {
    if w.text < 0.0 || w.word < 0.0 || w.contrast < 0.0 {
        return Err(Error::Parameter("loss weights must be >= 0".into()));
    }
    let a = g.scale(text, w.text);
    let b = g.scale(word, w.word);
    let c = g.scale(contrast, w.contrast);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}
