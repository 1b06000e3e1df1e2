//! Connectionist temporal classification in log space.

use crate::error::{contract, dim_err, Error, Result};
use crate::numcore::kernels::log_add;
use crate::numcore::{Graph, Tensor, Var};
use crate::posespace::codebook::BLANK;

/// Minimum number of frames that can emit `target`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs` (`T x V`), and its gradient with respect to every entry.
pub fn ctc_nll(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (t_len, v) = (log_probs.rows(), log_probs.cols());
    if t_len == 0 {
        return Err(dim_err("ctc: no frames"));
    }
    if let Some(&l) = target.iter().find(|&&l| l == BLANK || l >= v) {
        return Err(contract(format!("ctc: target label {l} is blank or outside 0..{v}")));
    }
    let need = min_frames(target);
    if need > t_len {
        return Err(Error::InfeasibleAlignment(format!(
            "target needs {need} frames, only {t_len} available"
        )));
    }
    let lp = log_probs.data();
    let ext = extended(target);
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = a + lp[t * v + ext[s]];
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::InfeasibleAlignment("no alignment has nonzero probability".into()));
    }

    let mut beta = vec![ninf; t_len * s_len];
    beta[last + s_len - 1] = lp[(t_len - 1) * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t_len - 1) * v + ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = b + lp[t * v + ext[s]];
        }
    }

    let mut grad = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let i = t * s_len + s;
            let occ = alpha[i] + beta[i] - lp[t * v + ext[s]] - log_p;
            if occ.is_finite() {
                grad[t * v + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss node over a `T x V` log-probability variable.
pub fn ctc_loss(g: &mut Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (value, grad) = ctc_nll(g.value(log_probs), target)?;
    g.custom_scalar(log_probs, value, grad)
}
