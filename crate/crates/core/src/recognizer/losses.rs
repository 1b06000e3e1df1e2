use crate::error::{contract, dim_err, Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Inverse-frequency class weights normalised to mean 1.
pub fn class_weights(priors: &[f64]) -> Result<Vec<f64>> {
    if priors.is_empty() {
        return Err(Error::EmptyInput("no gloss priors".into()));
    }
    if let Some(p) = priors.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::Parameter(format!("gloss prior {p} is not positive")));
    }
    let inv: Vec<f64> = priors.iter().map(|p| 1.0 / p).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Frame-weighted KL(student || teacher), averaged over frames. The teacher
/// enters as a constant; `weights` holds one entry per frame.
pub fn kd_loss(g: &mut Graph, student_logits: Var, teacher_logits: &Tensor, weights: &[f64]) -> Result<Var> {
    let (t, v) = g.shape(student_logits);
    if teacher_logits.rows() != t || teacher_logits.cols() != v {
        return Err(dim_err(format!(
            "kd_loss: student {t}x{v}, teacher {}x{}",
            teacher_logits.rows(),
            teacher_logits.cols()
        )));
    }
    if weights.len() != t {
        return Err(dim_err("kd_loss: one weight per frame"));
    }
    let mut lt = teacher_logits.clone();
    for row in lt.data_mut().chunks_mut(v) {
        crate::numcore::kernels::log_softmax_in_place(row);
    }
    let ls = g.log_softmax_rows(student_logits);
    let ps = g.exp(ls);
    let neg_lt: Vec<f64> = lt.data().iter().map(|x| -x).collect();
    let diff = g.add_const(ls, &neg_lt)?;
    let terms = g.mul(ps, diff)?;
    let kl = g.row_sum(terms);
    let weighted = g.mul_const(kl, weights.to_vec())?;
    Ok(g.mean(weighted))
}

/// Mean squared hinge on consecutive state distances beyond `radius`.
pub fn lipschitz_reg(g: &mut Graph, states: Var, radius: f64) -> Result<Var> {
    let t = g.shape(states).0;
    if t < 2 || radius == f64::INFINITY {
        return Ok(g.constant_rows(1, 1, vec![0.0]));
    }
    let next = g.slice_rows(states, 1, t)?;
    let prev = g.slice_rows(states, 0, t - 1)?;
    let d = g.sub(next, prev)?;
    let norms = g.row_norm(d);
    let excess = g.add_scalar(norms, -radius);
    let hinge = g.relu(excess);
    let sq = g.square(hinge);
    Ok(g.mean(sq))
}

/// Inverse-square-root schedule with linear warmup; `step` counts from 1.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(contract("noam_lr: steps count from 1"));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Parameter("noam_lr: warmup and d_model must be positive".into()));
    }
    let t = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * w.powf(-1.5)))
}
