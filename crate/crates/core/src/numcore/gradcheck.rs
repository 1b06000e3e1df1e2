use crate::error::{contract, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Compares tape gradients with central differences.
///
/// `f` records a scalar-valued computation of its input on a fresh graph.
/// Returns the largest `|analytic - numeric| / (|analytic| + 1e-8)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(point);
        let out = f(&mut g, v)?;
        if g.shape(out) != (1, 1) {
            return Err(contract(format!(
                "grad_check needs a scalar output, got {:?}",
                g.shape(out)
            )));
        }
        Ok(g.scalar_value(out))
    };

    let mut g = Graph::new();
    let v = g.leaf(x);
    let out = f(&mut g, v)?;
    let grads = g.backward(out)?;
    let zeros = vec![0.0; x.len()];
    let analytic = grads.wrt(v).unwrap_or(&zeros).to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (a - numeric).abs() / (a.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
