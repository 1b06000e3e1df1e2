//! Reverse-mode autodiff on a small tape: gradient check of a composite
//! expression, then a few AdamW steps fitting a linear map.

use signx::numcore::{adam_step, grad_check, AdamConfig, Graph, OptimizerState, ParamStore, Tensor};

fn main() -> signx::error::Result<()> {
    let x = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let err = grad_check(
        |g, v| {
            let s = g.softmax_rows(v);
            let t = g.tanh(v);
            let p = g.mul(s, t)?;
            let r = g.row_norm(p);
            Ok(g.sum(r))
        },
        &x,
        1e-5,
    )?;
    println!("softmax * tanh -> row norm: max relative gradient error {err:.2e}");

    let truth = Tensor::new(&[4, 2], vec![1.0, -2.0, 0.5, 0.0, -1.0, 3.0, 2.0, 1.0])?;
    let target = signx::numcore::matmul(&x, &truth)?;
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::zeros(&[4, 2]));
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut opt = OptimizerState::new(&store, cfg);
    for step in 0..=300 {
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let xv = g.constant(&x);
        let y = g.matmul(xv, wv)?;
        let neg: Vec<f64> = target.data().iter().map(|v| -v).collect();
        let d = g.add_const(y, &neg)?;
        let sq = g.square(d);
        let loss = g.mean(sq);
        if step % 100 == 0 {
            println!("step {step:>3} mse {:.6}", g.scalar_value(loss));
        }
        let grads = g.store_grads(&g.backward(loss)?, &store);
        adam_step(&mut store, &grads, &mut opt, 0.05)?;
    }
    Ok(())
}
