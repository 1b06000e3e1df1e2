//! CTC on a hand-built emission matrix: loss and per-frame gradient for a
//! feasible and an infeasible target, then greedy and prefix-beam decoding.

use signx::decoder::{ctc_greedy_decode, ctc_prefix_search};
use signx::numcore::{Graph, Tensor};
use signx::recognizer::{ctc_loss, ctc_nll, min_frames};

fn main() -> signx::error::Result<()> {
    // Columns: blank, a, b. The frames spell "a a _ b b".
    let probs = [
        [0.1, 0.8, 0.1],
        [0.2, 0.7, 0.1],
        [0.8, 0.1, 0.1],
        [0.1, 0.1, 0.8],
        [0.3, 0.1, 0.6],
    ];
    let lp = Tensor::new(&[5, 3], probs.iter().flatten().map(|p: &f64| p.ln()).collect())?;

    for target in [vec![1, 2], vec![1, 1, 2], vec![1, 2, 1, 2]] {
        match ctc_nll(&lp, &target) {
            Ok((nll, _)) => println!("target {target:?}: min frames {}, nll {nll:.4}", min_frames(&target)),
            Err(e) => println!("target {target:?}: min frames {}, {e}", min_frames(&target)),
        }
    }

    let mut g = Graph::new();
    let v = g.leaf(&lp);
    let loss = ctc_loss(&mut g, v, &[1, 2])?;
    let grads = g.backward(loss)?;
    println!("d nll / d log-prob per frame:");
    for row in grads.wrt(v).unwrap().chunks(3) {
        println!("  {}", row.iter().map(|x| format!("{x:+.3}")).collect::<Vec<_>>().join(" "));
    }

    println!("greedy {:?}", ctc_greedy_decode(&lp));
    println!("prefix beam (4) {:?}", ctc_prefix_search(&lp, 4));
    Ok(())
}
