//! Entropy-penalised beam search over a scripted step model. Two candidate
//! glosses differ slightly in probability; the likelier one is reached via a
//! diffuse attention pattern, so a large enough penalty flips the decision.

use signx::decoder::{attn_entropy, beam_search, DecodeConfig, StepModel};
use signx::posespace::codebook::{BOS, EOS};

const VOCAB: usize = 6;

struct Scripted;

impl StepModel for Scripted {
    fn vocab(&self) -> usize {
        VOCAB
    }

    fn step(&self, prefix: &[usize]) -> signx::error::Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut logits = vec![-20.0; VOCAB];
        let attn = match prefix {
            [BOS] => {
                logits[4] = 0.05;
                logits[5] = 0.0;
                vec![vec![1.0, 0.0, 0.0, 0.0]]
            }
            [BOS, 4] => {
                logits[EOS] = 0.0;
                vec![vec![0.25; 4]]
            }
            _ => {
                logits[EOS] = 0.0;
                vec![vec![0.97, 0.01, 0.01, 0.01]]
            }
        };
        Ok((logits, attn))
    }
}

fn main() -> signx::error::Result<()> {
    println!("entropy after [BOS, 4]: {:.3} nats", attn_entropy(&[vec![0.25; 4]]));
    println!("entropy after [BOS, 5]: {:.3} nats", attn_entropy(&[vec![0.97, 0.01, 0.01, 0.01]]));
    for alpha in [0.0, 0.01, 0.05, 0.1, 0.5] {
        let cfg = DecodeConfig { beam: 4, alpha, max_len: 3, ..DecodeConfig::default() };
        let (best, finished) = beam_search(&Scripted, &cfg)?;
        let pool: Vec<String> = finished.iter().map(|h| format!("{:?}={:.3}", &h.tokens[1..], h.score)).collect();
        println!("alpha {alpha:<4} -> {:?} score {:.4}   pool {}", best.tokens, best.score, pool.join(" "));
    }
    Ok(())
}
