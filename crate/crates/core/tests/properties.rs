use proptest::prelude::*;
use rand::Rng;

use signx::decoder::{beam_search, ctc_collapse, ctc_greedy_decode, DecodeConfig, StepModel};
use signx::error::Result;
use signx::latentops::augment::{augment, AugmentConfig};
use signx::latentops::{compile, frame_drop, CompileConfig, GlossSpan, LatentSequence};
use signx::numcore::Tensor;
use signx::posespace::codebook::{BLANK, BOS, EOS, PAD};
use signx::recognizer::ctc::{ctc_nll, min_frames};
use signx::rng;

/// Logits depend on the whole prefix; attention is a fixed two-way split.
struct Hashed {
    seed: u64,
    vocab: usize,
}

impl StepModel for Hashed {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn step(&self, prefix: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let keys: Vec<u64> = prefix.iter().map(|&t| t as u64).collect();
        let mut r = rng::keyed(self.seed, "toy", &keys);
        let logits = (0..self.vocab).map(|_| r.gen_range(-3.0..3.0)).collect();
        Ok((logits, vec![vec![0.5, 0.5]]))
    }
}

fn log_softmax_masked(logits: &[f64], banned: &[usize]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
    (0..logits.len())
        .map(|i| if banned.contains(&i) { f64::NEG_INFINITY } else { logits[i] - z })
        .collect()
}

/// Best finished sequence by exhaustive enumeration (ties by token order).
fn exhaustive(model: &Hashed, max_len: usize, banned: &[usize]) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(vec![BOS], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        if prefix.len() > max_len {
            continue;
        }
        let lp = log_softmax_masked(&model.step(&prefix).unwrap().0, banned);
        for (w, &l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let mut p = prefix.clone();
            p.push(w);
            let s = score + l;
            if w == EOS {
                let better = match &best {
                    None => true,
                    Some((bt, bs)) => s > *bs || (s == *bs && p < *bt),
                };
                if better {
                    best = Some((p, s));
                }
            } else {
                stack.push((p, s));
            }
        }
    }
    best
}

fn rescore(model: &Hashed, tokens: &[usize], banned: &[usize]) -> f64 {
    let mut prefix = vec![BOS];
    let mut total = 0.0;
    for &w in tokens.iter().chain(std::iter::once(&EOS)) {
        total += log_softmax_masked(&model.step(&prefix).unwrap().0, banned)[w];
        prefix.push(w);
    }
    total
}

fn sequence(t: usize, d: usize, seed: u64, glosses: &[usize]) -> LatentSequence {
    let mut r = rng::keyed(seed, "seq", &[]);
    let z = Tensor::new(&[t, d], (0..t * d).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
    let n = glosses.len();
    let spans = glosses
        .iter()
        .enumerate()
        .map(|(k, &g)| GlossSpan::new(g, k * t / n, (k + 1) * t / n - 1))
        .collect();
    LatentSequence::new(z, spans).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wide_beam_matches_exhaustive(seed in any::<u64>(), vocab in 4usize..7, max_len in 1usize..4) {
        let model = Hashed { seed, vocab };
        let banned = vec![BLANK, BOS, PAD];
        let cfg = DecodeConfig {
            beam: vocab.pow(max_len as u32),
            alpha: 0.0,
            top_k: vocab,
            max_len,
            banned: banned.clone(),
            ..DecodeConfig::default()
        };
        let (res, _) = beam_search(&model, &cfg).unwrap();
        let (tokens, score) = exhaustive(&model, max_len, &banned).unwrap();
        prop_assert!((res.score - score).abs() < 1e-9);
        prop_assert_eq!(&res.tokens[..], &tokens[1..tokens.len() - 1]);
    }

    #[test]
    fn beam_output_is_consistent(seed in any::<u64>(), beam in 1usize..6, max_len in 1usize..6) {
        let model = Hashed { seed, vocab: 8 };
        let cfg = DecodeConfig { beam, alpha: 0.0, max_len, ..DecodeConfig::default() };
        let (res, done) = beam_search(&model, &cfg).unwrap();
        prop_assert!(res.tokens.iter().all(|t| !cfg.banned.contains(t) && *t != EOS));
        prop_assert!(res.tokens.len() <= max_len);
        prop_assert_eq!(res.per_step_entropy.len(), res.tokens.len() + usize::from(!res.truncated));
        for e in &res.per_step_entropy {
            prop_assert!((e - std::f64::consts::LN_2).abs() < 1e-12);
        }
        if !res.truncated {
            prop_assert!((rescore(&model, &res.tokens, &cfg.banned) - res.score).abs() < 1e-9);
            prop_assert!(done.iter().all(|h| h.score <= res.score));
        }
    }

    #[test]
    fn entropy_penalty_is_additive(seed in any::<u64>(), alpha in 0.0f64..1.0) {
        let model = Hashed { seed, vocab: 6 };
        let base = DecodeConfig { beam: 4, alpha: 0.0, max_len: 4, ..DecodeConfig::default() };
        let pen = DecodeConfig { alpha, ..base.clone() };
        let b = beam_search(&model, &pen).unwrap().0;
        // Uniform entropy shifts every finished hypothesis by alpha * ln2 per step.
        let steps = b.per_step_entropy.len() as f64;
        prop_assert!((rescore(&model, &b.tokens, &base.banned) - alpha * std::f64::consts::LN_2 * steps - b.score).abs() < 1e-9);
    }

    #[test]
    fn collapse_drops_blanks_and_repeats(labels in prop::collection::vec(0usize..5, 0..20)) {
        let out = ctc_collapse(&labels);
        prop_assert!(!out.contains(&BLANK));
        prop_assert!(out.len() <= labels.len());
        let plain: Vec<usize> = labels.iter().copied().filter(|&l| l != BLANK).collect();
        if plain.windows(2).all(|w| w[0] != w[1]) {
            prop_assert_eq!(ctc_collapse(&plain), plain);
        }
    }

    #[test]
    fn greedy_decode_never_emits_blank(rows in 1usize..12, seed in any::<u64>()) {
        let mut r = rng::keyed(seed, "lp", &[]);
        let v = 5;
        let mut data = Vec::with_capacity(rows * v);
        for _ in 0..rows {
            let logits: Vec<f64> = (0..v).map(|_| r.gen_range(-2.0..2.0)).collect();
            data.extend(log_softmax_masked(&logits, &[]));
        }
        let out = ctc_greedy_decode(&Tensor::new(&[rows, v], data).unwrap());
        prop_assert!(!out.contains(&BLANK));
        prop_assert!(out.len() <= rows);
    }

    #[test]
    fn ctc_feasibility_matches_min_frames(
        target in prop::collection::vec(1usize..4, 1..5),
        rows in 1usize..10,
    ) {
        let v = 4;
        let lp = Tensor::new(&[rows, v], vec![-(v as f64).ln(); rows * v]).unwrap();
        let res = ctc_nll(&lp, &target);
        if rows >= min_frames(&target) {
            let (nll, _) = res.unwrap();
            prop_assert!(nll.is_finite() && nll >= -1e-12);
            // Uniform emissions: every path has probability v^-T.
            prop_assert!(nll <= rows as f64 * (v as f64).ln() + 1e-9);
        } else {
            prop_assert!(res.is_err());
        }
    }

    #[test]
    fn compile_normalises_rows(t in 2usize..12, d in 3usize..9, seed in any::<u64>(), gamma in 0.0f64..1.0) {
        let seq = sequence(t, d, seed, &[4, 5]);
        let plain = compile(&seq, &CompileConfig { gamma: 0.0, rho: 0.0, seed }).unwrap();
        prop_assert_eq!((plain.frames(), plain.width()), (t, d));
        for row in 0..t {
            let moments = |x: &[f64]| {
                let mean = x.iter().sum::<f64>() / d as f64;
                (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64)
            };
            let (mean, var) = moments(plain.z.row(row));
            let raw = moments(seq.z.row(row)).1;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - raw / (raw + 1e-5)).abs() < 1e-9);
        }
        let whitened = compile(&seq, &CompileConfig { gamma, rho: 0.0, seed }).unwrap();
        prop_assert_eq!(whitened.z.row(0), plain.z.row(0));
        prop_assert_eq!(&whitened.align, &plain.align);
        prop_assert!(whitened.align.iter().all(|g| [4, 5].contains(g)));
    }

    #[test]
    fn frame_drop_masks_exactly_zeroed_rows(t in 1usize..30, seed in any::<u64>(), rho in 0.0f64..0.9) {
        let seq = sequence(t, 4, seed, &[4]);
        let out = frame_drop(&seq, rho, seed);
        prop_assert_eq!(out.frames(), t);
        for row in 0..t {
            let zero = out.z.row(row).iter().all(|v| *v == 0.0);
            prop_assert_eq!(zero, !out.mask[row]);
            if out.mask[row] {
                prop_assert_eq!(out.z.row(row), seq.z.row(row));
            }
        }
        prop_assert_eq!(frame_drop(&seq, 0.0, seed).mask, vec![true; t]);
    }

    #[test]
    fn augment_keeps_spans_inside_frames(t in 4usize..24, seed in any::<u64>(), i in 0usize..50) {
        let seq = sequence(t, 3, seed, &[4, 6, 5]);
        let cfg = AugmentConfig::default();
        let folds = augment(i, &seq, &cfg, seed).unwrap();
        prop_assert_eq!(folds.len(), cfg.folds);
        for (j, (key, s)) in folds.iter().enumerate() {
            prop_assert_eq!(key, &format!("{i}_{j}"));
            prop_assert_eq!(s.glosses(), seq.glosses());
            prop_assert_eq!(s.width(), 3);
            prop_assert!(s.spans.iter().all(|sp| sp.start <= sp.end && sp.end < s.frames()));
        }
        prop_assert_eq!(folds, augment(i, &seq, &cfg, seed).unwrap());
    }
}
