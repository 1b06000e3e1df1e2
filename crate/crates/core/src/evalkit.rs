//! Sequence and classification metrics: WER, corpus BLEU, per-instance accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.s + self.d + self.i
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.s += o.s;
        self.d += o.d;
        self.i += o.i;
        self.n += o.n;
    }
}

/// Minimal edit alignment of `hyp` against `reference`. Among alignments
/// with the fewest edits the one using the most substitutions is kept.
pub fn edit_counts<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (edits, -substitutions, s, d, i) compared lexicographically on the first two
    let mut dp = vec![(0usize, 0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    let at = |r: usize, h: usize| r * (m + 1) + h;
    for r in 1..=n {
        dp[at(r, 0)] = (r, 0, r, 0);
    }
    for h in 1..=m {
        dp[at(0, h)] = (h, 0, 0, h);
    }
    for r in 1..=n {
        for h in 1..=m {
            let key = |c: &(usize, usize, usize, usize)| (c.0, usize::MAX - c.1);
            let d = dp[at(r - 1, h - 1)];
            let diag = if reference[r - 1] == hyp[h - 1] {
                d
            } else {
                (d.0 + 1, d.1 + 1, d.2, d.3)
            };
            let u = dp[at(r - 1, h)];
            let del = (u.0 + 1, u.1, u.2 + 1, u.3);
            let l = dp[at(r, h - 1)];
            let ins = (l.0 + 1, l.1, l.2, l.3 + 1);
            let mut best = diag;
            for c in [del, ins] {
                if key(&c) < key(&best) {
                    best = c;
                }
            }
            dp[at(r, h)] = best;
        }
    }
    let (_, s, d, i) = dp[at(n, m)];
    EditCounts { s, d, i, n }
}

/// Word error rate `(S + D + I) / N` with its counts.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<(f64, EditCounts)> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("WER of an empty reference".into()));
    }
    let c = edit_counts(hyp, reference);
    Ok((c.errors() as f64 / c.n as f64, c))
}

/// Gloss tokens of a space-separated string.
pub fn tokens(s: &str) -> Vec<&str> {
    s.split(' ').filter(|t| !t.is_empty()).collect()
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut map = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Clipped matches and candidate n-gram total for one pair.
fn clipped<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Corpus BLEU-1 through BLEU-`max_n`, uniform weights, brevity penalty,
/// no smoothing. A zero precision at any order gives 0 for that BLEU-n.
pub fn bleu<T: Eq + Hash, S: AsRef<[T]>>(hyps: &[S], refs: &[S], max_n: usize) -> Result<Vec<f64>> {
    if hyps.is_empty() {
        return Err(Error::UndefinedMetric("BLEU of an empty corpus".into()));
    }
    if hyps.len() != refs.len() || max_n == 0 {
        return Err(Error::Parameter("BLEU needs one reference per hypothesis and max_n >= 1".into()));
    }
    let mut num = vec![0usize; max_n];
    let mut den = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let (m, t) = clipped(h, rf, n);
            num[n - 1] += m;
            den[n - 1] += t;
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        if num[n - 1] == 0 || den[n - 1] == 0 {
            zero = true;
        } else {
            log_sum += (num[n - 1] as f64 / den[n - 1] as f64).ln();
        }
        out.push(if zero || bp == 0.0 {
            0.0
        } else {
            bp * (log_sum / n as f64).exp()
        });
    }
    Ok(out)
}

pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> Result<Vec<f64>> {
    bleu(&[hyp], &[reference], max_n)
}

/// Fraction of samples whose prediction equals the truth.
pub fn pi_accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("accuracy over zero samples".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Parameter("one prediction per sample".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub wer: f64,
    pub bleu: [f64; 4],
    pub pi_accuracy: f64,
    pub counts: EditCounts,
}

/// Corpus metrics for one split; an utterance counts as a correct instance
/// when its whole gloss sequence matches.
pub fn evaluate<S: AsRef<str>>(split: &str, hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<EvalReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Parameter("one hypothesis per reference".into()));
    }
    let h: Vec<Vec<&str>> = hyps.iter().map(|v| v.iter().map(|s| s.as_ref()).collect()).collect();
    let r: Vec<Vec<&str>> = refs.iter().map(|v| v.iter().map(|s| s.as_ref()).collect()).collect();
    let mut counts = EditCounts::default();
    for (a, b) in h.iter().zip(&r) {
        counts.add(&edit_counts(a, b));
    }
    if counts.n == 0 {
        return Err(Error::UndefinedMetric(format!("split {split} has no reference glosses")));
    }
    let b = bleu(&h, &r, 4)?;
    Ok(EvalReport {
        split: split.to_string(),
        wer: counts.errors() as f64 / counts.n as f64,
        bleu: [b[0], b[1], b[2], b[3]],
        pi_accuracy: pi_accuracy(&h, &r)?,
        counts,
    })
}

pub const REPORT_HEADER: &str = "split,wer,bleu1,bleu2,bleu3,bleu4,pi,S,D,I,N";

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            r.split, r.wer, r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.pi_accuracy, r.counts.s, r.counts.d, r.counts.i, r.counts.n
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wer_examples() {
        let r = tokens("A B C D");
        assert_eq!(wer(&r, &r).unwrap().0, 0.0);
        let (w, c) = wer(&tokens("A X C D"), &r).unwrap();
        assert_eq!(w, 0.25);
        assert_eq!((c.s, c.d, c.i), (1, 0, 0));
        let (w, c) = wer::<&str>(&[], &["A"]).unwrap();
        assert_eq!((w, c.d), (1.0, 1));
        assert!(matches!(wer(&["A"], &[] as &[&str]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn substitution_preferred_on_ties() {
        let c = edit_counts(&["B"], &["A"]);
        assert_eq!((c.s, c.d, c.i), (1, 0, 0));
    }

    #[test]
    fn slash_glosses_are_single_tokens() {
        assert_eq!(tokens("HEAR/LISTEN BOOK"), vec!["HEAR/LISTEN", "BOOK"]);
    }

    #[test]
    fn bleu_examples() {
        let h = vec![tokens("A A A")];
        let r = vec![tokens("A B")];
        let b = bleu(&h, &r, 1).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-15);
        let same = vec![tokens("A B C D")];
        assert_eq!(bleu(&same, &same, 4).unwrap(), vec![1.0; 4]);
        let short = vec![tokens("A B")];
        let long = vec![tokens("A B C D")];
        let b = bleu(&short, &long, 1).unwrap();
        assert!((b[0] - (1.0f64 - 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn pi_examples() {
        assert_eq!(pi_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert_eq!(pi_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(pi_accuracy::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn report_row_format() {
        let rep = evaluate("dev", &[tokens("A B")], &[tokens("A C")]).unwrap();
        let csv = report_csv(&[rep]);
        assert!(csv.starts_with(REPORT_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("dev,0.500000,"));
    }

    proptest! {
        #[test]
        fn bleu_is_bounded(h in prop::collection::vec(0u8..4, 0..8), r in prop::collection::vec(0u8..4, 1..8)) {
            for v in bleu(std::slice::from_ref(&h), &[r], 4).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if !h.is_empty() {
                prop_assert_eq!(bleu(std::slice::from_ref(&h), std::slice::from_ref(&h), h.len().min(4)).unwrap(), vec![1.0; h.len().min(4)]);
            }
        }

        #[test]
        fn wer_triangle(a in prop::collection::vec(0u8..3, 0..6), b in prop::collection::vec(0u8..3, 1..6), c in prop::collection::vec(0u8..3, 1..6)) {
            let ac = edit_counts(&a, &c).errors();
            let ab = edit_counts(&a, &b).errors();
            let bc = edit_counts(&b, &c).errors();
            prop_assert!(ac <= ab + bc);
        }
    }
}
