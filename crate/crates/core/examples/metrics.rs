//! Word error rate with its edit breakdown, corpus BLEU and the CSV report.

use signx::evalkit::{bleu, evaluate, report_csv, tokens, wer};

fn main() -> signx::error::Result<()> {
    let reference = tokens("IX-1 TOMORROW RAIN NORTH");
    let hyp = tokens("IX-1 RAIN NORTH SOUTH");
    let (w, counts) = wer(&hyp, &reference)?;
    println!(
        "WER {w:.3}: {} substitutions, {} deletions, {} insertions over {} reference words",
        counts.s, counts.d, counts.i, counts.n
    );
    let b = bleu(std::slice::from_ref(&hyp), std::slice::from_ref(&reference), 4)?;
    println!("BLEU-1..4 {:?}", b.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>());

    let hyps = vec![hyp.clone(), tokens("WEATHER GOOD")];
    let refs = vec![reference, tokens("WEATHER GOOD")];
    let report = evaluate("dev", &hyps, &refs)?;
    print!("{}", report_csv(&[report]));
    Ok(())
}
