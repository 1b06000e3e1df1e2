//! Generates the synthetic corpus and prints split sizes, a few sample
//! utterances and the gloss-transition grammar.

use signx::synth::{gen_corpus, render_frames, Split, SynthConfig};

fn main() -> signx::error::Result<()> {
    let cfg = SynthConfig { utterances: 40, ..SynthConfig::default() };
    let corpus = gen_corpus(&cfg)?;
    for split in [Split::Train, Split::Dev, Split::Test] {
        println!("{:>5}: {} utterances", split.name(), corpus.split(split).count());
    }
    for u in corpus.utterances.iter().take(4) {
        let names = corpus.codebook.decode(&u.glosses)?;
        let spans: Vec<String> = u.spans.iter().map(|s| format!("{}..={}", s.start, s.end)).collect();
        println!("#{} {:<5} {:>3} frames  {}  [{}]", u.id, u.split.name(), u.frames(), names.join(" "), spans.join(", "));
    }
    let grid = render_frames(&corpus.utterances[0].tracks)?;
    println!("rendered {} frames of {}x{}x{}", grid.len(), grid.height, grid.width, grid.channels);
    println!("transition matrix (row = previous gloss):");
    for row in &corpus.grammar {
        println!("  {}", row.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>().join(" "));
    }
    Ok(())
}
