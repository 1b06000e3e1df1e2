//! Drives every stage through the library API on a reduced configuration,
//! then reruns with resume to show that up-to-date stages are skipped.
//! Pass an output directory as the first argument to keep the artifacts.

use signx::config::RunConfig;
use signx::pipeline::{Pipeline, REPORT};

const SMALL: &str = "
[synth]
utterances = 60

[stage1]
epochs = 6

[stage2]
epochs = 4

[augment]
folds = 3

[cslr]
epochs = 8
warmup = 200
";

fn main() -> signx::error::Result<()> {
    let keep = std::env::args().nth(1);
    let tmp = tempfile::tempdir()?;
    let out = keep.as_deref().map(std::path::Path::new).unwrap_or(tmp.path());

    let cfg = RunConfig::parse(SMALL)?;
    let mut p = Pipeline::new(cfg, out)?;
    p.verbose = true;
    for o in p.run_all()? {
        println!("{:<12} {:<14} {}", o.summary.stage, o.summary.artifact, o.summary.metrics);
    }
    print!("{}", std::fs::read_to_string(p.path(REPORT))?);

    p.resume = true;
    let skipped = p.run_all()?.iter().filter(|o| o.skipped).count();
    println!("resume: {skipped} of 8 stages up to date");
    Ok(())
}
