use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use signx::config::RunConfig;
use signx::error::Result;
use signx::pipeline::{full_scale_shapes, threads_from_env, Pipeline, Stage, StageOutcome, REPORT, SHAPES};
use signx::posespace::codebook::RESERVED;

#[derive(Parser)]
#[command(name = "signx", version, about = "Synthetic sign-language recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration file (`[section]` / `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "signx-out")]
    out: PathBuf,
    /// Skip stages whose artifacts are already up to date.
    #[arg(long, global = true)]
    resume: bool,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    stage_scale: Scale,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    PaperShapes,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Train the pose-fusion latent encoder.
    TrainStage1,
    /// Train the frame-to-pose estimator against frozen Stage-1 weights.
    TrainStage2,
    /// Extract and compile latent features for every utterance.
    Compile,
    /// Write augmented folds of the training features.
    Augment,
    /// Train the latent-space recognizer.
    TrainCslr,
    /// Beam-decode the dev and test features.
    Decode,
    /// Score decodes and write the report.
    Eval,
    /// Run every stage in order.
    Pipeline,
    /// Compare the stored pruning mask with one rebuilt from training features.
    PruneReport,
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        Some(match self {
            Command::Synth => Stage::Synth,
            Command::TrainStage1 => Stage::Stage1,
            Command::TrainStage2 => Stage::Stage2,
            Command::Compile => Stage::Compile,
            Command::Augment => Stage::Augment,
            Command::TrainCslr => Stage::Cslr,
            Command::Decode => Stage::Decode,
            Command::Eval => Stage::Eval,
            Command::Pipeline | Command::PruneReport => return None,
        })
    }
}

fn print_outcome(o: &StageOutcome) {
    let status = if o.skipped { "up-to-date" } else { "ok" };
    println!("{} {status} {} {}", o.summary.stage, o.summary.artifact, o.summary.metrics);
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let mut p = Pipeline::new(cfg, &cli.out)?;
    p.resume = cli.resume;
    p.threads = threads_from_env()?;
    p.verbose = !cli.quiet;

    if cli.stage_scale == Scale::PaperShapes {
        let vocab = p.cfg.synth.vocab + RESERVED;
        let report = full_scale_shapes(16, vocab, p.cfg.seed)?;
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(p.path(SHAPES), text.clone() + "\n")?;
        println!("{text}");
        return Ok(());
    }

    match cli.command.stage() {
        Some(stage) => print_outcome(&p.run(stage)?),
        None if matches!(cli.command, Command::Pipeline) => {
            for o in p.run_all()? {
                print_outcome(&o);
            }
            print!("{}", std::fs::read_to_string(p.path(REPORT))?);
        }
        None => println!("{}", serde_json::to_string_pretty(&p.prune_report()?)?),
    }
    Ok(())
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
