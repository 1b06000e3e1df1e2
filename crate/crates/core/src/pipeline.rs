//! Stage orchestration over one artifact directory.
//!
//! Every stage reads fixed-name inputs from the directory, writes its
//! artifact plus `<stage>.summary.json`, and fails with a dependency error
//! naming the first missing input. Stage outputs depend only on the
//! configuration and the input files, so re-running a stage reproduces its
//! artifacts byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::decoder::{ctc_greedy_decode, decode_sequence, DecodeRecord};
use crate::error::{dim_err, Error, Result};
use crate::evalkit::{edit_counts, evaluate, report_csv, EvalReport};
use crate::latentops::container::sort_fold_keys;
use crate::latentops::{augment, build_prune_mask, compile, Container, LatentSequence, Record};
use crate::latentops::container_write;
use crate::nn::Session;
use crate::numcore::checkpoint::{load_into, write_checkpoint};
use crate::numcore::{ParamStore, Tensor};
use crate::posespace::{train_stage1, Codebook, PoseTracks, Stage1Arch, Stage1Model, TrackDims, NUM_TRACKS};
use crate::recognizer::{pooled_len, train_cslr, Recognizer, RecognizerArch};
use crate::rng;
use crate::synth::{gen_corpus, load_utterance, render_frames, utterance_count, write_corpus, Split, Utterance};
use crate::synth::FrameGrid;
use crate::vid2pose::{per_dim_mse, train_stage2, Vid2Pose, Vid2PoseArch};

pub const CORPUS: &str = "corpus.sxf";
pub const CODEBOOK: &str = "codebook.txt";
pub const STAGE1: &str = "stage1.sxck";
pub const STAGE2: &str = "stage2.sxck";
pub const FEATURES: &str = "features.sxf";
pub const AUGMENTED: &str = "augmented.sxf";
pub const CSLR: &str = "cslr.sxck";
pub const DECODE: &str = "decode.jsonl";
pub const REPORT: &str = "report.csv";
pub const PRUNE_REPORT: &str = "prune_report.json";
pub const SHAPES: &str = "shapes.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Synth,
    Stage1,
    Stage2,
    Compile,
    Augment,
    Cslr,
    Decode,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Stage1,
        Stage::Stage2,
        Stage::Compile,
        Stage::Augment,
        Stage::Cslr,
        Stage::Decode,
        Stage::Eval,
    ];

    /// Subcommand name.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Stage1 => "train-stage1",
            Stage::Stage2 => "train-stage2",
            Stage::Compile => "compile",
            Stage::Augment => "augment",
            Stage::Cslr => "train-cslr",
            Stage::Decode => "decode",
            Stage::Eval => "eval",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn artifact(self) -> &'static str {
        match self {
            Stage::Synth => CORPUS,
            Stage::Stage1 => STAGE1,
            Stage::Stage2 => STAGE2,
            Stage::Compile => FEATURES,
            Stage::Augment => AUGMENTED,
            Stage::Cslr => CSLR,
            Stage::Decode => DECODE,
            Stage::Eval => REPORT,
        }
    }

    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[],
            Stage::Stage1 => &[CORPUS, CODEBOOK],
            Stage::Stage2 => &[CORPUS, CODEBOOK, STAGE1],
            Stage::Compile => &[CORPUS, CODEBOOK, STAGE1, STAGE2],
            Stage::Augment => &[FEATURES],
            Stage::Cslr => &[CODEBOOK, FEATURES, AUGMENTED],
            Stage::Decode => &[CODEBOOK, FEATURES, CSLR],
            Stage::Eval => &[CODEBOOK, FEATURES, DECODE],
        }
    }

    /// Configuration sections the stage reads.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["run", "synth"],
            Stage::Stage1 => &["run", "stage1"],
            Stage::Stage2 => &["run", "stage1", "stage2"],
            Stage::Compile => &["run", "stage1", "stage2", "compile"],
            Stage::Augment => &["run", "augment"],
            Stage::Cslr => &["run", "cslr"],
            Stage::Decode => &["cslr", "decode"],
            Stage::Eval => &["run"],
        }
    }

    fn summary_name(self) -> String {
        format!("{}.summary.json", self.name())
    }
}

/// Contents of `<stage>.summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct StageSummary {
    pub stage: String,
    /// Hash of the stage's configuration sections and input files.
    pub fingerprint: String,
    pub artifact: String,
    pub artifact_sha256: String,
    pub metrics: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub summary: StageSummary,
    /// Set when `resume` found an up-to-date artifact and the stage did not run.
    pub skipped: bool,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Worker count from `SIGNX_THREADS`, falling back to the available cores.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("SIGNX_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Parameter(format!("SIGNX_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Order-preserving parallel map over contiguous chunks. Returns the first
/// error in item order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub resume: bool,
    pub threads: usize,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        Ok(Self {
            cfg,
            out,
            resume: false,
            threads: 1,
            verbose: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::Dependency(p))
        }
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(self.cfg.sections_text(stage.sections()).as_bytes());
        for name in stage.inputs() {
            let p = self.require(name)?;
            h.update(name.as_bytes());
            h.update(sha256_file(&p)?.as_bytes());
        }
        Ok(hex(&h.finalize()))
    }

    fn up_to_date(&self, stage: Stage, fingerprint: &str) -> Option<StageSummary> {
        let text = std::fs::read_to_string(self.path(&stage.summary_name())).ok()?;
        let summary: StageSummary = serde_json::from_str(&text).ok()?;
        let current = sha256_file(&self.path(stage.artifact())).ok()?;
        (summary.fingerprint == fingerprint && summary.artifact_sha256 == current).then_some(summary)
    }

    /// Runs one stage. With `resume`, a stage whose summary matches the
    /// current fingerprint and artifact is skipped.
    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        let fingerprint = self.fingerprint(stage)?;
        if self.resume {
            if let Some(summary) = self.up_to_date(stage, &fingerprint) {
                self.note(format!("[{}] up to date, skipped", stage.name()));
                return Ok(StageOutcome { summary, skipped: true });
            }
        }
        let started = Instant::now();
        self.note(format!("[{}] start", stage.name()));
        let metrics = match stage {
            Stage::Synth => self.synth()?,
            Stage::Stage1 => self.stage1()?,
            Stage::Stage2 => self.stage2()?,
            Stage::Compile => self.compile()?,
            Stage::Augment => self.augment()?,
            Stage::Cslr => self.cslr()?,
            Stage::Decode => self.decode()?,
            Stage::Eval => self.eval()?,
        };
        let summary = StageSummary {
            stage: stage.name().to_string(),
            fingerprint,
            artifact: stage.artifact().to_string(),
            artifact_sha256: sha256_file(&self.path(stage.artifact()))?,
            metrics,
        };
        std::fs::write(
            self.path(&stage.summary_name()),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
        self.note(format!("[{}] done in {:.1}s", stage.name(), started.elapsed().as_secs_f64()));
        Ok(StageOutcome { summary, skipped: false })
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    fn codebook(&self) -> Result<Codebook> {
        Codebook::load(&self.require(CODEBOOK)?)
    }

    fn corpus(&self) -> Result<Vec<(Utterance, FrameGrid)>> {
        let c = Container::open(&self.require(CORPUS)?)?;
        (0..utterance_count(&c)).map(|i| load_utterance(&c, i)).collect()
    }

    fn stage1_model(&self, vocab: usize) -> Result<(Stage1Model, ParamStore)> {
        Stage1Model::new(self.cfg.stage1_arch(vocab), self.cfg.seed)
    }

    fn load_stage1(&self, vocab: usize) -> Result<(Stage1Model, ParamStore)> {
        let (m, mut s) = self.stage1_model(vocab)?;
        load_into(&self.require(STAGE1)?, &mut s)?;
        Ok((m, s))
    }

    fn load_stage2(&self) -> Result<(Vid2Pose, ParamStore)> {
        let (v, mut s) = Vid2Pose::new(self.cfg.stage2_arch(), self.cfg.seed)?;
        load_into(&self.require(STAGE2)?, &mut s)?;
        Ok((v, s))
    }

    fn recognizer(&self, vocab: usize) -> Result<(Recognizer, ParamStore)> {
        Recognizer::new(self.cfg.cslr_arch(vocab), self.cfg.seed)
    }

    /// Compiled per-utterance features keyed by utterance id.
    pub fn features(&self) -> Result<Vec<(usize, LatentSequence)>> {
        let c = Container::open(&self.require(FEATURES)?)?;
        let mut out = Vec::with_capacity(c.len());
        for key in c.keys() {
            let id: usize = key
                .parse()
                .map_err(|_| Error::Format(format!("feature key {key:?} is not an utterance id")))?;
            out.push((id, LatentSequence::from_record(&c.get(key)?)?));
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn split_features(&self, split: Split) -> Result<Vec<(usize, LatentSequence)>> {
        Ok(self.features()?.into_iter().filter(|(id, _)| Split::of(*id) == split).collect())
    }

    fn write_logs<T: Serialize>(&self, name: &str, logs: &[T], total: impl Fn(&T) -> f64) -> Result<()> {
        let mut jsonl = String::new();
        let mut csv = String::from("step,value\n");
        for (i, l) in logs.iter().enumerate() {
            jsonl.push_str(&serde_json::to_string(l)?);
            jsonl.push('\n');
            csv.push_str(&format!("{i},{}\n", total(l)));
        }
        std::fs::write(self.path(&format!("{name}_log.jsonl")), jsonl)?;
        std::fs::write(self.path(&format!("{name}_loss.csv")), csv)?;
        Ok(())
    }

    fn synth(&self) -> Result<Value> {
        let corpus = gen_corpus(&self.cfg.synth)?;
        write_corpus(&self.out, &corpus, &self.cfg.synth)?;
        let count = |s| corpus.split(s).count();
        Ok(json!({
            "utterances": corpus.utterances.len(),
            "train": count(Split::Train),
            "dev": count(Split::Dev),
            "test": count(Split::Test),
            "codebook": corpus.codebook.len(),
            "frames": corpus.utterances.iter().map(|u| u.frames()).sum::<usize>(),
        }))
    }

    fn stage1(&self) -> Result<Value> {
        let book = self.codebook()?;
        let corpus = self.corpus()?;
        let train: Vec<&Utterance> = corpus.iter().map(|(u, _)| u).filter(|u| u.split == Split::Train).collect();
        let (m, mut store) = self.stage1_model(book.len())?;
        let logs = train_stage1(&m, &mut store, &train, &self.cfg.stage1, |l| {
            self.note(format!("[train-stage1] epoch {} total {:.4}", l.epoch, l.total));
        })?;
        write_checkpoint(&self.path(STAGE1), &store)?;
        self.write_logs("stage1", &logs, |l| l.total)?;
        let last = logs.last().ok_or_else(|| Error::EmptyInput("no Stage-1 epochs".into()))?;
        Ok(json!({
            "epochs": logs.len(),
            "final": last,
            "content_hash": store.content_hash(),
        }))
    }

    fn stage2(&self) -> Result<Value> {
        let book = self.codebook()?;
        let corpus = self.corpus()?;
        let (_, mut s1) = self.load_stage1(book.len())?;
        let before = s1.content_hash();
        let (v, mut store) = Vid2Pose::new(self.cfg.stage2_arch(), self.cfg.seed)?;
        let train: Vec<(&Utterance, &FrameGrid)> =
            corpus.iter().filter(|(u, _)| u.split == Split::Train).map(|(u, f)| (u, f)).collect();
        let logs = train_stage2(&v, &mut store, &mut s1, &train, &self.cfg.stage2, |l| {
            self.note(format!("[train-stage2] epoch {} loss {:.5}", l.epoch, l.loss));
        })?;
        write_checkpoint(&self.path(STAGE2), &store)?;
        self.write_logs("stage2", &logs, |l| l.loss)?;
        let held_out: Vec<&(Utterance, FrameGrid)> = corpus.iter().filter(|(u, _)| u.split != Split::Train).collect();
        let mses = par_map(&held_out, self.threads, |(u, f)| per_dim_mse(&v.predict(&store, f)?, &u.tracks))?;
        let mse = mses.iter().sum::<f64>() / mses.len().max(1) as f64;
        Ok(json!({
            "epochs": logs.len(),
            "final_loss": logs.last().map(|l| l.loss),
            "held_out_mse": mse,
            "stage1_hash_before": before,
            "stage1_hash_after": s1.content_hash(),
        }))
    }

    fn compile(&self) -> Result<Value> {
        let book = self.codebook()?;
        let corpus = self.corpus()?;
        let (m, s1) = self.load_stage1(book.len())?;
        let (v, s2) = self.load_stage2()?;
        let cc = self.cfg.compile;
        let records = par_map(&corpus, self.threads, |(u, f)| {
            let tracks = v.predict(&s2, f)?;
            let z = m.latents(&s1, &tracks)?;
            let seq = compile(&LatentSequence::new(z, u.spans.clone())?, &cc)?;
            seq.to_record(u.id.to_string())
        })?;
        container_write(&self.path(FEATURES), &records)?;
        Ok(json!({
            "sequences": records.len(),
            "width": records.first().map(|r| r.cols),
            "frames": records.iter().map(|r| r.rows).sum::<usize>(),
        }))
    }

    fn augment(&self) -> Result<Value> {
        let train = self.split_features(Split::Train)?;
        let cfg = self.cfg.augment;
        let seed = self.cfg.seed;
        let folds = par_map(&train, self.threads, |(id, seq)| {
            augment(*id, seq, &cfg, seed)?
                .into_iter()
                .map(|(key, s)| s.to_record(key))
                .collect::<Result<Vec<Record>>>()
        })?;
        let mut records: Vec<Record> = folds.into_iter().flatten().collect();
        sort_fold_keys(&mut records);
        container_write(&self.path(AUGMENTED), &records)?;
        Ok(json!({
            "sources": train.len(),
            "folds": cfg.folds,
            "records": records.len(),
        }))
    }

    fn training_sets(&self) -> Result<(Vec<LatentSequence>, Vec<LatentSequence>)> {
        let aug = Container::open(&self.require(AUGMENTED)?)?;
        let mut records = aug.records()?;
        sort_fold_keys(&mut records);
        let train = records.iter().map(LatentSequence::from_record).collect::<Result<Vec<_>>>()?;
        let dev = self.split_features(Split::Dev)?.into_iter().map(|(_, s)| s).collect();
        Ok((train, dev))
    }

    fn cslr(&self) -> Result<Value> {
        let book = self.codebook()?;
        let (train, dev) = self.training_sets()?;
        let (model, mut store) = self.recognizer(book.len())?;
        if let Some(q) = train.iter().chain(&dev).find(|q| q.width() != model.arch.d_in) {
            return Err(dim_err(format!(
                "features are {} wide but the recognizer expects {}",
                q.width(),
                model.arch.d_in
            )));
        }
        let outcome = train_cslr(&model, &mut store, &train, &dev, &self.cfg.cslr, |l| {
            self.note(format!(
                "[train-cslr] epoch {} total {:.4} ctc {:.4} xent {:.4} dev greedy WER {:.4}",
                l.epoch, l.total, l.ctc, l.xent, l.dev_wer
            ));
        })?;
        write_checkpoint(&self.path(CSLR), &store)?;
        self.write_logs("cslr", &outcome.logs, |l| l.total)?;
        let dev_wer = crate::recognizer::greedy_wer(&model, &store, &dev)?;
        Ok(json!({
            "epochs": outcome.logs.len(),
            "train_sequences": train.len(),
            "averaged_epochs": outcome.averaged,
            "effective_width": outcome.mask.effective_width,
            "d_in": model.arch.d_in,
            "dev_greedy_wer": dev_wer,
        }))
    }

    fn decode(&self) -> Result<Value> {
        let book = self.codebook()?;
        let (model, mut store) = self.recognizer(book.len())?;
        load_into(&self.require(CSLR)?, &mut store)?;
        let items: Vec<(usize, LatentSequence)> =
            self.features()?.into_iter().filter(|(id, _)| Split::of(*id) != Split::Train).collect();
        let cfg = &self.cfg.decode;
        let results = par_map(&items, self.threads, |(id, q)| {
            let r = decode_sequence(&model, &store, &q.z, cfg)?;
            let ctc = ctc_greedy_decode(&model.ctc_log_probs(&store, &q.z)?);
            let rec = DecodeRecord {
                id: id.to_string(),
                glosses: book.decode(&r.tokens)?,
                score: r.score,
                per_step_entropy: r.per_step_entropy,
            };
            Ok((rec, r.truncated, edit_counts(&ctc, &q.glosses())))
        })?;
        let mut text = String::new();
        let mut ctc_errors = 0;
        let mut ctc_n = 0;
        for (rec, _, c) in &results {
            text.push_str(&serde_json::to_string(rec)?);
            text.push('\n');
            ctc_errors += c.errors();
            ctc_n += c.n;
        }
        std::fs::write(self.path(DECODE), text)?;
        Ok(json!({
            "sequences": results.len(),
            "truncated": results.iter().filter(|r| r.1).count(),
            "ctc_greedy_wer": ctc_errors as f64 / ctc_n.max(1) as f64,
        }))
    }

    fn eval(&self) -> Result<Value> {
        let book = self.codebook()?;
        let text = std::fs::read_to_string(self.require(DECODE)?)?;
        let mut hyps: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: DecodeRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{DECODE} line {}: {e}", n + 1)))?;
            let id = rec
                .id
                .parse()
                .map_err(|_| Error::Format(format!("{DECODE} line {}: bad id {:?}", n + 1, rec.id)))?;
            hyps.insert(id, rec.glosses);
        }
        let features = self.features()?;
        let mut reports: Vec<EvalReport> = Vec::new();
        for split in [Split::Dev, Split::Test] {
            let mut h = Vec::new();
            let mut r = Vec::new();
            for (id, q) in features.iter().filter(|(id, _)| Split::of(*id) == split) {
                let hyp = hyps
                    .get(id)
                    .ok_or_else(|| Error::NotFound(format!("utterance {id} has no decode record")))?;
                h.push(hyp.clone());
                r.push(book.decode(&q.glosses())?);
            }
            reports.push(evaluate(split.name(), &h, &r)?);
        }
        std::fs::write(self.path(REPORT), report_csv(&reports))?;
        Ok(json!({ "reports": reports }))
    }

    /// Stored recognizer mask against a mask rebuilt from the augmented
    /// training features; written to `prune_report.json`.
    pub fn prune_report(&self) -> Result<Value> {
        let book = self.codebook()?;
        let (model, mut store) = self.recognizer(book.len())?;
        load_into(&self.require(CSLR)?, &mut store)?;
        let (train, _) = self.training_sets()?;
        let rebuilt = build_prune_mask(&train, self.cfg.cslr.prune_tau)?;
        let stored = model.mask(&store);
        let report = json!({
            "d_in": model.arch.d_in,
            "tau": self.cfg.cslr.prune_tau,
            "stored_effective_width": stored.iter().filter(|&&k| k).count(),
            "rebuilt_effective_width": rebuilt.effective_width,
            "pruned_dims": stored.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect::<Vec<_>>(),
            "variance": rebuilt.variance,
        });
        std::fs::write(self.path(PRUNE_REPORT), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(report)
    }
}

/// Output widths observed when the full-width models run once on random data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeReport {
    pub track_dims: [usize; NUM_TRACKS],
    pub track_concat: usize,
    pub vid2pose_widths: Vec<usize>,
    pub unified_width: usize,
    pub frames_in: usize,
    pub frames_out: usize,
    pub conv_width: usize,
    pub recurrent_width: usize,
    pub refine_layers: usize,
    pub refine_width: usize,
    pub ctc_classes: usize,
    pub decoder_classes: usize,
}

pub fn full_stage1_arch(vocab: usize) -> Stage1Arch {
    Stage1Arch {
        dims: TrackDims::FULL,
        d_h: 256,
        d_u: 2048,
        fusion_heads: 8,
        latent_heads: 8,
        blocks: 1,
        ffn: 2048,
        vocab,
    }
}

pub fn full_vid2pose_arch() -> Vid2PoseArch {
    Vid2PoseArch {
        dims: TrackDims::FULL,
        ..Vid2PoseArch::desk(TrackDims::FULL)
    }
}

fn random_tensor(rows: usize, cols: usize, r: &mut rng::Rng) -> Result<Tensor> {
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

/// Builds the full-width Stage-1, Stage-2 and recognizer and runs each
/// forward once on random inputs of `frames` frames.
pub fn full_scale_shapes(frames: usize, vocab: usize, seed: u64) -> Result<ShapeReport> {
    let mut r = rng::stream(seed, "shape-probe");
    let dims = TrackDims::FULL;

    let grid = render_frames(&PoseTracks::zeros(frames, dims))?;
    let (v, s2) = Vid2Pose::new(full_vid2pose_arch(), seed)?;
    let predicted = v.predict(&s2, &grid)?;
    let vid2pose_widths = (0..NUM_TRACKS).map(|i| predicted.tracks[i].cols()).collect();

    let tracks: Vec<Tensor> = (0..NUM_TRACKS).map(|i| random_tensor(frames, dims.0[i], &mut r)).collect::<Result<_>>()?;
    let tracks = PoseTracks::new(tracks.try_into().expect("five tracks"))?;
    let (m, s1) = Stage1Model::new(full_stage1_arch(vocab), seed)?;
    let z = m.latents(&s1, &tracks)?;

    let (rec, store) = Recognizer::new(RecognizerArch::full(vocab), seed)?;
    let mut s = Session::eval(&store);
    let x = rec.input(&mut s, &z)?;
    let (hs, _) = rec.conv_stack(&mut s, &[x])?;
    let (frames_out, conv_width) = s.g.shape(hs[0]);
    let u = rec.birnn(&mut s, hs[0])?;
    let recurrent_width = s.g.shape(u).1;
    let out = rec.refine_forward(&mut s, u, &[crate::posespace::codebook::BOS])?;
    if pooled_len(frames) != frames_out {
        return Err(dim_err("pooled length disagrees with the conv stack"));
    }
    Ok(ShapeReport {
        track_dims: dims.0,
        track_concat: tracks.frame(0).concat().len(),
        vid2pose_widths,
        unified_width: z.cols(),
        frames_in: z.rows(),
        frames_out,
        conv_width,
        recurrent_width,
        refine_layers: rec.enc_blocks.len().min(rec.dec_blocks.len()),
        refine_width: s.g.shape(out.enc).1,
        ctc_classes: s.g.shape(out.ctc_logits).1,
        decoder_classes: s.g.shape(out.dec_logits).1,
    })
}
