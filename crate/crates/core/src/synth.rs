//! Synthetic signing corpus: a Markov gloss grammar, per-gloss motion
//! templates for the five pose tracks, and a 16x16 single-channel renderer.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentops::{Container, GlossSpan, Record};
use crate::numcore::Tensor;
use crate::posespace::codebook::{Codebook, RESERVED};
use crate::posespace::{PoseTracks, TrackDims, TrackId, NUM_TRACKS};
use crate::rng;

pub const GRID: usize = 16;
pub const BACKGROUND: f64 = 0.1;

const NAMES: [&str; 24] = [
    "ARRIVE", "BOOK", "CAR", "DRINK", "EAT", "FINISH", "GO", "HOUSE", "KNOW", "LIKE", "MOTHER",
    "NAME", "PLAY", "READ", "SCHOOL", "TEACHER", "WANT", "WATER", "WORK", "YESTERDAY", "FRIEND",
    "HELP", "LEARN", "HEAR/LISTEN",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// 80/10/10 by a hash of the utterance index.
    pub fn of(index: usize) -> Self {
        match rng::derive(0, "split", &[index as u64]) % 10 {
            8 => Split::Dev,
            9 => Split::Test,
            _ => Split::Train,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab: usize,
    pub utterances: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub dims: TrackDims,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 12,
            utterances: 200,
            min_len: 2,
            max_len: 5,
            min_frames: 6,
            max_frames: 10,
            dims: TrackDims::DESK,
            noise: 0.02,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Parameter("vocabulary needs at least 2 glosses".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Parameter("bad gloss-length range".into()));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Parameter("bad frames-per-gloss range".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Parameter("noise must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: usize,
    /// Codebook indices.
    pub glosses: Vec<usize>,
    pub spans: Vec<GlossSpan>,
    pub tracks: PoseTracks,
    pub split: Split,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.tracks.frames()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub codebook: Codebook,
    /// Row-stochastic gloss transition matrix, zero diagonal.
    pub grammar: Vec<Vec<f64>>,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }
}

pub fn gloss_names(vocab: usize) -> Vec<String> {
    (0..vocab)
        .map(|k| NAMES.get(k).map_or_else(|| format!("SIGN{k}"), |s| s.to_string()))
        .collect()
}

pub fn gen_grammar(vocab: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "grammar");
    (0..vocab)
        .map(|i| {
            let mut row: Vec<f64> = (0..vocab)
                .map(|j| if i == j { 0.0 } else { 0.05 + r.gen::<f64>().powi(2) })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
            row
        })
        .collect()
}

/// Start/end values and a bend amplitude per dimension, per track.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub start: [Vec<f64>; NUM_TRACKS],
    pub end: [Vec<f64>; NUM_TRACKS],
    pub bend: [Vec<f64>; NUM_TRACKS],
}

impl Template {
    pub fn new(gloss: usize, dims: TrackDims, seed: u64) -> Self {
        let mut r = rng::keyed(seed, "template", &[gloss as u64]);
        let mut draw = |id: TrackId, lo: f64, hi: f64| -> Vec<f64> {
            (0..dims.get(id)).map(|_| r.gen_range(lo..hi)).collect()
        };
        let range = |id: TrackId| if id.is_keypoint() { (0.2, 0.8) } else { (0.05, 0.95) };
        let start = TrackId::ALL.map(|id| {
            let (lo, hi) = range(id);
            draw(id, lo, hi)
        });
        let end = TrackId::ALL.map(|id| {
            let (lo, hi) = range(id);
            draw(id, lo, hi)
        });
        let bend = TrackId::ALL.map(|id| draw(id, -0.2, 0.2));
        Self { start, end, bend }
    }

    /// Pose at `phase` in `[0, 1]` for track `i`.
    pub fn at(&self, track: usize, phase: f64) -> Vec<f64> {
        let (a, b, c) = (&self.start[track], &self.end[track], &self.bend[track]);
        (0..a.len())
            .map(|d| {
                let v = a[d] + (b[d] - a[d]) * phase + c[d] * (std::f64::consts::PI * phase).sin();
                v.clamp(0.0, 1.0)
            })
            .collect()
    }
}

fn phase(k: usize, frames: usize) -> f64 {
    if frames <= 1 {
        0.0
    } else {
        k as f64 / (frames - 1) as f64
    }
}

/// Utterance `i`; depends only on `(cfg, i)`, so growing the count keeps the prefix.
pub fn gen_utterance(cfg: &SynthConfig, grammar: &[Vec<f64>], templates: &[Template], i: usize) -> Result<Utterance> {
    let mut r = rng::keyed(cfg.seed, "utterance", &[i as u64]);
    let len = r.gen_range(cfg.min_len..=cfg.max_len);
    let mut seq = vec![i % cfg.vocab];
    while seq.len() < len {
        let row = &grammar[*seq.last().unwrap()];
        let u: f64 = r.gen();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        seq.push(next);
    }
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("finite noise"));
    let mut rows: [Vec<f64>; NUM_TRACKS] = Default::default();
    let mut spans = Vec::with_capacity(len);
    let mut t = 0;
    for &g in &seq {
        let frames = r.gen_range(cfg.min_frames..=cfg.max_frames);
        spans.push(GlossSpan::new(g + RESERVED, t, t + frames - 1));
        for k in 0..frames {
            for (tr, out) in rows.iter_mut().enumerate() {
                let mut pose = templates[g].at(tr, phase(k, frames));
                if let Some(n) = &noise {
                    for v in pose.iter_mut() {
                        *v = (*v + n.sample(&mut r)).clamp(0.0, 1.0);
                    }
                }
                out.extend(pose);
            }
        }
        t += frames;
    }
    let tracks = PoseTracks::new(std::array::from_fn(|tr| {
        Tensor::new(&[t, cfg.dims.0[tr]], std::mem::take(&mut rows[tr])).expect("track shape")
    }))?;
    Ok(Utterance {
        id: i,
        glosses: seq.iter().map(|g| g + RESERVED).collect(),
        spans,
        tracks,
        split: Split::of(i),
    })
}

pub fn gen_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let codebook = Codebook::new(gloss_names(cfg.vocab))?;
    let grammar = gen_grammar(cfg.vocab, cfg.seed);
    let templates: Vec<Template> = (0..cfg.vocab).map(|g| Template::new(g, cfg.dims, cfg.seed)).collect();
    let utterances = (0..cfg.utterances)
        .map(|i| gen_utterance(cfg, &grammar, &templates, i))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        codebook,
        grammar,
        utterances,
    })
}

/// `T` frames of `H x W x C`, flattened row-major per frame into a `T x HWC` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameGrid {
    pub frames: Tensor,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FrameGrid {
    pub fn new(frames: Tensor, height: usize, width: usize, channels: usize) -> Result<Self> {
        if frames.rank() != 2 || frames.cols() != height * width * channels || frames.rows() == 0 {
            return Err(crate::error::dim_err("frame grid extents"));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("frame values must lie in [0, 1]".into()));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> f64 {
        self.frames.row(t)[y * self.width + x]
    }
}

fn blob_amplitude(id: TrackId) -> f64 {
    match id {
        TrackId::DwPose => 0.5,
        TrackId::MediaPipe => 0.4,
        _ => 0.3,
    }
}

/// Draws one pose frame on a `GRID x GRID` canvas.
pub fn render_frame(pose: &[&[f64]; NUM_TRACKS]) -> Vec<f64> {
    let n = GRID;
    let half = n / 2;
    let mut img = vec![BACKGROUND; n * n];
    let band = |vals: &[f64], slot: usize, slots: usize| -> f64 {
        let (sum, count) = vals
            .iter()
            .enumerate()
            .filter(|(k, _)| k % slots == slot)
            .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            0.4 * sum / count as f64
        }
    };
    let depth = pose[TrackId::PrimeDepth.index()];
    for y in 0..n {
        let v = band(depth, y, n);
        for x in 0..half {
            img[y * n + x] += v;
        }
    }
    let seg = pose[TrackId::Sapiens.index()];
    for s in 0..n {
        let v = band(seg, s, n);
        let x = half + s % half;
        let y0 = (s / half) * half;
        for y in y0..y0 + half {
            img[y * n + x] += v;
        }
    }
    for id in [TrackId::DwPose, TrackId::MediaPipe, TrackId::SmplerX] {
        let amp = blob_amplitude(id);
        for p in pose[id.index()].chunks_exact(2) {
            if p[0] == 0.0 && p[1] == 0.0 {
                continue;
            }
            let (cx, cy) = (p[0] * (n - 1) as f64, p[1] * (n - 1) as f64);
            for y in 0..n {
                for x in 0..n {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    img[y * n + x] += amp * (-0.5 * d2).exp();
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

pub fn render_frames(tracks: &PoseTracks) -> Result<FrameGrid> {
    let t = tracks.frames();
    let mut data = Vec::with_capacity(t * GRID * GRID);
    for f in 0..t {
        let rows: [&[f64]; NUM_TRACKS] = std::array::from_fn(|i| tracks.tracks[i].row(f));
        data.extend(render_frame(&rows));
    }
    FrameGrid::new(Tensor::new(&[t, GRID * GRID], data)?, GRID, GRID, 1)
}

pub const FRAMES_KEY: &str = "frames";

pub fn track_key(i: usize, id: TrackId) -> String {
    format!("{i}/{}", id.name())
}

/// Container records for the corpus: five tracks plus rendered frames per utterance.
pub fn corpus_records(corpus: &Corpus) -> Result<Vec<Record>> {
    let mut out = Vec::with_capacity(corpus.utterances.len() * (NUM_TRACKS + 1));
    for u in &corpus.utterances {
        for id in TrackId::ALL {
            let t = u.tracks.track(id);
            out.push(Record::from_f64(track_key(u.id, id), t.rows(), t.cols(), u.spans.clone(), t.data())?);
        }
        let grid = render_frames(&u.tracks)?;
        out.push(Record::from_f64(
            format!("{}/{FRAMES_KEY}", u.id),
            grid.len(),
            GRID * GRID,
            u.spans.clone(),
            grid.frames.data(),
        )?);
    }
    Ok(out)
}

/// Utterance `i` and its rendered frames as stored in a corpus container.
pub fn load_utterance(c: &Container, i: usize) -> Result<(Utterance, FrameGrid)> {
    let mut tracks = Vec::with_capacity(NUM_TRACKS);
    let mut spans = Vec::new();
    for id in TrackId::ALL {
        let r = c.get(&track_key(i, id))?;
        spans = r.spans.clone();
        tracks.push(Tensor::new(&[r.rows, r.cols], r.to_f64())?);
    }
    let tracks = PoseTracks::new(tracks.try_into().expect("five tracks"))?;
    let fr = c.get(&format!("{i}/{FRAMES_KEY}"))?;
    let grid = FrameGrid::new(Tensor::new(&[fr.rows, fr.cols], fr.to_f64())?, GRID, GRID, 1)?;
    Ok((
        Utterance {
            id: i,
            glosses: spans.iter().map(|s| s.gloss).collect(),
            spans,
            tracks,
            split: Split::of(i),
        },
        grid,
    ))
}

/// Number of utterances stored in a corpus container.
pub fn utterance_count(c: &Container) -> usize {
    c.keys().iter().filter(|k| k.ends_with(&format!("/{FRAMES_KEY}"))).count()
}

pub fn grammar_csv(grammar: &[Vec<f64>]) -> String {
    grammar
        .iter()
        .map(|row| row.iter().map(|v| format!("{v:.17}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, cfg: &SynthConfig) -> Result<()> {
    crate::latentops::container_write(&dir.join("corpus.sxf"), &corpus_records(corpus)?)?;
    corpus.codebook.save(&dir.join("codebook.txt"))?;
    std::fs::write(dir.join("grammar.csv"), grammar_csv(&corpus.grammar))?;
    std::fs::write(dir.join("synth.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            utterances: 30,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = gen_corpus(&small()).unwrap();
        let b = gen_corpus(&small()).unwrap();
        assert_eq!(crate::latentops::container::encode(&corpus_records(&a).unwrap()).unwrap(),
                   crate::latentops::container::encode(&corpus_records(&b).unwrap()).unwrap());
        let big = gen_corpus(&SynthConfig { utterances: 60, ..small() }).unwrap();
        assert_eq!(&big.utterances[..30], &a.utterances[..]);
    }

    #[test]
    fn every_gloss_is_covered() {
        let c = gen_corpus(&SynthConfig::default()).unwrap();
        for g in 0..12 {
            assert!(c.utterances.iter().any(|u| u.glosses.contains(&(g + RESERVED))));
        }
        for u in &c.utterances {
            assert!(u.glosses.windows(2).all(|w| w[0] != w[1]));
            assert_eq!(u.spans.last().unwrap().end + 1, u.frames());
        }
    }

    #[test]
    fn zero_noise_reproduces_templates() {
        let cfg = SynthConfig { noise: 0.0, utterances: 3, ..SynthConfig::default() };
        let c = gen_corpus(&cfg).unwrap();
        let u = &c.utterances[1];
        let tpl = Template::new(u.glosses[0] - RESERVED, cfg.dims, cfg.seed);
        let frames = u.spans[0].end + 1;
        for k in 0..frames {
            assert_eq!(u.tracks.tracks[0].row(k), &tpl.at(0, phase(k, frames))[..]);
        }
    }

    #[test]
    fn grammar_rows_are_stochastic() {
        let g = gen_grammar(6, 1);
        for (i, row) in g.iter().enumerate() {
            assert_eq!(row[i], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tracks_render_background_only() {
        let grid = render_frames(&PoseTracks::zeros(2, TrackDims::DESK)).unwrap();
        assert!(grid.frames.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn distinct_templates_render_distinctly() {
        let cfg = SynthConfig::default();
        let renders: Vec<Vec<f64>> = (0..cfg.vocab)
            .map(|g| {
                let tpl = Template::new(g, cfg.dims, cfg.seed);
                (0..8)
                    .flat_map(|k| {
                        let poses: Vec<Vec<f64>> = (0..NUM_TRACKS).map(|tr| tpl.at(tr, phase(k, 8))).collect();
                        let refs: [&[f64]; NUM_TRACKS] = std::array::from_fn(|i| poses[i].as_slice());
                        render_frame(&refs)
                    })
                    .collect()
            })
            .collect();
        for a in 0..cfg.vocab {
            for b in a + 1..cfg.vocab {
                let mad: f64 = renders[a].iter().zip(&renders[b]).map(|(x, y)| (x - y).abs()).sum::<f64>()
                    / renders[a].len() as f64;
                assert!(mad > 0.05, "templates {a} and {b}: {mad}");
            }
        }
    }

    #[test]
    fn splits_cover_all_three() {
        let counts = (0..200).fold([0; 3], |mut c, i| {
            c[Split::of(i) as usize] += 1;
            c
        });
        assert!(counts.iter().all(|&c| c > 5), "{counts:?}");
    }
}
