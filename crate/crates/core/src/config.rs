//! Run configuration: `key = value` lines grouped under `[section]` headers.
//! `#` and `;` start comments. Unknown sections or keys are rejected with
//! the offending line number, and every value is range-checked as it is read.

use std::collections::HashMap;
use std::path::Path;

use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::latentops::{AugmentConfig, CompileConfig};
use crate::posespace::{Stage1Arch, Stage1TrainConfig, TrackDims};
use crate::recognizer::{RecognizerArch, TrainSchedule};
use crate::synth::{SynthConfig, GRID};
use crate::vid2pose::{Stage2TrainConfig, Vid2PoseArch};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub stage1: Stage1TrainConfig,
    /// `vocab` is filled from the codebook at use.
    pub stage1_arch: Stage1Arch,
    pub stage2: Stage2TrainConfig,
    pub stage2_arch: Vid2PoseArch,
    pub compile: CompileConfig,
    pub augment: AugmentConfig,
    pub cslr: TrainSchedule,
    /// `d_in` and `vocab` are filled from Stage 1 and the codebook at use.
    pub cslr_arch: RecognizerArch,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let mut c = Self {
            seed: synth.seed,
            stage1_arch: Stage1Arch::desk(0),
            stage2_arch: Vid2PoseArch::desk(synth.dims),
            synth,
            stage1: Stage1TrainConfig::default(),
            stage2: Stage2TrainConfig::default(),
            compile: CompileConfig {
                rho: 0.0,
                ..CompileConfig::default()
            },
            augment: AugmentConfig::default(),
            cslr: TrainSchedule::default(),
            cslr_arch: RecognizerArch::desk(64, 0),
            decode: DecodeConfig::default(),
        };
        c.set_seed(c.seed);
        c
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;
type Getter = fn(&RunConfig) -> String;

struct Field {
    section: &'static str,
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn uint(min: usize) -> impl Fn(&str) -> std::result::Result<usize, String> {
    move |v| {
        let n: usize = v.parse().map_err(|_| format!("expected an integer, got {v:?}"))?;
        if n < min {
            return Err(format!("{n} is below the minimum {min}"));
        }
        Ok(n)
    }
}

fn u64v(v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("expected an unsigned integer, got {v:?}"))
}

/// Float in `[lo, hi]`, or `[lo, hi)` when `open_hi`.
fn float(lo: f64, hi: f64, open_hi: bool) -> impl Fn(&str) -> std::result::Result<f64, String> {
    move |v| {
        let x: f64 = v.parse().map_err(|_| format!("expected a number, got {v:?}"))?;
        let ok = x >= lo && if open_hi { x < hi } else { x <= hi };
        if !ok || x.is_nan() {
            let close = if open_hi { ')' } else { ']' };
            return Err(format!("{x} outside [{lo}, {hi}{close}"));
        }
        Ok(x)
    }
}

fn positive(v: &str) -> std::result::Result<f64, String> {
    let x = float(0.0, f64::INFINITY, true)(v)?;
    if x == 0.0 {
        return Err("must be positive".into());
    }
    Ok(x)
}

fn nonneg(v: &str) -> std::result::Result<f64, String> {
    float(0.0, f64::INFINITY, true)(v)
}

fn rate(v: &str) -> std::result::Result<f64, String> {
    float(0.0, 1.0, true)(v)
}

fn unit(v: &str) -> std::result::Result<f64, String> {
    float(0.0, 1.0, false)(v)
}

fn optional(
    parse: impl Fn(&str) -> std::result::Result<f64, String>,
) -> impl Fn(&str) -> std::result::Result<Option<f64>, String> {
    move |v| if v == "none" { Ok(None) } else { parse(v).map(Some) }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |x| x.to_string())
}

fn dims(v: &str) -> std::result::Result<TrackDims, String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(format!("expected 5 comma-separated widths, got {}", parts.len()));
    }
    let mut out = [0; 5];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = uint(1)(p)?;
    }
    Ok(TrackDims(out))
}

macro_rules! field {
    ($sec:literal, $key:literal, $($path:ident).+, $parse:expr) => {
        Field {
            section: $sec,
            key: $key,
            get: |c| c.$($path).+.to_string(),
            set: |c, v| {
                c.$($path).+ = ($parse)(v)?;
                Ok(())
            },
        }
    };
    ($sec:literal, $key:literal, $($path:ident).+, $parse:expr, opt) => {
        Field {
            section: $sec,
            key: $key,
            get: |c| show_opt(c.$($path).+),
            set: |c, v| {
                c.$($path).+ = optional($parse)(v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        Field {
            section: "run",
            key: "seed",
            get: |c| c.seed.to_string(),
            set: |c, v| {
                c.set_seed(u64v(v)?);
                Ok(())
            },
        },
        field!("synth", "vocab", synth.vocab, uint(2)),
        field!("synth", "utterances", synth.utterances, uint(1)),
        field!("synth", "min_len", synth.min_len, uint(1)),
        field!("synth", "max_len", synth.max_len, uint(1)),
        field!("synth", "min_frames", synth.min_frames, uint(1)),
        field!("synth", "max_frames", synth.max_frames, uint(1)),
        Field {
            section: "synth",
            key: "dims",
            get: |c| c.synth.dims.0.map(|d| d.to_string()).join(","),
            set: |c, v| {
                c.synth.dims = dims(v)?;
                c.stage1_arch.dims = c.synth.dims;
                c.stage2_arch.dims = c.synth.dims;
                Ok(())
            },
        },
        field!("synth", "noise", synth.noise, nonneg),
        field!("stage1", "epochs", stage1.epochs, uint(1)),
        field!("stage1", "micro_batch", stage1.micro_batch, uint(1)),
        field!("stage1", "accumulate", stage1.accumulate, uint(1)),
        field!("stage1", "lr", stage1.lr, positive),
        field!("stage1", "min_lr_frac", stage1.min_lr_frac, unit),
        field!("stage1", "warmup_frac", stage1.warmup_frac, rate),
        field!("stage1", "label_smoothing", stage1.label_smoothing, rate),
        field!("stage1", "tau_c", stage1.tau_c, positive),
        field!("stage1", "tf_start", stage1.tf_start, unit),
        field!("stage1", "tf_end", stage1.tf_end, unit),
        field!("stage1", "weight_text", stage1.weights.text, nonneg),
        field!("stage1", "weight_word", stage1.weights.word, nonneg),
        field!("stage1", "weight_contrast", stage1.weights.contrast, nonneg),
        field!("stage1", "clip", stage1.adam.clip_norm, nonneg),
        field!("stage1", "weight_decay", stage1.adam.weight_decay, nonneg),
        field!("stage1", "d_h", stage1_arch.d_h, uint(1)),
        field!("stage1", "d_u", stage1_arch.d_u, uint(1)),
        field!("stage1", "fusion_heads", stage1_arch.fusion_heads, uint(1)),
        field!("stage1", "latent_heads", stage1_arch.latent_heads, uint(1)),
        field!("stage1", "blocks", stage1_arch.blocks, uint(1)),
        field!("stage1", "ffn", stage1_arch.ffn, uint(1)),
        field!("stage2", "epochs", stage2.epochs, uint(1)),
        field!("stage2", "batch", stage2.batch, uint(1)),
        field!("stage2", "lr", stage2.lr, positive),
        field!("stage2", "min_lr_frac", stage2.min_lr_frac, unit),
        field!("stage2", "warmup_frac", stage2.warmup_frac, rate),
        field!("stage2", "clip", stage2.adam.clip_norm, nonneg),
        field!("stage2", "weight_decay", stage2.adam.weight_decay, nonneg),
        field!("stage2", "patch", stage2_arch.patch, uint(1)),
        field!("stage2", "d_v", stage2_arch.d_v, uint(1)),
        field!("stage2", "heads", stage2_arch.heads, uint(1)),
        field!("stage2", "ffn", stage2_arch.ffn, uint(1)),
        field!("compile", "gamma", compile.gamma, unit),
        field!("compile", "rho", compile.rho, rate),
        field!("augment", "folds", augment.folds, uint(1)),
        field!("augment", "scale_min", augment.scale_min, positive),
        field!("augment", "scale_max", augment.scale_max, positive),
        field!("augment", "p_jit", augment.p_jit, unit),
        field!("augment", "jitter", augment.jitter, nonneg),
        field!("augment", "noise_var", augment.noise_var, nonneg),
        field!("cslr", "epochs", cslr.epochs, uint(1)),
        field!("cslr", "batch", cslr.batch, uint(1)),
        Field {
            section: "cslr",
            key: "warmup",
            get: |c| c.cslr.warmup.to_string(),
            set: |c, v| {
                c.cslr.warmup = uint(1)(v)? as u64;
                Ok(())
            },
        },
        field!("cslr", "lr_scale", cslr.lr_scale, positive),
        field!("cslr", "prune_every", cslr.prune_every, uint(0)),
        field!("cslr", "prune_tau", cslr.prune_tau, nonneg),
        field!("cslr", "lambda_kd", cslr.lambda_kd, nonneg),
        field!("cslr", "lambda_ctc", cslr.lambda_ctc, nonneg),
        field!("cslr", "lambda_lip", cslr.lambda_lip, nonneg),
        field!("cslr", "lip_radius", cslr.lip_radius, float(0.0, f64::INFINITY, false)),
        field!("cslr", "p_attn", cslr.dropout.attn, rate),
        field!("cslr", "p_relu", cslr.dropout.relu, rate),
        field!("cslr", "p_res", cslr.dropout.res, rate),
        field!("cslr", "label_smoothing", cslr.label_smoothing, rate),
        field!("cslr", "rho", cslr.rho, rate),
        field!("cslr", "teacher_epochs", cslr.teacher_epochs, uint(0)),
        field!("cslr", "average_top", cslr.average_top, uint(1)),
        field!("cslr", "clip", cslr.adam.clip_norm, nonneg),
        field!("cslr", "weight_decay", cslr.adam.weight_decay, nonneg),
        field!("cslr", "branch", cslr_arch.branch, uint(1)),
        field!("cslr", "conv_width", cslr_arch.conv_width, uint(1)),
        field!("cslr", "hidden", cslr_arch.hidden, uint(1)),
        field!("cslr", "rnn_layers", cslr_arch.rnn_layers, uint(1)),
        field!("cslr", "d_model", cslr_arch.d_model, uint(1)),
        field!("cslr", "enc_layers", cslr_arch.enc_layers, uint(0)),
        field!("cslr", "dec_layers", cslr_arch.dec_layers, uint(1)),
        field!("cslr", "heads", cslr_arch.heads, uint(1)),
        field!("cslr", "ffn", cslr_arch.ffn, uint(1)),
        field!("cslr", "teacher_width", cslr_arch.teacher_width, uint(1)),
        field!("cslr", "teacher_blocks", cslr_arch.teacher_blocks, uint(0)),
        field!("decode", "beam", decode.beam, uint(1)),
        field!("decode", "alpha", decode.alpha, nonneg),
        field!("decode", "top_k", decode.top_k, uint(1)),
        field!("decode", "max_len", decode.max_len, uint(1)),
        field!("decode", "top_p", decode.top_p, |v| {
            let p = positive(v)?;
            if p > 1.0 {
                return Err(format!("{p} outside (0, 1]"));
            }
            Ok(p)
        }, opt),
        field!("decode", "repetition_penalty", decode.repetition_penalty, float(1.0, f64::INFINITY, true), opt),
        field!("decode", "length_penalty", decode.length_penalty, nonneg, opt),
    ]
}

impl RunConfig {
    /// Sets the root seed; every stage derives named streams from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.compile.seed = seed;
        self.cslr.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table = fields();
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        let mut seen: HashMap<(String, String), usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| Error::Config { line, message };
            let body = raw.split(['#', ';']).next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("unterminated section header {body:?}")))?
                    .trim();
                if !table.iter().any(|f| f.section == name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {body:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let sec = section
                .as_deref()
                .ok_or_else(|| err(format!("key {key:?} appears before any [section]")))?;
            let field = table
                .iter()
                .find(|f| f.section == sec && f.key == key)
                .ok_or_else(|| err(format!("unknown key {key:?} in [{sec}]")))?;
            if seen.insert((sec.to_string(), key.to_string()), line).is_some() {
                return Err(err(format!("duplicate key {key:?} in [{sec}]")));
            }
            (field.set)(&mut cfg, value).map_err(|m| err(format!("[{sec}] {key}: {m}")))?;
        }
        cfg.check(&seen)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Cross-field checks; failures point at the last line involved.
    fn check(&self, seen: &HashMap<(String, String), usize>) -> Result<()> {
        let line_of = |keys: &[(&str, &str)]| {
            keys.iter()
                .filter_map(|(s, k)| seen.get(&(s.to_string(), k.to_string())).copied())
                .max()
                .unwrap_or(0)
        };
        let fail = |keys: &[(&str, &str)], message: &str| {
            Err(Error::Config {
                line: line_of(keys),
                message: message.to_string(),
            })
        };
        if self.synth.min_len > self.synth.max_len {
            return fail(&[("synth", "min_len"), ("synth", "max_len")], "synth min_len exceeds max_len");
        }
        if self.synth.min_frames > self.synth.max_frames {
            return fail(&[("synth", "min_frames"), ("synth", "max_frames")], "synth min_frames exceeds max_frames");
        }
        if self.augment.scale_min > self.augment.scale_max {
            return fail(&[("augment", "scale_min"), ("augment", "scale_max")], "augment scale_min exceeds scale_max");
        }
        let s1 = &self.stage1_arch;
        if s1.d_h > s1.d_u || !s1.d_h.is_multiple_of(s1.fusion_heads) || !s1.d_u.is_multiple_of(s1.latent_heads) {
            return fail(
                &[("stage1", "d_h"), ("stage1", "d_u"), ("stage1", "fusion_heads"), ("stage1", "latent_heads")],
                "stage1 needs d_h <= d_u, d_h divisible by fusion_heads and d_u divisible by latent_heads",
            );
        }
        let s2 = &self.stage2_arch;
        if !GRID.is_multiple_of(s2.patch) || !s2.d_v.is_multiple_of(s2.heads) {
            return fail(
                &[("stage2", "patch"), ("stage2", "d_v"), ("stage2", "heads")],
                "stage2 needs the frame edge divisible by patch and d_v divisible by heads",
            );
        }
        if !self.cslr_arch.d_model.is_multiple_of(self.cslr_arch.heads) {
            let msg = format!("cslr d_model {} is not divisible by heads {}", self.cslr_arch.d_model, self.cslr_arch.heads);
            return fail(&[("cslr", "d_model"), ("cslr", "heads")], &msg);
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        self.sections_text(&[])
    }

    /// Text form restricted to `sections`; all sections when empty.
    pub fn sections_text(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        let mut current = "";
        for f in fields().into_iter().filter(|f| sections.is_empty() || sections.contains(&f.section)) {
            if f.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{}]\n", f.section));
                current = f.section;
            }
            out.push_str(&format!("{} = {}\n", f.key, (f.get)(self)));
        }
        out
    }

    pub fn stage1_arch(&self, vocab: usize) -> Stage1Arch {
        Stage1Arch {
            vocab,
            dims: self.synth.dims,
            ..self.stage1_arch
        }
    }

    pub fn stage2_arch(&self) -> Vid2PoseArch {
        Vid2PoseArch {
            dims: self.synth.dims,
            ..self.stage2_arch
        }
    }

    pub fn cslr_arch(&self, vocab: usize) -> RecognizerArch {
        RecognizerArch {
            d_in: self.stage1_arch.d_u,
            vocab,
            ..self.cslr_arch.clone()
        }
    }
}
