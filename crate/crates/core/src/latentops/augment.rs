//! N-fold feature augmentation: temporal rescaling, jitter, additive noise.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;

use super::{GlossSpan, LatentSequence};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub folds: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub p_jit: f64,
    /// Half-width of the uniform per-frame offset.
    pub jitter: f64,
    pub noise_var: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            scale_min: 0.8,
            scale_max: 1.2,
            p_jit: 0.3,
            jitter: 0.02,
            noise_var: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Every stage switched off: folds reproduce the source.
    pub fn identity(folds: usize) -> Self {
        Self {
            folds,
            scale_min: 1.0,
            scale_max: 1.0,
            p_jit: 0.0,
            jitter: 0.0,
            noise_var: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::Parameter("augmentation needs at least one fold".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Parameter(format!(
                "bad temporal scale range [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_jit) || !(self.jitter >= 0.0) || !(self.noise_var >= 0.0) {
            return Err(Error::Parameter("jitter and noise settings out of range".into()));
        }
        Ok(())
    }
}

pub fn fold_key(i: usize, j: usize) -> String {
    format!("{i}_{j}")
}

/// Linear interpolation of `z` onto `new_len` evenly spaced positions.
pub fn resample(z: &Tensor, new_len: usize) -> Tensor {
    let (t_len, d) = (z.rows(), z.cols());
    if new_len == t_len {
        return z.clone();
    }
    let mut out = Vec::with_capacity(new_len * d);
    for k in 0..new_len {
        let pos = if new_len == 1 {
            0.0
        } else {
            (k * (t_len - 1)) as f64 / (new_len - 1) as f64
        };
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= t_len {
            out.extend_from_slice(z.row(lo.min(t_len - 1)));
        } else {
            let (a, b) = (z.row(lo), z.row(lo + 1));
            out.extend(a.iter().zip(b).map(|(x, y)| x + frac * (y - x)));
        }
    }
    Tensor::new(&[new_len, d], out).expect("resample shape")
}

/// Rescales spans by `(T'-1)/(T-1)`, rounding starts down and ends up.
pub fn rescale_spans(spans: &[GlossSpan], t_len: usize, new_len: usize) -> Vec<GlossSpan> {
    let r = if t_len <= 1 || new_len <= 1 {
        0.0
    } else {
        (new_len - 1) as f64 / (t_len - 1) as f64
    };
    let last = new_len - 1;
    let mut out: Vec<GlossSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        let mut start = ((s.start as f64 * r).floor() as usize).min(last);
        let end = ((s.end as f64 * r).ceil() as usize).min(last);
        if let Some(prev) = out.last() {
            start = start.max(prev.end);
        }
        out.push(GlossSpan::new(s.gloss, start, end.max(start)));
    }
    out
}

/// Produces `cfg.folds` records keyed `"{i}_{j}"`; fold `j` depends only on `(seed, i, j)`.
pub fn augment(
    i: usize,
    seq: &LatentSequence,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Vec<(String, LatentSequence)>> {
    cfg.validate()?;
    let t_len = seq.frames();
    if t_len == 0 {
        return Err(Error::EmptyInput("cannot augment an empty sequence".into()));
    }
    let noise = (cfg.noise_var > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_var.sqrt()).expect("finite std"));
    (0..cfg.folds)
        .map(|j| {
            let mut r = rng::keyed(seed, "augment", &[i as u64, j as u64]);
            let sigma = if cfg.scale_max > cfg.scale_min {
                r.gen_range(cfg.scale_min..=cfg.scale_max)
            } else {
                cfg.scale_min
            };
            let new_len = ((t_len as f64 * sigma).round() as usize).max(1);
            let mut z = resample(&seq.z, new_len);
            let d = z.cols();
            for row in z.data_mut().chunks_mut(d) {
                if cfg.p_jit > 0.0 && r.gen::<f64>() < cfg.p_jit {
                    for v in row.iter_mut() {
                        *v += r.gen_range(-cfg.jitter..=cfg.jitter);
                    }
                }
            }
            if let Some(n) = &noise {
                for v in z.data_mut() {
                    *v += n.sample(&mut r);
                }
            }
            let spans = rescale_spans(&seq.spans, t_len, new_len);
            let mask = (0..new_len)
                .map(|k| {
                    let src = if new_len == 1 { 0 } else { (k * (t_len - 1) + (new_len - 1) / 2) / (new_len - 1) };
                    seq.mask[src.min(t_len - 1)]
                })
                .collect();
            let mut out = LatentSequence::new(z, spans)?;
            out.mask = mask;
            out.fill_alignment();
            Ok((fold_key(i, j), out))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(t: usize) -> LatentSequence {
        let data = (0..t * 3).map(|k| (k as f64 * 0.37).sin()).collect();
        let z = Tensor::new(&[t, 3], data).unwrap();
        LatentSequence::new(
            z,
            vec![GlossSpan::new(4, 0, 3), GlossSpan::new(6, 4, 8), GlossSpan::new(5, 9, t - 1)],
        )
        .unwrap()
    }

    #[test]
    fn keys_follow_index_fold_scheme() {
        let cfg = AugmentConfig::default();
        let keys: Vec<String> = (0..3)
            .flat_map(|i| augment(i, &source(14), &cfg, 5).unwrap())
            .map(|(k, _)| k)
            .collect();
        assert_eq!(keys.len(), 30);
        assert_eq!(keys[0], "0_0");
        assert_eq!(keys[29], "2_9");
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let src = source(14);
        for (_, fold) in augment(2, &src, &AugmentConfig::identity(3), 9).unwrap() {
            assert_eq!(fold.z, src.z);
            assert_eq!(fold.spans, src.spans);
        }
    }

    #[test]
    fn folds_are_deterministic_and_distinct() {
        let cfg = AugmentConfig::default();
        let a = augment(1, &source(14), &cfg, 3).unwrap();
        let b = augment(1, &source(14), &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].1.z, a[1].1.z);
    }

    #[test]
    fn resample_interpolates_linearly() {
        let z = Tensor::new(&[3, 1], vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(resample(&z, 5).data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resample(&z, 2).data(), &[0.0, 4.0]);
        assert_eq!(resample(&z, 1).data(), &[0.0]);
    }

    #[test]
    fn spans_scale_outward_and_stay_ordered() {
        let spans = [GlossSpan::new(4, 0, 3), GlossSpan::new(5, 4, 9)];
        let up = rescale_spans(&spans, 10, 19);
        assert_eq!(up, vec![GlossSpan::new(4, 0, 6), GlossSpan::new(5, 8, 18)]);
        for new_len in 1..25 {
            let s = rescale_spans(&spans, 10, new_len);
            assert_eq!(s.last().unwrap().end, new_len - 1);
            assert!(s[1].start >= s[0].end);
            assert!(s.iter().all(|x| x.start <= x.end));
        }
    }
}
