//! Variance-threshold pruning of latent dimensions.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numcore::Tensor;

use super::LatentSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub mask: Vec<bool>,
    pub tau: f64,
    pub effective_width: usize,
    /// Variance per dimension at build time.
    pub variance: Vec<f64>,
}

impl PruneMask {
    pub fn all_ones(width: usize) -> Self {
        Self {
            mask: vec![true; width],
            tau: 0.0,
            effective_width: width,
            variance: vec![f64::NAN; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mask.len()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Unbiased per-dimension variance over all valid frames of the batch.
pub fn valid_variance(batch: &[LatentSequence]) -> Result<Vec<f64>> {
    let Some(first) = batch.first() else {
        return Err(Error::Contract("pruning needs a nonempty batch".into()));
    };
    let d = first.width();
    if batch.iter().any(|s| s.width() != d) {
        return Err(dim_err("latent widths differ within batch"));
    }
    let mut n = 0usize;
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for s in batch {
        for t in (0..s.frames()).filter(|&t| s.mask[t]) {
            n += 1;
            for (j, &x) in s.z.row(t).iter().enumerate() {
                let delta = x - mean[j];
                mean[j] += delta / n as f64;
                m2[j] += delta * (x - mean[j]);
            }
        }
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} valid frames; variance needs at least 2"
        )));
    }
    Ok(m2.into_iter().map(|v| v / (n - 1) as f64).collect())
}

/// Keeps dimension `d` iff its variance is at least `tau`.
pub fn build_prune_mask(batch: &[LatentSequence], tau: f64) -> Result<PruneMask> {
    if !(tau >= 0.0) {
        return Err(Error::Parameter(format!("pruning threshold must be >= 0, got {tau}")));
    }
    let variance = valid_variance(batch)?;
    let mask: Vec<bool> = variance.iter().map(|&v| v >= tau).collect();
    Ok(PruneMask {
        effective_width: mask.iter().filter(|&&m| m).count(),
        mask,
        tau,
        variance,
    })
}

/// `z ⊙ M` applied to every row.
pub fn apply_mask(z: &Tensor, mask: &PruneMask) -> Result<Tensor> {
    if z.cols() != mask.width() {
        return Err(dim_err(format!(
            "mask width {} vs latent width {}",
            mask.width(),
            z.cols()
        )));
    }
    let mut out = z.clone();
    let d = mask.width();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if !mask.mask[i % d] {
            *v = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(rows: Vec<Vec<f64>>) -> Vec<LatentSequence> {
        let z = Tensor::from_rows(&rows).unwrap();
        vec![LatentSequence::new(z, vec![]).unwrap()]
    }

    #[test]
    fn engineered_variances() {
        // columns: constant, variance 0.5, variance 2.0 (unbiased over 2 rows)
        let b = batch(vec![vec![3.0, 0.0, 0.0], vec![3.0, 1.0, 2.0]]);
        let m = build_prune_mask(&b, 1.0).unwrap();
        assert_eq!(m.variance, vec![0.0, 0.5, 2.0]);
        assert_eq!(m.mask, vec![false, false, true]);
        assert_eq!(m.effective_width, 1);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let b = batch(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(build_prune_mask(&b, 0.0).unwrap().effective_width, 2);
    }

    #[test]
    fn invalid_frames_are_ignored() {
        let mut b = batch(vec![vec![0.0], vec![2.0], vec![100.0]]);
        b[0].mask[2] = false;
        assert_eq!(valid_variance(&b).unwrap(), vec![2.0]);
        b[0].mask = vec![false; 3];
        assert!(matches!(build_prune_mask(&b, 0.1), Err(Error::InsufficientData(_))));
        assert!(matches!(build_prune_mask(&[], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_extremes() {
        let z = Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(apply_mask(&z, &PruneMask::all_ones(2)).unwrap(), z);
        let mut none = PruneMask::all_ones(2);
        none.mask = vec![false, false];
        assert!(apply_mask(&z, &none).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&z, &PruneMask::all_ones(3)).is_err());
    }

    proptest! {
        #[test]
        fn masking_is_idempotent_and_shape_preserving(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
            bits in prop::collection::vec(any::<bool>(), 4),
        ) {
            let z = Tensor::new(&[3, 4], vals).unwrap();
            let mut m = PruneMask::all_ones(4);
            m.mask = bits;
            let once = apply_mask(&z, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once.shape(), z.shape());
            prop_assert_eq!(once, twice);
        }
    }
}
