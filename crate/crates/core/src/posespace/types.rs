use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numcore::Tensor;

pub const NUM_TRACKS: usize = 5;

/// The five pose tracks in their fixed order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrackId {
    DwPose,
    MediaPipe,
    SmplerX,
    PrimeDepth,
    Sapiens,
}

impl TrackId {
    pub const ALL: [TrackId; NUM_TRACKS] = [
        TrackId::DwPose,
        TrackId::MediaPipe,
        TrackId::SmplerX,
        TrackId::PrimeDepth,
        TrackId::Sapiens,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TrackId::DwPose => "dwpose",
            TrackId::MediaPipe => "mediapipe",
            TrackId::SmplerX => "smplerx",
            TrackId::PrimeDepth => "primedepth",
            TrackId::Sapiens => "sapiens",
        }
    }

    /// Keypoint tracks are rendered as blobs; the others as intensity bands.
    pub fn is_keypoint(self) -> bool {
        matches!(self, TrackId::DwPose | TrackId::MediaPipe | TrackId::SmplerX)
    }
}

/// Per-track feature widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackDims(pub [usize; NUM_TRACKS]);

impl TrackDims {
    pub const DESK: TrackDims = TrackDims([12, 8, 6, 16, 16]);
    pub const FULL: TrackDims = TrackDims([384, 258, 165, 576, 576]);

    pub fn get(&self, t: TrackId) -> usize {
        self.0[t.index()]
    }

    /// Length of the concatenated per-frame input.
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

impl Default for TrackDims {
    fn default() -> Self {
        Self::DESK
    }
}

/// One frame's five pose vectors plus per-track confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrameBundle {
    pub tracks: [Vec<f64>; NUM_TRACKS],
    pub confidence: [f64; NUM_TRACKS],
}

impl PoseFrameBundle {
    pub fn track(&self, t: TrackId) -> &[f64] {
        &self.tracks[t.index()]
    }

    pub fn concat(&self) -> Vec<f64> {
        self.tracks.concat()
    }

    pub fn is_finite(&self) -> bool {
        self.tracks.iter().flatten().all(|v| v.is_finite())
            && self.confidence.iter().all(|c| (0.0..=1.0).contains(c))
    }
}

/// A sequence of frames stored track-major: one `T x D_i` matrix per track.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseTracks {
    pub tracks: [Tensor; NUM_TRACKS],
}

impl PoseTracks {
    pub fn new(tracks: [Tensor; NUM_TRACKS]) -> Result<Self> {
        let t = tracks[0].rows();
        if tracks.iter().any(|m| m.rank() != 2 || m.rows() != t) {
            return Err(dim_err("pose tracks disagree on frame count"));
        }
        Ok(Self { tracks })
    }

    pub fn zeros(frames: usize, dims: TrackDims) -> Self {
        Self {
            tracks: TrackId::ALL.map(|t| Tensor::zeros(&[frames, dims.get(t)])),
        }
    }

    pub fn frames(&self) -> usize {
        self.tracks[0].rows()
    }

    pub fn dims(&self) -> TrackDims {
        TrackDims(std::array::from_fn(|i| self.tracks[i].cols()))
    }

    pub fn track(&self, t: TrackId) -> &Tensor {
        &self.tracks[t.index()]
    }

    pub fn frame(&self, t: usize) -> PoseFrameBundle {
        PoseFrameBundle {
            tracks: std::array::from_fn(|i| self.tracks[i].row(t).to_vec()),
            confidence: [1.0; NUM_TRACKS],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_concat_is_1959() {
        assert_eq!(TrackDims::FULL.total(), 1959);
        assert_eq!(TrackDims::FULL.get(TrackId::DwPose), 384);
        assert_eq!(TrackDims::DESK.total(), 58);
    }

    #[test]
    fn frame_view_concatenates_in_track_order() {
        let mut p = PoseTracks::zeros(2, TrackDims([1, 1, 1, 1, 2]));
        p.tracks[4].data_mut()[3] = 5.0;
        let f = p.frame(1);
        assert_eq!(f.concat(), vec![0.0, 0.0, 0.0, 0.0, 0.0, 5.0]);
        assert!(f.is_finite());
    }
}
