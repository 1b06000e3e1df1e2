//! Stage 1: pose tracks to a unified latent, decoded through a gloss codebook.

pub mod codebook;
pub mod losses;
pub mod model;
pub mod train;
pub mod types;

pub use codebook::Codebook;
pub use losses::{composite_stage1_loss, contrastive_loss, text_loss, word_match_loss, LossWeights};
pub use model::{Stage1Arch, Stage1Model};
pub use types::{PoseFrameBundle, PoseTracks, TrackDims, TrackId, NUM_TRACKS};
pub use train::{train_stage1, Stage1EpochLog, Stage1TrainConfig};
