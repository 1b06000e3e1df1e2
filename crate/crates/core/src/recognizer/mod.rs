//! Latent-space continuous recognizer: temporal convolutions, a
//! bidirectional recurrent layer, an encoder-decoder with a CTC head, and a
//! convolutional teacher for distillation.

pub mod ctc;
pub mod losses;
pub mod model;
pub mod train;

pub use ctc::{ctc_loss, ctc_nll, min_frames};
pub use losses::{class_weights, kd_loss, lipschitz_reg, noam_lr};
pub use model::{conv1d, pooled_len, Encoded, RecognizerArch, Recognizer, RefineOut};
pub use train::{average_checkpoints, batch_loss, greedy_wer, train_cslr, CslrEpochLog, CslrOutcome, TrainSchedule};
