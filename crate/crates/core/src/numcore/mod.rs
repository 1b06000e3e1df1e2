//! Dense `f64` tensors, a reverse-mode tape, AdamW and checkpoint IO.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var, GATHER_ZERO};
pub use optim::{adam_step, cosine_lr, AdamConfig, OptimizerState, StepStats};
pub use params::{ParamId, ParamStore, StoreGrads};
pub use tensor::{layer_norm, matmul, softmax, Tensor};
