#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod latentops;
pub mod nn;
pub mod numcore;
pub mod pipeline;
pub mod posespace;
pub mod recognizer;
pub mod rng;
pub mod synth;
pub mod vid2pose;
