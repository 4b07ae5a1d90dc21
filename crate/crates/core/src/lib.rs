//! Pairwise learning for class-imbalanced, low-resource utterance
//! classification.
//!
//! The pipeline: sample positive/negative utterance pairs, re-mine the
//! hardest ones each epoch under the current encoder, train encoder and
//! classifier jointly with a contrastive + representation-mixup objective,
//! and classify at test time by fusing per-class 1-nearest-neighbor scores
//! with classifier scores.
//!
//! Everything runs on a small reverse-mode autodiff engine over 64-bit
//! floats ([`tensor`]), and every source of randomness derives from one run
//! seed through named streams ([`rng`]), so runs reproduce bit-for-bit.

pub mod classifier;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod model;
pub mod pairing;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use model::Model;
