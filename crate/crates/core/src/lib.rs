//! Hybrid architecture distillation for DNA sequence models.

pub mod bench;
pub mod config;
pub mod error;
pub mod finetune_eval;
pub mod gdn;
pub mod genome_io;
pub mod layers;
pub mod masking;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod teacher;
pub mod tokenizers;

pub use error::{HadError, Result};
