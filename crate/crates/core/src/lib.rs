//! Speaker-embedding informed audiovisual active speaker detection.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode tape, Adam, finite-difference oracle, checkpoints
//! - [`synthcorpus`]: seeded synthetic audiovisual scenarios and the corpus file format
//! - [`spkembed`]: per-frame audio windowing and the frozen speaker embedder
//! - [`asdnet`]: the audio/video encoder, fusion and temporal decoder baseline
//! - [`scan`]: framewise cross-attention speaker comparison and its auxiliary head
//! - [`facelib`]: self-supervised video face recognition and identity-speech libraries
//! - [`metrics`]: average precision, silhouette, similarity histograms, EER
//! - [`harness`]: configuration, end-to-end ablations, reports and the CLI driver
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod asdnet;
pub mod error;
pub mod facelib;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod scan;
pub mod spkembed;
pub mod synthcorpus;

pub use error::{Error, Result};
