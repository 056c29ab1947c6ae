//! Unsupervised skeleton-based temporal action segmentation.
//!
//! A temporal convolutional autoencoder embeds each joint of a skeleton
//! sequence; the latents are cut into fixed-length patches and quantized
//! against a learned codebook of motion words, whose indices directly yield
//! per-frame segmentation labels. Training combines a rigid-motion-invariant
//! reconstruction loss with a commitment term, with the codebook updated by
//! exponential moving averages rather than gradients. Evaluation follows
//! the unsupervised protocol: Hungarian cluster matching, MoF, edit score,
//! and segmental F1.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quantizer;
pub mod tensor;

pub use error::{Error, Result};
