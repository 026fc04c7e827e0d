//! Edge detection with a convolution/self-attention mixing block.
//!
//! * [`tensor`]: dense tensors, kernels and a reverse-mode tape.
//! * [`racmix`]: the shared-projection block.
//! * [`backbone`]: the dense multi-scale network, training and checkpoints.
//! * [`loss`]: class-balanced deep supervision.
//! * [`datapipe`]: loading and offline augmentation.
//! * [`evalkit`]: thinning, boundary matching, ODS/OIS/AP.

pub mod backbone;
pub mod datapipe;
pub mod error;
pub mod evalkit;
pub mod loss;
pub mod par;
pub mod params;
pub mod racmix;
pub mod synth;
pub mod tensor;

pub use backbone::{AdamConfig, EdgeNetwork, NetworkConfig, Trainer};
pub use error::{Error, Result};
pub use racmix::{RacmixBlock, RacmixConfig};
pub use tensor::{Real, Tape, Tensor, Var};
