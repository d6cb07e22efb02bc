//! Pose-disentangling dual encoder-decoder GAN.
//!
//! The generator is an encoder-decoder: its encoder yields an identity
//! feature, its decoder renders a face from that feature, a continuous pose
//! code and noise. The discriminator is also an encoder-decoder whose code
//! layer feeds real/fake, identity, and pose heads while its decoder
//! reconstructs the input. An equilibrium controller balances the
//! reconstruction losses of real and generated images.

pub mod archive;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod networks;
pub mod numerics;
pub mod shapemodel;
pub mod training;

pub use error::{Error, Result};
