//! Lung-image segmentation as image-to-image translation.
//!
//! The crate carries everything needed to train and evaluate a conditional
//! adversarial translator (a U-Net generator against a patch discriminator)
//! that maps grayscale scans to binary masks, on CPU:
//!
//! - [`tensor`]: dense tensors, a reverse-mode autodiff tape and a
//!   finite-difference gradient checker.
//! - [`networks`]: generator, patch discriminator and baseline U-Net.
//! - [`objectives`]: adversarial, L1 and pixel cross-entropy losses; Adam.
//! - [`data`]: paired PNG datasets, splits and synthetic lung phantoms.
//! - [`metrics`]: accuracy, overlap rate (Jaccard) and F measure (Dice), with
//!   table rendering.
//! - [`gradsuite`]: finite-difference checks of every op and of the full
//!   training losses.
//! - [`train`]: alternating training, the baseline loop, checkpoints,
//!   evaluation and inference.

pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
