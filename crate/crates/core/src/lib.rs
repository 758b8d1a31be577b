//! Differential-residual gaze estimation.
//!
//! The crate is `no_std` with `alloc`. It covers gaze geometry, the loss
//! family, a small convolutional backbone with hand-written backpropagation,
//! the DRNet head and its ablations, training, evaluation protocols, a
//! synthetic eye-image generator and a binary checkpoint codec.
//!
//! ```
//! use drnet_core::geometry::{angular_error, pitch_yaw_to_vector, PitchYaw};
//!
//! let a = pitch_yaw_to_vector(PitchYaw::new(0.0, 0.0).unwrap());
//! let b = pitch_yaw_to_vector(PitchYaw::new(0.0, 0.1).unwrap());
//! assert!((angular_error(&a, &b) - 0.1f64.to_degrees()).abs() < 1e-9);
//! ```

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod models;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod seed;
pub mod synth;
pub mod training;
