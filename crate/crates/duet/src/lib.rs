//! duet — desk-scale contrastive vision-language pretraining.
//!
//! Two transformer encoder towers (a gradient-trained query network and a
//! momentum-averaged key network) are trained end-to-end on paired captions
//! and region features with three objectives: masked language modeling, an
//! image-sentence matching head, and a region-level InfoNCE loss whose
//! negatives come from a FIFO memory queue of key-network features.
//!
//! The numeric engine is a from-scratch reverse-mode autodiff tape, generic
//! over the scalar type; everything above it runs at f64 through the aliases
//! below so that central-difference gradient checks hold at tight tolerances.

pub mod data;
pub mod dual;
pub mod encoders;
pub mod numeric;
pub mod objectives;
pub mod params;
pub mod trainer;

/// Concrete scalar type used by the model, losses and trainer.
pub type Scalar = f64;
/// Dense tensor at model precision.
pub type Tensor = numeric::TensorBase<f64>;
/// Autodiff tape at model precision.
pub type Tape = numeric::TapeBase<f64>;

/// Single-precision variants of the numeric engine, for consumers that do
/// not need gradient-check headroom.
pub type Tensor32 = numeric::TensorBase<f32>;
pub type Tape32 = numeric::TapeBase<f32>;
