//! Minimal dense-array engine with reverse-mode automatic differentiation.
//!
//! Values are flat row-major buffers with explicit shapes. Operations are
//! recorded on a [`TapeBase`]; a backward pass walks the recorded nodes in
//! reverse creation order exactly once and accumulates gradients into every
//! tracked leaf. The whole module is generic over the scalar type; the crate
//! root exports f64 aliases, which the rest of the project uses.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, sample_coords};
pub use tape::{scaled_dot_attention, TapeBase, ValueId};
pub use tensor::TensorBase;

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};
use thiserror::Error;

/// Scalar types the engine can run on. `f64` is the project default; `f32`
/// works anywhere precision headroom is not needed.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + fmt::Debug + fmt::Display + Default + 'static
{
    /// Converts an `f64` literal into the scalar type.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("literal not representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Errors surfaced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumericError {
    /// Incompatible or invalid dimensions; the message names the shapes involved.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An index (row, class, layer) fell outside its valid range.
    #[error("index error: {0}")]
    Index(String),
    /// An API contract was violated (non-scalar loss, empty key set, ...).
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;

pub(crate) fn shape_str(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}
