//! Scalar abstraction for the numeric core.
//!
//! All dense math is generic over [`Scalar`] so the same code runs in the
//! f32 working precision used by the pipeline and in f64 for verification
//! (finite-difference gradient checks, bound sweeps).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};

pub trait Scalar:
    Float + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64, used for constants and RNG output.
    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 -> scalar conversion")
    }

    /// Widening conversion for accumulation and reporting.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
