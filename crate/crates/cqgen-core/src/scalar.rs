//! Scalar abstraction so the numeric kernels run at either precision.

use num_traits::Float;

/// Floating-point scalar the model, loss, and decoding kernels are generic
/// over. `f64` is the default throughout the crate root aliases; `f32` is
/// available for speed where the extra precision is not needed.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
