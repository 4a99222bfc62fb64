//! Scalar abstraction for the scoring core.
//!
//! All score arithmetic (entropy, confidence, consistency, stability) is
//! written against this trait so it works for `f32` and `f64` alike. The
//! crate root exports concrete `f64` aliases, which is what the session
//! pipeline and all serialized artifacts use.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar used by the scoring functions: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + 'static {
    /// Lossless conversion from a count. Counts in this crate (window
    /// sizes, token counts) are small enough for any float mantissa.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
