//! Scalar abstraction shared by the tensor core, the geometry maps and the
//! relevance network.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Converts an `f64` literal. Lossy for `f32`.
    fn of(v: f64) -> Self;

    /// Lossless widening to `f64`.
    fn to_f64_lossless(self) -> f64;

    /// `c[m×n] = a[m×k] · b[k×n]` over strided operands; `c` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: [isize; 2], b: &[Self], b_strides: [isize; 2], c: &mut [Self]);

    /// Absolute tolerance used for normalization checks, never tighter than
    /// what the type can resolve.
    fn tolerance(requested: f64) -> Self {
        Self::of(requested.max(64.0 * Self::epsilon().to_f64_lossless()))
    }
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: [isize; 2], b: &[Self], b_strides: [isize; 2], c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the strides address only the asserted extents.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides[0],
                a_strides[1],
                b.as_ptr(),
                b_strides[0],
                b_strides[1],
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: [isize; 2], b: &[Self], b_strides: [isize; 2], c: &mut [Self]) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        // SAFETY: the strides address only the asserted extents.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides[0],
                a_strides[1],
                b.as_ptr(),
                b_strides[0],
                b_strides[1],
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
}
