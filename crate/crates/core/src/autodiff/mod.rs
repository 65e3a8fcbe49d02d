//! A small dense-tensor reverse-mode differentiation engine.
//!
//! Forward passes are recorded on a [`Tape`]; [`Tape::backward`] walks the
//! recorded nodes in reverse and returns exact gradients of the composition.
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference checks.

mod checkpoint;
mod conv;
mod fpenv;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use fpenv::FlushDenormals;
pub use gradcheck::{gradcheck, GradCheck, GradCheckReport};
pub use optim::{lr_at_epoch, xavier_uniform, AdamW, AdamWConfig, Parameter};
pub use tape::{Gradients, Neighborhoods, Tape, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type usable on a tape.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    /// `C ← α·A·B + β·C` on raw strided storage.
    ///
    /// # Safety
    /// All pointers must be valid for every element addressed by the given
    /// dimensions and strides, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided read-only matrix view into a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

/// A strided mutable matrix view into a slice.
pub(crate) struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major contiguous `rows × cols`.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }
}

/// Bounds-checked `C ← α·A·B + β·C`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        let c_data = c.data;
        for r in 0..c.rows {
            for col in 0..c.cols {
                let i = c.offset + r * c.rs + col * c.cs;
                c_data[i] = if beta == T::zero() { T::zero() } else { c_data[i] * beta };
            }
        }
        return;
    }
    assert!(last_index(a.offset, a.rows, a.cols, a.rs, a.cs) < a.data.len());
    assert!(last_index(b.offset, b.rows, b.cols, b.rs, b.cs) < b.data.len());
    assert!(last_index(c.offset, c.rows, c.cols, c.rs, c.cs) < c.data.len());
    // SAFETY: every addressed element was bounds-checked above; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}
