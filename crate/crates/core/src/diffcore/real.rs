use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point scalar the differentiable core is generic over.
///
/// Training runs in `f32`; gradient verification instantiates the same code
/// paths in `f64`.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + serde::Serialize
    + for<'de> serde::Deserialize<'de>
    + 'static
{
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// be in bounds for the corresponding buffer.
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
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided 2-D view into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> Self {
        View { offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Bounds-checked GEMM: `c = a * b + beta * c`.
pub(crate) fn gemm<T: Real>(a: &[T], va: View, b: &[T], vb: View, beta: T, c: &mut [T], vc: View) {
    assert_eq!(va.cols, vb.rows, "gemm inner dimension");
    assert_eq!(va.rows, vc.rows, "gemm output rows");
    assert_eq!(vb.cols, vc.cols, "gemm output cols");
    if vc.rows == 0 || vc.cols == 0 {
        return;
    }
    if va.cols == 0 {
        // matrixmultiply handles k = 0 by scaling c; keep that explicit.
        for i in 0..vc.rows {
            for j in 0..vc.cols {
                let idx = vc.offset + i * vc.row_stride + j * vc.col_stride;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(va.max_index() < a.len(), "gemm a out of bounds");
    assert!(vb.max_index() < b.len(), "gemm b out of bounds");
    assert!(vc.max_index() < c.len(), "gemm c out of bounds");
    // SAFETY: every reachable index was bounds-checked above.
    unsafe {
        T::gemm_raw(
            va.rows,
            va.cols,
            vb.cols,
            T::one(),
            a.as_ptr().add(va.offset),
            va.row_stride as isize,
            va.col_stride as isize,
            b.as_ptr().add(vb.offset),
            vb.row_stride as isize,
            vb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(vc.offset),
            vc.row_stride as isize,
            vc.col_stride as isize,
        );
    }
}
