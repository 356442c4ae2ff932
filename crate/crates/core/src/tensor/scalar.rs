use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a tape. `f32` is used for training, `f64`
/// for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// The strided views must lie inside the given slices; callers in this
    /// crate derive them from tensor shapes that have already been checked.
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

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn from_f32_lossy(v: f32) -> Self;

    fn to_f32_lossy(self) -> f32;
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f32_lossy(v: f32) -> f32 {
        v
    }

    fn to_f32_lossy(self) -> f32 {
        self
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f32_lossy(v: f32) -> f64 {
        v as f64
    }

    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// Products up to this many multiply-adds skip packing.
const SMALL_GEMM: usize = 8192;

fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    // Four independent accumulators; the summation order is fixed, so results
    // stay deterministic.
    let mut acc = [T::zero(); 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] = acc[l] + a[l] * b[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in xr.iter().zip(yr) {
        s = s + *a * *b;
    }
    s
}

fn small_gemm<T: Scalar>(
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    beta: T,
    out: &mut [T],
    dims: (usize, usize, usize),
) {
    let (m, k, n) = dims;
    let (rsa, csa) = (sa.0 as usize, sa.1 as usize);
    let (rsb, csb) = (sb.0 as usize, sb.1 as usize);
    let out = &mut out[..m * n];
    if beta == T::zero() {
        out.fill(T::zero());
    } else if beta != T::one() {
        out.iter_mut().for_each(|v| *v = *v * beta);
    }
    let axpy = |row: &mut [T], x: T, y: &[T]| {
        for (o, &v) in row.iter_mut().zip(y) {
            *o = *o + x * v;
        }
    };
    if csb == 1 && rsb == n {
        if csa == 1 {
            for (i, row) in out.chunks_exact_mut(n).enumerate() {
                for (&x, brow) in a[i * rsa..i * rsa + k].iter().zip(b.chunks_exact(n)) {
                    axpy(row, x, brow);
                }
            }
        } else if rsa == 1 {
            for (p, brow) in b.chunks_exact(n).take(k).enumerate() {
                for (row, &x) in out.chunks_exact_mut(n).zip(&a[p * csa..p * csa + m]) {
                    axpy(row, x, brow);
                }
            }
        } else {
            for (i, row) in out.chunks_exact_mut(n).enumerate() {
                for (p, brow) in b.chunks_exact(n).take(k).enumerate() {
                    axpy(row, a[i * rsa + p * csa], brow);
                }
            }
        }
        return;
    }
    let mut arow = vec![T::zero(); k];
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        let ar: &[T] = if csa == 1 {
            &a[i * rsa..i * rsa + k]
        } else {
            for (p, v) in arow.iter_mut().enumerate() {
                *v = a[i * rsa + p * csa];
            }
            &arow
        };
        if rsb == 1 {
            for (j, o) in row.iter_mut().enumerate() {
                *o = *o + dot(ar, &b[j * csb..j * csb + k]);
            }
        } else {
            for (j, o) in row.iter_mut().enumerate() {
                let mut s = T::zero();
                for (p, &av) in ar.iter().enumerate() {
                    s = s + av * b[p * rsb + j * csb];
                }
                *o = *o + s;
            }
        }
    }
}

/// `out (m×n) = a·b + beta·out`, where `a` and `b` may be transposed views.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert!(out.len() >= m * n);
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    if m * n * k <= SMALL_GEMM {
        small_gemm(
            a.data,
            (rsa, csa),
            b.data,
            (rsb, csb),
            beta,
            &mut out[..m * n],
            (m, k, n),
        );
        return;
    }
    // SAFETY: bounds asserted above; strides describe row-major storage.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
