use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use crate::{Error, Result};

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    fn of(v: f64) -> Self;

    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major `C = op(A) * op(B)` (or `C += ...` when `accumulate`).
///
/// `op(A)` is `m x k`: `A` is stored `m x k`, or `k x m` when `ta`.
/// `op(B)` is `k x n`: `B` is stored `k x n`, or `n x k` when `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    // Narrow outputs (conv layers): the blocked kernel spends most of its time packing there.
    if !ta && (n <= 64 || (k <= 32 && n <= 256)) {
        if tb {
            let bt = transpose(n, k, b);
            narrow(m, k, n, a, &bt, c, accumulate);
        } else {
            narrow(m, k, n, a, b, c, accumulate);
        }
        return;
    }
    if ta && !tb && n <= 64 && m <= 256 {
        narrow_at(m, k, n, a, b, c, accumulate);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index reachable from these strides.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn transpose<T: Scalar>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = x[i * cols + j];
        }
    }
    t
}

/// Runs a kernel through an AVX2-enabled copy when the CPU supports it.
///
/// No fused multiply-add is emitted either way, so both copies produce identical bits.
macro_rules! dispatch {
    ($kernel:ident::<$t:ty, $n:literal>($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn wide<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
                $kernel::<T, N>(m, k, a, b, c)
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2.
                unsafe { wide::<$t, $n>($($arg),*) }
            } else {
                $kernel::<$t, $n>($($arg),*)
            }
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            $kernel::<$t, $n>($($arg),*)
        }
    }};
}

/// Row-axpy product: `C[i,:] (+)= sum_p A[i,p] * B[p,:]`.
fn narrow<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(T::zero());
    }
    match n {
        8 => dispatch!(narrow_fixed::<T, 8>(m, k, a, b, c)),
        16 => dispatch!(narrow_fixed::<T, 16>(m, k, a, b, c)),
        32 => dispatch!(narrow_fixed::<T, 32>(m, k, a, b, c)),
        64 => dispatch!(narrow_fixed::<T, 64>(m, k, a, b, c)),
        _ => {
            for (i, crow) in c.chunks_exact_mut(n).enumerate() {
                let arow = &a[i * k..(i + 1) * k];
                let mut p = 0;
                while p + 4 <= k {
                    let (s0, s1, s2, s3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
                    let bs = &b[p * n..(p + 4) * n];
                    let (b0, rest) = bs.split_at(n);
                    let (b1, rest) = rest.split_at(n);
                    let (b2, b3) = rest.split_at(n);
                    for j in 0..n {
                        crow[j] += s0 * b0[j] + s1 * b1[j] + s2 * b2[j] + s3 * b3[j];
                    }
                    p += 4;
                }
                for p in p..k {
                    let s = arow[p];
                    for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                        *cv += s * bv;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn narrow_fixed<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for (i, crow) in c[..m * N].chunks_exact_mut(N).enumerate() {
        let mut acc: [T; N] = crow.try_into().expect("row of width N");
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let bs = &b[p * N..(p + 4) * N];
            for j in 0..N {
                acc[j] += arow[p] * bs[j] + arow[p + 1] * bs[N + j] + arow[p + 2] * bs[2 * N + j] + arow[p + 3] * bs[3 * N + j];
            }
            p += 4;
        }
        for p in p..k {
            for j in 0..N {
                acc[j] += arow[p] * b[p * N + j];
            }
        }
        crow.copy_from_slice(&acc);
    }
}

/// `C (+)= A^T B` for a small `C`, with `A` stored `k x m`; `p` is consumed four rows at a time.
fn narrow_at<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(T::zero());
    }
    match n {
        8 => dispatch!(narrow_at_fixed::<T, 8>(m, k, a, b, c)),
        16 => dispatch!(narrow_at_fixed::<T, 16>(m, k, a, b, c)),
        32 => dispatch!(narrow_at_fixed::<T, 32>(m, k, a, b, c)),
        64 => dispatch!(narrow_at_fixed::<T, 64>(m, k, a, b, c)),
        _ => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for (&s, crow) in a[p * m..(p + 1) * m].iter().zip(c.chunks_exact_mut(n)) {
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += s * bv;
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn narrow_at_fixed<T: Scalar, const N: usize>(m: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut p = 0;
    while p + 4 <= k {
        let bs: &[T] = &b[p * N..(p + 4) * N];
        let a4 = &a[p * m..(p + 4) * m];
        for (i, crow) in c.chunks_exact_mut(N).enumerate() {
            let (s0, s1, s2, s3) = (a4[i], a4[m + i], a4[2 * m + i], a4[3 * m + i]);
            for j in 0..N {
                crow[j] += s0 * bs[j] + s1 * bs[N + j] + s2 * bs[2 * N + j] + s3 * bs[3 * N + j];
            }
        }
        p += 4;
    }
    for p in p..k {
        for (&s, crow) in a[p * m..(p + 1) * m].iter().zip(c.chunks_exact_mut(N)) {
            for j in 0..N {
                crow[j] += s * b[p * N + j];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
