//! Dense row-major tensors over f32 or f64.
//!
//! Training runs in f32 (checkpoints store f32 anyway); gradient checks and
//! the loss-decomposition identities run the exact same code in f64. The
//! [`Scalar`] trait is the pivot between the two, including gemm dispatch.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};
use std::sync::atomic::{AtomicBool, Ordering};

/// When set, the parallel helpers degrade to sequential execution. Results
/// are bit-identical either way because work is partitioned statically; the
/// switch exists to honor the CLI's --serial contract and for debugging.
static SERIAL_MODE: AtomicBool = AtomicBool::new(false);

pub fn set_serial(serial: bool) {
    SERIAL_MODE.store(serial, Ordering::SeqCst);
}

pub fn serial_mode() -> bool {
    SERIAL_MODE.load(Ordering::SeqCst)
}

/// Runs two closures, in parallel unless serial mode is on.
pub fn join2<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    if serial_mode() {
        (a(), b())
    } else {
        rayon::join(a, b)
    }
}

pub trait Scalar:
    Copy
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;

    /// C ← alpha·A·B + beta·C with explicit element strides (matrixmultiply
    /// convention: rs = stride between rows, cs = between columns).
    ///
    /// # Safety
    /// All strided accesses implied by (m, k, n) and the strides must be in
    /// bounds, and C must not alias A or B.
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

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Contiguous row-major C(m×n) = alpha·A(m×k)·B(k×n) + beta·C.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided gemm that statically splits the output columns across two tasks
/// when the work is large enough to pay for it. Each task writes a disjoint
/// column block, so the result is identical to the sequential call.
///
/// # Safety
/// Same contract as [`Scalar::gemm_raw`].
#[allow(clippy::too_many_arguments)]
pub unsafe fn gemm_par<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: *const S,
    rsa: isize,
    csa: isize,
    b: *const S,
    rsb: isize,
    csb: isize,
    beta: S,
    c: *mut S,
    rsc: isize,
    csc: isize,
) {
    const PAR_FLOP_THRESHOLD: usize = 6_000_000;
    if serial_mode() || m * k * n < PAR_FLOP_THRESHOLD || (n < 64 && m < 64) {
        S::gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        return;
    }
    let a_addr = a as usize;
    let b_addr = b as usize;
    let c_addr = c as usize;
    if m >= n {
        // Split rows: each task packs its own half of A and all of B; better
        // when A is the large operand.
        let m_top = m / 2;
        let run = move |row0: usize, nrows: usize| {
            let a_sub = (a_addr as *const S).wrapping_offset(row0 as isize * rsa);
            let c_sub = (c_addr as *mut S).wrapping_offset(row0 as isize * rsc);
            unsafe {
                S::gemm_raw(
                    nrows,
                    k,
                    n,
                    alpha,
                    a_sub,
                    rsa,
                    csa,
                    b_addr as *const S,
                    rsb,
                    csb,
                    beta,
                    c_sub,
                    rsc,
                    csc,
                );
            }
        };
        join2(|| run(0, m_top), || run(m_top, m - m_top));
    } else {
        let n_left = n / 2;
        let run = move |col0: usize, ncols: usize| {
            let b_sub = (b_addr as *const S).wrapping_offset(col0 as isize * csb);
            let c_sub = (c_addr as *mut S).wrapping_offset(col0 as isize * csc);
            unsafe {
                S::gemm_raw(
                    m,
                    k,
                    ncols,
                    alpha,
                    a_addr as *const S,
                    rsa,
                    csa,
                    b_sub,
                    rsb,
                    csb,
                    beta,
                    c_sub,
                    rsc,
                    csc,
                );
            }
        };
        join2(|| run(0, n_left), || run(n_left, n - n_left));
    }
}

/// A vector whose contents must be fully overwritten before any read; used
/// as the C operand of beta = 0 gemms, which matrixmultiply documents as
/// write-only.
pub(crate) fn write_only_vec<S: Scalar>(n: usize) -> Vec<S> {
    let mut buf: Vec<std::mem::MaybeUninit<S>> = Vec::with_capacity(n);
    // Safety: MaybeUninit needs no initialization; len equals capacity.
    unsafe {
        buf.set_len(n);
        let mut buf = std::mem::ManuallyDrop::new(buf);
        Vec::from_raw_parts(buf.as_mut_ptr() as *mut S, n, n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; n],
        }
    }

    /// A tensor whose storage is uninitialized; every element must be
    /// written before it is read. Internal use by the gemm-backed ops.
    pub(crate) fn write_only(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: write_only_vec(n),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// (channels, height, width) of a rank-3 tensor.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_normal(&mut self, rng: &mut crate::rng::Rng, std: f64) {
        for v in &mut self.data {
            *v = S::from_f64(rng.normal() * std);
        }
    }
}
