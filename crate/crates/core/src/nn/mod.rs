//! A small trainable convolutional classifier.
//!
//! The network consumes an image together with a binary visibility mask. The
//! mask is read only by a leading sparsity-invariant convolution, which
//! renormalizes every kernel window by the number of visible pixels under it.
//! All later layers are ordinary.
//!
//! Parameters are generic over [`Real`] so the same code runs in `f32` for
//! training and inference and in `f64` for finite-difference checks.

mod checkpoint;
mod engine;
mod layer;
mod train;

pub use checkpoint::{decode_params, encode_params, load_params, save_params, CHECKPOINT_MAGIC};
pub use engine::{
    conv_forward, loss_and_gradients, sparse_conv_forward, BatchInput, Gradients, SPARSE_EPSILON,
};
pub use layer::{ConvSpec, InputShape, Layer, LayerKind, ModelParams};
pub use train::{accuracy, train, EpochMetrics, TrainConfig, TrainOutcome};

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a * b + beta * c` over strided storage.
    ///
    /// # Safety
    /// All strided accesses implied by the dimensions must be in bounds.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
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

/// Storage order of a matrix operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Order {
    /// The logical `rows x cols` matrix is stored row-major.
    Plain,
    /// The buffer holds the row-major transpose of the logical matrix.
    Transposed,
}

impl Order {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Order::Plain => (cols as isize, 1),
            Order::Transposed => (1, rows as isize),
        }
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_order: Order,
    b: &[T],
    b_order: Order,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a_order.strides(m, k);
    let (rsb, csb) = b_order.strides(k, n);
    // SAFETY: the length assertions above cover every index reachable with
    // these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
