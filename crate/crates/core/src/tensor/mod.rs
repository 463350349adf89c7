//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! Tensors are generic over [`Scalar`] so the same model code runs in single
//! precision for training and in double precision for gradient checks and
//! numeric oracles.

mod kernels;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

pub use kernels::{gemm, layer_norm_row, log_softmax_in_place, softmax_in_place};
pub use tape::{Gradients, Tape, Var};

/// Floating point element type of a [`Tensor`].
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` for an `m×k` by `k×n` product with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        // SAFETY: callers (`kernels::gemm`) check that every strided access stays
        // within the slices, and `c` is a dense m×n buffer that does not alias a or b.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
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
            )
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        // Double precision mostly runs small oracle models, where packing
        // costs more than the product itself.
        if m * k * n <= SMALL_GEMM {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports AVX2.
                unsafe { naive_gemm_avx2(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c) };
                return;
            }
            naive_gemm(m, k, n, a, (rsa, csa), b, (rsb, csb), beta, c);
            return;
        }
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
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
            )
        }
    }
}

/// Largest `m·k·n` multiplied without `matrixmultiply`.
const SMALL_GEMM: usize = 32 * 32 * 32;

/// [`naive_gemm`] compiled with wider vectors. Lanes run across output
/// columns, so every element sees the same operations in the same order and
/// the result matches the portable build bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn naive_gemm_avx2(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    strides_a: (isize, isize),
    b: &[f64],
    strides_b: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    naive_gemm(m, k, n, a, strides_a, b, strides_b, beta, c)
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn naive_gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    (rsa, csa): (isize, isize),
    b: &[F],
    (rsb, csb): (isize, isize),
    beta: F,
    c: &mut [F],
) {
    let at = |i: usize, j: usize| a[(i as isize * rsa + j as isize * csa) as usize];
    let bt = |i: usize, j: usize| b[(i as isize * rsb + j as isize * csb) as usize];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == F::zero() {
            row.fill(F::zero());
        } else {
            row.iter_mut().for_each(|x| *x = *x * beta);
        }
        if csb == 1 {
            // Rows of b are contiguous.
            for p in 0..k {
                let x = at(i, p);
                let start = p * rsb as usize;
                for (out, &y) in row.iter_mut().zip(&b[start..start + n]) {
                    *out = *out + x * y;
                }
            }
        } else if rsb == 1 && csa == 1 {
            // Columns of b and rows of a are contiguous.
            let ar = &a[i * rsa as usize..i * rsa as usize + k];
            for (j, out) in row.iter_mut().enumerate() {
                let start = j * csb as usize;
                let mut acc = F::zero();
                for (&x, &y) in ar.iter().zip(&b[start..start + k]) {
                    acc = acc + x * y;
                }
                *out = *out + acc;
            }
        } else {
            for p in 0..k {
                let x = at(i, p);
                for (j, out) in row.iter_mut().enumerate() {
                    *out = *out + x * bt(p, j);
                }
            }
        }
    }
}

/// Most axes a [`Tensor`] may have.
pub const MAX_RANK: usize = 4;

/// Extents kept inline so creating a tensor costs one allocation.
#[derive(Clone, Copy, PartialEq, Eq)]
struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() > MAX_RANK {
            return Err(Error::Dimension(format!(
                "shape {dims:?} has more than {MAX_RANK} axes"
            )));
        }
        let mut out = [0; MAX_RANK];
        out[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            dims: out,
            rank: dims.len(),
        })
    }

    fn as_slice(&self) -> &[usize] {
        &self.dims[..self.rank]
    }
}

impl Debug for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.as_slice().fmt(f)
    }
}

/// A dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Shape,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl AsRef<[usize]>, data: Vec<F>) -> Result<Self> {
        let shape = shape.as_ref();
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: Shape::new(shape)?,
            data,
            grad: None,
        })
    }

    /// # Panics
    ///
    /// If `shape` has more than [`MAX_RANK`] axes.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: Shape::new(shape).expect("rank within MAX_RANK"),
            data: vec![F::zero(); numel],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Shape::new(&[1]).expect("rank 1"),
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(shape: impl AsRef<[usize]>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        self.shape.as_slice()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix (all leading axes folded).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape().last().expect("tensor has at least one axis")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of shape {:?} is {}",
                self.shape, self.data[i]
            ))),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| G::of(x.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| G::of(x.as_f64())).collect()),
        }
    }
}
