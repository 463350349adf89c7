use super::Scalar;

/// Strided matrix product `c = a·b + beta·c` where `c` is a dense `m×n` buffer.
///
/// Strides are `(row, col)` element offsets, so a transposed operand is just a
/// swapped stride pair.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    a_strides: (usize, usize),
    b: &[F],
    b_strides: (usize, usize),
    beta: F,
    c: &mut [F],
) {
    assert_eq!(c.len(), m * n, "gemm output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = *x * beta);
        return;
    }
    let last =
        |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, a_strides) < a.len(), "gemm lhs out of bounds");
    assert!(last(k, n, b_strides) < b.len(), "gemm rhs out of bounds");
    F::gemm_raw(
        m,
        k,
        n,
        a,
        (a_strides.0 as isize, a_strides.1 as isize),
        b,
        (b_strides.0 as isize, b_strides.1 as isize),
        beta,
        c,
    );
}

/// Max-subtracted softmax over a contiguous slice. Entries equal to `-inf` get
/// probability zero.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// `x - logsumexp(x)` over a contiguous slice, max-subtracted.
pub fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    for x in row.iter_mut() {
        *x = *x - lse;
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes `x` to zero mean / unit variance, then applies `gain` and `bias`.
/// Returns the reciprocal standard deviation used.
pub fn layer_norm_row<F: Scalar>(x: &[F], gain: &[F], bias: &[F], out: &mut [F]) -> F {
    let n = F::of(x.len() as f64);
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let rstd = F::one() / (var + F::of(LAYER_NORM_EPS)).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    rstd
}
