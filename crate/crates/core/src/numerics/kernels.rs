//! Slice-level kernels shared by the tape ops and the value-level `Tensor` API.

/// `c = op(a) · op(b) + beta · c` for contiguous row-major operands.
///
/// With `ta`, `a` is stored `k × m`; with `tb`, `b` is stored `n × k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize, 1, beta);
}

/// Strided GEMM over sub-views of larger buffers.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        extent(m, k, rsa, csa) <= a.len(),
        "gemm: lhs view out of bounds"
    );
    assert!(
        extent(k, n, rsb, csb) <= b.len(),
        "gemm: rhs view out of bounds"
    );
    assert!(
        extent(m, n, rsc, csc) <= c.len(),
        "gemm: output view out of bounds"
    );
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i as isize * rsc + j as isize * csc;
                c[idx as usize] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every addressed element lies inside the slices,
    // strides are non-negative, and `c` does not alias `a` or `b` (distinct borrows).
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
            rsc,
            csc,
        );
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

pub fn softmax_rows_inplace(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        softmax_inplace(&mut x[r * cols..(r + 1) * cols]);
    }
}

pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Returns `log(sum(exp(row)))`, stabilized.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise layer norm; `saved`, when given, receives `(xhat, inv_std)`.
pub fn layer_norm_forward(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    d: usize,
    out: &mut [f64],
    mut saved: Option<(&mut [f64], &mut [f64])>,
) {
    let rows = x.len() / d;
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let xh = (xr[j] - mean) * inv;
            out[r * d + j] = gain[j] * xh + bias[j];
            if let Some((xhat, _)) = saved.as_mut() {
                xhat[r * d + j] = xh;
            }
        }
        if let Some((_, invs)) = saved.as_mut() {
            invs[r] = inv;
        }
    }
}

const GELU_C: f64 = 0.044715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}
