//! Dense row-major kernels on top of `matrixmultiply`.

/// `C = alpha * op(A) * op(B) + beta * C` where `op(A)` is `m×k`, `op(B)` is
/// `k×n` and `C` is `m×n`, all row-major. A transposed operand is passed in
/// its stored (untransposed) layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// `Y = X Wᵀ + b` for `X: rows×in`, `W: out×in`.
pub fn linear(x: &[f64], w: &[f64], bias: Option<&[f64]>, rows: usize, input: usize, output: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * output];
    linear_into(x, w, bias, rows, input, output, &mut y);
    y
}

/// [`linear`] into a caller-provided `rows×out` buffer.
pub fn linear_into(x: &[f64], w: &[f64], bias: Option<&[f64]>, rows: usize, input: usize, output: usize, y: &mut [f64]) {
    gemm(rows, input, output, 1.0, x, false, w, true, 0.0, y);
    if let Some(b) = bias {
        for row in y[..rows * output].chunks_exact_mut(output) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}

/// Backward of [`linear`]: accumulates `dW += dYᵀ X`, `db += colsum(dY)` and
/// returns `dX = dY W` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    rows: usize,
    input: usize,
    output: usize,
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(output, rows, input, 1.0, dy, true, x, false, 1.0, dw);
    if let Some(db) = db {
        for row in dy.chunks_exact(output) {
            for (g, v) in db.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * input];
        gemm(rows, output, input, 1.0, dy, false, w, false, 0.0, &mut dx);
        dx
    })
}
