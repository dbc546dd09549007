//! Row-major dense helpers over `matrixmultiply`.

/// `C = alpha * A B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(max_index(m, k, rsa, csa) <= a.len());
    debug_assert!(max_index(k, n, rsb, csb) <= b.len());
    debug_assert!(max_index(m, n, rsc, csc) <= c.len());
    // SAFETY: index ranges are checked above in debug builds and by construction in callers.
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
            rsc,
            csc,
        );
    }
}

fn max_index(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    if r == 0 || c == 0 {
        return 0;
    }
    ((r - 1) as isize * rs + (c - 1) as isize * cs) as usize + 1
}

/// `Y (n×out) = X (n×in) W (in×out)`, overwriting `y`.
pub fn matmul(x: &[f64], w: &[f64], n: usize, i: usize, o: usize, y: &mut [f64]) {
    gemm(n, i, o, 1.0, x, i as isize, 1, w, o as isize, 1, 0.0, y, o as isize, 1);
}

/// `dW (in×out) += Xᵀ dY`.
pub fn matmul_at_b_acc(x: &[f64], dy: &[f64], n: usize, i: usize, o: usize, dw: &mut [f64]) {
    gemm(i, n, o, 1.0, x, 1, i as isize, dy, o as isize, 1, 1.0, dw, o as isize, 1);
}

/// `dX (n×in) += dY Wᵀ`.
pub fn matmul_a_bt_acc(dy: &[f64], w: &[f64], n: usize, i: usize, o: usize, dx: &mut [f64]) {
    gemm(n, o, i, 1.0, dy, o as isize, 1, w, 1, o as isize, 1.0, dx, i as isize, 1);
}
