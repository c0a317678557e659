//! Dense f64 kernels. Matrices are row-major; weights are `in x out`.

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c = beta * c + a b` over strided views; `a` is `m x k`, `b` is `k x n`, `c` is `m x n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
        assert!(last(rsa, csa, m, k) < a.len() && last(rsb, csb, k, n) < b.len());
    }
    assert!((m - 1) * rsc + n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// `out[t] = b + x[t] W` for `rows` rows; `x` is `rows x n_in`, `w` is `n_in x n_out`.
pub fn linear(out: &mut [f64], x: &[f64], w: &[f64], b: &[f64], rows: usize, n_in: usize, n_out: usize) {
    for o in out[..rows * n_out].chunks_exact_mut(n_out) {
        o.copy_from_slice(b);
    }
    gemm(rows, n_in, n_out, x, n_in, 1, w, n_out, 1, 1.0, out, n_out);
}

/// Accumulates gradients of `linear`: `dx += dout W^T`, `dw += x^T dout`, `db += sum(dout)`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    n_in: usize,
    n_out: usize,
) {
    if let Some(dx) = dx {
        gemm(rows, n_out, n_in, dout, n_out, 1, w, 1, n_out, 1.0, dx, n_in);
    }
    gemm(n_in, rows, n_out, x, 1, n_in, dout, n_out, 1, 1.0, dw, n_out);
    for g in dout[..rows * n_out].chunks_exact(n_out) {
        axpy(1.0, g, db);
    }
}

/// Row-wise LayerNorm; stores per-row mean and reciprocal std.
pub fn layernorm(out: &mut [f64], mean: &mut [f64], rstd: &mut [f64], x: &[f64], g: &[f64], b: &[f64], d: usize) {
    for (t, xt) in x.chunks_exact(d).enumerate() {
        let m = xt.iter().sum::<f64>() / d as f64;
        let var = xt.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        mean[t] = m;
        rstd[t] = r;
        let o = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            o[i] = (xt[i] - m) * r * g[i] + b[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward(
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    x: &[f64],
    g: &[f64],
    mean: &[f64],
    rstd: &[f64],
    d: usize,
) {
    for (t, xt) in x.chunks_exact(d).enumerate() {
        let (m, r) = (mean[t], rstd[t]);
        let go = &dout[t * d..(t + 1) * d];
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..d {
            let n = (xt[i] - m) * r;
            let dn = g[i] * go[i];
            dnorm_mean += dn;
            dnorm_norm_mean += dn * n;
        }
        dnorm_mean /= d as f64;
        dnorm_norm_mean /= d as f64;
        let dxt = &mut dx[t * d..(t + 1) * d];
        for i in 0..d {
            let n = (xt[i] - m) * r;
            let dn = g[i] * go[i];
            db[i] += go[i];
            dg[i] += n * go[i];
            dxt[i] += (dn - dnorm_mean - n * dnorm_norm_mean) * r;
        }
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place softmax of one row.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
