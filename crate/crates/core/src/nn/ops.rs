//! Dense kernels on row-major `f64` buffers.

/// Strided view of a matrix inside a slice.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    /// Row-major matrix with `cols` columns.
    pub fn rm(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn rm_t(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    pub fn strided(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }

    fn span(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

const NAIVE_LIMIT: usize = 2048;

/// `C = alpha·A·B + beta·C` for `A: m×k`, `B: k×n`, `C: m×n` (row stride `rsc`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], rsc: usize, csc: usize) {
    assert!(a.span(m, k) <= a.data.len(), "A out of bounds");
    assert!(b.span(k, n) <= b.data.len(), "B out of bounds");
    let c_span = if m == 0 || n == 0 { 0 } else { (m - 1) * rsc + (n - 1) * csc + 1 };
    assert!(c_span <= c.len(), "C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if m * k * n <= NAIVE_LIMIT {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.data[i * a.rs + p * a.cs] * b.data[p * b.rs + j * b.cs];
                }
                let dst = &mut c[i * rsc + j * csc];
                *dst = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * *dst };
            }
        }
        return;
    }
    // SAFETY: the spans of all three operands were bounds-checked above and
    // strides are non-negative, so every address the kernel touches lies
    // inside the borrowed slices; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `A·B` for row-major `A: m×k`, `B: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, View::rm(a, k), View::rm(b, n), 0.0, &mut c, n, 1);
    c
}

/// `out += Aᵀ·D` for row-major `A: m×k`, `D: m×n`; `out: k×n`.
pub fn acc_at_b(a: &[f64], d: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    gemm(k, m, n, 1.0, View::rm_t(a, k), View::rm(d, n), 1.0, out, n, 1);
}

/// `D·Wᵀ` for row-major `D: m×n`, `W: k×n`; result `m×k`.
pub fn matmul_bt(d: &[f64], w: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    gemm(m, n, k, 1.0, View::rm(d, n), View::rm_t(w, n), 0.0, &mut c, k, 1);
    c
}

/// Column sums of a row-major `rows×cols` matrix, accumulated into `out`.
pub fn acc_col_sums(x: &[f64], cols: usize, out: &mut [f64]) {
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through one `exp`, with an odd series near zero where the
/// exponential form loses digits. Agrees with libm to ~1e-14 relative.
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a < 0.03 {
        let x2 = x * x;
        return x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0 + x2 * (62.0 / 2835.0)))));
    }
    if a > 20.0 {
        return 1.0f64.copysign(x);
    }
    let e = (2.0 * a).exp();
    (1.0 - 2.0 / (e + 1.0)).copysign(x)
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(inner);
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Reorders rows `(b, i, j)` of a `[outer, n_i, n_j, cols]` tensor into `(b, j, i)`.
pub fn swap_middle(x: &[f64], outer: usize, n_i: usize, n_j: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..outer {
        for i in 0..n_i {
            for j in 0..n_j {
                let src = ((b * n_i + i) * n_j + j) * cols;
                let dst = ((b * n_j + j) * n_i + i) * cols;
                out[dst..dst + cols].copy_from_slice(&x[src..src + cols]);
            }
        }
    }
    out
}
