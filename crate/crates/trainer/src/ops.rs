//! Dense kernels on row-major `f32` buffers.

/// Operand layout for [`matmul`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Use the buffer as stored (`rows × cols`).
    Normal,
    /// Use the transpose of the stored buffer.
    Transposed,
}

/// `c = beta·c + a·b` where `a` is `m×k` and `b` is `k×n` after applying
/// their layouts. `a_cols`/`b_cols` are the stored row lengths.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the kernel touches.
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
        );
    }
}

/// `y[r] += bias` for every row.
pub fn add_bias(y: &mut [f32], bias: &[f32]) {
    for row in y.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

/// Column sums of `dy` accumulated into `db`.
pub fn bias_grad(dy: &[f32], db: &mut [f32]) {
    for row in dy.chunks_exact(db.len()) {
        db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
    }
}

pub const NORM_EPS: f32 = 1e-6;

/// Row-wise RMS normalisation with gain. Returns the normalised rows
/// (before the gain) and the per-row RMS, both needed for the backward.
pub fn rmsnorm(x: &[f32], gain: &[f32], y: &mut [f32]) -> (Vec<f32>, Vec<f32>) {
    let n = gain.len();
    let rows = x.len() / n;
    let mut xhat = vec![0.0; x.len()];
    let mut rms = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let ms = xr.iter().map(|v| v * v).sum::<f32>() / n as f32;
        let s = (ms + NORM_EPS).sqrt();
        rms[r] = s;
        for i in 0..n {
            let h = xr[i] / s;
            xhat[r * n + i] = h;
            y[r * n + i] = h * gain[i];
        }
    }
    (xhat, rms)
}

/// Backward of [`rmsnorm`]: accumulates the gain gradient and writes (or
/// adds, when `accumulate`) the input gradient.
pub fn rmsnorm_backward(
    dy: &[f32],
    xhat: &[f32],
    rms: &[f32],
    gain: &[f32],
    dgain: &mut [f32],
    dx: &mut [f32],
    accumulate: bool,
) {
    let n = gain.len();
    for (r, s) in rms.iter().enumerate() {
        let dyr = &dy[r * n..(r + 1) * n];
        let xr = &xhat[r * n..(r + 1) * n];
        let mut dot = 0.0f32;
        for i in 0..n {
            dgain[i] += dyr[i] * xr[i];
            dot += dyr[i] * gain[i] * xr[i];
        }
        let mean = dot / n as f32;
        for i in 0..n {
            let g = (dyr[i] * gain[i] - xr[i] * mean) / s;
            if accumulate {
                dx[r * n + i] += g;
            } else {
                dx[r * n + i] = g;
            }
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/π)

pub fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_grad(u: f32) -> f32 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Root mean square of a buffer (0 for empty input).
pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}
