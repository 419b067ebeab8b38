//! Dense kernels on `c × h × w` row-major buffers.
//!
//! Convolutions are lowered to matrix products (im2col) and handed to
//! `matrixmultiply`'s dgemm.

/// `c = alpha * a * b + beta * c` for row-major operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches for the
    // strides used in this module (dense row-major or its transpose).
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
        );
    }
}

/// Unfolds 3×3 same-padded patches: row `i*9 + ky*3 + kx`, column `p`.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut cols = vec![0.0; cin * 9 * n];
    for i in 0..cin {
        let src = &input[i * n..(i + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(i * 9 + ky * 3 + kx) * n..(i * 9 + ky * 3 + kx + 1) * n];
                let (y0, y1) = valid_range(h, ky);
                let (x0, x1) = valid_range(w, kx);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulated into `gin`.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, gin: &mut [f64]) {
    let n = h * w;
    for i in 0..cin {
        let dst = &mut gin[i * n..(i + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(i * 9 + ky * 3 + kx) * n..(i * 9 + ky * 3 + kx + 1) * n];
                let (y0, y1) = valid_range(h, ky);
                let (x0, x1) = valid_range(w, kx);
                for y in y0..y1 {
                    let sy = y + ky - 1;
                    let d = &mut dst[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                    for (dv, sv) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

/// Output indices `t` for which `t + k - 1` lies in `0..len`.
#[inline]
fn valid_range(len: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1.min(len), len),
        1 => (0, len),
        _ => (0, len.saturating_sub(1)),
    }
}

/// Same-padded 3×3 convolution: `out[o] = b[o] + Σ_i w[o,i] * in[i]`.
/// `w` is laid out `[out][in][3][3]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let n = h * w;
    debug_assert_eq!(input.len(), cin * n);
    debug_assert_eq!(out.len(), cout * n);
    for (o, b) in bias.iter().enumerate().take(cout) {
        out[o * n..(o + 1) * n].fill(*b);
    }
    let cols = im2col(input, cin, h, w);
    let k = cin * 9;
    gemm(cout, k, n, weights, (k as isize, 1), &cols, (n as isize, 1), 1.0, out);
}

/// Backward of [`conv3x3`]. Accumulates into `gw`, `gb` and, when given,
/// `gin`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    cout: usize,
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gin: Option<&mut [f64]>,
) {
    let n = h * w;
    let k = cin * 9;
    for o in 0..cout {
        gb[o] += gout[o * n..(o + 1) * n].iter().sum::<f64>();
    }
    let cols = im2col(input, cin, h, w);
    // gw (cout × k) += gout (cout × n) · colsᵀ (n × k)
    gemm(cout, n, k, gout, (n as isize, 1), &cols, (1, n as isize), 1.0, gw);
    if let Some(gin) = gin {
        // gcols (k × n) = wᵀ (k × cout) · gout (cout × n)
        let mut gcols = cols;
        gemm(
            k,
            cout,
            n,
            weights,
            (1, k as isize),
            gout,
            (n as isize, 1),
            0.0,
            &mut gcols,
        );
        col2im(&gcols, cin, h, w, gin);
    }
}

/// Pointwise (1×1) convolution; `w` is `[out][in]`.
pub fn conv1x1(input: &[f64], cin: usize, n: usize, weights: &[f64], bias: &[f64], cout: usize, out: &mut [f64]) {
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for i in 0..cin {
            let wv = weights[o * cin + i];
            for (d, s) in dst.iter_mut().zip(&input[i * n..(i + 1) * n]) {
                *d += wv * s;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1x1_backward(
    input: &[f64],
    cin: usize,
    n: usize,
    weights: &[f64],
    cout: usize,
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gin: &mut [f64],
) {
    for o in 0..cout {
        let g = &gout[o * n..(o + 1) * n];
        gb[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            gw[o * cin + i] += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            let wv = weights[o * cin + i];
            for (d, gv) in gin[i * n..(i + 1) * n].iter_mut().zip(g) {
                *d += wv * gv;
            }
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

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// 2×2 average pooling; `h` and `w` must be even.
pub fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let a = 2 * y * w + 2 * x;
                dst[y * ow + x] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
            }
        }
    }
    out
}

/// Adds the pooling backward of `gout` (shape `c × h/2 × w/2`) into `gin`.
pub fn avg_pool2_backward(gout: &[f64], c: usize, h: usize, w: usize, gin: &mut [f64]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                gin[ch * h * w + y * w + x] += 0.25 * gout[ch * oh * ow + (y / 2) * ow + x / 2];
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling of a `c × h × w` buffer.
pub fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * oh * ow + y * ow + x] = input[ch * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Backward of [`upsample2`]: `gout` is `c × 2h × 2w`, result is `c × h × w`.
pub fn upsample2_backward(gout: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                gin[ch * h * w + (y / 2) * w + x / 2] += gout[ch * oh * ow + y * ow + x];
            }
        }
    }
    gin
}
