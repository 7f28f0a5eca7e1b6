//! Raw compute loops shared by the tape ops. All buffers are row-major.

/// Dot product with four independent accumulators so the compiler can keep
/// SIMD lanes busy (a strict sequential sum would not vectorize).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let (x, y) = (&a[4 * i..4 * i + 4], &b[4 * i..4 * i + 4]);
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// out[m,n] = op(a)[m,k] * op(b)[k,n], where `ta`/`tb` transpose the operand
/// logically (no materialized transpose). `a` and `b` are read with the
/// dimensions they are stored in: if `ta`, `a` is stored as [k,m].
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    out: &mut [f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                let a_row = &a[i * k..(i + 1) * k];
                for (l, &av) in a_row.iter().enumerate() {
                    let b_row = &b[l * n..(l + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            // b stored [n,k]; out[i,j] = dot(a_row_i, b_row_j)
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let b_row = &b[j * k..(j + 1) * k];
                    out[i * n + j] += dot(a_row, b_row);
                }
            }
        }
        (true, false) => {
            // a stored [k,m]; accumulate rank-1 updates
            for l in 0..k {
                let a_row = &a[l * m..(l + 1) * m];
                let b_row = &b[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = a_row[i];
                    if av == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // a stored [k,m], b stored [n,k]
            for i in 0..m {
                for j in 0..n {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[l * m + i] * b_row[l];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

/// Cross-correlation with zero padding.
/// x: [ci,h,w], kernel: [co,ci,kh,kw], out: [co,ho,wo].
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    out: &mut [f64],
    x: &[f64],
    kernel: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(out.len(), co * ho * wo);
    for o in 0..co {
        for c in 0..ci {
            let x_plane = &x[c * h * w..(c + 1) * h * w];
            let k_plane = &kernel[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for a in 0..kh {
                        let u = (i * stride + a) as isize - pad as isize;
                        if u < 0 || u >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[u as usize * w..(u as usize + 1) * w];
                        let k_row = &k_plane[a * kw..(a + 1) * kw];
                        for b in 0..kw {
                            let v = (j * stride + b) as isize - pad as isize;
                            if v < 0 || v >= w as isize {
                                continue;
                            }
                            acc += x_row[v as usize] * k_row[b];
                        }
                    }
                    out[(o * ho + i) * wo + j] += acc;
                }
            }
        }
    }
}

/// Transposed convolution (the adjoint of `conv2d` with the same geometry).
/// g: [co,ho,wo], kernel: [co,ci,kh,kw], out: [ci,h,w].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose(
    out: &mut [f64],
    g: &[f64],
    kernel: &[f64],
    co: usize,
    ho: usize,
    wo: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    debug_assert_eq!(out.len(), ci * h * w);
    debug_assert_eq!(g.len(), co * ho * wo);
    for o in 0..co {
        let g_plane = &g[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..ci {
            let k_plane = &kernel[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
            let out_plane = &mut out[c * h * w..(c + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let gv = g_plane[i * wo + j];
                    if gv == 0.0 {
                        continue;
                    }
                    for a in 0..kh {
                        let u = (i * stride + a) as isize - pad as isize;
                        if u < 0 || u >= h as isize {
                            continue;
                        }
                        for b in 0..kw {
                            let v = (j * stride + b) as isize - pad as isize;
                            if v < 0 || v >= w as isize {
                                continue;
                            }
                            out_plane[u as usize * w + v as usize] += gv * k_plane[a * kw + b];
                        }
                    }
                }
            }
        }
    }
}

/// Kernel gradient of `conv2d`: dk[o,c,a,b] = sum_{i,j} g[o,i,j] * x[c, i*s-p+a, j*s-p+b].
/// x: [ci,h,w], g: [co,ho,wo], out: [co,ci,kh,kw].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad(
    out: &mut [f64],
    x: &[f64],
    g: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    ho: usize,
    wo: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    debug_assert_eq!(out.len(), co * ci * kh * kw);
    for o in 0..co {
        let g_plane = &g[o * ho * wo..(o + 1) * ho * wo];
        for c in 0..ci {
            let x_plane = &x[c * h * w..(c + 1) * h * w];
            let k_plane = &mut out[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
            for a in 0..kh {
                for b in 0..kw {
                    let mut acc = 0.0;
                    for i in 0..ho {
                        let u = (i * stride + a) as isize - pad as isize;
                        if u < 0 || u >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[u as usize * w..(u as usize + 1) * w];
                        let g_row = &g_plane[i * wo..(i + 1) * wo];
                        for j in 0..wo {
                            let v = (j * stride + b) as isize - pad as isize;
                            if v < 0 || v >= w as isize {
                                continue;
                            }
                            acc += g_row[j] * x_row[v as usize];
                        }
                    }
                    k_plane[a * kw + b] += acc;
                }
            }
        }
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub fn conv_transpose_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}
