//! Raw numeric kernels behind the recorded primitives.
//!
//! Every reduction accumulates left-to-right in an order that depends only on
//! the operation and its shapes, never on thread count. Parallel sections
//! split work across *independent* output elements only, so results are
//! bit-identical for any worker count.

use crate::threads;

/// `out[i][j] += sum_k a[i][k] * b[k][j]` with `a: [m,k]`, `b: [k,n]` row-major.
///
/// The k-loop is the accumulation loop and runs in ascending order for every
/// output element; the j-loop is innermost so it vectorizes.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let body = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    threads::for_each_chunk(out, n, body);
}

pub fn transpose2d(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Output spatial extent of a convolution/pool along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lays out one image as a `[cin*kh*kw, ho*wo]` patch matrix (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let t = ho * wo;
    debug_assert_eq!(cols.len(), cin * kh * kw * t);
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * t;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a `[cin*kh*kw, ho*wo]` patch matrix back onto an image,
/// accumulating overlaps in fixed (patch-row, position) order.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let t = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * t;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[n] = w_mat . im2col(x[n])` for every image, parallel over images.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    _n: usize,
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let t = ho * wo;
    let ck = cin * kh * kw;
    let in_sz = cin * h * w;
    threads::for_each_chunk(out, cout * t, |img, ochunk| {
        let mut cols = vec![0.0; ck * t];
        im2col(&x[img * in_sz..(img + 1) * in_sz], cin, h, w, kh, kw, stride, pad, &mut cols);
        matmul_acc(wgt, &cols, cout, ck, t, ochunk);
    });
}

/// Gradient of conv output w.r.t. its input: `dx[n] = col2im(w^T . g[n])`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_vjp(
    g: &[f64],
    n: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    wgt: &[f64],
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
    dx: &mut [f64],
) {
    let _ = n;
    let t = ho * wo;
    let ck = cin * kh * kw;
    let mut wt = vec![0.0; ck * cout];
    transpose2d(wgt, cout, ck, &mut wt);
    let in_sz = cin * in_h * in_w;
    threads::for_each_chunk(dx, in_sz, |img, dchunk| {
        let mut dcols = vec![0.0; ck * t];
        matmul_acc(&wt, &g[img * cout * t..(img + 1) * cout * t], ck, cout, t, &mut dcols);
        col2im_acc(&dcols, cin, in_h, in_w, kh, kw, stride, pad, dchunk);
    });
}

/// Gradient of conv output w.r.t. the kernel. Per-image partials are reduced
/// in ascending image order so the result is independent of worker count.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_weight_vjp(
    g: &[f64],
    n: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    x: &[f64],
    cin: usize,
    in_h: usize,
    in_w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dw: &mut [f64],
) {
    let t = ho * wo;
    let ck = cin * kh * kw;
    let in_sz = cin * in_h * in_w;
    let mut partials = vec![0.0; n * cout * ck];
    threads::for_each_chunk(&mut partials, cout * ck, |img, part| {
        let mut cols = vec![0.0; ck * t];
        im2col(&x[img * in_sz..(img + 1) * in_sz], cin, in_h, in_w, kh, kw, stride, pad, &mut cols);
        let mut colst = vec![0.0; t * ck];
        transpose2d(&cols, ck, t, &mut colst);
        matmul_acc(&g[img * cout * t..(img + 1) * cout * t], &colst, cout, t, ck, part);
    });
    for img in 0..n {
        let part = &partials[img * cout * ck..(img + 1) * cout * ck];
        for (d, p) in dw.iter_mut().zip(part) {
            *d += p;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool2d_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    out: &mut [f64],
) {
    let _ = n;
    let ho = conv_out_extent(h, k, s, 0);
    let wo = conv_out_extent(w, k, s, 0);
    let inv = 1.0 / (k * k) as f64;
    threads::for_each_chunk(out, c * ho * wo, |img, ochunk| {
        let base = img * c * h * w;
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = oy * s + ky;
                        let row = base + (ci * h + iy) * w + ox * s;
                        for kx in 0..k {
                            acc += x[row + kx];
                        }
                    }
                    ochunk[(ci * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool2d_vjp(
    g: &[f64],
    n: usize,
    c: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    in_h: usize,
    in_w: usize,
    dx: &mut [f64],
) {
    let _ = n;
    let inv = 1.0 / (k * k) as f64;
    threads::for_each_chunk(dx, c * in_h * in_w, |img, dchunk| {
        let gbase = img * c * ho * wo;
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = g[gbase + (ci * ho + oy) * wo + ox] * inv;
                    for ky in 0..k {
                        let iy = oy * s + ky;
                        let row = (ci * in_h + iy) * in_w + ox * s;
                        for kx in 0..k {
                            dchunk[row + kx] += gv;
                        }
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] x [5 6; 7 8] = [19 22; 43 50]
        let a = [1., 2., 3., 4.];
        let b = [5., 6., 7., 8.];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19., 22., 43., 50.]);
    }

    #[test]
    fn conv_ones_3x3_pad1() {
        // all-ones 3x3 input, all-ones 3x3 kernel, stride 1, pad 1:
        // center sees 9 ones, corners see 4.
        let x = [1.0; 9];
        let w = [1.0; 9];
        let mut y = [0.0; 9];
        conv2d_forward(&x, 1, 1, 3, 3, &w, 1, 3, 3, 1, 1, &mut y);
        assert_eq!(y[4], 9.0);
        assert_eq!(y[0], 4.0);
        assert_eq!(y[2], 4.0);
        assert_eq!(y[6], 4.0);
        assert_eq!(y[8], 4.0);
        assert_eq!(y[1], 6.0);
    }

    #[test]
    fn avgpool_2x2() {
        let x = [1., 2., 3., 4.]; // 2x2 image
        let mut y = [0.0; 1];
        avgpool2d_forward(&x, 1, 1, 2, 2, 2, 2, &mut y);
        assert_eq!(y[0], 2.5);
    }

    #[test]
    fn conv_adjoint_identity() {
        // <g, conv(x,w)> == <conv_input_vjp(g,w), x> == <conv_weight_vjp(g,x), w>
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (n, cin, h, w, cout, kh, kw, s, p) = (2, 3, 5, 4, 2, 3, 3, 1, 1);
        let ho = conv_out_extent(h, kh, s, p);
        let wo = conv_out_extent(w, kw, s, p);
        let x: Vec<f64> = (0..n * cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wg: Vec<f64> = (0..cout * cin * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..n * cout * ho * wo).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut y = vec![0.0; n * cout * ho * wo];
        conv2d_forward(&x, n, cin, h, w, &wg, cout, kh, kw, s, p, &mut y);
        let lhs: f64 = g.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut dx = vec![0.0; x.len()];
        conv2d_input_vjp(&g, n, cout, ho, wo, &wg, cin, kh, kw, s, p, h, w, &mut dx);
        let mid: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();

        let mut dw = vec![0.0; wg.len()];
        conv2d_weight_vjp(&g, n, cout, ho, wo, &x, cin, h, w, kh, kw, s, p, &mut dw);
        let rhs: f64 = dw.iter().zip(&wg).map(|(a, b)| a * b).sum();

        assert!((lhs - mid).abs() < 1e-10, "{lhs} vs {mid}");
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
