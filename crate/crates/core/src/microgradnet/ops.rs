//! Batched layer kernels on flat NCHW buffers.

use super::tensor::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }
    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (k, plane_out) = (g.k, g.out_plane());
    for ci in 0..g.cin {
        let xc = &x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * plane_out..][..plane_out];
                for oh in 0..g.ho {
                    let ih = (oh + kh) as isize - g.pad_t as isize;
                    let dst = &mut row[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow + kw) as isize - g.pad_l as isize;
                        *d = if iw < 0 || iw >= g.w as isize {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, plane_out) = (g.k, g.out_plane());
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * plane_out..][..plane_out];
                for oh in 0..g.ho {
                    let ih = (oh + kh) as isize - g.pad_t as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow + kw) as isize - g.pad_l as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] = dst[iw as usize] + row[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Regular convolution, stride 1: `w` is `[cout, cin, k, k]`.
pub fn conv2d<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let mut y = vec![T::zero(); g.n * g.cout * plane];
    if g.k == 1 && g.pad_t == 0 && g.pad_l == 0 {
        for n in 0..g.n {
            let xn = &x[n * g.cin * plane..(n + 1) * g.cin * plane];
            matmul(
                g.cout,
                g.cin,
                plane,
                w,
                false,
                xn,
                false,
                &mut y[n * g.cout * plane..(n + 1) * g.cout * plane],
                false,
            );
        }
        return y;
    }
    let mut col = vec![T::zero(); rows * plane];
    for n in 0..g.n {
        im2col(
            &x[n * g.cin * g.in_plane()..(n + 1) * g.cin * g.in_plane()],
            g,
            &mut col,
        );
        matmul(
            g.cout,
            rows,
            plane,
            w,
            false,
            &col,
            false,
            &mut y[n * g.cout * plane..(n + 1) * g.cout * plane],
            false,
        );
    }
    y
}

/// Gradients of [`conv2d`]: returns `(d_input, d_weight)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Vec<T>, Vec<T>) {
    let (rows, plane, in_len) = (g.col_rows(), g.out_plane(), g.cin * g.in_plane());
    let mut gw = vec![T::zero(); g.cout * rows];
    let mut gx = if need_input {
        vec![T::zero(); g.n * in_len]
    } else {
        Vec::new()
    };
    let direct = g.k == 1 && g.pad_t == 0 && g.pad_l == 0;
    let mut col = vec![T::zero(); rows * plane];
    for n in 0..g.n {
        let gyn = &gy[n * g.cout * plane..(n + 1) * g.cout * plane];
        let xn = &x[n * in_len..(n + 1) * in_len];
        let src: &[T] = if direct {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        matmul(g.cout, plane, rows, gyn, false, src, true, &mut gw, true);
        if need_input {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            if direct {
                matmul(rows, g.cout, plane, w, true, gyn, false, gxn, false);
            } else {
                matmul(rows, g.cout, plane, w, true, gyn, false, &mut col, false);
                col2im(&col, g, gxn);
            }
        }
    }
    (gx, gw)
}

/// Depthwise convolution with one `k x k` filter per channel (`cout == cin`).
pub fn depthwise<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut y = vec![T::zero(); g.n * g.cin * g.out_plane()];
    for n in 0..g.n {
        for c in 0..g.cin {
            let xc = &x[(n * g.cin + c) * g.in_plane()..][..g.in_plane()];
            let wc = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
            let yc = &mut y[(n * g.cin + c) * g.out_plane()..][..g.out_plane()];
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = T::zero();
                    for kh in 0..g.k {
                        let ih = (oh + kh) as isize - g.pad_t as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for kw in 0..g.k {
                            let iw = (ow + kw) as isize - g.pad_l as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                acc = acc + wc[kh * g.k + kw] * xc[ih as usize * g.w + iw as usize];
                            }
                        }
                    }
                    yc[oh * g.wo + ow] = acc;
                }
            }
        }
    }
    y
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); g.cin * g.k * g.k];
    let mut gx = if need_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        for c in 0..g.cin {
            let base_in = (n * g.cin + c) * g.in_plane();
            let xc = &x[base_in..][..g.in_plane()];
            let wc = &w[c * g.k * g.k..(c + 1) * g.k * g.k];
            let gyc = &gy[(n * g.cin + c) * g.out_plane()..][..g.out_plane()];
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let d = gyc[oh * g.wo + ow];
                    for kh in 0..g.k {
                        let ih = (oh + kh) as isize - g.pad_t as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for kw in 0..g.k {
                            let iw = (ow + kw) as isize - g.pad_l as isize;
                            if iw >= 0 && (iw as usize) < g.w {
                                let idx = ih as usize * g.w + iw as usize;
                                let wi = c * g.k * g.k + kh * g.k + kw;
                                gw[wi] = gw[wi] + d * xc[idx];
                                if need_input {
                                    gx[base_in + idx] = gx[base_in + idx] + d * wc[kh * g.k + kw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// `y[n, :] = x[n, :] * w` with `w` stored `[fan_in, fan_out]`.
pub fn dense<T: Scalar>(x: &[T], w: &[T], n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * fan_out];
    matmul(n, fan_in, fan_out, x, false, w, false, &mut y, false);
    y
}

pub fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    need_input: bool,
) -> (Vec<T>, Vec<T>) {
    let mut gw = vec![T::zero(); fan_in * fan_out];
    matmul(fan_in, n, fan_out, x, true, gy, false, &mut gw, false);
    let mut gx = Vec::new();
    if need_input {
        gx = vec![T::zero(); n * fan_in];
        matmul(n, fan_out, fan_in, gy, false, w, true, &mut gx, false);
    }
    (gx, gw)
}

/// Max pooling with window = stride = `win`; partial windows at the border
/// are kept. Returns the output and the flat input index of each maximum.
pub fn max_pool<T: Scalar>(
    x: &[T],
    n_c: usize,
    h: usize,
    w: usize,
    win: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h.div_ceil(win), w.div_ceil(win));
    let mut y = Vec::with_capacity(n_c * ho * wo);
    let mut arg = Vec::with_capacity(n_c * ho * wo);
    for p in 0..n_c {
        let base = p * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best_i = base + oh * win * w + ow * win;
                let mut best = x[best_i];
                for ih in oh * win..((oh + 1) * win).min(h) {
                    for iw in ow * win..((ow + 1) * win).min(w) {
                        let i = base + ih * w + iw;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}

/// Max over channels: `[n, c, h, w] -> [n, 1, h, w]`.
pub fn channel_max<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(n * plane);
    let mut arg = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best_i = b * c * plane + p;
            for ch in 1..c {
                let i = (b * c + ch) * plane + p;
                if x[i] > x[best_i] {
                    best_i = i;
                }
            }
            y.push(x[best_i]);
            arg.push(best_i);
        }
    }
    (y, arg)
}

/// Scatter-add `gy` through argmax indices into an input-sized gradient.
pub fn route_grad<T: Scalar>(gy: &[T], arg: &[usize], in_len: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); in_len];
    for (&g, &i) in gy.iter().zip(arg) {
        gx[i] = gx[i] + g;
    }
    gx
}

pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics per channel over `(n, h, w)`, biased variance.
pub fn bn_stats<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> BnStats<T> {
    let m = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s = s + x[(b * c + ch) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for b in 0..n {
            for &xi in &x[(b * c + ch) * plane..][..plane] {
                v = v + (xi - mu) * (xi - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    BnStats { mean, var }
}

/// Normalizes with the given statistics; returns `(y, x_hat, inv_std)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_apply<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    plane: usize,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Backward through batch-statistics normalization; returns `(dx, dgamma, dbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward_batch<T: Scalar>(
    gy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    plane: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(n * plane).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] = dgamma[ch] + gy[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + gy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch] / m;
            for i in off..off + plane {
                dx[i] = scale * (m * gy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        same: bool,
    ) -> ConvGeom {
        let (pt, ho) = if same {
            ((k - 1) / 2, h)
        } else {
            (0, h - k + 1)
        };
        let (pl, wo) = if same {
            ((k - 1) / 2, w)
        } else {
            (0, w - k + 1)
        };
        ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            pad_t: pt,
            pad_l: pl,
            ho,
            wo,
        }
    }

    /// Direct six-deep loop nest, independent of im2col/GEMM.
    fn conv_reference(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut y = vec![0.0; g.n * g.cout * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        let mut acc = 0.0;
                        for ci in 0..g.cin {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let ih = oh as isize + kh as isize - g.pad_t as isize;
                                    let iw = ow as isize + kw as isize - g.pad_l as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < g.h
                                        && (iw as usize) < g.w
                                    {
                                        acc += w[((co * g.cin + ci) * g.k + kh) * g.k + kw]
                                            * x[((n * g.cin + ci) * g.h + ih as usize) * g.w
                                                + iw as usize];
                                    }
                                }
                            }
                        }
                        y[((n * g.cout + co) * g.ho + oh) * g.wo + ow] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn gemm_conv_matches_loop_nest() {
        for &(k, same) in &[(3, true), (2, true), (4, true), (3, false), (1, true)] {
            let g = geom(2, 3, 6, 5, 4, k, same);
            let x: Vec<f64> = (0..g.n * g.cin * g.h * g.w)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
                .collect();
            let w: Vec<f64> = (0..g.cout * g.cin * k * k)
                .map(|i| ((i * 17 % 7) as f64 - 3.0) / 5.0)
                .collect();
            let fast = conv2d(&x, &w, &g);
            let slow = conv_reference(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} same={same}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_3x3_same_on_28x28_gives_8_maps_of_28x28() {
        let g = geom(1, 1, 28, 28, 8, 3, true);
        let x = vec![1.0f32; 28 * 28];
        let w = vec![0.1f32; 8 * 9];
        let y = conv2d(&x, &w, &g);
        assert_eq!(y.len(), 8 * 28 * 28);
        assert_eq!((g.ho, g.wo), (28, 28));
    }

    #[test]
    fn max_pool_keeps_partial_windows() {
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let (y, arg) = max_pool(&x, 1, 3, 3, 2);
        assert_eq!(y, vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(arg, vec![4, 5, 7, 8]);
    }
}
