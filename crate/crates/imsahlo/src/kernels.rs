//! Raw compute kernels behind the autodiff graph.
//!
//! All kernels are deterministic: parallel sections only ever split work
//! across disjoint output planes, and every reduction runs in a fixed
//! sequential order. Convolution dominates the FLOP budget, so only the
//! conv kernels are parallelised.

use crate::tensor::{Shape, Tensor};
use rayon::prelude::*;

/// 2-D convolution, stride 1, odd kernel, same padding with the given
/// dilation. `x` is `(n, ci, h, w)`, `weight` is `(co, ci, kh, kw)`,
/// `bias` is `(1, 1, 1, co)`.
pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, dilation: usize) -> Tensor {
    let [n, ci, h, w] = x.shape();
    let [co, wci, kh, kw] = weight.shape();
    assert_eq!(ci, wci, "conv2d: input channels mismatch");
    assert_eq!(bias.len(), co, "conv2d: bias length mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel must be odd");
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;

    let mut out = Tensor::zeros([n, co, h, w]);
    let plane = h * w;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(chunk, out_plane)| {
            let ni = chunk / co;
            let coi = chunk % co;
            out_plane.fill(bias.data()[coi]);
            for cii in 0..ci {
                let in_plane = x.plane(ni, cii);
                for ky in 0..kh {
                    let oy = (ky * dilation) as isize - pad_h as isize;
                    for kx in 0..kw {
                        let ox = (kx * dilation) as isize - pad_w as isize;
                        let wv = weight.at(coi, cii, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // valid output rows: 0 <= y + oy < h
                        let y0 = (-oy).max(0) as usize;
                        let y1 = ((h as isize - oy).min(h as isize)).max(0) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            let src = &in_plane[sy * w + ((x0 as isize + ox) as usize)
                                ..sy * w + ((x1 as isize + ox) as usize)];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of `conv2d_forward` w.r.t. its input.
pub fn conv2d_backward_input(
    dy: &Tensor,
    weight: &Tensor,
    dilation: usize,
    x_shape: Shape,
) -> Tensor {
    let [n, ci, h, w] = x_shape;
    let [co, _, kh, kw] = weight.shape();
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;

    let mut dx = Tensor::zeros(x_shape);
    let plane = h * w;
    dx.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(chunk, dx_plane)| {
            let ni = chunk / ci;
            let cii = chunk % ci;
            for coi in 0..co {
                let dy_plane = dy.plane(ni, coi);
                for ky in 0..kh {
                    let oy = (ky * dilation) as isize - pad_h as isize;
                    for kx in 0..kw {
                        let ox = (kx * dilation) as isize - pad_w as isize;
                        let wv = weight.at(coi, cii, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // dx[yi, xi] += wv * dy[yi - oy, xi - ox]
                        let y0 = oy.max(0) as usize;
                        let y1 = ((h as isize + oy).min(h as isize)).max(0) as usize;
                        let x0 = ox.max(0) as usize;
                        let x1 = ((w as isize + ox).min(w as isize)).max(0) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for yi in y0..y1 {
                            let sy = (yi as isize - oy) as usize;
                            let src = &dy_plane[sy * w + ((x0 as isize - ox) as usize)
                                ..sy * w + ((x1 as isize - ox) as usize)];
                            let dst = &mut dx_plane[yi * w + x0..yi * w + x1];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradients of `conv2d_forward` w.r.t. weight and bias.
pub fn conv2d_backward_params(
    x: &Tensor,
    dy: &Tensor,
    dilation: usize,
    weight_shape: Shape,
) -> (Tensor, Tensor) {
    let [n, ci, h, w] = x.shape();
    let [co, _, kh, kw] = weight_shape;
    let pad_h = dilation * (kh - 1) / 2;
    let pad_w = dilation * (kw - 1) / 2;

    let mut dw = Tensor::zeros(weight_shape);
    let per_co = ci * kh * kw;
    dw.data_mut()
        .par_chunks_mut(per_co)
        .enumerate()
        .for_each(|(coi, dw_co)| {
            for cii in 0..ci {
                for ky in 0..kh {
                    let oy = (ky * dilation) as isize - pad_h as isize;
                    for kx in 0..kw {
                        let ox = (kx * dilation) as isize - pad_w as isize;
                        let y0 = (-oy).max(0) as usize;
                        let y1 = ((h as isize - oy).min(h as isize)).max(0) as usize;
                        let x0 = (-ox).max(0) as usize;
                        let x1 = ((w as isize - ox).min(w as isize)).max(0) as usize;
                        let mut acc = 0.0;
                        if x0 < x1 {
                            for ni in 0..n {
                                let dy_plane = dy.plane(ni, coi);
                                let x_plane = x.plane(ni, cii);
                                for y in y0..y1 {
                                    let sy = (y as isize + oy) as usize;
                                    let a = &dy_plane[y * w + x0..y * w + x1];
                                    let b = &x_plane[sy * w + ((x0 as isize + ox) as usize)
                                        ..sy * w + ((x1 as isize + ox) as usize)];
                                    acc += a
                                        .iter()
                                        .zip(b.iter())
                                        .map(|(p, q)| p * q)
                                        .sum::<f64>();
                                }
                            }
                        }
                        dw_co[(cii * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });

    let mut db = Tensor::zeros([1, 1, 1, co]);
    for coi in 0..co {
        let mut acc = 0.0;
        for ni in 0..n {
            acc += dy.plane(ni, coi).iter().sum::<f64>();
        }
        db.data_mut()[coi] = acc;
    }
    (dw, db)
}

/// 2x2 max pool, stride 2. Requires even spatial dims. Returns the pooled
/// tensor plus, per output element, the flat in-plane index of the argmax.
pub fn maxpool2_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: dims must be even");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut idx = vec![0u32; n * c * oh * ow];
    let mut k = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.plane(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = (oy * 2 + dy) * w + ox * 2 + dx;
                            if plane[i] > best {
                                best = plane[i];
                                best_i = i;
                            }
                        }
                    }
                    out.data_mut()[k] = best;
                    idx[k] = best_i as u32;
                    k += 1;
                }
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward(dy: &Tensor, idx: &[u32], x_shape: Shape) -> Tensor {
    let [n, c, _, _] = dy.shape();
    let mut dx = Tensor::zeros(x_shape);
    let out_plane = dy.plane_len();
    let in_plane = x_shape[2] * x_shape[3];
    for p in 0..n * c {
        let dyp = &dy.data()[p * out_plane..(p + 1) * out_plane];
        let dxp = &mut dx.data_mut()[p * in_plane..(p + 1) * in_plane];
        for (g, &i) in dyp.iter().zip(&idx[p * out_plane..(p + 1) * out_plane]) {
            dxp[i as usize] += g;
        }
    }
    dx
}

/// 3x3 min- or max-pool, stride 1, replicate padding. Used by the soft
/// skeleton. Ties resolve to the first candidate in scan order, so the
/// recorded argext index is deterministic.
pub fn pool3_forward(x: &Tensor, take_max: bool) -> (Tensor, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut idx = vec![0u32; n * c * h * w];
    let plane = h * w;
    for p in 0..n * c {
        let src = &x.data()[p * plane..(p + 1) * plane];
        let dst = &mut out.data_mut()[p * plane..(p + 1) * plane];
        let ids = &mut idx[p * plane..(p + 1) * plane];
        for y in 0..h {
            for x0 in 0..w {
                let mut best = if take_max {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                };
                let mut best_i = 0usize;
                for dy in -1isize..=1 {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -1isize..=1 {
                        let xx = (x0 as isize + dx).clamp(0, w as isize - 1) as usize;
                        let i = yy * w + xx;
                        let v = src[i];
                        if (take_max && v > best) || (!take_max && v < best) {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                dst[y * w + x0] = best;
                ids[y * w + x0] = best_i as u32;
            }
        }
    }
    (out, idx)
}

pub fn pool3_backward(dy: &Tensor, idx: &[u32], x_shape: Shape) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let plane = x_shape[2] * x_shape[3];
    let planes = x_shape[0] * x_shape[1];
    for p in 0..planes {
        let dyp = &dy.data()[p * plane..(p + 1) * plane];
        let dxp = &mut dx.data_mut()[p * plane..(p + 1) * plane];
        for (g, &i) in dyp.iter().zip(&idx[p * plane..(p + 1) * plane]) {
            dxp[i as usize] += g;
        }
    }
    dx
}

fn bilinear_axis(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    // (lo index, hi index, weight of hi); half-pixel centers, edges clamped.
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let f = src.floor();
            let t = src - f;
            let lo = (f as isize).clamp(0, in_len as isize - 1) as usize;
            let hi = (f as isize + 1).clamp(0, in_len as isize - 1) as usize;
            (lo, hi, t)
        })
        .collect()
}

/// 2x bilinear upsampling with half-pixel alignment.
pub fn upsample2_forward(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let v00 = src[y0 * w + x0];
                let v01 = src[y0 * w + x1];
                let v10 = src[y1 * w + x0];
                let v11 = src[y1 * w + x1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                dst[oy * ow + ox] = top + (bot - top) * ty;
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Tensor, x_shape: Shape) -> Tensor {
    let [n, c, h, w] = x_shape;
    let (oh, ow) = (h * 2, w * 2);
    let ys = bilinear_axis(oh, h);
    let xs = bilinear_axis(ow, w);
    let mut dx = Tensor::zeros(x_shape);
    for p in 0..n * c {
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let gv = g[oy * ow + ox];
                dst[y0 * w + x0] += gv * (1.0 - ty) * (1.0 - tx);
                dst[y0 * w + x1] += gv * (1.0 - ty) * tx;
                dst[y1 * w + x0] += gv * ty * (1.0 - tx);
                dst[y1 * w + x1] += gv * ty * tx;
            }
        }
    }
    dx
}

/// Per-(sample, group) statistics cached by group norm for the backward pass.
pub struct GroupNormCache {
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
}

/// Group normalization with per-channel affine parameters.
/// `gamma`/`beta` are `(1, 1, 1, c)`.
pub fn groupnorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, GroupNormCache) {
    let [n, c, h, w] = x.shape();
    assert!(c % groups == 0, "groupnorm: channels not divisible by groups");
    let cs = c / groups;
    let m = (cs * h * w) as f64;
    let mut out = Tensor::zeros(x.shape());
    let mut mean = vec![0.0; n * groups];
    let mut invstd = vec![0.0; n * groups];
    let plane = h * w;
    for ni in 0..n {
        for g in 0..groups {
            let start = (ni * c + g * cs) * plane;
            let xs = &x.data()[start..start + cs * plane];
            let mu = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            let istd = 1.0 / (var + eps).sqrt();
            mean[ni * groups + g] = mu;
            invstd[ni * groups + g] = istd;
            let ys = &mut out.data_mut()[start..start + cs * plane];
            for ci in 0..cs {
                let ch = g * cs + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for i in ci * plane..(ci + 1) * plane {
                    ys[i] = ga * (xs[i] - mu) * istd + be;
                }
            }
        }
    }
    (out, GroupNormCache { mean, invstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn groupnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    cache: &GroupNormCache,
    groups: usize,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let cs = c / groups;
    let m = (cs * h * w) as f64;
    let plane = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros([1, 1, 1, c]);
    let mut dbeta = Tensor::zeros([1, 1, 1, c]);
    for ni in 0..n {
        for g in 0..groups {
            let start = (ni * c + g * cs) * plane;
            let xs = &x.data()[start..start + cs * plane];
            let gs = &dy.data()[start..start + cs * plane];
            let mu = cache.mean[ni * groups + g];
            let istd = cache.invstd[ni * groups + g];

            // dxhat = dy * gamma; reduce Σdxhat and Σdxhat·xhat over the group
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for ci in 0..cs {
                let ga = gamma.data()[g * cs + ci];
                for i in ci * plane..(ci + 1) * plane {
                    let xhat = (xs[i] - mu) * istd;
                    let dxhat = gs[i] * ga;
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                }
            }
            let ds = &mut dx.data_mut()[start..start + cs * plane];
            for ci in 0..cs {
                let ch = g * cs + ci;
                let ga = gamma.data()[ch];
                let mut dg = 0.0;
                let mut db = 0.0;
                for i in ci * plane..(ci + 1) * plane {
                    let xhat = (xs[i] - mu) * istd;
                    let dxhat = gs[i] * ga;
                    ds[i] = istd * (dxhat - s1 / m - xhat * s2 / m);
                    dg += gs[i] * xhat;
                    db += gs[i];
                }
                dgamma.data_mut()[ch] += dg;
                dbeta.data_mut()[ch] += db;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Separable Gaussian blur with replicate borders; radius = ceil(3 sigma).
/// `sigma <= 0` returns the input unchanged.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut tmp = vec![0.0; plane];
    let mut out = x.clone();
    for p in 0..n * c {
        let buf = &mut out.data_mut()[p * plane..(p + 1) * plane];
        // horizontal
        for y in 0..h {
            for x0 in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let xx = (x0 as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * buf[y * w + xx];
                }
                tmp[y * w + x0] = acc;
            }
        }
        // vertical
        for y in 0..h {
            for x0 in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x0];
                }
                buf[y * w + x0] = acc;
            }
        }
    }
    out
}
