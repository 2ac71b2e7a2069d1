//! Convolution, pooling and batch normalization ops.
//!
//! Convolutions run as im2col + matmul per sample; the im2col buffers are
//! rebuilt in the backward pass instead of being cached, trading a little
//! compute for a flat memory profile on long videos.

use super::{dyn_shape, Graph, NodeId};
use crate::par;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2};

struct ColSpec {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
}

impl ColSpec {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.hp * self.wp
    }
}

fn im2col(x: &[f64], s: &ColSpec, col: &mut [f64]) {
    let mut r = 0;
    for c in 0..s.c_in {
        let plane = &x[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                for oh in 0..s.hp {
                    let ih = (oh * s.stride + ki) as isize - s.pad as isize;
                    for ow in 0..s.wp {
                        let iw = (ow * s.stride + kj) as isize - s.pad as isize;
                        col[r * s.cols() + oh * s.wp + ow] = if ih >= 0
                            && (ih as usize) < s.h
                            && iw >= 0
                            && (iw as usize) < s.w
                        {
                            plane[ih as usize * s.w + iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(col: &[f64], s: &ColSpec, dx: &mut [f64]) {
    let mut r = 0;
    for c in 0..s.c_in {
        let plane_off = c * s.h * s.w;
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                for oh in 0..s.hp {
                    let ih = (oh * s.stride + ki) as isize - s.pad as isize;
                    if ih < 0 || ih as usize >= s.h {
                        continue;
                    }
                    for ow in 0..s.wp {
                        let iw = (ow * s.stride + kj) as isize - s.pad as isize;
                        if iw < 0 || iw as usize >= s.w {
                            continue;
                        }
                        dx[plane_off + ih as usize * s.w + iw as usize] +=
                            col[r * s.cols() + oh * s.wp + ow];
                    }
                }
                r += 1;
            }
        }
    }
}

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

impl Graph {
    /// 2D convolution: `x [N, C_in, H, W]`, `w [C_out, C_in, KH, KW]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d shapes");
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let spec = ColSpec {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            hp: out_extent(h, kh, stride, pad),
            wp: out_extent(wd, kw, stride, pad),
        };
        let (rows, cols) = (spec.rows(), spec.cols());
        let (hp, wp) = (spec.hp, spec.wp);
        let mut out = ArrayD::<f64>::zeros(dyn_shape(&[n, c_out, hp, wp]));
        {
            let xv = self.value(x).as_slice().unwrap();
            let wv = self.value(w).as_slice().unwrap();
            let w2 = ArrayView2::from_shape((c_out, rows), wv).unwrap();
            par::chunks_indexed(out.as_slice_mut().unwrap(), c_out * cols, |i, chunk| {
                let mut col = vec![0.0; rows * cols];
                im2col(&xv[i * c_in * h * wd..(i + 1) * c_in * h * wd], &spec, &mut col);
                let cv = ArrayView2::from_shape((rows, cols), &col).unwrap();
                let mut ov = ArrayViewMut2::from_shape((c_out, cols), chunk).unwrap();
                ov.assign(&w2.dot(&cv));
            });
        }
        let pre_bias = self.push(
            out,
            Some(Box::new(move |g, grad, buf| {
                let spec = ColSpec {
                    c_in,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride,
                    pad,
                    hp,
                    wp,
                };
                let xv = g.value(x).as_slice().unwrap();
                let wv = g.value(w).as_slice().unwrap();
                let gv = grad.as_slice().unwrap();
                let w2 = ArrayView2::from_shape((c_out, rows), wv).unwrap();

                let mut dw = ndarray::Array2::<f64>::zeros((c_out, rows));
                let mut col = vec![0.0; rows * cols];
                for i in 0..n {
                    im2col(&xv[i * c_in * h * wd..(i + 1) * c_in * h * wd], &spec, &mut col);
                    let cv = ArrayView2::from_shape((rows, cols), &col).unwrap();
                    let go = ArrayView2::from_shape(
                        (c_out, cols),
                        &gv[i * c_out * cols..(i + 1) * c_out * cols],
                    )
                    .unwrap();
                    dw += &go.dot(&cv.t());
                }
                buf.add(
                    w,
                    dw.into_shape_with_order(dyn_shape(&[c_out, c_in, kh, kw]))
                        .unwrap()
                        .into_dyn(),
                );

                let mut dx = ArrayD::<f64>::zeros(dyn_shape(&[n, c_in, h, wd]));
                par::chunks_indexed(dx.as_slice_mut().unwrap(), c_in * h * wd, |i, chunk| {
                    let go = ArrayView2::from_shape(
                        (c_out, cols),
                        &gv[i * c_out * cols..(i + 1) * c_out * cols],
                    )
                    .unwrap();
                    let dcol = w2.t().dot(&go);
                    col2im(dcol.as_slice().unwrap(), &spec, chunk);
                });
                buf.add(x, dx);
            })),
        );
        match bias {
            Some(b) => {
                assert_eq!(self.shape(b), &[c_out]);
                // broadcast bias over [N, C, H, W] by viewing it as [C, 1, 1]
                let br = self.reshape(b, &[c_out, 1, 1]);
                self.add_channel(pre_bias, br)
            }
            None => pre_bias,
        }
    }

    /// 1D convolution with stride 1: `x [B, C_in, T]`, `w [C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 3 && ws.len() == 3 && xs[1] == ws[1], "conv1d shapes");
        let (b, c_in, t) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        let x4 = self.reshape(x, &[b, c_in, 1, t]);
        let w4 = self.reshape(w, &[c_out, c_in, 1, k]);
        // height stays 1 because the kernel spans it exactly and pad applies
        // to both axes only when the height kernel leaves room; run with
        // pad on width only by padding manually through a wide kernel call.
        let out4 = self.conv2d_asym(x4, w4, 0, pad);
        let tp = out_extent(t, k, 1, pad);
        let out = self.reshape(out4, &[b, c_out, tp]);
        match bias {
            Some(bi) => {
                let br = self.reshape(bi, &[c_out, 1]);
                self.add_channel(out, br)
            }
            None => out,
        }
    }

    /// conv2d with separate height/width padding (stride 1), used by conv1d.
    fn conv2d_asym(&mut self, x: NodeId, w: NodeId, pad_h: usize, pad_w: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let hp = out_extent(h, kh, 1, pad_h);
        let wp = out_extent(wd, kw, 1, pad_w);
        let rows = c_in * kh * kw;
        let cols = hp * wp;
        let mut out = ArrayD::<f64>::zeros(dyn_shape(&[n, c_out, hp, wp]));
        {
            let xv = self.value(x).as_slice().unwrap();
            let wv = self.value(w).as_slice().unwrap();
            let w2 = ArrayView2::from_shape((c_out, rows), wv).unwrap();
            par::chunks_indexed(out.as_slice_mut().unwrap(), c_out * cols, |i, chunk| {
                let mut col = vec![0.0; rows * cols];
                im2col_asym(
                    &xv[i * c_in * h * wd..(i + 1) * c_in * h * wd],
                    c_in,
                    h,
                    wd,
                    kh,
                    kw,
                    pad_h,
                    pad_w,
                    hp,
                    wp,
                    &mut col,
                );
                let cv = ArrayView2::from_shape((rows, cols), &col).unwrap();
                let mut ov = ArrayViewMut2::from_shape((c_out, cols), chunk).unwrap();
                ov.assign(&w2.dot(&cv));
            });
        }
        self.push(
            out,
            Some(Box::new(move |g, grad, buf| {
                let xv = g.value(x).as_slice().unwrap();
                let wv = g.value(w).as_slice().unwrap();
                let gv = grad.as_slice().unwrap();
                let w2 = ArrayView2::from_shape((c_out, rows), wv).unwrap();
                let mut dw = ndarray::Array2::<f64>::zeros((c_out, rows));
                let mut col = vec![0.0; rows * cols];
                for i in 0..n {
                    im2col_asym(
                        &xv[i * c_in * h * wd..(i + 1) * c_in * h * wd],
                        c_in,
                        h,
                        wd,
                        kh,
                        kw,
                        pad_h,
                        pad_w,
                        hp,
                        wp,
                        &mut col,
                    );
                    let cv = ArrayView2::from_shape((rows, cols), &col).unwrap();
                    let go = ArrayView2::from_shape(
                        (c_out, cols),
                        &gv[i * c_out * cols..(i + 1) * c_out * cols],
                    )
                    .unwrap();
                    dw += &go.dot(&cv.t());
                }
                buf.add(
                    w,
                    dw.into_shape_with_order(dyn_shape(&[c_out, c_in, kh, kw]))
                        .unwrap()
                        .into_dyn(),
                );
                let mut dx = ArrayD::<f64>::zeros(dyn_shape(&[n, c_in, h, wd]));
                par::chunks_indexed(dx.as_slice_mut().unwrap(), c_in * h * wd, |i, chunk| {
                    let go = ArrayView2::from_shape(
                        (c_out, cols),
                        &gv[i * c_out * cols..(i + 1) * c_out * cols],
                    )
                    .unwrap();
                    let dcol = w2.t().dot(&go);
                    col2im_asym(
                        dcol.as_slice().unwrap(),
                        c_in,
                        h,
                        wd,
                        kh,
                        kw,
                        pad_h,
                        pad_w,
                        hp,
                        wp,
                        chunk,
                    );
                });
                buf.add(x, dx);
            })),
        )
    }

    /// Add `b` (shape `[C, 1, ...]`) to x (shape `[N, C, ...]`), broadcasting
    /// over batch and spatial axes.
    fn add_channel(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(xs.len(), bs.len() + 1);
        assert_eq!(xs[1], bs[0]);
        let bb = self.value(b).broadcast(dyn_shape(&xs[1..])).unwrap().to_owned();
        let v = self.value(x) + &bb.broadcast(dyn_shape(&xs)).unwrap();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(x, grad.clone());
                let mut db = grad.sum_axis(ndarray::Axis(0));
                for ax in (1..db.ndim()).rev() {
                    db = db.sum_axis(ndarray::Axis(ax)).insert_axis(ndarray::Axis(ax));
                }
                buf.add(b, db);
            })),
        )
    }

    /// Temporal max pooling, kernel 2 stride 2, ceil mode: `T' = ceil(T / 2)`.
    /// An odd tail keeps its final frame as a singleton window.
    pub fn maxpool1d_ceil(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3);
        let (b, c, t) = (xs[0], xs[1], xs[2]);
        let tp = t.div_ceil(2);
        let xv = self.value(x).as_slice().unwrap();
        let mut out = vec![0.0; b * c * tp];
        let mut arg = vec![0usize; b * c * tp];
        for row in 0..b * c {
            let src = &xv[row * t..(row + 1) * t];
            for o in 0..tp {
                let i0 = 2 * o;
                let (mut bi, mut bv) = (i0, src[i0]);
                if i0 + 1 < t && src[i0 + 1] > bv {
                    bi = i0 + 1;
                    bv = src[i0 + 1];
                }
                out[row * tp + o] = bv;
                arg[row * tp + o] = bi;
            }
        }
        let v = ArrayD::from_shape_vec(dyn_shape(&[b, c, tp]), out).unwrap();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let gv = grad.as_slice().unwrap();
                let mut dx = vec![0.0; b * c * t];
                for row in 0..b * c {
                    for o in 0..tp {
                        dx[row * t + arg[row * tp + o]] += gv[row * tp + o];
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(dyn_shape(&[b, c, t]), dx).unwrap());
            })),
        )
    }

    /// Spatial max pooling with explicit kernel, stride and padding (floor mode).
    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hp = out_extent(h, k, stride, pad);
        let wp = out_extent(w, k, stride, pad);
        let xv = self.value(x).as_slice().unwrap();
        let mut out = vec![0.0; n * c * hp * wp];
        let mut arg = vec![0usize; n * c * hp * wp];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oh in 0..hp {
                for ow in 0..wp {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ki in 0..k {
                        let ih = (oh * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw as usize >= w {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out[plane * hp * wp + oh * wp + ow] = best;
                    arg[plane * hp * wp + oh * wp + ow] = best_i;
                }
            }
        }
        let v = ArrayD::from_shape_vec(dyn_shape(&[n, c, hp, wp]), out).unwrap();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let gv = grad.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for o in 0..hp * wp {
                        dx[plane * h * w + arg[plane * hp * wp + o]] += gv[plane * hp * wp + o];
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(dyn_shape(&[n, c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Global average pooling: `[N, C, H, W] -> [N, C]`.
    pub fn global_avgpool2d(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = 1.0 / (h * w) as f64;
        let xv = self.value(x).as_slice().unwrap();
        let mut out = vec![0.0; n * c];
        for plane in 0..n * c {
            out[plane] = xv[plane * h * w..(plane + 1) * h * w].iter().sum::<f64>() * inv;
        }
        let v = ArrayD::from_shape_vec(dyn_shape(&[n, c]), out).unwrap();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let gv = grad.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    let g = gv[plane] * inv;
                    for s in 0..h * w {
                        dx[plane * h * w + s] = g;
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(dyn_shape(&[n, c, h, w]), dx).unwrap());
            })),
        )
    }

    /// Batch normalization over axis 1 using batch statistics. Returns the
    /// output node plus the per-channel mean and biased variance so the
    /// caller can maintain running buffers for eval mode.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> (NodeId, Vec<f64>, Vec<f64>) {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2);
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let cnt = (b * s) as f64;
        let xv = self.value(x).as_slice().unwrap();
        let gv = self.value(gamma).as_slice().unwrap();
        let bv = self.value(beta).as_slice().unwrap();

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for (ci, m) in mean.iter_mut().enumerate() {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    *m += xv[base + si];
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= cnt;
        }
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    let d = xv[base + si] - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= cnt;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    let xh = (xv[base + si] - mean[ci]) * inv_std[ci];
                    xhat[base + si] = xh;
                    out[base + si] = gv[ci] * xh + bv[ci];
                }
            }
        }
        let v = ArrayD::from_shape_vec(dyn_shape(&xs), out).unwrap();
        let (mean_ret, var_ret) = (mean.clone(), var.clone());
        let node = self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                let gs = grad.as_slice().unwrap();
                let gv = g.value(gamma).as_slice().unwrap();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for si in 0..s {
                            let go = gs[base + si];
                            let dy = go * gv[ci];
                            dgamma[ci] += go * xhat[base + si];
                            dbeta[ci] += go;
                            sum_dy[ci] += dy;
                            sum_dy_xhat[ci] += dy * xhat[base + si];
                        }
                    }
                }
                let mut dx = vec![0.0; gs.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for si in 0..s {
                            let dy = gs[base + si] * gv[ci];
                            dx[base + si] = inv_std[ci]
                                * (dy
                                    - sum_dy[ci] / cnt
                                    - xhat[base + si] * sum_dy_xhat[ci] / cnt);
                        }
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(grad.raw_dim(), dx).unwrap());
                buf.add(gamma, ArrayD::from_shape_vec(dyn_shape(&[c]), dgamma).unwrap());
                buf.add(beta, ArrayD::from_shape_vec(dyn_shape(&[c]), dbeta).unwrap());
            })),
        );
        (node, mean_ret, var_ret)
    }

    /// Batch normalization over axis 1 using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> NodeId {
        let xs = self.shape(x).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        assert_eq!(mean.len(), c);
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x).as_slice().unwrap();
        let gv = self.value(gamma).as_slice().unwrap();
        let bv = self.value(beta).as_slice().unwrap();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * s;
                for si in 0..s {
                    out[base + si] = gv[ci] * (xv[base + si] - mean[ci]) * inv_std[ci] + bv[ci];
                }
            }
        }
        let v = ArrayD::from_shape_vec(dyn_shape(&xs), out).unwrap();
        let mean = mean.to_vec();
        let node = self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                let gs = grad.as_slice().unwrap();
                let xv = g.value(x).as_slice().unwrap();
                let gv = g.value(gamma).as_slice().unwrap();
                let mut dx = vec![0.0; gs.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * s;
                        for si in 0..s {
                            let go = gs[base + si];
                            dx[base + si] = go * gv[ci] * inv_std[ci];
                            dgamma[ci] += go * (xv[base + si] - mean[ci]) * inv_std[ci];
                            dbeta[ci] += go;
                        }
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(grad.raw_dim(), dx).unwrap());
                buf.add(gamma, ArrayD::from_shape_vec(dyn_shape(&[c]), dgamma).unwrap());
                buf.add(beta, ArrayD::from_shape_vec(dyn_shape(&[c]), dbeta).unwrap());
            })),
        );
        node
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_asym(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    hp: usize,
    wp: usize,
    col: &mut [f64],
) {
    let cols = hp * wp;
    let mut r = 0;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                for oh in 0..hp {
                    let ih = (oh + ki) as isize - pad_h as isize;
                    for ow in 0..wp {
                        let iw = (ow + kj) as isize - pad_w as isize;
                        col[r * cols + oh * wp + ow] =
                            if ih >= 0 && (ih as usize) < h && iw >= 0 && (iw as usize) < w {
                                plane[ih as usize * w + iw as usize]
                            } else {
                                0.0
                            };
                    }
                }
                r += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_asym(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad_h: usize,
    pad_w: usize,
    hp: usize,
    wp: usize,
    dx: &mut [f64],
) {
    let cols = hp * wp;
    let mut r = 0;
    for c in 0..c_in {
        let off = c * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                for oh in 0..hp {
                    let ih = (oh + ki) as isize - pad_h as isize;
                    if ih < 0 || ih as usize >= h {
                        continue;
                    }
                    for ow in 0..wp {
                        let iw = (ow + kj) as isize - pad_w as isize;
                        if iw < 0 || iw as usize >= w {
                            continue;
                        }
                        dx[off + ih as usize * w + iw as usize] += col[r * cols + oh * wp + ow];
                    }
                }
                r += 1;
            }
        }
    }
}
