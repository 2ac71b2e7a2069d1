//! Core tape operations: elementwise, shape, reductions, matmul, softmax,
//! normalization, embedding, dropout.
//!
//! Backward closures read parent values through the graph; captured clones are
//! kept only where recomputation would be costly or unstable.

use super::{dyn_shape, Graph, NodeId};
use crate::par;
use ndarray::{concatenate, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, Slice, Zip};
use rand::Rng;

/// Sum `grad` over leading axes until its shape equals `target`.
fn reduce_leading(grad: &ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    let extra = grad.ndim() - target.len();
    let mut out = grad.clone();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    debug_assert_eq!(out.shape(), target);
    out
}

fn standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

impl Graph {
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ndarray::arr0(v).into_dyn())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(a, grad.clone());
                buf.add(b, grad.clone());
            })),
        )
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() >= sb.len() && sa[sa.len() - sb.len()..] == sb[..],
            "add_bias: {sb:?} is not a suffix of {sa:?}"
        );
        let bv = self.value(b).broadcast(dyn_shape(&sa)).unwrap().to_owned();
        let v = self.value(a) + &bv;
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(a, grad.clone());
                buf.add(b, reduce_leading(grad, &sb));
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(a, grad.clone());
                buf.add(b, -grad);
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                buf.add(a, grad * g.value(b));
                buf.add(b, grad * g.value(a));
            })),
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.push(v, Some(Box::new(move |_g, grad, buf| buf.add(a, -grad))))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| buf.add(a, grad * c))),
        )
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Some(Box::new(move |_g, grad, buf| buf.add(a, grad.clone()))))
    }

    /// Elementwise multiply by a constant array (broadcast to `a`'s shape).
    /// The constant receives no gradient; used for validity masks.
    pub fn mul_const(&mut self, a: NodeId, c: &ArrayD<f64>) -> NodeId {
        let shape = self.shape(a).to_vec();
        let cb = c.broadcast(dyn_shape(&shape)).expect("mul_const broadcast").to_owned();
        let v = self.value(a) * &cb;
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| buf.add(a, grad * &cb))),
        )
    }

    /// Add a constant array (broadcast to `a`'s shape); used for attention masks.
    pub fn add_const(&mut self, a: NodeId, c: &ArrayD<f64>) -> NodeId {
        let shape = self.shape(a).to_vec();
        let cb = c.broadcast(dyn_shape(&shape)).expect("add_const broadcast").to_owned();
        let v = self.value(a) + &cb;
        self.push(v, Some(Box::new(move |_g, grad, buf| buf.add(a, grad.clone()))))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                let mut d = grad.clone();
                Zip::from(&mut d).and(g.value(a)).for_each(|dv, &x| {
                    if x <= 0.0 {
                        *dv = 0.0;
                    }
                });
                buf.add(a, d);
            })),
        )
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let y = self.value(a).mapv(f64::sqrt);
        let y_back = y.clone();
        self.push(
            y,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(a, grad * &y_back.mapv(|v| 0.5 / v));
            })),
        )
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                buf.add(a, grad * &(g.value(a) * 2.0));
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let y = self.value(a).mapv(f64::exp);
        let y_back = y.clone();
        self.push(
            y,
            Some(Box::new(move |_g, grad, buf| buf.add(a, grad * &y_back))),
        )
    }

    /// `a / b` where `b` has `a`'s shape with the last axis of extent 1.
    pub fn div_bcast_last(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == sb.len()
                && sb[sa.len() - 1] == 1
                && sa[..sa.len() - 1] == sb[..sa.len() - 1],
            "div_bcast_last: incompatible shapes {sa:?} / {sb:?}"
        );
        let bb = self.value(b).broadcast(dyn_shape(&sa)).unwrap().to_owned();
        let v = self.value(a) / &bb;
        self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                buf.add(a, grad / &bb);
                let num = grad * g.value(a);
                let gb = -(num / &bb / &bb)
                    .sum_axis(Axis(sa.len() - 1))
                    .insert_axis(Axis(sa.len() - 1));
                buf.add(b, gb);
            })),
        )
    }

    pub fn mm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("mm lhs 2d");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("mm rhs 2d");
        assert_eq!(av.shape()[1], bv.shape()[0], "mm: inner dims differ");
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
                let av = g.value(a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap();
                buf.add(a, gv.dot(&bv.t()).into_dyn());
                buf.add(b, av.t().dot(&gv).into_dyn());
            })),
        )
    }

    /// Batched matmul: `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = ArrayD::<f64>::zeros(dyn_shape(&[bs, m, n]));
        {
            let av = self.value(a);
            let bv = self.value(b);
            par::chunks_indexed(out.as_slice_mut().unwrap(), m * n, |i, chunk| {
                let ai = batch_view(av, i, m, k);
                let bi = batch_view(bv, i, k, n);
                let mut ov = ArrayViewMut2::from_shape((m, n), chunk).unwrap();
                ov.assign(&ai.dot(&bi));
            });
        }
        self.push(
            out,
            Some(Box::new(move |g, grad, buf| {
                let av = g.value(a);
                let bv = g.value(b);
                let mut ga = ArrayD::<f64>::zeros(dyn_shape(&[bs, m, k]));
                par::chunks_indexed(ga.as_slice_mut().unwrap(), m * k, |i, chunk| {
                    let gi = batch_view(grad, i, m, n);
                    let bi = batch_view(bv, i, k, n);
                    let mut v = ArrayViewMut2::from_shape((m, k), chunk).unwrap();
                    v.assign(&gi.dot(&bi.t()));
                });
                let mut gb = ArrayD::<f64>::zeros(dyn_shape(&[bs, k, n]));
                par::chunks_indexed(gb.as_slice_mut().unwrap(), k * n, |i, chunk| {
                    let gi = batch_view(grad, i, m, n);
                    let ai = batch_view(av, i, m, k);
                    let mut v = ArrayViewMut2::from_shape((k, n), chunk).unwrap();
                    v.assign(&ai.t().dot(&gi));
                });
                buf.add(a, ga);
                buf.add(b, gb);
            })),
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let old = self.shape(a).to_vec();
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(dyn_shape(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(
                    a,
                    grad.clone()
                        .into_shape_with_order(dyn_shape(&old))
                        .unwrap(),
                );
            })),
        )
    }

    pub fn permute(&mut self, a: NodeId, order: &[usize]) -> NodeId {
        let order = order.to_vec();
        let mut inverse = vec![0usize; order.len()];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        let v = standard(self.value(a).clone().permuted_axes(dyn_shape(&order)));
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(
                    a,
                    standard(grad.clone().permuted_axes(dyn_shape(&inverse))),
                );
            })),
        )
    }

    pub fn slice_axis(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NodeId {
        let full = self.shape(a).to_vec();
        assert!(end <= full[axis] && start < end);
        let v = standard(
            self.value(a)
                .slice_axis(Axis(axis), Slice::from(start..end))
                .to_owned(),
        );
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let mut d = ArrayD::<f64>::zeros(dyn_shape(&full));
                d.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(grad);
                buf.add(a, d);
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = standard(concatenate(Axis(axis), &views).expect("concat shapes"));
        let parts = parts.to_vec();
        let extents: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let mut offset = 0;
                for (&p, &ext) in parts.iter().zip(&extents) {
                    let piece = standard(
                        grad.slice_axis(Axis(axis), Slice::from(offset..offset + ext))
                            .to_owned(),
                    );
                    buf.add(p, piece);
                    offset += ext;
                }
            })),
        )
    }

    /// Tile a `[1, ...]` array `n` times along axis 0.
    pub fn tile0(&mut self, a: NodeId, n: usize) -> NodeId {
        let sa = self.shape(a).to_vec();
        assert_eq!(sa[0], 1, "tile0 expects leading extent 1");
        let mut target = sa.clone();
        target[0] = n;
        let v = self
            .value(a)
            .broadcast(dyn_shape(&target))
            .unwrap()
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                buf.add(a, grad.sum_axis(Axis(0)).insert_axis(Axis(0)));
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let shape = self.shape(a).to_vec();
        self.push(
            ndarray::arr0(s).into_dyn(),
            Some(Box::new(move |_g, grad, buf| {
                let gs = grad.iter().next().copied().unwrap();
                buf.add(a, ArrayD::from_elem(dyn_shape(&shape), gs));
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis_keepdim(&mut self, a: NodeId, axis: usize) -> NodeId {
        let shape = self.shape(a).to_vec();
        let v = self.value(a).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.push(
            standard(v),
            Some(Box::new(move |_g, grad, buf| {
                let gb = grad.broadcast(dyn_shape(&shape)).unwrap().to_owned();
                buf.add(a, gb);
            })),
        )
    }

    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let y = softmax_last_value(self.value(a));
        let y_back = y.clone();
        let last = self.shape(a).len() - 1;
        self.push(
            y,
            Some(Box::new(move |_g, grad, buf| {
                let gy = grad * &y_back;
                let dot = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let d = &y_back * &(grad - &dot.broadcast(grad.raw_dim()).unwrap());
                buf.add(a, d);
            })),
        )
    }

    pub fn log_softmax_last(&mut self, a: NodeId) -> NodeId {
        let y = log_softmax_last_value(self.value(a));
        let p = y.mapv(f64::exp);
        let last = self.shape(a).len() - 1;
        self.push(
            y,
            Some(Box::new(move |_g, grad, buf| {
                let gsum = grad.sum_axis(Axis(last)).insert_axis(Axis(last));
                let d = grad - &(&p * &gsum.broadcast(grad.raw_dim()).unwrap());
                buf.add(a, d);
            })),
        )
    }

    /// Max over the last axis (ties resolved to the lowest index).
    pub fn max_last(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let last = *shape.last().unwrap();
        let rows = self.value(a).len() / last;
        let flat = self.value(a).as_slice().expect("standard layout");
        let mut vals = Vec::with_capacity(rows);
        let mut arg = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &flat[r * last..(r + 1) * last];
            let (mut bi, mut bv) = (0usize, row[0]);
            for (i, &x) in row.iter().enumerate().skip(1) {
                if x > bv {
                    bv = x;
                    bi = i;
                }
            }
            vals.push(bv);
            arg.push(bi);
        }
        let out_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let v = ArrayD::from_shape_vec(dyn_shape(&out_shape), vals).unwrap();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let mut d = ArrayD::<f64>::zeros(dyn_shape(&shape));
                {
                    let ds = d.as_slice_mut().unwrap();
                    for (r, &gv) in grad.iter().enumerate() {
                        ds[r * last + arg[r]] = gv;
                    }
                }
                buf.add(a, d);
            })),
        )
    }

    /// Look up rows of `table` (`[V, D]`) for constant token ids of any shape.
    pub fn embedding(&mut self, ids: &[usize], ids_shape: &[usize], table: NodeId) -> NodeId {
        let ts = self.shape(table).to_vec();
        assert_eq!(ts.len(), 2, "embedding table must be [V, D]");
        let (v_size, d) = (ts[0], ts[1]);
        assert_eq!(ids.len(), ids_shape.iter().product::<usize>());
        let tv = self.value(table).as_slice().unwrap();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v_size, "token id {id} out of range {v_size}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        let v = ArrayD::from_shape_vec(dyn_shape(&out_shape), out).unwrap();
        let ids = ids.to_vec();
        self.push(
            v,
            Some(Box::new(move |_g, grad, buf| {
                let mut dt = ArrayD::<f64>::zeros(dyn_shape(&[v_size, d]));
                {
                    let dts = dt.as_slice_mut().unwrap();
                    let gs = grad.as_slice().unwrap();
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &gs[row * d..(row + 1) * d];
                        let dst = &mut dts[id * d..(id + 1) * d];
                        for (x, y) in dst.iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                buf.add(table, dt);
            })),
        )
    }

    /// Inverted dropout; identity when not in train mode or `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl Rng) -> NodeId {
        if !self.train || p <= 0.0 {
            return a;
        }
        assert!(p < 1.0, "dropout rate must be < 1");
        let keep = 1.0 - p;
        let mask: ArrayD<f64> = {
            let mut m = ArrayD::zeros(self.value(a).raw_dim());
            for x in m.iter_mut() {
                *x = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
            m
        };
        self.mul_const(a, &mask)
    }

    /// Layer normalization over the last axis with affine transform.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let rows = self.value(x).len() / d;
        let xs = self.value(x).as_slice().unwrap();
        let gv = self.value(gamma).as_slice().unwrap();
        let bv = self.value(beta).as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for i in 0..d {
                let xh = (row[i] - mean) * istd;
                xhat[r * d + i] = xh;
                out[r * d + i] = gv[i] * xh + bv[i];
            }
        }
        let v = ArrayD::from_shape_vec(dyn_shape(&shape), out).unwrap();
        self.push(
            v,
            Some(Box::new(move |g, grad, buf| {
                let gs = grad.as_slice().unwrap();
                let gv = g.value(gamma).as_slice().unwrap();
                let mut dx = vec![0.0; gs.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..rows {
                    let istd = inv_std[r];
                    let g_row = &gs[r * d..(r + 1) * d];
                    let xh_row = &xhat[r * d..(r + 1) * d];
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for i in 0..d {
                        let dy = g_row[i] * gv[i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xh_row[i];
                        dgamma[i] += g_row[i] * xh_row[i];
                        dbeta[i] += g_row[i];
                    }
                    let inv_d = 1.0 / d as f64;
                    for i in 0..d {
                        let dy = g_row[i] * gv[i];
                        dx[r * d + i] =
                            istd * (dy - inv_d * sum_dy - xh_row[i] * inv_d * sum_dy_xhat);
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(grad.raw_dim(), dx).unwrap());
                buf.add(gamma, ArrayD::from_shape_vec(dyn_shape(&[d]), dgamma).unwrap());
                buf.add(beta, ArrayD::from_shape_vec(dyn_shape(&[d]), dbeta).unwrap());
            })),
        )
    }

    /// L2-normalize the last axis: `x / sqrt(sum(x^2) + eps)`.
    pub fn normalize_last(&mut self, x: NodeId, eps: f64) -> NodeId {
        let sq = self.square(x);
        let n2 = self.sum_axis_keepdim(sq, self.shape(x).len() - 1);
        let n2e = self.add_scalar(n2, eps);
        let norm = self.sqrt(n2e);
        self.div_bcast_last(x, norm)
    }
}

fn batch_view(a: &ArrayD<f64>, i: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    let s = a.as_slice().expect("standard layout");
    ArrayView2::from_shape((rows, cols), &s[i * rows * cols..(i + 1) * rows * cols]).unwrap()
}

pub(crate) fn softmax_last_value(a: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = a.clone();
    let last = a.ndim() - 1;
    let d = a.shape()[last];
    let flat = out.as_slice_mut().expect("standard layout");
    for row in flat.chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_last_value(a: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = a.clone();
    let last = a.ndim() - 1;
    let d = a.shape()[last];
    let flat = out.as_slice_mut().expect("standard layout");
    for row in flat.chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}
