//! Tape-based reverse-mode differentiation over `[batch, channel, row, col]` tensors.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayViewMut2, Axis};

use super::kernels::{bilinear_taps, col2im, depthwise_backward, depthwise_forward, im2col, ConvGeom};
use super::params::{Grads, Initializer, ParamId, ParamStore};
use crate::Scalar;

/// A 2-D convolution layer, either dense or depthwise (one filter per channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub geom: ConvGeom,
    pub depthwise: bool,
}

impl Conv2d {
    /// Dense convolution with "same" padding for stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn dense<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            vec![out_ch, in_ch, kernel, kernel],
            init.he_normal(out_ch * fan_in, fan_in),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), vec![out_ch], vec![T::zero(); out_ch]));
        let geom = ConvGeom { kernel, stride, padding: dilation * (kernel - 1) / 2, dilation };
        Self { weight, bias, in_ch, out_ch, geom, depthwise: false }
    }

    pub fn depthwise<T: Scalar>(
        ps: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = kernel * kernel;
        let weight =
            ps.add(format!("{name}.weight"), vec![ch, 1, kernel, kernel], init.he_normal(ch * fan_in, fan_in));
        let bias = Some(ps.add(format!("{name}.bias"), vec![ch], vec![T::zero(); ch]));
        let geom = ConvGeom { kernel, stride, padding: dilation * (kernel - 1) / 2, dilation };
        Self { weight, bias, in_ch: ch, out_ch: ch, geom, depthwise: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Conv { x: NodeId, layer: Conv2d, cols: Vec<Vec<T>> },
    Relu { x: NodeId, cap: Option<T> },
    Add { a: NodeId, b: NodeId },
    Concat { parts: Vec<NodeId> },
    Upsample { x: NodeId, factor: usize },
    MaxPool2 { x: NodeId, argmax: Vec<u8> },
    GlobalAvgPool { x: NodeId },
    Broadcast { x: NodeId },
}

struct Node<T> {
    value: Array4<T>,
    op: Op<T>,
}

/// Records forward operations so that [`Graph::backward`] can replay them in reverse.
pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    record: bool,
}

fn dims<T>(a: &Array4<T>) -> (usize, usize, usize, usize) {
    a.dim()
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// `record = false` drops backward caches (inference mode).
    pub fn new(params: &'p ParamStore<T>, record: bool) -> Self {
        Self { params, nodes: Vec::new(), record }
    }

    fn push(&mut self, value: Array4<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array4<T> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Array4<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Array4::zeros((0, 0, 0, 0)))
    }

    pub fn input(&mut self, x: Array4<T>) -> NodeId {
        let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
        self.push(x, Op::Input)
    }

    pub fn conv(&mut self, x: NodeId, layer: &Conv2d) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (b, c, h, w) = dims(xv);
        assert_eq!(c, layer.in_ch, "conv input channels");
        let g = layer.geom;
        let (ho, wo) = (g.out_size(h), g.out_size(w));
        let weight = self.params.get(layer.weight);
        let bias = layer.bias.map(|id| self.params.get(id));
        let mut out = Array4::<T>::zeros((b, layer.out_ch, ho, wo));
        let xs = xv.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        let (in_plane, out_plane) = (c * h * w, layer.out_ch * ho * wo);
        let mut caches = Vec::new();
        for bi in 0..b {
            let xb = &xs[bi * in_plane..(bi + 1) * in_plane];
            let ob = &mut os[bi * out_plane..(bi + 1) * out_plane];
            if layer.depthwise {
                depthwise_forward(xb, c, h, w, &g, weight, bias, ob);
                continue;
            }
            let kk = c * g.kernel * g.kernel;
            let wmat = ArrayView2::from_shape((layer.out_ch, kk), weight).expect("weight shape");
            let mut om = ArrayViewMut2::from_shape((layer.out_ch, ho * wo), ob).expect("out shape");
            if let Some(bias) = bias {
                for (mut row, &bv) in om.rows_mut().into_iter().zip(bias) {
                    row.fill(bv);
                }
            }
            if g.is_pointwise() {
                let xm = ArrayView2::from_shape((c, h * w), xb).expect("in shape");
                general_mat_mul(T::one(), &wmat, &xm, T::one(), &mut om);
            } else {
                let mut cols = vec![T::zero(); kk * ho * wo];
                im2col(xb, c, h, w, &g, &mut cols);
                let cm = ArrayView2::from_shape((kk, ho * wo), &cols[..]).expect("cols shape");
                general_mat_mul(T::one(), &wmat, &cm, T::one(), &mut om);
                if self.record {
                    caches.push(cols);
                }
            }
        }
        self.push(out, Op::Conv { x, layer: *layer, cols: caches })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.mapv(|v| v.max(T::zero()));
        self.push(out, Op::Relu { x, cap: None })
    }

    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let six = T::of(6.0);
        let out = self.nodes[x.0].value.mapv(|v| v.max(T::zero()).min(six));
        self.push(out, Op::Relu { x, cap: Some(six) })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(out, Op::Add { a, b })
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat spatial dims must agree");
        let out = out.as_standard_layout().into_owned();
        self.push(out, Op::Concat { parts: parts.to_vec() })
    }

    /// Bilinear upsampling by an integer factor with half-pixel centers.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (b, c, h, w) = dims(xv);
        let (rt, ct) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Array4::<T>::zeros((b, c, ho, wo));
        let xs = xv.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        let ct_t: Vec<(usize, usize, T)> = ct.iter().map(|&(a, b, l)| (a, b, T::of(l))).collect();
        for p in 0..b * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            let dst = &mut os[p * ho * wo..(p + 1) * ho * wo];
            for (oi, &(r0, r1, lr)) in rt.iter().enumerate() {
                let lr = T::of(lr);
                let (row0, row1) = (&src[r0 * w..(r0 + 1) * w], &src[r1 * w..(r1 + 1) * w]);
                let drow = &mut dst[oi * wo..(oi + 1) * wo];
                for (oj, &(c0, c1, lc)) in ct_t.iter().enumerate() {
                    let top = row0[c0] + lc * (row0[c1] - row0[c0]);
                    let bot = row1[c0] + lc * (row1[c1] - row1[c0]);
                    drow[oj] = top + lr * (bot - top);
                }
            }
        }
        self.push(out, Op::Upsample { x, factor })
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn maxpool2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (b, c, h, w) = dims(xv);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<T>::zeros((b, c, ho, wo));
        let mut argmax = vec![0u8; b * c * ho * wo];
        let xs = xv.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for p in 0..b * c {
            let src = &xs[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = src[2 * i * w + 2 * j];
                    let mut arg = 0u8;
                    for (k, (di, dj)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = src[(2 * i + di) * w + 2 * j + dj];
                        if v > best {
                            best = v;
                            arg = k as u8 + 1;
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    os[o] = best;
                    argmax[o] = arg;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (b, c, h, w) = dims(xv);
        let inv = T::of(1.0 / (h * w) as f64);
        let xs = xv.as_slice().expect("standard layout");
        let out = Array4::from_shape_fn((b, c, 1, 1), |(bi, ci, _, _)| {
            let p = bi * c + ci;
            xs[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() * inv
        });
        self.push(out, Op::GlobalAvgPool { x })
    }

    /// Broadcasts a `[b, c, 1, 1]` tensor to `[b, c, h, w]`.
    pub fn broadcast(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let (b, c, _, _) = dims(xv);
        let out = Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| xv[[bi, ci, 0, 0]]);
        self.push(out, Op::Broadcast { x })
    }

    /// Back-propagates `grad` from `out` and returns parameter gradients.
    pub fn backward(&self, out: NodeId, grad: Array4<T>) -> Grads<T> {
        assert!(self.record, "backward on a graph built without recording");
        assert_eq!(grad.dim(), self.nodes[out.0].value.dim(), "output gradient shape");
        let mut pg = self.params.zeros_like();
        let mut gs: Vec<Option<Array4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        gs[out.0] = Some(grad.as_standard_layout().into_owned());

        fn acc<T: Scalar>(gs: &mut [Option<Array4<T>>], id: NodeId, g: Array4<T>) {
            match &mut gs[id.0] {
                Some(e) => *e += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = gs[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => gs[idx] = Some(g),
                Op::Conv { x, layer, cols } => {
                    let dx = self.conv_backward(*x, layer, cols, &g, &mut pg);
                    acc(&mut gs, *x, dx);
                }
                Op::Relu { x, cap } => {
                    let mut dx = g;
                    let zero = T::zero();
                    ndarray::Zip::from(&mut dx).and(&self.nodes[x.0].value).for_each(|d, &v| {
                        let pass = v > zero && cap.is_none_or(|c| v < c);
                        if !pass {
                            *d = zero;
                        }
                    });
                    acc(&mut gs, *x, dx);
                }
                Op::Add { a, b } => {
                    acc(&mut gs, *b, g.clone());
                    acc(&mut gs, *a, g);
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.dim().1;
                        let part = g.slice(ndarray::s![.., start..start + c, .., ..]).to_owned();
                        acc(&mut gs, *p, part);
                        start += c;
                    }
                }
                Op::Upsample { x, factor } => {
                    let (b, c, h, w) = dims(&self.nodes[x.0].value);
                    let (rt, ct) = (bilinear_taps(h, *factor), bilinear_taps(w, *factor));
                    let (ho, wo) = (h * factor, w * factor);
                    let mut dx = Array4::<T>::zeros((b, c, h, w));
                    let ds = dx.as_slice_mut().expect("standard layout");
                    let gsl = g.as_slice().expect("standard layout");
                    for p in 0..b * c {
                        let src = &gsl[p * ho * wo..(p + 1) * ho * wo];
                        let dst = &mut ds[p * h * w..(p + 1) * h * w];
                        for (oi, &(r0, r1, lr)) in rt.iter().enumerate() {
                            for (oj, &(c0, c1, lc)) in ct.iter().enumerate() {
                                let v = src[oi * wo + oj];
                                let (ar, br) = (T::of(1.0 - lr), T::of(lr));
                                let (ac, bc) = (T::of(1.0 - lc), T::of(lc));
                                dst[r0 * w + c0] += v * ar * ac;
                                dst[r0 * w + c1] += v * ar * bc;
                                dst[r1 * w + c0] += v * br * ac;
                                dst[r1 * w + c1] += v * br * bc;
                            }
                        }
                    }
                    acc(&mut gs, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let (b, c, h, w) = dims(&self.nodes[x.0].value);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = Array4::<T>::zeros((b, c, h, w));
                    let ds = dx.as_slice_mut().expect("standard layout");
                    let gsl = g.as_slice().expect("standard layout");
                    for p in 0..b * c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let o = p * ho * wo + i * wo + j;
                                let a = argmax[o] as usize;
                                let (di, dj) = (a / 2, a % 2);
                                ds[p * h * w + (2 * i + di) * w + 2 * j + dj] += gsl[o];
                            }
                        }
                    }
                    acc(&mut gs, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let (b, c, h, w) = dims(&self.nodes[x.0].value);
                    let inv = T::of(1.0 / (h * w) as f64);
                    let dx = Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| g[[bi, ci, 0, 0]] * inv);
                    acc(&mut gs, *x, dx);
                }
                Op::Broadcast { x } => {
                    let (b, c, _, _) = dims(&self.nodes[x.0].value);
                    let dx = Array4::from_shape_fn((b, c, 1, 1), |(bi, ci, _, _)| {
                        g.slice(ndarray::s![bi, ci, .., ..]).sum()
                    });
                    acc(&mut gs, *x, dx);
                }
            }
        }
        pg
    }

    fn conv_backward(
        &self,
        x: NodeId,
        layer: &Conv2d,
        cols: &[Vec<T>],
        g: &Array4<T>,
        pg: &mut Grads<T>,
    ) -> Array4<T> {
        let xv = &self.nodes[x.0].value;
        let (b, c, h, w) = dims(xv);
        let geom = layer.geom;
        let (ho, wo) = (geom.out_size(h), geom.out_size(w));
        let weight = self.params.get(layer.weight);
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let xs = xv.as_slice().expect("standard layout");
        let gsl = g.as_slice().expect("standard layout");
        let ds = dx.as_slice_mut().expect("standard layout");
        let (in_plane, out_plane) = (c * h * w, layer.out_ch * ho * wo);
        if let Some(bid) = layer.bias {
            let db = pg.get_mut(bid);
            for bi in 0..b {
                for (co, d) in db.iter_mut().enumerate() {
                    let s = bi * out_plane + co * ho * wo;
                    *d += gsl[s..s + ho * wo].iter().copied().sum::<T>();
                }
            }
        }
        let kk = c * geom.kernel * geom.kernel;
        let mut dcols = vec![T::zero(); if geom.is_pointwise() { 0 } else { kk * ho * wo }];
        for bi in 0..b {
            let xb = &xs[bi * in_plane..(bi + 1) * in_plane];
            let gb = &gsl[bi * out_plane..(bi + 1) * out_plane];
            let db = &mut ds[bi * in_plane..(bi + 1) * in_plane];
            if layer.depthwise {
                depthwise_backward(xb, c, h, w, &geom, weight, gb, pg.get_mut(layer.weight), None, db);
                continue;
            }
            let gm = ArrayView2::from_shape((layer.out_ch, ho * wo), gb).expect("grad shape");
            let wmat = ArrayView2::from_shape((layer.out_ch, kk), weight).expect("weight shape");
            let cm = if geom.is_pointwise() {
                ArrayView2::from_shape((c, h * w), xb).expect("in shape")
            } else {
                ArrayView2::from_shape((kk, ho * wo), &cols[bi][..]).expect("cols shape")
            };
            {
                let mut dw = ArrayViewMut2::from_shape((layer.out_ch, kk), pg.get_mut(layer.weight))
                    .expect("weight shape");
                general_mat_mul(T::one(), &gm, &cm.t(), T::one(), &mut dw);
            }
            if geom.is_pointwise() {
                let mut dm = ArrayViewMut2::from_shape((c, h * w), db).expect("in shape");
                general_mat_mul(T::one(), &wmat.t(), &gm, T::one(), &mut dm);
            } else {
                let mut dm = ArrayViewMut2::from_shape((kk, ho * wo), &mut dcols[..]).expect("cols shape");
                general_mat_mul(T::one(), &wmat.t(), &gm, T::zero(), &mut dm);
                col2im(&dcols, c, h, w, &geom, db);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Net {
        stem: Conv2d,
        dw: Conv2d,
        pw: Conv2d,
        dil: Conv2d,
        pool_proj: Conv2d,
        head: Conv2d,
    }

    fn build(ps: &mut ParamStore<f64>) -> Net {
        let mut init = Initializer::new(7);
        Net {
            stem: Conv2d::dense(ps, &mut init, "stem", 2, 3, 3, 2, 1, true),
            dw: Conv2d::depthwise(ps, &mut init, "dw", 3, 3, 1, 1),
            pw: Conv2d::dense(ps, &mut init, "pw", 3, 3, 1, 1, 1, true),
            dil: Conv2d::dense(ps, &mut init, "dil", 3, 2, 3, 1, 2, false),
            pool_proj: Conv2d::dense(ps, &mut init, "pool", 3, 2, 1, 1, 1, true),
            head: Conv2d::dense(ps, &mut init, "head", 7, 2, 1, 1, 1, true),
        }
    }

    /// Exercises every op; returns scalar loss and optionally parameter gradients.
    fn run(ps: &ParamStore<f64>, net: &Net, x: &Array4<f64>, r: &Array4<f64>, grad: bool) -> (f64, Option<Grads<f64>>) {
        let mut g = Graph::new(ps, grad);
        let i = g.input(x.clone());
        let s = g.conv(i, &net.stem);
        let s = g.relu(s);
        let d = g.conv(s, &net.dw);
        let d = g.relu6(d);
        let p = g.conv(d, &net.pw);
        let res = g.add(p, s);
        let a = g.conv(res, &net.dil);
        let gp = g.global_avg_pool(res);
        let gp = g.conv(gp, &net.pool_proj);
        let (h, w) = (g.value(res).dim().2, g.value(res).dim().3);
        let gp = g.broadcast(gp, h, w);
        let m = g.maxpool2(res);
        let m = g.upsample(m, 2);
        let cat = g.concat(&[a, gp, m]);
        let o = g.conv(cat, &net.head);
        let o = g.upsample(o, 2);
        let loss = (g.value(o) * r).sum();
        let grads = grad.then(|| g.backward(o, r.clone()));
        (loss, grads)
    }

    #[test]
    fn parameter_gradients_match_central_differences() {
        let mut ps = ParamStore::new();
        let net = build(&mut ps);
        // Non-zero biases keep activations off the ReLU kink at exactly 0.
        for (k, v) in ps.tensors_mut().flat_map(|t| t.iter_mut()).enumerate() {
            *v += 0.05 * (k as f64 * 1.3).sin();
        }
        let x = Array4::from_shape_fn((2, 2, 8, 8), |(b, c, i, j)| ((b * 31 + c * 17 + i * 5 + j) as f64 * 0.37).sin());
        let r = Array4::from_shape_fn((2, 2, 8, 8), |(b, c, i, j)| ((b + 2 * c + 3 * i + 5 * j) as f64 * 0.11).cos());
        let (_, grads) = run(&ps, &net, &x, &r, true);
        let grads = grads.unwrap();
        let h = 1e-6;
        for pi in 0..ps.len() {
            let id = ParamId(pi);
            for k in 0..ps.get(id).len() {
                let orig = ps.get(id)[k];
                ps.get_mut(id)[k] = orig + h;
                let (lp, _) = run(&ps, &net, &x, &r, false);
                ps.get_mut(id)[k] = orig - h;
                let (lm, _) = run(&ps, &net, &x, &r, false);
                ps.get_mut(id)[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(id)[k];
                assert!(
                    (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{} [{k}]: fd {fd} vs analytic {an}",
                    ps.infos()[pi].name
                );
            }
        }
    }

    #[test]
    fn upsample_of_constant_is_constant() {
        let ps = ParamStore::<f64>::new();
        let mut g = Graph::new(&ps, false);
        let i = g.input(Array4::from_elem((1, 1, 3, 5), 2.5));
        let u = g.upsample(i, 4);
        assert_eq!(g.value(u).dim(), (1, 1, 12, 20));
        assert!(g.value(u).iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn maxpool_picks_block_maxima() {
        let ps = ParamStore::<f64>::new();
        let mut g = Graph::new(&ps, false);
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let i = g.input(x);
        let m = g.maxpool2(i);
        assert_eq!(g.value(m).iter().copied().collect::<Vec<_>>(), vec![5.0, 7.0, 13.0, 15.0]);
    }
}
