//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] is a define-by-run tape: every operation computes its value
//! immediately and records how to push gradients back to its parents. Nodes
//! only ever reference earlier nodes, so the backward pass is a single
//! reverse sweep. The tape is rebuilt per training step and dropped
//! afterwards.

use crate::kernels;
use crate::tensor::Shape as _ShapeUnused;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// a*x + b
    Affine(usize, f64, f64),
    /// x * s where s is (n, c, 1, 1); broadcast over the plane
    MulChannel(usize, usize),
    /// x * m where m is (n, 1, h, w); broadcast over channels
    MulSpatial(usize, usize),
    Sigmoid(usize),
    Swish(usize),
    Relu(usize),
    /// ln(clamp(x, lo, 1)); gradient is 1/x inside the clamp, 0 below it
    LnClamped(usize, f64),
    PowScalar(usize, f64),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        dilation: usize,
    },
    MaxPool2 {
        x: usize,
        idx: Vec<u32>,
    },
    Pool3 {
        x: usize,
        idx: Vec<u32>,
    },
    Upsample2(usize),
    ConcatChannels(Vec<usize>),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        cache: kernels::GroupNormCache,
    },
    GlobalAvgPool(usize),
    ChannelMean(usize),
    ChannelMax {
        x: usize,
        idx: Vec<u32>,
    },
    GlobalMaxPool {
        x: usize,
        idx: Vec<u32>,
    },
    SumAll(usize),
    MeanAll(usize),
    /// Per-(n, c) channel factor: 0 for dropped channels, 1/keep otherwise.
    ScaleChannels {
        x: usize,
        factors: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter or probed tensor).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A fixed input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar node");
        t.data()[0]
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, rg, Op::Div(a.0, b.0))
    }

    /// `scale * x + offset`
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        let v = self.value(x).map(|v| scale * v + offset);
        let rg = self.rg(x);
        self.push(v, rg, Op::Affine(x.0, scale, offset))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, 1.0, c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        assert_eq!(sv.shape(), [xv.n(), xv.c(), 1, 1], "channel weights shape");
        let mut out = xv.clone();
        let plane = out.plane_len();
        for p in 0..out.n() * out.c() {
            let f = sv.data()[p];
            for v in &mut out.data_mut()[p * plane..(p + 1) * plane] {
                *v *= f;
            }
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, rg, Op::MulChannel(x.0, s.0))
    }

    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Var {
        let xv = self.value(x);
        let mv = self.value(m);
        assert_eq!(mv.shape(), [xv.n(), 1, xv.h(), xv.w()], "spatial map shape");
        let mut out = xv.clone();
        let plane = out.plane_len();
        let c = out.c();
        for ni in 0..out.n() {
            let map = mv.plane(ni, 0).to_vec();
            for ci in 0..c {
                let start = (ni * c + ci) * plane;
                for (v, f) in out.data_mut()[start..start + plane].iter_mut().zip(&map) {
                    *v *= f;
                }
            }
        }
        let rg = self.rg(x) || self.rg(m);
        self.push(out, rg, Op::MulSpatial(x.0, m.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(v, rg, Op::Sigmoid(x.0))
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(v, rg, Op::Swish(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(v, rg, Op::Relu(x.0))
    }

    /// Natural log with the argument clamped below at `floor`.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let v = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(v, rg, Op::LnClamped(x.0, floor))
    }

    pub fn pow_scalar(&mut self, x: Var, e: f64) -> Var {
        let v = self.value(x).map(|v| v.powf(e));
        let rg = self.rg(x);
        self.push(v, rg, Op::PowScalar(x.0, e))
    }

    // ---- structured ops ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Var {
        let v = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), dilation);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(
            v,
            rg,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                dilation,
            },
        )
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (v, idx) = kernels::maxpool2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(v, rg, Op::MaxPool2 { x: x.0, idx })
    }

    /// 3x3 stride-1 min/max pool with replicate padding.
    pub fn pool3(&mut self, x: Var, take_max: bool) -> Var {
        let (v, idx) = kernels::pool3_forward(self.value(x), take_max);
        let rg = self.rg(x);
        self.push(v, rg, Op::Pool3 { x: x.0, idx })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = kernels::upsample2_forward(self.value(x));
        let rg = self.rg(x);
        self.push(v, rg, Op::Upsample2(x.0))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let n = self.value(xs[0]).n();
        let h = self.value(xs[0]).h();
        let w = self.value(xs[0]).w();
        let total_c: usize = xs.iter().map(|&v| self.value(v).c()).sum();
        let mut out = Tensor::zeros([n, total_c, h, w]);
        let plane = h * w;
        for ni in 0..n {
            let mut co = 0;
            for &xv in xs {
                let t = self.value(xv);
                assert_eq!(t.n(), n);
                assert_eq!((t.h(), t.w()), (h, w), "concat: spatial mismatch");
                for ci in 0..t.c() {
                    let src = t.plane(ni, ci).to_vec();
                    out.plane_mut(ni, co + ci).copy_from_slice(&src);
                }
                co += t.c();
            }
        }
        let _ = plane;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, rg, Op::ConcatChannels(xs.iter().map(|v| v.0).collect()))
    }

    pub fn groupnorm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (v, cache) = kernels::groupnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            groups,
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            v,
            rg,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                cache,
            },
        )
    }

    /// Mean over each channel plane, to `(n, c, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let plane = t.plane_len() as f64;
        let mut out = Tensor::zeros([t.n(), t.c(), 1, 1]);
        for p in 0..t.n() * t.c() {
            out.data_mut()[p] = t.plane(p / t.c(), p % t.c()).iter().sum::<f64>() / plane;
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::GlobalAvgPool(x.0))
    }

    /// Max over each channel plane, to `(n, c, 1, 1)`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let plane = t.plane_len();
        let mut out = Tensor::zeros([t.n(), t.c(), 1, 1]);
        let mut idx = vec![0u32; t.n() * t.c()];
        for p in 0..t.n() * t.c() {
            let pl = t.plane(p / t.c(), p % t.c());
            let mut best = f64::NEG_INFINITY;
            let mut bi = 0;
            for (i, &v) in pl.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out.data_mut()[p] = best;
            idx[p] = bi as u32;
        }
        let _ = plane;
        let rg = self.rg(x);
        self.push(out, rg, Op::GlobalMaxPool { x: x.0, idx })
    }

    /// Mean across channels, to `(n, 1, h, w)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for ni in 0..n {
            let dst = out.plane_mut(ni, 0);
            for ci in 0..c {
                let start = ((ni * c + ci) * h * w, (ni * c + ci + 1) * h * w);
                let src = &t.data()[start.0..start.1];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= c as f64;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::ChannelMean(x.0))
    }

    /// Max across channels, to `(n, 1, h, w)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        let mut idx = vec![0u32; n * h * w];
        for ni in 0..n {
            for p in 0..h * w {
                let mut best = f64::NEG_INFINITY;
                let mut bc = 0u32;
                for ci in 0..c {
                    let v = t.data()[(ni * c + ci) * h * w + p];
                    if v > best {
                        best = v;
                        bc = ci as u32;
                    }
                }
                out.plane_mut(ni, 0)[p] = best;
                idx[ni * h * w + p] = bc;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::ChannelMax { x: x.0, idx })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, rg, Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(x);
        self.push(v, rg, Op::MeanAll(x.0))
    }

    /// Multiplies each (n, c) plane by `factors[n*C + c]` (spatial dropout).
    pub fn scale_channels(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let t = self.value(x);
        assert_eq!(factors.len(), t.n() * t.c());
        let plane = t.plane_len();
        let mut out = t.clone();
        for (p, &f) in factors.iter().enumerate() {
            for v in &mut out.data_mut()[p * plane..(p + 1) * plane] {
                *v *= f;
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::ScaleChannels { x: x.0, factors })
    }

    // ---- backward ----

    /// Runs the reverse sweep from `loss`, which must be scalar. Gradients
    /// accumulate on every node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    accumulate(head, *a, g);
                    accumulate(head, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(head, *a, g);
                    accumulate_scaled(head, *b, g, -1.0);
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&head[*b].value, |gv, bv| gv * bv);
                    let db = g.zip(&head[*a].value, |gv, av| gv * av);
                    accumulate(head, *a, &da);
                    accumulate(head, *b, &db);
                }
                Op::Div(a, b) => {
                    let av = &head[*a].value;
                    let bv = &head[*b].value;
                    let da = g.zip(bv, |gv, b| gv / b);
                    let db = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(av.data())
                            .zip(bv.data())
                            .map(|((gv, a), b)| -gv * a / (b * b))
                            .collect(),
                    );
                    accumulate(head, *a, &da);
                    accumulate(head, *b, &db);
                }
                Op::Affine(x, scale, _) => {
                    accumulate_scaled(head, *x, g, *scale);
                }
                Op::MulChannel(x, s) => {
                    let xv = &head[*x].value;
                    let sv = &head[*s].value;
                    let plane = xv.plane_len();
                    let mut dx = g.clone();
                    let mut ds = Tensor::zeros(sv.shape());
                    for p in 0..xv.n() * xv.c() {
                        let f = sv.data()[p];
                        let mut acc = 0.0;
                        for (dv, xval) in dx.data_mut()[p * plane..(p + 1) * plane]
                            .iter_mut()
                            .zip(&xv.data()[p * plane..(p + 1) * plane])
                        {
                            acc += *dv * xval;
                            *dv *= f;
                        }
                        ds.data_mut()[p] = acc;
                    }
                    accumulate(head, *x, &dx);
                    accumulate(head, *s, &ds);
                }
                Op::MulSpatial(x, m) => {
                    let xv = &head[*x].value;
                    let mv = &head[*m].value;
                    let [n, c, h, w] = xv.shape();
                    let plane = h * w;
                    let mut dx = g.clone();
                    let mut dm = Tensor::zeros(mv.shape());
                    for ni in 0..n {
                        for ci in 0..c {
                            let start = (ni * c + ci) * plane;
                            for p in 0..plane {
                                let gv = dx.data()[start + p];
                                dm.data_mut()[ni * plane + p] += gv * xv.data()[start + p];
                                dx.data_mut()[start + p] = gv * mv.data()[ni * plane + p];
                            }
                        }
                    }
                    accumulate(head, *x, &dx);
                    accumulate(head, *m, &dm);
                }
                Op::Sigmoid(x) => {
                    let d = g.zip(&node.value, |gv, y| gv * y * (1.0 - y));
                    accumulate(head, *x, &d);
                }
                Op::Swish(x) => {
                    let xv = &head[*x].value;
                    let d = g.zip(xv, |gv, v| {
                        let s = 1.0 / (1.0 + (-v).exp());
                        gv * (s + v * s * (1.0 - s))
                    });
                    accumulate(head, *x, &d);
                }
                Op::Relu(x) => {
                    let xv = &head[*x].value;
                    let d = g.zip(xv, |gv, v| if v > 0.0 { gv } else { 0.0 });
                    accumulate(head, *x, &d);
                }
                Op::LnClamped(x, floor) => {
                    let xv = &head[*x].value;
                    let f = *floor;
                    let d = g.zip(xv, |gv, v| if v >= f { gv / v } else { 0.0 });
                    accumulate(head, *x, &d);
                }
                Op::PowScalar(x, e) => {
                    let xv = &head[*x].value;
                    let e = *e;
                    let d = g.zip(xv, |gv, v| gv * e * v.powf(e - 1.0));
                    accumulate(head, *x, &d);
                }
                Op::Conv2d { x, w, b, dilation } => {
                    let (need_x, need_w) = (head[*x].requires_grad, head[*w].requires_grad);
                    if need_x {
                        let dx = kernels::conv2d_backward_input(
                            g,
                            &head[*w].value,
                            *dilation,
                            head[*x].value.shape(),
                        );
                        accumulate(head, *x, &dx);
                    }
                    if need_w || head[*b].requires_grad {
                        let (dw, db) = kernels::conv2d_backward_params(
                            &head[*x].value,
                            g,
                            *dilation,
                            head[*w].value.shape(),
                        );
                        accumulate(head, *w, &dw);
                        accumulate(head, *b, &db);
                    }
                }
                Op::MaxPool2 { x, idx } => {
                    let dx = kernels::maxpool2_backward(g, idx, head[*x].value.shape());
                    accumulate(head, *x, &dx);
                }
                Op::Pool3 { x, idx } => {
                    let dx = kernels::pool3_backward(g, idx, head[*x].value.shape());
                    accumulate(head, *x, &dx);
                }
                Op::Upsample2(x) => {
                    let dx = kernels::upsample2_backward(g, head[*x].value.shape());
                    accumulate(head, *x, &dx);
                }
                Op::ConcatChannels(parts) => {
                    let [n, _, h, w] = node.value.shape();
                    let plane = h * w;
                    let total_c = node.value.c();
                    let mut co = 0;
                    for &p in parts {
                        let pc = head[p].value.c();
                        if head[p].requires_grad {
                            let mut dp = Tensor::zeros(head[p].value.shape());
                            for ni in 0..n {
                                for ci in 0..pc {
                                    let src =
                                        &g.data()[(ni * total_c + co + ci) * plane..][..plane];
                                    dp.plane_mut(ni, ci).copy_from_slice(src);
                                }
                            }
                            accumulate(head, p, &dp);
                        }
                        co += pc;
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) = kernels::groupnorm_backward(
                        &head[*x].value,
                        &head[*gamma].value,
                        g,
                        cache,
                        *groups,
                    );
                    accumulate(head, *x, &dx);
                    accumulate(head, *gamma, &dgamma);
                    accumulate(head, *beta, &dbeta);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = head[*x].value.shape();
                    let plane = (xs[2] * xs[3]) as f64;
                    let mut dx = Tensor::zeros(xs);
                    let pl = xs[2] * xs[3];
                    for p in 0..xs[0] * xs[1] {
                        let gv = g.data()[p] / plane;
                        for v in &mut dx.data_mut()[p * pl..(p + 1) * pl] {
                            *v = gv;
                        }
                    }
                    accumulate(head, *x, &dx);
                }
                Op::GlobalMaxPool { x, idx } => {
                    let xs = head[*x].value.shape();
                    let pl = xs[2] * xs[3];
                    let mut dx = Tensor::zeros(xs);
                    for (p, &i) in idx.iter().enumerate() {
                        dx.data_mut()[p * pl + i as usize] += g.data()[p];
                    }
                    accumulate(head, *x, &dx);
                }
                Op::ChannelMean(x) => {
                    let [n, c, h, w] = head[*x].value.shape();
                    let plane = h * w;
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for ni in 0..n {
                        for ci in 0..c {
                            let start = (ni * c + ci) * plane;
                            for p in 0..plane {
                                dx.data_mut()[start + p] = g.data()[ni * plane + p] / c as f64;
                            }
                        }
                    }
                    accumulate(head, *x, &dx);
                }
                Op::ChannelMax { x, idx } => {
                    let [n, c, h, w] = head[*x].value.shape();
                    let plane = h * w;
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for ni in 0..n {
                        for p in 0..plane {
                            let ci = idx[ni * plane + p] as usize;
                            dx.data_mut()[(ni * c + ci) * plane + p] += g.data()[ni * plane + p];
                        }
                    }
                    accumulate(head, *x, &dx);
                }
                Op::SumAll(x) => {
                    let gv = g.data()[0];
                    let dx = Tensor::full(head[*x].value.shape(), gv);
                    accumulate(head, *x, &dx);
                }
                Op::MeanAll(x) => {
                    let len = head[*x].value.len() as f64;
                    let gv = g.data()[0] / len;
                    let dx = Tensor::full(head[*x].value.shape(), gv);
                    accumulate(head, *x, &dx);
                }
                Op::ScaleChannels { x, factors } => {
                    let plane = head[*x].value.plane_len();
                    let mut dx = g.clone();
                    for (p, &f) in factors.iter().enumerate() {
                        for v in &mut dx.data_mut()[p * plane..(p + 1) * plane] {
                            *v *= f;
                        }
                    }
                    accumulate(head, *x, &dx);
                }
            }
        }
    }
}

fn accumulate(nodes: &mut [Node], target: usize, delta: &Tensor) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut nodes[target].grad {
        Some(g) => {
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += dv;
            }
        }
        slot @ None => *slot = Some(delta.clone()),
    }
}

fn accumulate_scaled(nodes: &mut [Node], target: usize, delta: &Tensor, scale: f64) {
    if !nodes[target].requires_grad {
        return;
    }
    match &mut nodes[target].grad {
        Some(g) => {
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += scale * dv;
            }
        }
        slot @ None => *slot = Some(delta.map(|v| scale * v)),
    }
}

/// Central finite-difference gradient of `f` at `x0`, elementwise.
pub fn finite_difference<F: FnMut(&Tensor) -> f64>(x0: &Tensor, mut f: F, step: f64) -> Tensor {
    let mut g = Tensor::zeros(x0.shape());
    let mut probe = x0.clone();
    for i in 0..x0.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Max over elements of |ga - gfd| / max(|ga|, |gfd|, 1e-8).
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect())
    }

    /// Builds a scalar loss from a differentiable leaf and compares the
    /// autodiff gradient with central differences.
    fn check<F>(x0: Tensor, build: F, step: f64, tol: f64)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x).expect("missing gradient").clone();
        let numeric = finite_difference(
            &x0,
            |probe| {
                let mut g = Graph::new();
                let x = g.leaf(probe.clone());
                let loss = build(&mut g, x);
                g.scalar_value(loss)
            },
            step,
        );
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "gradient mismatch: {err} >= {tol}");
    }

    #[test]
    fn elementwise_op_gradients() {
        let x = rng_tensor([1, 2, 3, 4], 1, 0.1, 0.9);
        check(
            x.clone(),
            |g, v| {
                let s = g.sigmoid(v);
                let w = g.swish(s);
                let p = g.pow_scalar(w, 3.0);
                let l = g.ln_clamped(p, 1e-12);
                let a = g.affine(l, 0.7, 0.2);
                g.mean_all(a)
            },
            1e-5,
            1e-6,
        );
        check(
            x,
            |g, v| {
                let o = g.one_minus(v);
                let m = g.mul(v, o);
                let d = g.div(m, v);
                g.sum_all(d)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn conv_and_pool_gradients() {
        let x = rng_tensor([2, 2, 6, 8], 2, -1.0, 1.0);
        let w0 = rng_tensor([3, 2, 3, 3], 3, -0.5, 0.5);
        let b0 = rng_tensor([1, 1, 1, 3], 4, -0.1, 0.1);
        // input gradient
        check(
            x.clone(),
            |g, v| {
                let w = g.constant(w0.clone());
                let b = g.constant(b0.clone());
                let y = g.conv2d(v, w, b, 2);
                let p = g.maxpool2(y);
                g.sum_all(p)
            },
            1e-5,
            1e-6,
        );
        // weight gradient
        check(
            w0.clone(),
            |g, v| {
                let xx = g.constant(x.clone());
                let b = g.constant(b0.clone());
                let y = g.conv2d(xx, v, b, 1);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-5,
            1e-6,
        );
        // bias gradient
        check(
            b0,
            |g, v| {
                let xx = g.constant(x.clone());
                let w = g.constant(w0.clone());
                let y = g.conv2d(xx, w, v, 1);
                g.mean_all(y)
            },
            1e-5,
            1e-8,
        );
    }

    #[test]
    fn pool3_and_upsample_gradients() {
        // distinct values avoid pooling ties
        let mut base: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in (1..base.len()).rev() {
            let j = rng.random_range(0..=i);
            base.swap(i, j);
        }
        let x = Tensor::from_vec([1, 2, 4, 6], base);
        check(
            x.clone(),
            |g, v| {
                let mn = g.pool3(v, false);
                let mx = g.pool3(v, true);
                let d = g.sub(mx, mn);
                g.sum_all(d)
            },
            1e-6,
            1e-5,
        );
        check(
            x,
            |g, v| {
                let u = g.upsample2(v);
                let sq = g.mul(u, u);
                g.sum_all(sq)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn groupnorm_and_attention_op_gradients() {
        let x = rng_tensor([2, 4, 3, 5], 5, -1.2, 1.2);
        let gamma0 = rng_tensor([1, 1, 1, 4], 6, 0.5, 1.5);
        let beta0 = rng_tensor([1, 1, 1, 4], 7, -0.2, 0.2);
        check(
            x.clone(),
            |g, v| {
                let ga = g.constant(gamma0.clone());
                let be = g.constant(beta0.clone());
                let y = g.groupnorm(v, ga, be, 2, 1e-5);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-5,
            1e-5,
        );
        check(
            gamma0.clone(),
            |g, v| {
                let xx = g.constant(x.clone());
                let be = g.constant(beta0.clone());
                let y = g.groupnorm(xx, v, be, 2, 1e-5);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            1e-5,
            1e-6,
        );
        check(
            x.clone(),
            |g, v| {
                let a = g.global_avg_pool(v);
                let s = g.sigmoid(a);
                let y = g.mul_channel(v, s);
                let m = g.channel_mean(y);
                let mx = g.channel_max(y);
                let cat = g.concat_channels(&[m, mx]);
                let sm = g.channel_mean(cat);
                let sig = g.sigmoid(sm);
                let out = g.mul_spatial(y, sig);
                g.sum_all(out)
            },
            1e-5,
            1e-5,
        );
        check(
            x,
            |g, v| {
                let gm = g.global_max_pool(v);
                g.sum_all(gm)
            },
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn concat_routes_gradients_to_parts() {
        let a0 = rng_tensor([1, 2, 2, 2], 11, 0.0, 1.0);
        let b0 = rng_tensor([1, 3, 2, 2], 12, 0.0, 1.0);
        let mut g = Graph::new();
        let a = g.leaf(a0);
        let b = g.leaf(b0);
        let cat = g.concat_channels(&[a, b]);
        let s = g.sum_all(cat);
        g.backward(s);
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_scaling_backward() {
        let x = rng_tensor([1, 4, 2, 2], 13, -1.0, 1.0);
        let factors = vec![0.0, 2.0, 0.0, 2.0];
        let mut g = Graph::new();
        let v = g.leaf(x);
        let d = g.scale_channels(v, factors);
        let s = g.sum_all(d);
        g.backward(s);
        let dx = g.grad(v).unwrap();
        assert_eq!(dx.plane(0, 0), &[0.0; 4]);
        assert_eq!(dx.plane(0, 1), &[2.0; 4]);
    }
}
