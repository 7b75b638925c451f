//! Reverse-mode autodiff over eagerly evaluated graphs.
//!
//! Values are computed when a node is pushed; `backward` builds gradients as
//! new graph nodes, so gradients of gradients (needed for the R1 penalty)
//! come out of the same machinery. Geometry-dependent resampling (rasterized
//! texture lookups, tri-plane bilinear reads) enters the graph through
//! [`LinearPlan`]s: sparse linear maps on spatial indices, broadcast over
//! channels, whose adjoint is the same plan scattered instead of gathered.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Sparse linear map between two spatial index sets, applied per channel:
/// `out[c, o] += w * in[c, i]` for every `(o, i, w)` entry.
#[derive(Debug, Clone)]
pub struct LinearPlan {
    pub in_spatial: usize,
    pub out_spatial: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl LinearPlan {
    pub fn new(in_spatial: usize, out_spatial: usize, entries: Vec<(u32, u32, f64)>) -> Self {
        debug_assert!(entries
            .iter()
            .all(|&(o, i, _)| (o as usize) < out_spatial && (i as usize) < in_spatial));
        LinearPlan {
            in_spatial,
            out_spatial,
            entries,
        }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// x: [C, ...], bias: [C]
    AddBias(NodeId, NodeId),
    /// [C, ...] -> [C]
    SumChannels(NodeId),
    /// [C] -> [C, spatial]
    BroadcastChan(NodeId),
    SumAll(NodeId),
    BroadcastAll(NodeId),
    /// a: [M, K], b: [K, N]
    Matmul(NodeId, NodeId),
    Transpose2(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        pad: usize,
    },
    ConvGradInput {
        g: NodeId,
        w: NodeId,
        pad: usize,
    },
    ConvGradWeight {
        x: NodeId,
        g: NodeId,
        pad: usize,
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    LeakyRelu(NodeId, f64),
    Clamp01(NodeId),
    Abs(NodeId),
    Concat0(Vec<NodeId>),
    Slice0 {
        x: NodeId,
        from: usize,
    },
    /// Inverse of Slice0: place g into a zero tensor of `chans` channels.
    PadChan0 {
        x: NodeId,
        from: usize,
    },
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    Gather {
        x: NodeId,
        plan: Arc<LinearPlan>,
    },
    Scatter {
        g: NodeId,
        plan: Arc<LinearPlan>,
    },
    /// x: [C, M], w: [M] -> [C, M]
    MulBcast0(NodeId, NodeId),
    /// a, b: [C, M] -> [M], out[m] = sum_c a[c,m] b[c,m]
    Dot0(NodeId, NodeId),
    /// [M, S] -> [M]
    SumLast(NodeId, usize),
    /// [M] -> [M, S]
    BroadcastLast(NodeId, usize),
    /// exclusive prefix sums along the last axis of [M, S]
    CumsumExclLast(NodeId, usize),
    /// exclusive suffix sums along the last axis of [M, S]
    CumsumExclRevLast(NodeId, usize),
    Reshape(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from a `backward` pass, themselves nodes of the graph.
pub struct Grads {
    map: HashMap<NodeId, NodeId>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<NodeId> {
        self.map.get(&id).copied()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.idx()].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).scale(-1.0);
        self.push(Op::Neg(x), v)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(Op::Scale(x, c), v)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).map(|v| v + c);
        self.push(Op::AddConst(x), v)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.channels();
        let sp = xv.spatial();
        assert_eq!(bv.len(), c, "bias length must equal channel count");
        let mut out = xv.clone();
        {
            let data = out.data_mut();
            for ci in 0..c {
                let b = bv.data()[ci];
                for v in &mut data[ci * sp..(ci + 1) * sp] {
                    *v += b;
                }
            }
        }
        self.push(Op::AddBias(x, bias), out)
    }

    pub fn sum_channels(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = xv.channels();
        let sp = xv.spatial();
        let mut out = Vec::with_capacity(c);
        for chunk in xv.data().chunks(sp) {
            out.push(chunk.iter().sum());
        }
        self.push(Op::SumChannels(x), Tensor::new(&[c], out))
    }

    pub fn broadcast_chan(&mut self, x: NodeId, spatial: usize) -> NodeId {
        let xv = self.value(x);
        let c = xv.len();
        let mut out = Vec::with_capacity(c * spatial);
        for &v in xv.data() {
            out.extend(std::iter::repeat_n(v, spatial));
        }
        self.push(Op::BroadcastChan(x), Tensor::new(&[c, spatial], out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn broadcast_all(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).item();
        self.push(Op::BroadcastAll(x), Tensor::full(shape, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims");
        let ad = av.data();
        let bd = bv.data();
        let mut out = vec![0.0; m * n];
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for kk in 0..k {
                let a_ik = ad[i * k + kk];
                if a_ik == 0.0 {
                    continue;
                }
                let brow = &bd[kk * n..(kk + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a_ik * b;
                }
            }
        });
        self.push(Op::Matmul(a, b), Tensor::new(&[m, n], out))
    }

    pub fn transpose2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2);
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        self.push(Op::Transpose2(x), Tensor::new(&[n, m], out))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, pad: usize) -> NodeId {
        let v = conv2d_value(self.value(x), self.value(w), pad);
        self.push(Op::Conv2d { x, w, pad }, v)
    }

    fn conv_grad_input(&mut self, g: NodeId, w: NodeId, pad: usize, hw: (usize, usize)) -> NodeId {
        let v = conv_grad_input_value(self.value(g), self.value(w), pad, hw);
        self.push(Op::ConvGradInput { g, w, pad }, v)
    }

    fn conv_grad_weight(&mut self, x: NodeId, g: NodeId, pad: usize, k: usize) -> NodeId {
        let v = conv_grad_weight_value(self.value(x), self.value(g), pad, k);
        self.push(Op::ConvGradWeight { x, g, pad }, v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), v)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(softplus);
        self.push(Op::Softplus(x), v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), v)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::sqrt);
        self.push(Op::Sqrt(x), v)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::recip);
        self.push(Op::Recip(x), v)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(x, slope), v)
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(Op::Clamp01(x), v)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(Op::Abs(x), v)
    }

    pub fn concat0(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let sp = self.value(xs[0]).spatial();
        let mut chans = 0;
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            assert_eq!(v.spatial(), sp, "concat0 spatial extents differ");
            chans += v.channels();
            data.extend_from_slice(v.data());
        }
        let mut shape = self.value(xs[0]).shape().to_vec();
        shape[0] = chans;
        self.push(Op::Concat0(xs.to_vec()), Tensor::new(&shape, data))
    }

    pub fn slice0(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let xv = self.value(x);
        let sp = xv.spatial();
        let mut shape = xv.shape().to_vec();
        assert!(from < to && to <= shape[0]);
        shape[0] = to - from;
        let data = xv.data()[from * sp..to * sp].to_vec();
        self.push(Op::Slice0 { x, from }, Tensor::new(&shape, data))
    }

    fn pad_chan0(&mut self, x: NodeId, from: usize, chans: usize) -> NodeId {
        let xv = self.value(x);
        let sp = xv.spatial();
        let mut shape = xv.shape().to_vec();
        let own = shape[0];
        shape[0] = chans;
        let mut data = vec![0.0; chans * sp];
        data[from * sp..(from + own) * sp].copy_from_slice(xv.data());
        self.push(Op::PadChan0 { x, from }, Tensor::new(&shape, data))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = chw(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even extents");
        let (oh, ow) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = (ci * h + 2 * oy) * w + 2 * ox;
                    out[(ci * oh + oy) * ow + ox] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        self.push(Op::AvgPool2(x), Tensor::new(&[c, oh, ow], out))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (c, h, w) = chw(xv);
        let (oh, ow) = (h * 2, w * 2);
        let d = xv.data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ci * oh + oy) * ow + ox] = d[(ci * h + oy / 2) * w + ox / 2];
                }
            }
        }
        self.push(Op::UpsampleNearest2(x), Tensor::new(&[c, oh, ow], out))
    }

    /// Gather through a linear plan; output keeps the channel count of `x`
    /// with `plan.out_spatial` spatial positions.
    pub fn gather(&mut self, x: NodeId, plan: Arc<LinearPlan>) -> NodeId {
        let xv = self.value(x);
        let c = xv.channels();
        assert_eq!(xv.spatial(), plan.in_spatial, "gather plan input extent");
        let mut out = vec![0.0; c * plan.out_spatial];
        apply_plan(&plan, xv.data(), &mut out, c, false);
        let v = Tensor::new(&[c, plan.out_spatial], out);
        self.push(Op::Gather { x, plan }, v)
    }

    pub fn scatter(&mut self, g: NodeId, plan: Arc<LinearPlan>) -> NodeId {
        let gv = self.value(g);
        let c = gv.channels();
        assert_eq!(gv.spatial(), plan.out_spatial, "scatter plan output extent");
        let mut out = vec![0.0; c * plan.in_spatial];
        apply_plan(&plan, gv.data(), &mut out, c, true);
        let v = Tensor::new(&[c, plan.in_spatial], out);
        self.push(Op::Scatter { g, plan }, v)
    }

    pub fn mul_bcast0(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let c = xv.channels();
        let m = xv.spatial();
        assert_eq!(wv.len(), m, "mul_bcast0 weight length");
        let mut out = xv.clone();
        {
            let data = out.data_mut();
            for ci in 0..c {
                for (o, &wm) in data[ci * m..(ci + 1) * m].iter_mut().zip(wv.data()) {
                    *o *= wm;
                }
            }
        }
        self.push(Op::MulBcast0(x, w), out)
    }

    pub fn dot0(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "dot0 shapes");
        let c = av.channels();
        let m = av.spatial();
        let mut out = vec![0.0; m];
        for ci in 0..c {
            for (o, (&x, &y)) in out
                .iter_mut()
                .zip(av.data()[ci * m..].iter().zip(&bv.data()[ci * m..ci * m + m]))
            {
                *o += x * y;
            }
        }
        self.push(Op::Dot0(a, b), Tensor::new(&[m], out))
    }

    pub fn sum_last(&mut self, x: NodeId, s: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len() % s, 0);
        let m = xv.len() / s;
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            *o = xv.data()[i * s..(i + 1) * s].iter().sum();
        }
        self.push(Op::SumLast(x, s), Tensor::new(&[m], out))
    }

    pub fn broadcast_last(&mut self, x: NodeId, s: usize) -> NodeId {
        let xv = self.value(x);
        let m = xv.len();
        let mut out = Vec::with_capacity(m * s);
        for &v in xv.data() {
            out.extend(std::iter::repeat_n(v, s));
        }
        self.push(Op::BroadcastLast(x, s), Tensor::new(&[m, s], out))
    }

    pub fn cumsum_excl_last(&mut self, x: NodeId, s: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len() % s, 0);
        let mut out = vec![0.0; xv.len()];
        for (row_out, row_in) in out.chunks_mut(s).zip(xv.data().chunks(s)) {
            let mut acc = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = acc;
                acc += v;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::CumsumExclLast(x, s), Tensor::new(&shape, out))
    }

    fn cumsum_excl_rev_last(&mut self, x: NodeId, s: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.len() % s, 0);
        let mut out = vec![0.0; xv.len()];
        for (row_out, row_in) in out.chunks_mut(s).zip(xv.data().chunks(s)) {
            let mut acc = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in).rev() {
                *o = acc;
                acc += v;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Op::CumsumExclRevLast(x, s), Tensor::new(&shape, out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshaped(shape);
        self.push(Op::Reshape(x), v)
    }

    /// Convenience: mean of |a - b|.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean_all(d)
    }

    /// Convenience: mean of (a - b)^2.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let d2 = self.mul(d, d);
        self.mean_all(d2)
    }

    /// Gradients of `loss` (any shape; seeded with ones) w.r.t. every
    /// ancestor node. Gradients are nodes, so they can be differentiated
    /// again.
    pub fn backward(&mut self, loss: NodeId) -> Grads {
        let limit = loss.idx();
        let mut grad: Vec<Option<NodeId>> = vec![None; limit + 1];
        let seed = Tensor::full(self.value(loss).shape(), 1.0);
        grad[limit] = Some(self.leaf(seed));

        for idx in (0..=limit).rev() {
            let Some(g) = grad[idx] else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut grad, a, g);
                    self.accum(&mut grad, b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grad, a, g);
                    let ng = self.neg(g);
                    self.accum(&mut grad, b, ng);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b);
                    let gb = self.mul(g, a);
                    self.accum(&mut grad, a, ga);
                    self.accum(&mut grad, b, gb);
                }
                Op::Neg(x) => {
                    let gx = self.neg(g);
                    self.accum(&mut grad, x, gx);
                }
                Op::Scale(x, c) => {
                    let gx = self.scale(g, c);
                    self.accum(&mut grad, x, gx);
                }
                Op::AddConst(x) => self.accum(&mut grad, x, g),
                Op::AddBias(x, b) => {
                    self.accum(&mut grad, x, g);
                    let gb = self.sum_channels(g);
                    self.accum(&mut grad, b, gb);
                }
                Op::SumChannels(x) => {
                    let sp = self.value(x).spatial();
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.broadcast_chan(g, sp);
                    let gx = self.reshape(gx, &shape);
                    self.accum(&mut grad, x, gx);
                }
                Op::BroadcastChan(x) => {
                    let gx = self.sum_channels(g);
                    self.accum(&mut grad, x, gx);
                }
                Op::SumAll(x) => {
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.broadcast_all(g, &shape);
                    self.accum(&mut grad, x, gx);
                }
                Op::BroadcastAll(x) => {
                    let gx = self.sum_all(g);
                    self.accum(&mut grad, x, gx);
                }
                Op::Matmul(a, b) => {
                    let bt = self.transpose2(b);
                    let ga = self.matmul(g, bt);
                    let at = self.transpose2(a);
                    let gb = self.matmul(at, g);
                    self.accum(&mut grad, a, ga);
                    self.accum(&mut grad, b, gb);
                }
                Op::Transpose2(x) => {
                    let gx = self.transpose2(g);
                    self.accum(&mut grad, x, gx);
                }
                Op::Conv2d { x, w, pad } => {
                    let xv = self.value(x);
                    let hw = (xv.shape()[1], xv.shape()[2]);
                    let k = self.value(w).shape()[2];
                    let gx = self.conv_grad_input(g, w, pad, hw);
                    let gw = self.conv_grad_weight(x, g, pad, k);
                    self.accum(&mut grad, x, gx);
                    self.accum(&mut grad, w, gw);
                }
                Op::ConvGradInput { g: go, w, pad } => {
                    // value is x-shaped; upstream grad u is x-shaped
                    let k = self.value(w).shape()[2];
                    let gg = self.conv2d(g, w, pad);
                    let gw = self.conv_grad_weight(g, go, pad, k);
                    self.accum(&mut grad, go, gg);
                    self.accum(&mut grad, w, gw);
                }
                Op::ConvGradWeight { x, g: go, pad } => {
                    // value is w-shaped; upstream grad u is w-shaped
                    let xv = self.value(x);
                    let hw = (xv.shape()[1], xv.shape()[2]);
                    let gx = self.conv_grad_input(go, g, pad, hw);
                    let gg = self.conv2d(x, g, pad);
                    self.accum(&mut grad, x, gx);
                    self.accum(&mut grad, go, gg);
                }
                Op::Sigmoid(x) => {
                    // s' = s (1 - s), kept as graph ops so second-order
                    // derivatives (R1 penalty) stay exact
                    let y = NodeId(idx as u32);
                    let ny = self.neg(y);
                    let one_minus = self.add_const(ny, 1.0);
                    let d = self.mul(y, one_minus);
                    let gx = self.mul(g, d);
                    self.accum(&mut grad, x, gx);
                }
                Op::Tanh(x) => {
                    let y = NodeId(idx as u32);
                    let y2 = self.mul(y, y);
                    let ny2 = self.neg(y2);
                    let d = self.add_const(ny2, 1.0);
                    let gx = self.mul(g, d);
                    self.accum(&mut grad, x, gx);
                }
                Op::Softplus(x) => {
                    let s = self.sigmoid(x);
                    let gx = self.mul(g, s);
                    self.accum(&mut grad, x, gx);
                }
                Op::Exp(x) => {
                    let y = NodeId(idx as u32);
                    let gx = self.mul(g, y);
                    self.accum(&mut grad, x, gx);
                }
                Op::Sqrt(x) => {
                    // 0.5 / sqrt(x)
                    let y = NodeId(idx as u32);
                    let inv = self.recip(y);
                    let half = self.scale(inv, 0.5);
                    let gx = self.mul(g, half);
                    self.accum(&mut grad, x, gx);
                }
                Op::Recip(x) => {
                    // -1 / x^2
                    let y = NodeId(idx as u32);
                    let y2 = self.mul(y, y);
                    let ny2 = self.neg(y2);
                    let gx = self.mul(g, ny2);
                    self.accum(&mut grad, x, gx);
                }
                Op::LeakyRelu(x, slope) => {
                    let mask = self
                        .value(x)
                        .map(|v| if v > 0.0 { 1.0 } else { slope });
                    let m = self.leaf(mask);
                    let gx = self.mul(g, m);
                    self.accum(&mut grad, x, gx);
                }
                Op::Clamp01(x) => {
                    let mask = self
                        .value(x)
                        .map(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
                    let m = self.leaf(mask);
                    let gx = self.mul(g, m);
                    self.accum(&mut grad, x, gx);
                }
                Op::Abs(x) => {
                    let sign = self.value(x).map(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let s = self.leaf(sign);
                    let gx = self.mul(g, s);
                    self.accum(&mut grad, x, gx);
                }
                Op::Concat0(xs) => {
                    let mut from = 0;
                    for x in xs {
                        let c = self.value(x).channels();
                        let shape = self.value(x).shape().to_vec();
                        let slice = self.slice0(g, from, from + c);
                        let slice = self.reshape(slice, &shape);
                        self.accum(&mut grad, x, slice);
                        from += c;
                    }
                }
                Op::Slice0 { x, from } => {
                    let chans = self.value(x).channels();
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.pad_chan0(g, from, chans);
                    let gx = self.reshape(gx, &shape);
                    self.accum(&mut grad, x, gx);
                }
                Op::PadChan0 { x, from } => {
                    let c = self.value(x).channels();
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.slice0(g, from, from + c);
                    let gx = self.reshape(gx, &shape);
                    self.accum(&mut grad, x, gx);
                }
                Op::AvgPool2(x) => {
                    let up = self.upsample_nearest2(g);
                    let gx = self.scale(up, 0.25);
                    self.accum(&mut grad, x, gx);
                }
                Op::UpsampleNearest2(x) => {
                    let pooled = self.avg_pool2(g);
                    let gx = self.scale(pooled, 4.0);
                    self.accum(&mut grad, x, gx);
                }
                Op::Gather { x, plan } => {
                    let gx = self.scatter(g, plan);
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.reshape(gx, &shape);
                    self.accum(&mut grad, x, gx);
                }
                Op::Scatter { g: go, plan } => {
                    let gg = self.gather(g, plan);
                    let shape = self.value(go).shape().to_vec();
                    let gg = self.reshape(gg, &shape);
                    self.accum(&mut grad, go, gg);
                }
                Op::MulBcast0(x, w) => {
                    let gx = self.mul_bcast0(g, w);
                    let gw = self.dot0(g, x);
                    self.accum(&mut grad, x, gx);
                    self.accum(&mut grad, w, gw);
                }
                Op::Dot0(a, b) => {
                    let ga = self.mul_bcast0(b, g);
                    let gb = self.mul_bcast0(a, g);
                    self.accum(&mut grad, a, ga);
                    self.accum(&mut grad, b, gb);
                }
                Op::SumLast(x, s) => {
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.broadcast_last(g, s);
                    let gx = self.reshape(gx, &shape);
                    self.accum(&mut grad, x, gx);
                }
                Op::BroadcastLast(x, s) => {
                    let gx = self.sum_last(g, s);
                    self.accum(&mut grad, x, gx);
                }
                Op::CumsumExclLast(x, s) => {
                    let gx = self.cumsum_excl_rev_last(g, s);
                    self.accum(&mut grad, x, gx);
                }
                Op::CumsumExclRevLast(x, s) => {
                    let gx = self.cumsum_excl_last(g, s);
                    self.accum(&mut grad, x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.value(x).shape().to_vec();
                    let gx = self.reshape(g, &shape);
                    self.accum(&mut grad, x, gx);
                }
            }
        }

        let map = grad
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| g.map(|g| (NodeId(i as u32), g)))
            .collect();
        Grads { map }
    }

    fn accum(&mut self, grad: &mut [Option<NodeId>], target: NodeId, g: NodeId) {
        let slot = &mut grad[target.idx()];
        match *slot {
            None => *slot = Some(g),
            Some(prev) => {
                let sum = self.add(prev, g);
                grad[target.idx()] = Some(sum);
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    assert_eq!(t.shape().len(), 3, "expected [C, H, W], got {:?}", t.shape());
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

fn conv2d_value(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (ci, h, wd) = chw(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
    let (co, ci2, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(ws[3], k);
    assert_eq!(ci, ci2, "conv input channels");
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; co * h * wd];
    out.par_chunks_mut(h * wd).enumerate().for_each(|(o, dst)| {
        for c in 0..ci {
            let wbase = ((o * ci) + c) * k * k;
            let xbase = c * h * wd;
            for dy in 0..k {
                for dx in 0..k {
                    let wv = wdat[wbase + dy * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let oy_lo = pad.saturating_sub(dy);
                    let oy_hi = (h + pad - dy).min(h);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + dy - pad;
                        let ox_lo = pad.saturating_sub(dx);
                        let ox_hi = (wd + pad - dx).min(wd);
                        let src = &xd[xbase + iy * wd..xbase + iy * wd + wd];
                        let drow = &mut dst[oy * wd..(oy + 1) * wd];
                        for ox in ox_lo..ox_hi {
                            drow[ox] += wv * src[ox + dx - pad];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[co, h, wd], out)
}

fn conv_grad_input_value(g: &Tensor, w: &Tensor, pad: usize, hw: (usize, usize)) -> Tensor {
    let (co, gh, gw) = chw(g);
    let ws = w.shape();
    let (co2, ci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(co, co2, "conv grad-input channels");
    assert_eq!((gh, gw), hw, "stride-1 same conv keeps extents");
    let gd = g.data();
    let wdat = w.data();
    let (h, wd) = hw;
    let mut out = vec![0.0; ci * h * wd];
    out.par_chunks_mut(h * wd).enumerate().for_each(|(c, dst)| {
        for o in 0..co {
            let wbase = ((o * ci) + c) * k * k;
            let gbase = o * gh * gw;
            for dy in 0..k {
                for dx in 0..k {
                    let wv = wdat[wbase + dy * k + dx];
                    if wv == 0.0 {
                        continue;
                    }
                    let oy_lo = pad.saturating_sub(dy);
                    let oy_hi = (h + pad - dy).min(h);
                    for oy in oy_lo..oy_hi {
                        let iy = oy + dy - pad;
                        let ox_lo = pad.saturating_sub(dx);
                        let ox_hi = (wd + pad - dx).min(wd);
                        let grow = &gd[gbase + oy * gw..gbase + oy * gw + gw];
                        let drow = &mut dst[iy * wd..(iy + 1) * wd];
                        for ox in ox_lo..ox_hi {
                            drow[ox + dx - pad] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(&[ci, h, wd], out)
}

fn conv_grad_weight_value(x: &Tensor, g: &Tensor, pad: usize, k: usize) -> Tensor {
    let (ci, h, wd) = chw(x);
    let (co, gh, gw) = chw(g);
    assert_eq!((gh, gw), (h, wd));
    let xd = x.data();
    let gd = g.data();
    let mut out = vec![0.0; co * ci * k * k];
    out.par_chunks_mut(ci * k * k)
        .enumerate()
        .for_each(|(o, dst)| {
            let gbase = o * h * wd;
            for c in 0..ci {
                let xbase = c * h * wd;
                for dy in 0..k {
                    for dx in 0..k {
                        let mut acc = 0.0;
                        let oy_lo = pad.saturating_sub(dy);
                        let oy_hi = (h + pad - dy).min(h);
                        for oy in oy_lo..oy_hi {
                            let iy = oy + dy - pad;
                            let ox_lo = pad.saturating_sub(dx);
                            let ox_hi = (wd + pad - dx).min(wd);
                            let xrow = &xd[xbase + iy * wd..xbase + iy * wd + wd];
                            let grow = &gd[gbase + oy * wd..gbase + oy * wd + wd];
                            for ox in ox_lo..ox_hi {
                                acc += xrow[ox + dx - pad] * grow[ox];
                            }
                        }
                        dst[c * k * k + dy * k + dx] = acc;
                    }
                }
            }
        });
    Tensor::new(&[co, ci, k, k], out)
}

fn apply_plan(plan: &LinearPlan, src: &[f64], dst: &mut [f64], channels: usize, transpose: bool) {
    let (src_sp, dst_sp) = if transpose {
        (plan.out_spatial, plan.in_spatial)
    } else {
        (plan.in_spatial, plan.out_spatial)
    };
    debug_assert_eq!(src.len(), channels * src_sp);
    debug_assert_eq!(dst.len(), channels * dst_sp);
    for &(o, i, w) in &plan.entries {
        let (from, to) = if transpose {
            (o as usize, i as usize)
        } else {
            (i as usize, o as usize)
        };
        for c in 0..channels {
            dst[c * dst_sp + to] += w * src[c * src_sp + from];
        }
    }
}
