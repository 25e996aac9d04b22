//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a closure that maps the output gradient to parent gradients. Graphs
//! are built per forward pass and dropped afterwards. Everything runs on one
//! thread in a fixed order, so results are bitwise reproducible.
//!
//! Only the operations needed by the diffusion U-Net and the clustering
//! objective are provided. Shape agreement inside the graph is an internal
//! invariant (checked with assertions); public entry points validate user
//! input before building graphs.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }
}

/// `c = a·b + beta·c` for row-major operands, optionally transposed.
///
/// `a` is logically `m×k` and `b` is `k×n`; when a transpose flag is set the
/// operand is stored as its transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element addressed by these strides.
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

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<usize>,
}

/// A recording tape of tensor operations.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads[var.id].as_ref()
    }

    /// Gradient per parameter slot; slots that did not take part are `None`.
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for &(node, slot) in &self.params {
            if let Some(g) = &self.grads[node] {
                match &mut out[slot] {
                    Some(acc) => acc.add_assign(g),
                    empty => *empty = Some(g.clone()),
                }
            }
        }
        out
    }
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A graph for inference only: values are computed, nothing is recorded.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool, param: Option<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.record,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that gradients do not flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false, None)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, None)
    }

    /// A trainable parameter occupying `slot` in its store.
    pub fn param(&self, slot: usize, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true, Some(slot))
    }

    /// Appends an operation node. `backward` receives the output gradient and
    /// a mask of which parents need gradients.
    pub(crate) fn op<F>(&self, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = self.record && ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: ids,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
            param: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn value(&self, var: Var<'_>) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[var.id].value)
    }

    /// Back-propagates from a one-element output.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad, &mask);
            for ((&p, g), needed) in node.parents.iter().zip(parent_grads).zip(mask) {
                if let (Some(g), true) = (g, needed) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|slot| (i, slot)))
            .collect();
        Gradients { grads, params }
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'g> {
        let x = self.value();
        let y = x.map(&f);
        let y_rc = Rc::new(y.clone());
        self.graph.op(y, &[self], move |g, _| {
            let mut dx = g.clone();
            for ((d, &xv), &yv) in dx.data.iter_mut().zip(&x.data).zip(&y_rc.data) {
                *d *= df(xv, yv);
            }
            vec![Some(dx)]
        })
    }

    pub fn add(self, other: Var<'g>) -> Var<'g> {
        let y = self.value().zip(&other.value(), |a, b| a + b);
        self.graph
            .op(y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g>) -> Var<'g> {
        let y = self.value().zip(&other.value(), |a, b| a - b);
        self.graph
            .op(y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let y = a.zip(&b, |x, y| x * y);
        self.graph.op(y, &[self, other], move |g, mask| {
            vec![
                mask[0].then(|| g.zip(&b, |d, v| d * v)),
                mask[1].then(|| g.zip(&a, |d, v| d * v)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let y = self.value().map(|v| v * c);
        self.graph.op(y, &[self], move |g, _| vec![Some(g.map(|d| d * c))])
    }

    pub fn exp(self) -> Var<'g> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn square(self) -> Var<'g> {
        self.unary(|v| v * v, |x, _| 2.0 * x)
    }

    pub fn silu(self) -> Var<'g> {
        self.unary(
            |v| v / (1.0 + (-v).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g> {
        self.unary(
            move |v| v.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.data.iter().sum());
        self.graph
            .op(y, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    /// `x·wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let (n, i) = x.dims2();
        let (o, wi) = w.dims2();
        assert_eq!(i, wi, "linear input width");
        let b = bias.value();
        assert_eq!(b.shape(), [o]);
        let mut y = Tensor::zeros(&[n, o]);
        for row in y.data.chunks_mut(o) {
            row.copy_from_slice(&b.data);
        }
        gemm(n, i, o, &x.data, false, &w.data, true, 1.0, &mut y.data);
        self.graph.op(y, &[self, weight, bias], move |g, mask| {
            let dx = mask[0].then(|| {
                let mut dx = Tensor::zeros(&[n, i]);
                gemm(n, o, i, &g.data, false, &w.data, false, 0.0, &mut dx.data);
                dx
            });
            let dw = mask[1].then(|| {
                let mut dw = Tensor::zeros(&[o, i]);
                gemm(o, n, i, &g.data, true, &x.data, false, 0.0, &mut dw.data);
                dw
            });
            let db = mask[2].then(|| {
                let mut db = Tensor::zeros(&[o]);
                for row in g.data.chunks(o) {
                    for (a, v) in db.data.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                db
            });
            vec![dx, dw, db]
        })
    }

    /// Stride-1 2-D convolution with zero padding. `weight: [O, C, k, k]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, padding: usize) -> Var<'g> {
        let (x, w) = (self.value(), weight.value());
        let (n, c, h, wd) = x.dims4();
        let (o, wc, k, k2) = w.dims4();
        assert_eq!((wc, k), (c, k2), "conv weight {:?} vs input {:?}", w.shape(), x.shape());
        assert!(h + 2 * padding >= k && wd + 2 * padding >= k);
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            pad: padding,
            ho: h + 2 * padding + 1 - k,
            wo: wd + 2 * padding + 1 - k,
        };
        let b = bias.value();
        assert_eq!(b.shape(), [o]);
        let (ckk, hw_out, hw_in) = (c * k * k, geom.ho * geom.wo, h * wd);
        let mut y = Tensor::zeros(&[n, o, geom.ho, geom.wo]);
        let mut cols = vec![0.0; ckk * hw_out];
        for i in 0..n {
            let xi = &x.data[i * c * hw_in..(i + 1) * c * hw_in];
            let yi = &mut y.data[i * o * hw_out..(i + 1) * o * hw_out];
            for (row, &bv) in yi.chunks_mut(hw_out).zip(&b.data) {
                row.fill(bv);
            }
            let src = geom.columns(xi, &mut cols);
            gemm(o, ckk, hw_out, &w.data, false, src, false, 1.0, yi);
        }
        self.graph.op(y, &[self, weight, bias], move |g, mask| {
            let mut dx = mask[0].then(|| Tensor::zeros(x.shape()));
            let mut dw = mask[1].then(|| Tensor::zeros(w.shape()));
            let mut db = mask[2].then(|| Tensor::zeros(&[o]));
            let mut cols = vec![0.0; ckk * hw_out];
            let mut dcols = vec![0.0; ckk * hw_out];
            for i in 0..n {
                let gi = &g.data[i * o * hw_out..(i + 1) * o * hw_out];
                if let Some(db) = &mut db {
                    for (a, row) in db.data.iter_mut().zip(gi.chunks(hw_out)) {
                        *a += row.iter().sum::<f64>();
                    }
                }
                if let Some(dw) = &mut dw {
                    let xi = &x.data[i * c * hw_in..(i + 1) * c * hw_in];
                    let src = geom.columns(xi, &mut cols);
                    gemm(o, hw_out, ckk, gi, false, src, true, 1.0, &mut dw.data);
                }
                if let Some(dx) = &mut dx {
                    gemm(ckk, o, hw_out, &w.data, true, gi, false, 0.0, &mut dcols);
                    let dxi = &mut dx.data[i * c * hw_in..(i + 1) * c * hw_in];
                    geom.accumulate_columns(&dcols, dxi);
                }
            }
            vec![dx, dw, db]
        })
    }

    /// 2×2 average pooling.
    pub fn avg_pool2(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        for p in 0..n * c {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            let dst = &mut y.data[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let base = 2 * i * w + 2 * j;
                    dst[i * wo + j] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph.op(y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            for p in 0..n * c {
                let gs = &g.data[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        let v = 0.25 * gs[i * wo + j];
                        let base = 2 * i * w + 2 * j;
                        dst[base] += v;
                        dst[base + 1] += v;
                        dst[base + w] += v;
                        dst[base + w + 1] += v;
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ho, wo) = (2 * h, 2 * w);
        let mut y = Tensor::zeros(&[n, c, ho, wo]);
        for p in 0..n * c {
            let src = &x.data[p * h * w..(p + 1) * h * w];
            let dst = &mut y.data[p * ho * wo..(p + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    dst[i * wo + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph.op(y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&shape);
            for p in 0..n * c {
                let gs = &g.data[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
                for i in 0..ho {
                    for j in 0..wo {
                        dst[(i / 2) * w + j / 2] += gs[i * wo + j];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels shapes");
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&a.data[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&b.data[i * sb..(i + 1) * sb]);
        }
        let y = Tensor {
            shape: vec![n, ca + cb, h, w],
            data,
        };
        self.graph.op(y, &[self, other], move |g, mask| {
            let split = |first: bool| {
                let (off, len, c) = if first { (0, sa, ca) } else { (sa, sb, cb) };
                let mut out = Vec::with_capacity(n * len);
                for i in 0..n {
                    let base = i * (sa + sb) + off;
                    out.extend_from_slice(&g.data[base..base + len]);
                }
                Tensor {
                    shape: vec![n, c, h, w],
                    data: out,
                }
            };
            vec![mask[0].then(|| split(true)), mask[1].then(|| split(false))]
        })
    }

    /// Group normalization with per-channel affine `gamma`, `beta`.
    pub fn group_norm(self, groups: usize, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(groups > 0 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.shape(), [c]);
        assert_eq!(bt.shape(), [c]);
        let cpg = c / groups;
        let hw = h * w;
        let m = cpg * hw;
        let mut xhat = Tensor::zeros(x.shape());
        let mut rstd = vec![0.0; n * groups];
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            for gi in 0..groups {
                let start = (i * c + gi * cpg) * hw;
                let xs = &x.data[start..start + m];
                let mean = xs.iter().sum::<f64>() / m as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd[i * groups + gi] = r;
                for (j, &v) in xs.iter().enumerate() {
                    let ch = gi * cpg + j / hw;
                    let xh = (v - mean) * r;
                    xhat.data[start + j] = xh;
                    y.data[start + j] = xh * gm.data[ch] + bt.data[ch];
                }
            }
        }
        self.graph.op(y, &[self, gamma, beta], move |g, mask| {
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            let mut dx = mask[0].then(|| Tensor::zeros(&[n, c, h, w]));
            for i in 0..n {
                for gi in 0..groups {
                    let start = (i * c + gi * cpg) * hw;
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for j in 0..m {
                        let ch = gi * cpg + j / hw;
                        let (gv, xh) = (g.data[start + j], xhat.data[start + j]);
                        dgamma.data[ch] += gv * xh;
                        dbeta.data[ch] += gv;
                        let d = gv * gm.data[ch];
                        sum_d += d;
                        sum_dx += d * xh;
                    }
                    if let Some(dx) = &mut dx {
                        let r = rstd[i * groups + gi];
                        let inv_m = 1.0 / m as f64;
                        for j in 0..m {
                            let ch = gi * cpg + j / hw;
                            let d = g.data[start + j] * gm.data[ch];
                            let xh = xhat.data[start + j];
                            dx.data[start + j] = r * (d - inv_m * sum_d - xh * inv_m * sum_dx);
                        }
                    }
                }
            }
            vec![dx, mask[1].then_some(dgamma), mask[2].then_some(dbeta)]
        })
    }

    /// Per-channel modulation `x·(1 + scale) + shift` with `scale, shift: [N, C]`.
    pub fn film(self, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
        let (x, s, t) = (self.value(), scale.value(), shift.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(s.shape(), [n, c]);
        assert_eq!(t.shape(), [n, c]);
        let hw = h * w;
        let mut y = Tensor::zeros(x.shape());
        for p in 0..n * c {
            let (a, b) = (1.0 + s.data[p], t.data[p]);
            for j in 0..hw {
                y.data[p * hw + j] = x.data[p * hw + j] * a + b;
            }
        }
        self.graph.op(y, &[self, scale, shift], move |g, mask| {
            let mut dx = mask[0].then(|| Tensor::zeros(&[n, c, h, w]));
            let mut ds = Tensor::zeros(&[n, c]);
            let mut dt = Tensor::zeros(&[n, c]);
            for p in 0..n * c {
                let a = 1.0 + s.data[p];
                for j in 0..hw {
                    let gv = g.data[p * hw + j];
                    ds.data[p] += gv * x.data[p * hw + j];
                    dt.data[p] += gv;
                    if let Some(dx) = &mut dx {
                        dx.data[p * hw + j] = gv * a;
                    }
                }
            }
            vec![dx, mask[1].then_some(ds), mask[2].then_some(dt)]
        })
    }

    /// Spatial mean, `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let y = Tensor {
            shape: vec![n, c],
            data: x
                .data
                .chunks(hw)
                .map(|ch| ch.iter().sum::<f64>() / hw as f64)
                .collect(),
        };
        self.graph.op(y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for (p, chunk) in dx.data.chunks_mut(hw).enumerate() {
                chunk.fill(g.data[p] / hw as f64);
            }
            vec![Some(dx)]
        })
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, prod]`.
    pub fn flatten(self) -> Var<'g> {
        let x = self.value();
        let shape = x.shape.clone();
        let n = shape[0];
        let d = shape[1..].iter().product();
        let y = Tensor {
            shape: vec![n, d],
            data: x.data.clone(),
        };
        self.graph.op(y, &[self], move |g, _| {
            vec![Some(Tensor {
                shape: shape.clone(),
                data: g.data.clone(),
            })]
        })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn narrow_cols(self, start: usize, len: usize) -> Var<'g> {
        let x = self.value();
        let (n, d) = x.dims2();
        assert!(start + len <= d);
        let data = x
            .data
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let y = Tensor {
            shape: vec![n, len],
            data,
        };
        self.graph.op(y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, d]);
            for (row, grow) in dx.data.chunks_mut(d).zip(g.data.chunks(len)) {
                row[start..start + len].copy_from_slice(grow);
            }
            vec![Some(dx)]
        })
    }

    /// Row sums of a matrix, `[N, D] -> [N, 1]`.
    pub fn sum_cols(self) -> Var<'g> {
        let x = self.value();
        let (n, d) = x.dims2();
        let y = Tensor {
            shape: vec![n, 1],
            data: x.data.chunks(d).map(|r| r.iter().sum()).collect(),
        };
        self.graph.op(y, &[self], move |g, _| {
            let mut dx = Tensor::zeros(&[n, d]);
            for (row, &gv) in dx.data.chunks_mut(d).zip(&g.data) {
                row.fill(gv);
            }
            vec![Some(dx)]
        })
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    /// Unfolds one image into `[C·k·k, Ho·Wo]`; pointwise convolutions use the
    /// image itself.
    fn columns<'a>(&self, x: &'a [f64], cols: &'a mut [f64]) -> &'a [f64] {
        if self.is_pointwise() {
            return x;
        }
        let ConvGeom { c, h, w, k, pad, ho, wo } = *self;
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox + kj) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`ConvGeom::columns`]: folds column gradients back into `dx`.
    fn accumulate_columns(&self, dcols: &[f64], dx: &mut [f64]) {
        let ConvGeom { c, h, w, k, pad, ho, wo } = *self;
        if self.is_pointwise() {
            for (d, v) in dx.iter_mut().zip(dcols) {
                *d += v;
            }
            return;
        }
        for ci in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &dcols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
