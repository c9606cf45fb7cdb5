use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::conv::{self, ConvGeom};
use crate::tensor::{self, numel, Tensor};

/// A node in a define-by-run computation graph.
///
/// Every backward rule is itself written with `Var` operations, so gradients
/// computed with `create_graph = true` can be differentiated again.
#[derive(Clone)]
pub struct Var(Rc<Node>);

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    AddScalar(Var),
    Recip(Var),
    Sqrt(Var),
    Tanh(Var),
    /// Multiplication by a fixed 0/1-style mask.
    Masked(Var, Tensor),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    Embed(Var, usize),
    Conv(Var, Var, ConvGeom),
    ConvTranspose(Var, Var, ConvGeom),
    ConvFilterGrad(Var, Var, ConvGeom),
    Gather(Var, Arc<Vec<u32>>),
    Scatter(Var, Arc<Vec<u32>>),
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn node(value: Tensor, op: Op, parents_need_grad: bool) -> Self {
        let op = if parents_need_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            value,
            op,
            requires_grad: parents_need_grad,
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Self::node(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    fn id(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    pub fn add(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a + b);
        Var::node(v, Op::Add(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn sub(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a - b);
        Var::node(v, Op::Sub(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn mul(&self, other: &Var) -> Var {
        let v = self.value().zip_map(other.value(), |a, b| a * b);
        Var::node(v, Op::Mul(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn div(&self, other: &Var) -> Var {
        self.mul(&other.recip())
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn neg(&self) -> Var {
        Var::node(self.value().map(|a| -a), Op::Neg(self.clone()), self.requires_grad())
    }

    pub fn scale(&self, c: f32) -> Var {
        Var::node(self.value().map(|a| a * c), Op::Scale(self.clone(), c), self.requires_grad())
    }

    pub fn add_scalar(&self, c: f32) -> Var {
        Var::node(self.value().map(|a| a + c), Op::AddScalar(self.clone()), self.requires_grad())
    }

    /// `1 / x`, defined as 0 where `x == 0`.
    pub fn recip(&self) -> Var {
        let v = self.value().map(|a| if a == 0.0 { 0.0 } else { 1.0 / a });
        Var::node(v, Op::Recip(self.clone()), self.requires_grad())
    }

    /// Square root; its derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Var {
        Var::node(self.value().map(f32::sqrt), Op::Sqrt(self.clone()), self.requires_grad())
    }

    pub fn tanh(&self) -> Var {
        Var::node(self.value().map(f32::tanh), Op::Tanh(self.clone()), self.requires_grad())
    }

    pub fn leaky_relu(&self, slope: f32) -> Var {
        let mask = self.value().map(|a| if a > 0.0 { 1.0 } else { slope });
        self.masked(mask)
    }

    pub fn relu(&self) -> Var {
        self.leaky_relu(0.0)
    }

    /// `|x|`, with derivative -1 at 0.
    pub fn abs(&self) -> Var {
        self.leaky_relu(-1.0)
    }

    fn masked(&self, mask: Tensor) -> Var {
        let v = self.value().zip_map(&mask, |a, m| a * m);
        Var::node(v, Op::Masked(self.clone(), mask), self.requires_grad())
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let v = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        Var::node(v, Op::Reshape(self.clone()), self.requires_grad())
    }

    /// Replicates along size-1 axes; ranks must agree.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = tensor::broadcast_data(self.value(), shape);
        Var::node(v, Op::BroadcastTo(self.clone()), self.requires_grad())
    }

    /// Sums down to `shape`, which has 1 on every reduced axis.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        let v = tensor::sum_to_data(self.value(), shape);
        Var::node(v, Op::SumTo(self.clone()), self.requires_grad())
    }

    /// Sum of all elements, as a shape-`[1]` value.
    pub fn sum(&self) -> Var {
        let ones = vec![1; self.shape().len()];
        self.sum_to(&ones).reshape(&[1])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// Per-sample sum over all non-leading axes; result has shape `[N]`.
    pub fn sum_per_sample(&self) -> Var {
        let mut shape = vec![1; self.shape().len()];
        shape[0] = self.shape()[0];
        self.sum_to(&shape).reshape(&[self.shape()[0]])
    }

    /// Concatenates along axis 1.
    pub fn concat(parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let outer = first[0];
        let inner: usize = numel(&first[2..]);
        let mut total_c = 0;
        for p in parts {
            assert_eq!(p.shape()[0], outer, "concat batch mismatch");
            assert_eq!(&p.shape()[2..], &first[2..], "concat trailing mismatch");
            total_c += p.shape()[1];
        }
        let mut data = Vec::with_capacity(outer * total_c * inner);
        for b in 0..outer {
            for p in parts {
                let chunk = p.shape()[1] * inner;
                data.extend_from_slice(&p.value().data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[1] = total_c;
        let need = parts.iter().any(Var::requires_grad);
        Var::node(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), need)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn narrow(&self, start: usize, len: usize) -> Var {
        let shape = self.shape();
        let (outer, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
        assert!(start + len <= c);
        let mut data = Vec::with_capacity(outer * len * inner);
        for b in 0..outer {
            let base = (b * c + start) * inner;
            data.extend_from_slice(&self.value().data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = len;
        Var::node(Tensor::from_parts(out_shape, data), Op::Narrow(self.clone(), start), self.requires_grad())
    }

    /// Zero-pads along axis 1 so this value occupies channels
    /// `start..start + C` of `total`. Adjoint of [`Var::narrow`].
    pub fn embed(&self, start: usize, total: usize) -> Var {
        let shape = self.shape();
        let (outer, c, inner) = (shape[0], shape[1], numel(&shape[2..]));
        assert!(start + c <= total);
        let mut data = vec![0f32; outer * total * inner];
        for b in 0..outer {
            let base = (b * total + start) * inner;
            data[base..base + c * inner].copy_from_slice(&self.value().data()[b * c * inner..(b + 1) * c * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = total;
        Var::node(Tensor::from_parts(out_shape, data), Op::Embed(self.clone(), start), self.requires_grad())
    }

    /// 2-D convolution of `self` (N, Ci, H, W) with `filters` (Co, Ci, k, k).
    pub fn conv2d(&self, filters: &Var, geom: ConvGeom) -> Var {
        let v = conv::conv2d(self.value(), filters.value(), &geom);
        let need = self.requires_grad() || filters.requires_grad();
        Var::node(v, Op::Conv(self.clone(), filters.clone(), geom), need)
    }

    /// Transposed convolution of `self` (N, Co, Ho, Wo) with `filters`
    /// (Co, Ci, k, k), producing (N, Ci, H, W) per `geom.in_hw`.
    pub fn conv_transpose2d(&self, filters: &Var, geom: ConvGeom) -> Var {
        let v = conv::conv2d_transpose(self.value(), filters.value(), &geom);
        let need = self.requires_grad() || filters.requires_grad();
        Var::node(v, Op::ConvTranspose(self.clone(), filters.clone(), geom), need)
    }

    fn conv_filter_grad(x: &Var, y: &Var, geom: ConvGeom) -> Var {
        let v = conv::conv2d_filter_grad(x.value(), y.value(), &geom);
        let need = x.requires_grad() || y.requires_grad();
        Var::node(v, Op::ConvFilterGrad(x.clone(), y.clone(), geom), need)
    }

    /// 2×2 max pooling with stride 2 (trailing odd rows/columns dropped).
    pub fn max_pool2(&self) -> Var {
        let s = self.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let data = self.value().data();
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    idx.push(best as u32);
                }
            }
        }
        self.gather(Arc::new(idx), &[n, c, ho, wo])
    }

    fn gather(&self, idx: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let src = self.value().data();
        let data = idx.iter().map(|&i| src[i as usize]).collect();
        Var::node(Tensor::from_parts(shape.to_vec(), data), Op::Gather(self.clone(), idx), self.requires_grad())
    }

    fn scatter(&self, idx: Arc<Vec<u32>>, shape: &[usize]) -> Var {
        let mut data = vec![0f32; numel(shape)];
        for (&i, &v) in idx.iter().zip(self.value().data()) {
            data[i as usize] += v;
        }
        Var::node(Tensor::from_parts(shape.to_vec(), data), Op::Scatter(self.clone(), idx), self.requires_grad())
    }

    fn parents(&self) -> Vec<&Var> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Conv(a, b, _) | Op::ConvTranspose(a, b, _) | Op::ConvFilterGrad(a, b, _) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Recip(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Masked(a, _)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::SumTo(a)
            | Op::Narrow(a, _)
            | Op::Embed(a, _)
            | Op::Gather(a, _)
            | Op::Scatter(a, _) => vec![a],
            Op::Concat(parts) => parts.iter().collect(),
        }
    }

    /// Pushes `grad` (the gradient of the output w.r.t. this node) to the
    /// parents. Returned entries pair each parent with its contribution.
    fn backward_step(&self, grad: &Var, create_graph: bool) -> Vec<(Var, Var)> {
        let keep = |v: &Var| if create_graph { v.clone() } else { v.detach() };
        let this = || keep(self);
        let mut out = Vec::with_capacity(2);
        let mut push = |parent: &Var, g: Var| {
            if parent.requires_grad() {
                out.push((parent.clone(), g));
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, grad.clone());
                push(b, grad.clone());
            }
            Op::Sub(a, b) => {
                push(a, grad.clone());
                push(b, grad.neg());
            }
            Op::Mul(a, b) => {
                push(a, grad.mul(&keep(b)));
                push(b, grad.mul(&keep(a)));
            }
            Op::Neg(a) => push(a, grad.neg()),
            Op::Scale(a, c) => push(a, grad.scale(*c)),
            Op::AddScalar(a) => push(a, grad.clone()),
            Op::Recip(a) => {
                let y = this();
                push(a, grad.mul(&y.mul(&y)).neg());
            }
            Op::Sqrt(a) => push(a, grad.mul(&this().recip()).scale(0.5)),
            Op::Tanh(a) => {
                let y = this();
                push(a, grad.sub(&grad.mul(&y.mul(&y))));
            }
            Op::Masked(a, mask) => push(a, grad.masked(mask.clone())),
            Op::Reshape(a) => push(a, grad.reshape(a.shape())),
            Op::BroadcastTo(a) => push(a, grad.sum_to(a.shape())),
            Op::SumTo(a) => push(a, grad.broadcast_to(a.shape())),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = p.shape()[1];
                    push(p, grad.narrow(start, c));
                    start += c;
                }
            }
            Op::Narrow(a, start) => push(a, grad.embed(*start, a.shape()[1])),
            Op::Embed(a, start) => push(a, grad.narrow(*start, a.shape()[1])),
            Op::Conv(x, w, g) => {
                push(x, grad.conv_transpose2d(&keep(w), *g));
                push(w, Var::conv_filter_grad(&keep(x), grad, *g));
            }
            Op::ConvTranspose(y, w, g) => {
                push(y, grad.conv2d(&keep(w), *g));
                push(w, Var::conv_filter_grad(grad, &keep(y), *g));
            }
            Op::ConvFilterGrad(x, y, g) => {
                push(x, keep(y).conv_transpose2d(grad, *g));
                push(y, keep(x).conv2d(grad, *g));
            }
            Op::Gather(a, idx) => push(a, grad.scatter(idx.clone(), a.shape())),
            Op::Scatter(a, idx) => push(a, grad.gather(idx.clone(), a.shape())),
        }
        out
    }
}

/// Reverse-mode gradients of `output` (summed over its elements) with
/// respect to each entry of `wrt`. Inputs not reached by the graph get a zero
/// gradient. With `create_graph`, the returned gradients are themselves
/// differentiable.
pub fn grad(output: &Var, wrt: &[&Var], create_graph: bool) -> Vec<Var> {
    let order = topo_order(output);
    let mut grads: HashMap<*const Node, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));
    }
    let targets: Vec<*const Node> = wrt.iter().map(|v| v.id()).collect();
    for node in order.iter().rev() {
        let Some(g) = grads.get(&node.id()).cloned() else {
            continue;
        };
        if matches!(node.0.op, Op::Leaf) {
            continue;
        }
        // Interior nodes that are also targets keep their accumulated gradient.
        if !targets.contains(&node.id()) {
            grads.remove(&node.id());
        }
        for (parent, contribution) in node.backward_step(&g, create_graph) {
            let entry = grads.entry(parent.id());
            match entry {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    let sum = e.get().add(&contribution);
                    e.insert(sum);
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(contribution);
                }
            }
        }
    }
    wrt.iter()
        .map(|v| {
            grads
                .get(&v.id())
                .cloned()
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect()
}

/// Nodes reachable from `root` through grad-requiring edges, parents first.
fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    if !root.requires_grad() {
        return order;
    }
    let mut visited = std::collections::HashSet::new();
    // (node, children_pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        for p in node.parents() {
            if p.requires_grad() && !visited.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}
