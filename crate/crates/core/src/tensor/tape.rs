//! Reverse-mode tape. Nodes are appended in evaluation order, so the node
//! vector is already a topological order and backward is a reverse scan.

use super::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeometry};
use super::{dim_err, ParamBinding, ParamStore, Tensor, TensorError};
use crate::real::Real;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    ScaleBy(Var, Var),
    Sum(Var),
    SumRows(Var, usize),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    MinAll(Var, usize),
    Relu(Var),
    Conv2d(Var, Var, ConvGeometry),
    ConvBiasAct(Var, Var, Var, ConvGeometry, bool),
    BiasAdd(Var, Var),
    Upsample2x(Var),
    MaxPool(Var, Vec<usize>),
    GlobalAvgPool(Var),
    Linear(Var, Var, Option<Var>),
    SoftmaxRows(Var),
    Row(Var, usize),
    WeightedSum(Vec<Var>, Var),
    CrossEntropy(Var, Vec<usize>),
    SmoothL1(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward/backward recording. Not shareable across threads mid-step.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradients of every bound parameter into the store.
    pub fn accumulate_into(&self, binding: &ParamBinding, store: &mut ParamStore<T>) {
        for (key, var) in binding.bound() {
            if let Some(g) = self.get(var) {
                store.get_mut(key).accumulate_grad(g);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(dim_err(op, "all", format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node invariant")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- leaves ----

    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    pub fn leaf_from(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf_from(&t, false))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var, TensorError> {
        if c.len() != self.value(a).len() {
            return Err(dim_err("mul_const", "all", format!("{} vs {}", self.value(a).len(), c.len())));
        }
        let data = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), data, Op::MulConst(a, c), rg))
    }

    /// `s * x` for a scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(dim_err("scale_by", "s", format!("expected scalar, got {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let data = self.value(x).iter().map(|&v| v * sv).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), data, Op::ScaleBy(x, s), rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.sqrt()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x * x).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Square(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|x| x.exp()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(dim_err("reshape", "all", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, data, Op::Reshape(a), rg))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// `(R, C) -> (C)`: sums over rows.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(dim_err("sum_rows", "rank", format!("expected (R,C), got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] = out[j] + v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c], out, Op::SumRows(a, r), rg))
    }

    /// Minimum element; ties resolve to the lowest index.
    pub fn min_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(dim_err("min_all", "all", "empty input"));
        }
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x < v[best] {
                best = i;
            }
        }
        let m = v[best];
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![m], Op::MinAll(a, best), rg))
    }

    // ---- structural ----

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let g = ConvGeometry::new(self.shape(x), self.shape(w), stride, dilation, groups, padding)?;
        let mut out = vec![T::zero(); g.out_shape().iter().product()];
        conv2d_forward(self.value(x), self.value(w), &g, &mut out);
        let rg = self.rg(&[x, w]);
        Ok(self.push(g.out_shape(), out, Op::Conv2d(x, w, g), rg))
    }

    /// Fused `relu?(conv2d(x, w) + b)`; keeps one activation instead of three.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_bias_act(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
        groups: usize,
        padding: usize,
        relu: bool,
    ) -> Result<Var, TensorError> {
        let g = ConvGeometry::new(self.shape(x), self.shape(w), stride, dilation, groups, padding)?;
        if self.shape(b) != [g.c_out] {
            return Err(dim_err(
                "conv2d_bias_act",
                "b axis 0 / w axis 0",
                format!("{:?} vs {}", self.shape(b), g.c_out),
            ));
        }
        let mut out = vec![T::zero(); g.out_shape().iter().product()];
        conv2d_forward(self.value(x), self.value(w), &g, &mut out);
        let plane = g.out_h * g.out_w;
        let bv = self.value(b);
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bias = bv[i % g.c_out];
            for v in chunk.iter_mut() {
                *v = *v + bias;
                if relu && *v < T::zero() {
                    *v = T::zero();
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(g.out_shape(), out, Op::ConvBiasAct(x, w, b, g, relu), rg))
    }

    /// Adds a per-channel bias to an `(N, C, ...)` tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(dim_err(
                "bias_add",
                "x axis 1 / b axis 0",
                format!("{shape:?} vs {:?}", self.shape(b)),
            ));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let bv = self.value(b);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[(i / inner) % c])
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(shape, data, Op::BiasAdd(x, b), rg))
    }

    /// Nearest-neighbour ×2 upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("upsample2x", "rank", format!("expected NCHW, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let v = self.value(x);
        let planes = s[0] * s[1];
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    out[(p * oh + i) * ow + j] = v[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::Upsample2x(x), rg))
    }

    /// Max pooling without padding; ties route to the first maximal position.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < kernel || s[3] < kernel || kernel == 0 || stride == 0 {
            return Err(dim_err(
                "maxpool2d",
                "x axes 2,3",
                format!("input {s:?} vs kernel {kernel}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let v = self.value(x);
        let planes = s[0] * s[1];
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = (p * h + i * stride) * w + j * stride;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = (p * h + i * stride + di) * w + j * stride + dj;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    arg.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool(x, arg), rg))
    }

    /// `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(dim_err("global_avg_pool", "rank", format!("expected NCHW, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / T::of(hw as f64);
        let data = self
            .value(x)
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1]], data, Op::GlobalAvgPool(x), rg))
    }

    /// `y = x Wᵀ + b` with `x: (N, I)`, `w: (O, I)`, `b: (O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(dim_err("linear", "x axis 1 / w axis 1", format!("{xs:?} vs {ws:?}")));
        }
        let (n, i_dim, o_dim) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [o_dim] {
                return Err(dim_err("linear", "b axis 0", format!("{:?} vs {o_dim}", self.shape(b))));
            }
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let mut out = vec![T::zero(); n * o_dim];
        for r in 0..n {
            let xr = &xv[r * i_dim..][..i_dim];
            for o in 0..o_dim {
                let wr = &wv[o * i_dim..][..i_dim];
                let mut acc = bv.map_or(T::zero(), |b| b[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc = acc + *a * *c;
                }
                out[r * o_dim + o] = acc;
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(vec![n, o_dim], out, Op::Linear(x, w, b), rg))
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || s.len() > 2 {
            return Err(dim_err("softmax", "rank", format!("expected rank 1 or 2, got {s:?}")));
        }
        let c = *s.last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(s, out, Op::SoftmaxRows(a), rg))
    }

    /// Row `i` of an `(R, C)` matrix.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(dim_err("row", "axis 0", format!("row {i} of {s:?}")));
        }
        let c = s[1];
        let data = self.value(a)[i * c..(i + 1) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c], data, Op::Row(a, i), rg))
    }

    /// `Σ_i weights[i] · inputs[i]` for same-shape inputs and a `(n)` weight vector.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(dim_err("weighted_sum", "inputs", "no candidates"));
        }
        if self.shape(weights) != [inputs.len()] {
            return Err(dim_err(
                "weighted_sum",
                "weights axis 0",
                format!("{} inputs vs weights {:?}", inputs.len(), self.shape(weights)),
            ));
        }
        let shape = self.shape(inputs[0]).to_vec();
        for &v in &inputs[1..] {
            same_shape("weighted_sum", &shape, self.shape(v))?;
        }
        let wv = self.value(weights).to_vec();
        let mut out = vec![T::zero(); self.value(inputs[0]).len()];
        for (&v, &c) in inputs.iter().zip(&wv) {
            for (o, &x) in out.iter_mut().zip(self.value(v)) {
                *o = *o + c * x;
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(shape, out, Op::WeightedSum(inputs.to_vec(), weights), rg))
    }

    // ---- losses ----

    /// Mean softmax cross-entropy over the batch; `logits: (N, K)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err(
                "cross_entropy",
                "logits axis 0",
                format!("{s:?} vs {} labels", labels.len()),
            ));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange {
                op: "cross_entropy",
                label: bad,
                classes: k,
            });
        }
        let v = self.value(logits);
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &v[r * k..][..k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            total = total + (lse - row[l]);
        }
        let loss = total / T::of(labels.len().max(1) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![], vec![loss], Op::CrossEntropy(logits, labels.to_vec()), rg))
    }

    /// Elementwise smooth-L1 (Huber with δ = 1).
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        same_shape("smooth_l1", self.shape(pred), self.shape(target))?;
        let data = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| smooth_l1_value(p - t))
            .collect();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(self.shape(pred).to_vec(), data, Op::SmoothL1(pred, target), rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Only nodes that require grad receive
    /// one; unreachable leaves stay `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].data.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| axpy(g, T::one(), gy));
                self.acc(grads, *b, |g| axpy(g, T::one(), gy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| axpy(g, T::one(), gy));
                self.acc(grads, *b, |g| axpy(g, -T::one(), gy));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |g| {
                    g.iter_mut().zip(gy).zip(bv).for_each(|((g, &d), &y)| *g = *g + d * y)
                });
                self.acc(grads, *b, |g| {
                    g.iter_mut().zip(gy).zip(av).for_each(|((g, &d), &x)| *g = *g + d * x)
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |g| axpy(g, *c, gy)),
            Op::MulConst(a, c) => self.acc(grads, *a, |g| {
                g.iter_mut().zip(gy).zip(c).for_each(|((g, &d), &k)| *g = *g + d * k)
            }),
            Op::ScaleBy(x, s) => {
                let sv = self.scalar(*s);
                let xv = self.value(*x);
                self.acc(grads, *x, |g| axpy(g, sv, gy));
                self.acc(grads, *s, |g| g[0] = g[0] + dot(xv, gy));
            }
            Op::Sum(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|v| *v = *v + gy[0])),
            Op::SumRows(a, r) => {
                let c = gy.len();
                self.acc(grads, *a, |g| {
                    for i in 0..*r {
                        axpy(&mut g[i * c..(i + 1) * c], T::one(), gy);
                    }
                })
            }
            Op::Sqrt(a) => {
                let y = &node.data;
                let two = T::of(2.0);
                self.acc(grads, *a, |g| {
                    for ((g, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                        *g = *g + d / (two * s);
                    }
                })
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let two = T::of(2.0);
                self.acc(grads, *a, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(x) {
                        *g = *g + two * v * d;
                    }
                })
            }
            Op::Exp(a) => {
                let y = &node.data;
                self.acc(grads, *a, |g| {
                    for ((g, &d), &e) in g.iter_mut().zip(gy).zip(y) {
                        *g = *g + d * e;
                    }
                })
            }
            Op::MinAll(a, idx) => self.acc(grads, *a, |g| g[*idx] = g[*idx] + gy[0]),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.acc(grads, *a, |g| {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(x) {
                        if v > T::zero() {
                            *g = *g + d;
                        }
                    }
                })
            }
            Op::Reshape(a) => self.acc(grads, *a, |g| axpy(g, T::one(), gy)),
            Op::Conv2d(x, w, geom) => {
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    conv2d_backward_input(gy, self.value(*w), geom, &mut gx);
                    self.acc(grads, *x, |g| axpy(g, T::one(), &gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); geom.weight_len()];
                    conv2d_backward_weight(gy, self.value(*x), geom, &mut gw);
                    self.acc(grads, *w, |g| axpy(g, T::one(), &gw));
                }
            }
            Op::ConvBiasAct(x, w, b, geom, relu) => {
                let masked: Vec<T>;
                let gy = if *relu {
                    masked = gy
                        .iter()
                        .zip(&node.data)
                        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                        .collect();
                    &masked[..]
                } else {
                    gy
                };
                let plane = geom.out_h * geom.out_w;
                self.acc(grads, *b, |g| {
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        let ch = i % geom.c_out;
                        g[ch] = g[ch] + chunk.iter().copied().sum::<T>();
                    }
                });
                if self.requires_grad(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    conv2d_backward_input(gy, self.value(*w), geom, &mut gx);
                    self.acc(grads, *x, |g| axpy(g, T::one(), &gx));
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![T::zero(); geom.weight_len()];
                    conv2d_backward_weight(gy, self.value(*x), geom, &mut gw);
                    self.acc(grads, *w, |g| axpy(g, T::one(), &gw));
                }
            }
            Op::BiasAdd(x, b) => {
                self.acc(grads, *x, |g| axpy(g, T::one(), gy));
                let c = node.shape[1];
                let inner: usize = node.shape[2..].iter().product();
                self.acc(grads, *b, |g| {
                    for (i, &d) in gy.iter().enumerate() {
                        let ch = (i / inner) % c;
                        g[ch] = g[ch] + d;
                    }
                })
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let planes = s[0] * s[1];
                self.acc(grads, *x, |g| {
                    for p in 0..planes {
                        for i in 0..oh {
                            for j in 0..ow {
                                let src = (p * h + i / 2) * w + j / 2;
                                g[src] = g[src] + gy[(p * oh + i) * ow + j];
                            }
                        }
                    }
                })
            }
            Op::MaxPool(x, arg) => self.acc(grads, *x, |g| {
                for (&src, &d) in arg.iter().zip(gy) {
                    g[src] = g[src] + d;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                self.acc(grads, *x, |g| {
                    for (plane, &d) in g.chunks_mut(hw).zip(gy) {
                        plane.iter_mut().for_each(|v| *v = *v + d * inv);
                    }
                })
            }
            Op::Linear(x, w, b) => {
                let xs = self.shape(*x);
                let (n, i_dim) = (xs[0], xs[1]);
                let o_dim = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.acc(grads, *x, |g| {
                    for r in 0..n {
                        for o in 0..o_dim {
                            let d = gy[r * o_dim + o];
                            axpy(&mut g[r * i_dim..][..i_dim], d, &wv[o * i_dim..][..i_dim]);
                        }
                    }
                });
                self.acc(grads, *w, |g| {
                    for r in 0..n {
                        for o in 0..o_dim {
                            let d = gy[r * o_dim + o];
                            axpy(&mut g[o * i_dim..][..i_dim], d, &xv[r * i_dim..][..i_dim]);
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(grads, *b, |g| {
                        for r in 0..n {
                            axpy(g, T::one(), &gy[r * o_dim..][..o_dim]);
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                let c = *node.shape.last().unwrap();
                let p = &node.data;
                self.acc(grads, *a, |g| {
                    for ((gr, dr), pr) in g.chunks_mut(c).zip(gy.chunks(c)).zip(p.chunks(c)) {
                        let inner = dot(dr, pr);
                        for ((g, &d), &pv) in gr.iter_mut().zip(dr).zip(pr) {
                            *g = *g + pv * (d - inner);
                        }
                    }
                })
            }
            Op::Row(a, i) => {
                let c = gy.len();
                self.acc(grads, *a, |g| axpy(&mut g[i * c..(i + 1) * c], T::one(), gy))
            }
            Op::WeightedSum(inputs, weights) => {
                let wv = self.value(*weights);
                for (&v, &c) in inputs.iter().zip(wv) {
                    self.acc(grads, v, |g| axpy(g, c, gy));
                }
                self.acc(grads, *weights, |g| {
                    for (slot, &v) in g.iter_mut().zip(inputs) {
                        *slot = *slot + dot(self.value(v), gy);
                    }
                })
            }
            Op::CrossEntropy(logits, labels) => {
                let k = self.shape(*logits)[1];
                let v = self.value(*logits);
                let scale = gy[0] / T::of(labels.len().max(1) as f64);
                self.acc(grads, *logits, |g| {
                    for (r, &l) in labels.iter().enumerate() {
                        let mut p = v[r * k..][..k].to_vec();
                        softmax_in_place(&mut p);
                        p[l] = p[l] - T::one();
                        axpy(&mut g[r * k..][..k], scale, &p);
                    }
                })
            }
            Op::SmoothL1(pred, target) => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let dl: Vec<T> = pv
                    .iter()
                    .zip(tv)
                    .zip(gy)
                    .map(|((&p, &t), &d)| d * smooth_l1_slope(p - t))
                    .collect();
                self.acc(grads, *pred, |g| axpy(g, T::one(), &dl));
                self.acc(grads, *target, |g| axpy(g, -T::one(), &dl));
            }
        }
    }
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z = z + *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn smooth_l1_value<T: Real>(d: T) -> T {
    let a = d.abs();
    if a < T::one() {
        T::of(0.5) * d * d
    } else {
        a - T::of(0.5)
    }
}

fn smooth_l1_slope<T: Real>(d: T) -> T {
    if d.abs() < T::one() {
        d
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![], vec![3.0]);
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let l = tape.cross_entropy(z, &[0]).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(z).unwrap(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            tape.cross_entropy(z, &[2]),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2, .. })
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let z = tape.constant(vec![3], vec![0.0; 3]).unwrap();
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn upsample_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 1, 1, 1], vec![5.0]);
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[5.0; 4]);
    }

    #[test]
    fn smooth_l1_branches() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let t = tape.constant(vec![2], vec![2.0, 0.5]).unwrap();
        let y = tape.smooth_l1(p, t).unwrap();
        assert_eq!(tape.value(y), &[1.5, 0.125]);
    }

    #[test]
    fn shape_mismatch_names_axes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![0.0; 2]);
        let b = leaf(&mut tape, vec![3], vec![0.0; 3]);
        let err = tape.add(a, b).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { op: "add", .. }));
    }

    #[test]
    fn leaves_without_grad_stay_empty() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let c = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn accumulation_is_additive() {
        let mut store = ParamStore::new();
        let k = store.insert("x", Tensor::new(vec![], vec![3.0f64]).unwrap());
        for _ in 0..2 {
            let mut tape = Tape::new();
            let mut bind = ParamBinding::new(&store, true);
            let x = bind.var(&mut tape, &store, k);
            let y = tape.square(x);
            tape.backward(y).unwrap().accumulate_into(&bind, &mut store);
        }
        assert_eq!(store.get(k).grad().unwrap(), &[12.0]);
    }
}
