use crate::error::{NdError, Result};
use crate::kernels;
use crate::mask::Mask;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::HashMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding placement for [`Tape::depthwise_conv1d`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output frame `t` sees input frames `t-k+1..=t`.
    Causal,
    /// Odd kernels centered on the output frame.
    Centered,
}

impl Padding {
    fn offset(self, kernel: usize) -> usize {
        match self {
            Padding::Causal => kernel - 1,
            Padding::Centered => (kernel - 1) / 2,
        }
    }
}

/// Backward rule for operations defined outside this crate.
///
/// `upstream` is the gradient of the loss with respect to the op's output;
/// the result holds one gradient per input, in input order (or `None` when
/// an input receives no gradient).
pub trait CustomBackward<T: Real> {
    fn backward(&self, upstream: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        offset: usize,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    MeanRows(Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Custom(Vec<Var>, Box<dyn CustomBackward<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so every node's inputs precede it.
pub struct Tape<'p, T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    params: Option<&'p ParamStore<T>>,
    bound: RefCell<HashMap<ParamId, Var>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: None,
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// A tape whose [`Tape::param`] lookups resolve against `params`.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: Some(params),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> Option<&'p ParamStore<T>> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Gradient-tracking leaf not backed by a parameter.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter of the attached store; repeated calls return the
    /// same node so every use accumulates into one gradient.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("Tape::param called on a tape without a parameter store");
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.bound.borrow_mut().insert(id, v);
        v
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(NdError::shape(op, &shape, &[0, 0]));
        }
        Ok((shape[0], shape[1]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NdError::shape("matmul", &[m, k], &[k2, n]));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let av = self.value(a);
        let src = av.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), self.rg(&[a])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NdError::shape("add", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Add(a, b), self.rg(&[a, b])))
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.numel() != xv.cols() {
            return Err(NdError::shape("add_bias", xv.shape(), bv.shape()));
        }
        let c = xv.cols();
        let b = bv.data();
        let out = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBias(x, bias), self.rg(&[x, bias])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NdError::shape("mul", av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), self.rg(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(a), self.rg(&[a]))
    }

    /// Row-wise layer normalization over the last axis with affine terms.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.numel() != d || bv.numel() != d {
            return Err(NdError::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let (y, xhat, inv) = kernels::layer_norm(xv.data(), gv.data(), bv.data(), rows, d);
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over `[n, d]` projections.
    /// Masked keys get exactly zero weight; a query row with no admitted key
    /// is an error.
    pub fn masked_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Mask,
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = self.matrix_dims("masked_attention", q)?;
        let (nk, dk) = self.matrix_dims("masked_attention", k)?;
        let (nv, dv) = self.matrix_dims("masked_attention", v)?;
        if dk != d || dv != d || nv != nk {
            return Err(NdError::shape("masked_attention", &[nq, d], &[nk, dk]));
        }
        if mask.rows() != nq || mask.cols() != nk {
            return Err(NdError::shape(
                "masked_attention mask",
                &[mask.rows(), mask.cols()],
                &[nq, nk],
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NdError::Contract(format!(
                "model dimension {d} not divisible into {heads} heads"
            )));
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (out, probs) =
            kernels::attention(qv.data(), kv.data(), vv.data(), mask, nq, nk, d, heads)
                .map_err(|row| NdError::InvalidMask { row })?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(nq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Depthwise convolution over the rows of `x: [T, C]` with
    /// `weight: [K, C]` and `bias: [C]`.
    pub fn depthwise_conv1d(&self, x: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (t_len, c) = self.matrix_dims("depthwise_conv1d", x)?;
        let (kernel, wc) = self.matrix_dims("depthwise_conv1d", weight)?;
        let bv = self.value(bias);
        if wc != c || bv.numel() != c || kernel == 0 {
            return Err(NdError::shape("depthwise_conv1d", &[t_len, c], &[kernel, wc]));
        }
        let offset = padding.offset(kernel);
        let (xv, wv) = (self.value(x), self.value(weight));
        let out = kernels::depthwise_conv1d(xv.data(), wv.data(), bv.data(), t_len, c, kernel, offset);
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            Tensor::matrix(t_len, c, out)?,
            Op::Conv {
                x,
                w: weight,
                b: bias,
                offset,
            },
            rg,
        ))
    }

    /// Selects rows of a matrix by index (embedding lookup when `x` is a table).
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, c) = self.matrix_dims("gather_rows", x)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= rows {
                return Err(NdError::Target {
                    index: i,
                    classes: rows,
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let t = Tensor::matrix(indices.len(), c, out)?;
        Ok(self.push(t, Op::GatherRows(x, indices.to_vec()), self.rg(&[x])))
    }

    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Stacks matrices with equal column counts. 1-D inputs count as one row.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NdError::Contract("concat_rows of nothing".into()));
        }
        let first = self.value(parts[0]);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(NdError::shape("concat_rows", first.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), self.rg(parts)))
    }

    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start > end || end > xv.rows() {
            return Err(NdError::shape("slice_rows", xv.shape(), &[start, end]));
        }
        let t = Tensor::matrix(end - start, c, xv.data()[start * c..end * c].to_vec())?;
        Ok(self.push(t, Op::SliceRows(x, start), self.rg(&[x])))
    }

    /// Mean over rows, producing a `[1, C]` matrix.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if r == 0 {
            return Err(NdError::Contract("mean_rows of an empty matrix".into()));
        }
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(Tensor::matrix(1, c, out)?, Op::MeanRows(x), self.rg(&[x])))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), self.rg(&[x])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(&[x]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, classes) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return Err(NdError::shape("softmax_cross_entropy", &[n, classes], &[targets.len()]));
        }
        if n == 0 {
            return Err(NdError::Contract("cross entropy over zero rows".into()));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * classes);
        let mut loss = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(NdError::Target { index: t, classes });
            }
            let lsm = kernels::log_softmax(lv.row(i));
            loss -= lsm[t].as_f64();
            probs.extend(lsm.iter().map(|v| v.exp()));
        }
        let value = Tensor::scalar(T::of(loss / n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            self.rg(&[logits]),
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: Box<dyn CustomBackward<T>>,
    ) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Reverse pass from a scalar loss. Visits each recorded node at most once,
    /// in reverse execution order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(NdError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };

        fn acc<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, g: &[T]) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, &x) in existing.iter_mut().zip(g) {
                        *e += x;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(id) => {
                    out.params.insert(*id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    if nodes[a.0].requires_grad {
                        let ga = kernels::matmul_a_bt(&g, bv.data(), m, n, k);
                        acc(&mut grads, &nodes, *a, &ga);
                    }
                    if nodes[b.0].requires_grad {
                        let gb = kernels::matmul_at_b(av.data(), &g, m, k, n);
                        acc(&mut grads, &nodes, *b, &gb);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let mut ga = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] = g[j * m + i];
                        }
                    }
                    acc(&mut grads, &nodes, *a, &ga);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, &nodes, *a, &g);
                    acc(&mut grads, &nodes, *b, &g);
                }
                Op::AddBias(x, b) => {
                    acc(&mut grads, &nodes, *x, &g);
                    let c = val(*b).numel();
                    let mut gb = vec![T::zero(); c];
                    for (i, &v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    acc(&mut grads, &nodes, *b, &gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga: Vec<T> = g.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    let gb: Vec<T> = g.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    acc(&mut grads, &nodes, *a, &ga);
                    acc(&mut grads, &nodes, *b, &gb);
                }
                Op::Scale(a, s) => {
                    let ga: Vec<T> = g.iter().map(|&x| x * *s).collect();
                    acc(&mut grads, &nodes, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<T> = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &v)| if v > T::zero() { x } else { T::zero() })
                        .collect();
                    acc(&mut grads, &nodes, *a, &ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv,
                } => {
                    let xv = val(*x);
                    let (rows, d) = (xv.rows(), xv.cols());
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(&g, xhat, inv, val(*gamma).data(), rows, d);
                    acc(&mut grads, &nodes, *x, &dx);
                    acc(&mut grads, &nodes, *gamma, &dg);
                    acc(&mut grads, &nodes, *beta, &db);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let (nq, d) = (qv.shape()[0], qv.shape()[1]);
                    let nk = kv.shape()[0];
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        probs,
                        nq,
                        nk,
                        d,
                        *heads,
                    );
                    acc(&mut grads, &nodes, *q, &dq);
                    acc(&mut grads, &nodes, *k, &dk);
                    acc(&mut grads, &nodes, *v, &dv);
                }
                Op::Conv { x, w, b, offset } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (t_len, c) = (xv.shape()[0], xv.shape()[1]);
                    let kernel = wv.shape()[0];
                    let (dx, dw, db) = kernels::depthwise_conv1d_backward(
                        &g,
                        xv.data(),
                        wv.data(),
                        t_len,
                        c,
                        kernel,
                        *offset,
                    );
                    acc(&mut grads, &nodes, *x, &dx);
                    acc(&mut grads, &nodes, *w, &dw);
                    acc(&mut grads, &nodes, *b, &db);
                }
                Op::GatherRows(x, indices) => {
                    if nodes[x.0].requires_grad {
                        let xv = val(*x);
                        let c = xv.cols();
                        let mut gx = vec![T::zero(); xv.numel()];
                        for (r, &i) in indices.iter().enumerate() {
                            for (dst, &s) in gx[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                                *dst += s;
                            }
                        }
                        acc(&mut grads, &nodes, *x, &gx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = val(*p).numel();
                        acc(&mut grads, &nodes, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    if nodes[x.0].requires_grad {
                        let xv = val(*x);
                        let c = xv.cols();
                        let mut gx = vec![T::zero(); xv.numel()];
                        gx[start * c..start * c + g.len()].copy_from_slice(&g);
                        acc(&mut grads, &nodes, *x, &gx);
                    }
                }
                Op::MeanRows(x) => {
                    let xv = val(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let inv = T::one() / T::of(r as f64);
                    let mut gx = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        gx.extend(g.iter().map(|&v| v * inv));
                    }
                    acc(&mut grads, &nodes, *x, &gx);
                }
                Op::Reshape(x) => acc(&mut grads, &nodes, *x, &g),
                Op::Sum(x) => {
                    let gx = vec![g[0]; val(*x).numel()];
                    acc(&mut grads, &nodes, *x, &gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len();
                    let classes = probs.len() / n;
                    let scale = g[0] / T::of(n as f64);
                    let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gl[i * classes + t] -= scale;
                    }
                    acc(&mut grads, &nodes, *logits, &gl);
                }
                Op::Custom(inputs, rule) => {
                    let upstream = Tensor::new(node.value.shape().to_vec(), g)?;
                    let gs = rule.backward(&upstream);
                    for (inp, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            if gi.numel() != val(*inp).numel() {
                                return Err(NdError::shape("custom backward", val(*inp).shape(), gi.shape()));
                            }
                            acc(&mut grads, &nodes, *inp, gi.data());
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient for a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(m(2, 2, &[3.0, -1.0, 2.5, 7.0]));
        assert_eq!(tape.value(tape.matmul(i, x).unwrap()), tape.value(x));
        let a = tape.constant(m(1, 2, &[1.0, 2.0]));
        let b = tape.constant(m(2, 1, &[3.0, 4.0]));
        assert_eq!(tape.value(tape.matmul(a, b).unwrap()).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sum_of_linear_map_gives_outer_product_gradient() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(m(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let x = tape.constant(m(3, 1, &[1.0, -2.0, 4.0]));
        let loss = tape.sum(tape.matmul(w, x).unwrap());
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]);
    }

    #[test]
    fn reused_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        assert!(matches!(
            tape.backward(x),
            Err(NdError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero_before_affine() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(m(1, 4, &[3.0; 4]));
        let g = tape.constant(Tensor::vector(vec![1.0; 4]));
        let b = tape.constant(Tensor::vector(vec![0.0; 4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_hot_correct_cross_entropy_is_zero() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(m(2, 3, &[1e4, 0.0, 0.0, 0.0, 0.0, 1e4]));
        let loss = tape.softmax_cross_entropy(logits, &[0, 2]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 3]),
            Err(NdError::Target { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn delta_kernel_is_identity_on_interior_frames() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(m(5, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]));
        let w = tape.constant(m(3, 2, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.value(tape.depthwise_conv1d(x, w, b, Padding::Centered).unwrap());
        assert_eq!(y, tape.value(x));
        // Under causal padding the last tap is the current frame.
        let w = tape.constant(m(3, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]));
        let y = tape.value(tape.depthwise_conv1d(x, w, b, Padding::Causal).unwrap());
        assert_eq!(y, tape.value(x));
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(m(1, 4, &[0.3, -0.1, 0.8, 0.2]));
        let k = tape.constant(m(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.constant(m(1, 4, &[5.0, 6.0, 7.0, 8.0]));
        let o = tape.masked_attention(q, k, v, &Mask::full(1, 1), 2).unwrap();
        assert_eq!(tape.value(o).data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn attention_mask_admitting_one_key_matches_single_key_case() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(m(1, 2, &[0.3, -0.1]));
        let k = tape.constant(m(3, 2, &[1.0, 2.0, -3.0, 4.0, 0.5, 0.5]));
        let v = tape.constant(m(3, 2, &[5.0, 6.0, 70.0, 80.0, -1.0, 2.0]));
        let mask = Mask::from_fn(1, 3, |_, j| j == 0);
        let o = tape.masked_attention(q, k, v, &mask, 1).unwrap();
        assert_eq!(tape.value(o).data(), &[5.0, 6.0]);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(m(2, 2, &[0.3, -0.1, 0.0, 1.0]));
        let k = tape.constant(m(2, 2, &[1.0, 2.0, -3.0, 4.0]));
        let mut mask = Mask::full(2, 2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert!(matches!(
            tape.masked_attention(q, k, k, &mask, 1),
            Err(NdError::InvalidMask { row: 1 })
        ));
    }
}
