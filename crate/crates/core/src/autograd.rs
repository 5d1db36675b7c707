//! Reverse-mode differentiation on a dynamic tape.
//!
//! Every op evaluates eagerly and appends a node to the [`Graph`]; node ids are
//! handed out in creation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to a right-hand operand whose shape is a trailing
//! suffix of the left-hand shape (leading batch dims), or a one-element scalar.
//!
//! Domain kernels with hand-written vector-Jacobian products (selective scan,
//! rotary embedding, RMS normalization, causal convolution) are attached through
//! [`Function`] and live next to the code that uses them.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, numel, Layout, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable kernel whose forward value is computed by the caller.
pub trait Function<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Gradient of the loss with respect to each input. Entries whose `needs`
    /// flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    /// `x·sigmoid(x)`, a.k.a. Swish.
    Silu,
    Softplus,
    Neg,
}

enum Op<T: Real> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Unary {
        x: Var,
        kind: UnaryKind,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    SumLeading {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CausalSoftmax {
        x: Var,
        scale: T,
        q_len: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScaleRows {
        x: Var,
        s: Var,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. One graph holds one element type only.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    seed: u64,
}

/// Gradients of a scalar loss with respect to the leaves that require them.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new(0)
    }
}

impl<T: Real> Graph<T> {
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a kernel whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, func: Box<dyn Function<T>>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::Matmul {
                a,
                b,
                trans_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b), true)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::Matmul {
                a,
                b,
                trans_b: true,
            },
            rg,
        ))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_broadcast("binary", av.shape(), bv.shape())?;
        let bn = bv.numel();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match kind {
            BinaryKind::Add => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % bn])
                .collect(),
            BinaryKind::Sub => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| x - bd[i % bn])
                .collect(),
            BinaryKind::Mul => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| x * bd[i % bn])
                .collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            UnaryKind::Exp => xv.map(|v| v.exp()),
            UnaryKind::Log => {
                if let Some(bad) = xv.data().iter().find(|v| **v <= T::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        msg: format!("non-positive entry {bad}"),
                    });
                }
                xv.map(|v| v.ln())
            }
            UnaryKind::Tanh => xv.map(|v| v.tanh()),
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Silu => xv.map(|v| v * sigmoid(v)),
            UnaryKind::Softplus => xv.map(softplus),
            UnaryKind::Neg => xv.map(|v| -v),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary { x, kind }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum over every axis except the last: `[.., d] -> [d]`.
    pub fn sum_leading(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = vec![T::zero(); d];
        for row in xv.data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![d], out).expect("sum_leading shape");
        let rg = self.rg(x);
        self.push(out, Op::SumLeading { x }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row)?;
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x }, rg))
    }

    /// Row-wise softmax of `scale·x` over `[.., R, L]` with a causal mask.
    ///
    /// Rows are query positions taken modulo `q_len`, so several heads may be
    /// stacked along the row axis; row `r` sees keys `0..=r % q_len`.
    pub fn causal_softmax(&mut self, x: Var, scale: T, q_len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2
            || q_len == 0
            || !xv.shape()[xv.ndim() - 2].is_multiple_of(q_len)
            || xv.last_dim() < q_len
        {
            return Err(Error::Contract(format!(
                "causal_softmax: shape {:?} incompatible with query length {q_len}",
                xv.shape()
            )));
        }
        let l = xv.last_dim();
        let mut data = vec![T::zero(); xv.numel()];
        for (r, (src, dst)) in xv.data().chunks(l).zip(data.chunks_mut(l)).enumerate() {
            let q = r % q_len;
            for (d, &s) in dst[..=q].iter_mut().zip(&src[..=q]) {
                *d = s * scale;
            }
            softmax_in_place(&mut dst[..=q])?;
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::CausalSoftmax { x, scale, q_len }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.ndim()];
        if perm.len() != xv.ndim()
            || perm
                .iter()
                .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "permute: {perm:?} is not a permutation of {:?}",
                xv.shape()
            )));
        }
        let out = permute_tensor(xv, perm);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// `x[.., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start + len > c {
            return Err(Error::Index(format!(
                "slice {start}..{} of last axis {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(xv.numel() / c.max(1) * len);
        for row in xv.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceLast { x, start }, rg))
    }

    /// Row lookup into a `[V, D]` table; output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 || numel(ids_shape) != ids.len() {
            return Err(shape_err("embedding", tv.shape(), ids_shape));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} >= vocabulary {v}")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects rows of `x` viewed as `[R, C]` (C = last dim): `[idx.len(), C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let rows = xv.numel() / c.max(1);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= rows {
                return Err(Error::Index(format!("row {r} >= {rows}")));
            }
            data.extend_from_slice(&xv.data()[r * c..(r + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Inverse of [`gather_rows`](Self::gather_rows): adds row `i` of `x` into
    /// row `idx[i]` of a zero `[rows, C]` tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if xv.numel() != idx.len() * c {
            return Err(shape_err("scatter_rows", xv.shape(), &[idx.len(), c]));
        }
        let mut data = vec![T::zero(); rows * c];
        for (i, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(Error::Index(format!("row {r} >= {rows}")));
            }
            for (o, &v) in data[r * c..(r + 1) * c]
                .iter_mut()
                .zip(&xv.data()[i * c..(i + 1) * c])
            {
                *o += v;
            }
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies row `i` of `x` (`[n, C]`) by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let c = xv.last_dim();
        if xv.numel() != sv.numel() * c {
            return Err(shape_err("scale_rows", xv.shape(), sv.shape()));
        }
        let mut data = xv.data().to_vec();
        for (row, &f) in data.chunks_mut(c).zip(sv.data()) {
            for v in row {
                *v *= f;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows { x, s }, rg))
    }

    /// Flat element lookup: `[idx.len()]`.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(
                *xv.data()
                    .get(i)
                    .ok_or_else(|| Error::Index(format!("element {i} >= {}", xv.numel())))?,
            );
        }
        let out = Tensor::new(vec![idx.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over the rows of `logits` (`[.., V]`) where
    /// `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                lv.shape(),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy: empty loss mask".into()));
        }
        let mut probs = vec![T::zero(); lv.numel()];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::Index(format!("target {t} >= vocabulary {v}")));
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            softmax_in_place(p)?;
        }
        let out = Tensor::scalar(total / T::of(count as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(node, &g)?;
            for (v, gi) in contributions {
                accumulate(&mut grads[v.0], gi);
            }
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(g);
            }
        }
        Ok(Gradients { grads: out })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut res = Vec::new();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb) = matmul_backward(av, bv, g, *trans_b, self.rg(*a), self.rg(*b));
                if let Some(ga) = ga {
                    res.push((*a, ga));
                }
                if let Some(gb) = gb {
                    res.push((*b, gb));
                }
            }
            Op::Binary { a, b, kind } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.numel();
                if self.rg(*a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.clone(),
                        BinaryKind::Mul => {
                            let bd = bv.data();
                            Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * bd[i % bn])
                        }
                    };
                    res.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); bn];
                    match kind {
                        BinaryKind::Add => {
                            for (i, &gi) in g.data().iter().enumerate() {
                                gb[i % bn] += gi;
                            }
                        }
                        BinaryKind::Sub => {
                            for (i, &gi) in g.data().iter().enumerate() {
                                gb[i % bn] -= gi;
                            }
                        }
                        BinaryKind::Mul => {
                            for (i, (&gi, &ai)) in g.data().iter().zip(av.data()).enumerate() {
                                gb[i % bn] += gi * ai;
                            }
                        }
                    }
                    res.push((*b, Tensor::new(bv.shape().to_vec(), gb)?));
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x);
                let (gd, xd, yd) = (g.data(), xv.data(), y.data());
                let one = T::one();
                let gx: Vec<T> = match kind {
                    UnaryKind::Exp => gd.iter().zip(yd).map(|(&g, &y)| g * y).collect(),
                    UnaryKind::Log => gd.iter().zip(xd).map(|(&g, &x)| g / x).collect(),
                    UnaryKind::Tanh => gd
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g * (one - y * y))
                        .collect(),
                    UnaryKind::Sigmoid => gd
                        .iter()
                        .zip(yd)
                        .map(|(&g, &y)| g * y * (one - y))
                        .collect(),
                    UnaryKind::Silu => gd
                        .iter()
                        .zip(xd)
                        .map(|(&g, &x)| {
                            let s = sigmoid(x);
                            g * s * (one + x * (one - s))
                        })
                        .collect(),
                    UnaryKind::Softplus => {
                        gd.iter().zip(xd).map(|(&g, &x)| g * sigmoid(x)).collect()
                    }
                    UnaryKind::Neg => gd.iter().map(|&g| -g).collect(),
                };
                res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
            Op::Scale { x, c } => res.push((*x, g.map(|v| v * *c))),
            Op::Sum { x } => {
                let gs = g.item();
                res.push((*x, Tensor::full(self.shape(*x).to_vec(), gs)));
            }
            Op::SumLeading { x } => {
                let d = g.numel();
                let shape = self.shape(*x).to_vec();
                res.push((*x, Tensor::from_fn(shape, |i| g.data()[i % d])));
            }
            Op::Softmax { x } => {
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for ((yr, gr), out) in y
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    softmax_vjp(yr, gr, T::one(), out);
                }
                res.push((*x, Tensor::new(y.shape().to_vec(), gx)?));
            }
            Op::CausalSoftmax { x, scale, q_len } => {
                let l = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for (r, ((yr, gr), out)) in y
                    .data()
                    .chunks(l)
                    .zip(g.data().chunks(l))
                    .zip(gx.chunks_mut(l))
                    .enumerate()
                {
                    let q = r % q_len;
                    softmax_vjp(&yr[..=q], &gr[..=q], *scale, &mut out[..=q]);
                }
                res.push((*x, Tensor::new(y.shape().to_vec(), gx)?));
            }
            Op::Reshape { x } => {
                res.push((*x, g.clone().reshape(self.shape(*x).to_vec())?));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, permute_tensor(g, &inv)));
            }
            Op::SliceLast { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.last_dim(), g.last_dim());
                let mut gx = vec![T::zero(); xv.numel()];
                for (dst, src) in gx.chunks_mut(c).zip(g.data().chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let mut gt = vec![T::zero(); tv.numel()];
                for (k, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g.data()[k * d..(k + 1) * d])
                    {
                        *o += v;
                    }
                }
                res.push((*table, Tensor::new(tv.shape().to_vec(), gt)?));
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut gx = vec![T::zero(); xv.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for (o, &v) in gx[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(&g.data()[k * c..(k + 1) * c])
                    {
                        *o += v;
                    }
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
            Op::ScatterRows { x, idx } => {
                let xv = self.value(*x);
                let c = g.last_dim();
                let mut gx = Vec::with_capacity(xv.numel());
                for &r in idx {
                    gx.extend_from_slice(&g.data()[r * c..(r + 1) * c]);
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.last_dim();
                if self.rg(*x) {
                    let mut gx = g.data().to_vec();
                    for (row, &f) in gx.chunks_mut(c).zip(sv.data()) {
                        for v in row {
                            *v *= f;
                        }
                    }
                    res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
                }
                if self.rg(*s) {
                    let gs: Vec<T> = g
                        .data()
                        .chunks(c)
                        .zip(xv.data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    res.push((*s, Tensor::new(sv.shape().to_vec(), gs)?));
                }
            }
            Op::GatherElems { x, idx } => {
                let xv = self.value(*x);
                let mut gx = vec![T::zero(); xv.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    gx[i] += g.data()[k];
                }
                res.push((*x, Tensor::new(xv.shape().to_vec(), gx)?));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let v = lv.last_dim();
                let f = g.item() / T::of(*count as f64);
                let mut gl = vec![T::zero(); lv.numel()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        gl[r * v + j] = probs[r * v + j] * f;
                    }
                    gl[r * v + t] -= f;
                }
                res.push((*logits, Tensor::new(lv.shape().to_vec(), gl)?));
            }
            Op::Custom { inputs, func } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.rg(v)).collect();
                let gs = func.backward(&ins, y, g, &needs)?;
                for ((&v, gi), need) in inputs.iter().zip(gs).zip(needs) {
                    if let (Some(gi), true) = (gi, need) {
                        if gi.shape() != self.shape(v) {
                            return Err(shape_err(func.name(), gi.shape(), self.shape(v)));
                        }
                        res.push((v, gi));
                    }
                }
            }
        }
        Ok(res.into_iter().filter(|(v, _)| self.rg(*v)).collect())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let ok = a == b || numel(b) == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b);
    if ok {
        Ok(())
    } else {
        Err(shape_err(op, a, b))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) -> Result<()> {
    let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if m == T::neg_infinity() {
        return Err(Error::Contract("softmax row is entirely -inf".into()));
    }
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
    Ok(())
}

fn softmax_vjp<T: Real>(y: &[T], g: &[T], scale: T, out: &mut [T]) {
    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = scale * yi * (gi - dot);
    }
}

pub(crate) fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut data = Vec::with_capacity(n);
    if n > 0 {
        let src = x.data();
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..n {
            data.push(src[off]);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Tensor::new(out_shape, data).expect("permute shape")
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    if k != kb || !(b_batch.is_empty() || b_batch == a_batch) {
        return Err(shape_err("matmul", a, b));
    }
    Ok(MatmulDims {
        batch: numel(a_batch),
        m,
        k,
        n,
        b_batched: !b_batch.is_empty(),
    })
}

fn b_layout(d: &MatmulDims, trans_b: bool) -> Layout {
    if trans_b {
        Layout::row_major(d.n, d.k).transposed()
    } else {
        Layout::row_major(d.k, d.n)
    }
}

pub(crate) fn matmul_forward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut shape = a.shape()[..a.ndim() - 2].to_vec();
    shape.extend([d.m, d.n]);
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    let lb = b_layout(&d, trans_b);
    if d.b_batched {
        let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                &a.data()[i * sa..(i + 1) * sa],
                Layout::row_major(d.m, d.k),
                &b.data()[i * sb..(i + 1) * sb],
                lb,
                &mut out[i * sc..(i + 1) * sc],
                Layout::row_major(d.m, d.n),
                T::zero(),
            );
        }
    } else {
        let rows = d.batch * d.m;
        gemm(
            a.data(),
            Layout::row_major(rows, d.k),
            b.data(),
            lb,
            &mut out,
            Layout::row_major(rows, d.n),
            T::zero(),
        );
    }
    Tensor::new(shape, out)
}

fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    trans_b: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = matmul_dims(a.shape(), b.shape(), trans_b).expect("validated in forward");
    // op(b) is k x n; ga = g · op(b)ᵀ, gop(b) = aᵀ · g.
    let lb_t = b_layout(&d, trans_b).transposed();
    let ga = need_a.then(|| {
        let mut ga = vec![T::zero(); a.numel()];
        if d.b_batched {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for i in 0..d.batch {
                gemm(
                    &g.data()[i * sc..(i + 1) * sc],
                    Layout::row_major(d.m, d.n),
                    &b.data()[i * sb..(i + 1) * sb],
                    lb_t,
                    &mut ga[i * sa..(i + 1) * sa],
                    Layout::row_major(d.m, d.k),
                    T::zero(),
                );
            }
        } else {
            let rows = d.batch * d.m;
            gemm(
                g.data(),
                Layout::row_major(rows, d.n),
                b.data(),
                lb_t,
                &mut ga,
                Layout::row_major(rows, d.k),
                T::zero(),
            );
        }
        Tensor::new(a.shape().to_vec(), ga).unwrap()
    });
    let gb = need_b.then(|| {
        let mut gb = vec![T::zero(); b.numel()];
        // Output layout for the gradient of op(b): k x n in b's storage.
        let lgb = b_layout(&d, trans_b);
        if d.b_batched {
            let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for i in 0..d.batch {
                gemm(
                    &a.data()[i * sa..(i + 1) * sa],
                    Layout::row_major(d.m, d.k).transposed(),
                    &g.data()[i * sc..(i + 1) * sc],
                    Layout::row_major(d.m, d.n),
                    &mut gb[i * sb..(i + 1) * sb],
                    lgb,
                    T::zero(),
                );
            }
        } else {
            let rows = d.batch * d.m;
            gemm(
                a.data(),
                Layout::row_major(rows, d.k).transposed(),
                g.data(),
                Layout::row_major(rows, d.n),
                &mut gb,
                lgb,
                T::zero(),
            );
        }
        Tensor::new(b.shape().to_vec(), gb).unwrap()
    });
    (ga, gb)
}

/// Central-difference gradient `(f(x+h·e) − f(x−h·e)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, gi) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Largest relative error between two gradients, with `floor` guarding
/// against division by near-zero entries.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::default();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn projector_matmul() {
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let v = t(&[2, 1], &[5.0, 7.0]);
        assert_eq!(p.matmul(&v).unwrap().data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros([3, 4]);
        let b = Tensor::<f64>::zeros([5, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[5, 2]"), "{err}");
    }

    #[test]
    fn sigmoid_and_silu_at_zero() {
        let mut g = Graph::<f64>::default();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        let w = g.silu(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(w).item(), 0.0);
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        for v in &d[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(d[3], 1.0);
        assert!(d[4] < 1e-300 && d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_all_neg_inf_row_is_rejected() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(t(&[2], &[f64::NEG_INFINITY, f64::NEG_INFINITY]));
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut g = Graph::<f64>::default();
        let xv = t(&[3], &[1.0, -2.0, 0.5]);
        let x = g.param(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_of_matmul_sum_matches_analytic() {
        // loss = sum(a·b): d/da = 1·bᵀ, d/db = aᵀ·1
        let mut g = Graph::<f64>::default();
        let a = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.param(t(&[3, 2], &[1.0, -1.0, 2.0, 0.5, 0.0, 3.0]));
        let y = g.matmul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.get(a).unwrap().data(),
            &[0.0, 2.5, 3.0, 0.0, 2.5, 3.0]
        );
        assert_eq!(
            grads.get(b).unwrap().data(),
            &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]
        );
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::default();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::<f64>::randn([5], 1.0, &mut rng(1));
        let gr = finite_diff_grad(|x| x.sum(), &x, 1e-5);
        for v in gr.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_diff_of_square_at_three() {
        let x = t(&[1], &[3.0]);
        let gr = finite_diff_grad(|x| x.data()[0] * x.data()[0], &x, 1e-5);
        assert!((gr.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut rng(3));
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), x.at(&[1, 2, 3]));
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }

    #[test]
    fn causal_softmax_masks_future_keys() {
        let mut g = Graph::<f64>::default();
        let x = g.constant(Tensor::randn([2 * 3, 3], 1.0, &mut rng(4)));
        let y = g.causal_softmax(x, 1.0, 3).unwrap();
        let yv = g.value(y);
        for (r, row) in yv.data().chunks(3).enumerate() {
            let q = r % 3;
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row.iter().filter(|v| **v != 0.0).count(), q + 1);
        }
    }

    #[test]
    fn cross_entropy_needs_nonempty_mask() {
        let mut g = Graph::<f64>::default();
        let l = g.param(Tensor::zeros([2, 4]));
        assert!(g.cross_entropy(l, &[0, 1], &[false, false]).is_err());
        let ce = g.cross_entropy(l, &[0, 1], &[true, false]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-14);
    }
}
