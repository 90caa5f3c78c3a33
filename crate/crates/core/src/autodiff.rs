//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive executed on it. [`Var`] is a cheap
//! handle into the tape; operations are methods on the tape and return new
//! handles. [`Tape::backward`] replays the recorded backward rules in
//! reverse execution order.
//!
//! Gradients are only propagated into nodes that participate, i.e. leaves
//! created with `requires_grad = true` and anything computed from them.
//! Every call to `backward` clears all previously accumulated gradients on
//! the tape first.

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful on the tape
/// that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, T),
    AddScalar(Var),
    Reduce {
        op: ReduceOp,
        a: Var,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    LeakyRelu(Var, T),
    Reshape(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
    },
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        mean: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    name: Option<String>,
    op: Op<T>,
}

/// Records operations for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch statistics produced by a training-mode batch-norm evaluation.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let channels = shape[1];
    let spatial = shape[2..].iter().product::<usize>();
    (batch, channels, spatial)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            name: None,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Records an input value.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a named parameter; its gradient is reported by [`Tape::named_grads`].
    pub fn param(&self, name: &str, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes.borrow_mut()[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every named parameter leaf that received one.
    pub fn named_grads(&self) -> Vec<(String, Tensor<T>)> {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| {
                let name = n.name.as_ref()?;
                let g = n.grad.as_ref()?;
                Some((
                    name.clone(),
                    Tensor::new(n.value.shape(), g.clone()).expect("grad shape"),
                ))
            })
            .collect()
    }

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim("matmul", sa, sb));
            }
            let mut out = vec![T::ZERO; sa[0] * sb[1]];
            gemm(
                MatRef::new(av.data(), sa[0], sa[1]),
                MatRef::new(bv.data(), sb[0], sb[1]),
                &mut out,
                false,
            );
            Tensor::new(&[sa[0], sb[1]], out)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Pointwise `a op b`. `b` may either match `a` exactly or match
    /// `a.shape()[1..]`, in which case it is applied to every row of `a`.
    pub fn elementwise(&self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (value, broadcast) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let broadcast = if av.shape() == bv.shape() {
                false
            } else if av.rank() >= 2 && &av.shape()[1..] == bv.shape() {
                true
            } else {
                return Err(Error::dim("elementwise", av.shape(), bv.shape()));
            };
            let bd = bv.data();
            let n = bd.len();
            let f = |x: T, y: T| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            };
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect();
            (Tensor::new(av.shape(), data)?, broadcast)
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, Op::Binary { op, a, b, broadcast }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    pub fn scale(&self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    /// Reduces over `axis`, or over everything when `axis` is `None`.
    /// Full reductions produce shape `[1]`.
    pub fn reduce(&self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let (value, outer, extent, inner) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let shape = av.shape();
            let (outer, extent, inner, out_shape) = match axis {
                None => (1, av.len(), 1, vec![1]),
                Some(ax) if ax < shape.len() => {
                    let mut out_shape: Vec<usize> = shape[..ax].to_vec();
                    out_shape.extend_from_slice(&shape[ax + 1..]);
                    if out_shape.is_empty() {
                        out_shape.push(1);
                    }
                    (
                        shape[..ax].iter().product(),
                        shape[ax],
                        shape[ax + 1..].iter().product(),
                        out_shape,
                    )
                }
                Some(ax) => {
                    return Err(Error::contract(format!(
                        "reduction axis {ax} out of range for shape {shape:?}"
                    )))
                }
            };
            let d = av.data();
            let mut out = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for e in 0..extent {
                    let base = (o * extent + e) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
            if op == ReduceOp::Mean {
                let s = T::ONE / T::from_f64(extent as f64);
                out.iter_mut().for_each(|v| *v *= s);
            }
            (Tensor::new(&out_shape, out)?, outer, extent, inner)
        };
        let rg = self.needs(&[a]);
        Ok(self.push(
            value,
            rg,
            Op::Reduce {
                op,
                a,
                outer,
                extent,
                inner,
            },
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("full reduction")
    }

    pub fn mean(&self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None).expect("full reduction")
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Var {
        let value = self
            .value(a)
            .map(|x| if x >= T::ZERO { x } else { x * slope });
        let rg = self.needs(&[a]);
        self.push(value, rg, Op::LeakyRelu(a, slope))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Row-wise log-softmax of a 2-D tensor, stabilised by max subtraction.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            if av.rank() != 2 {
                return Err(Error::dim("log_softmax", av.shape(), &[0, 0]));
            }
            let cols = av.shape()[1];
            let mut out = Vec::with_capacity(av.len());
            for row in av.data().chunks(cols) {
                let m = row.iter().copied().fold(row[0], Scalar::max);
                let lse = row.iter().map(|&z| (z - m).exp()).sum::<T>().ln() + m;
                out.extend(row.iter().map(|&z| z - lse));
            }
            Tensor::new(av.shape(), out)?
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::LogSoftmax(a)))
    }

    /// `out[i] = a[i, idx[i]]` for a 2-D `a`.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = {
            let av = self.value(a);
            if av.rank() != 2 || av.shape()[0] != idx.len() {
                return Err(Error::dim("gather", av.shape(), &[idx.len()]));
            }
            let cols = av.shape()[1];
            let mut out = Vec::with_capacity(idx.len());
            for (i, &j) in idx.iter().enumerate() {
                if j >= cols {
                    return Err(Error::contract(format!(
                        "label {j} out of range for {cols} classes"
                    )));
                }
                out.push(av.data()[i * cols + j]);
            }
            Tensor::new(&[idx.len()], out)?
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::Gather(a, idx.to_vec())))
    }

    /// Rows of `a` (leading axis) in the given order; repeats allowed.
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::SelectRows(a, idx.to_vec())))
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    /// `x: [B, C, H, W]`, `w: [O, C, 3, 3]`, `b: [O]` → `[B, O, H, W]`.
    pub fn conv3x3(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (value, cols) = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let (xs, ws) = (xv.shape(), wv.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || xs[1] != ws[1] {
                return Err(Error::dim("conv3x3", xs, ws));
            }
            if bv.shape() != [ws[0]] {
                return Err(Error::dim("conv3x3 bias", bv.shape(), &ws[..1]));
            }
            let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let o = ws[0];
            let hw = h * wd;
            let cols = im2col(xv.data(), batch, c, h, wd);
            // [O, C*9] x [C*9, B*HW]
            let mut out_cm = vec![T::ZERO; o * batch * hw];
            gemm(
                MatRef::new(wv.data(), o, c * 9),
                MatRef::new(&cols, c * 9, batch * hw),
                &mut out_cm,
                false,
            );
            let mut out = vec![T::ZERO; batch * o * hw];
            let bias = bv.data();
            for oc in 0..o {
                for n in 0..batch {
                    let src = &out_cm[oc * batch * hw + n * hw..][..hw];
                    let dst = &mut out[(n * o + oc) * hw..][..hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias[oc];
                    }
                }
            }
            (Tensor::new(&[batch, o, h, wd], out)?, cols)
        };
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(value, rg, Op::Conv3x3 { x, w, b, cols }))
    }

    /// 2×2 max pooling with stride 2. Odd extents produce a partial last
    /// window (output `⌈H/2⌉ × ⌈W/2⌉`). Ties go to the first element in
    /// row-major order.
    pub fn max_pool2x2(&self, x: Var) -> Result<Var> {
        let (value, argmax) = {
            let xv = self.value(x);
            let xs = xv.shape();
            if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
                return Err(Error::dim("max_pool2x2", xs, &[0, 0, 2, 2]));
            }
            let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let d = xv.data();
            let mut out = Vec::with_capacity(batch * c * oh * ow);
            let mut argmax = Vec::with_capacity(batch * c * oh * ow);
            for plane in 0..batch * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = base + 2 * i * w + 2 * j;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let (y, xx) = (2 * i + dy, 2 * j + dx);
                            if y < h && xx < w {
                                let k = base + y * w + xx;
                                if d[k] > d[best] {
                                    best = k;
                                }
                            }
                        }
                        out.push(d[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::new(&[batch, c, oh, ow], out)?, argmax)
        };
        let rg = self.needs(&[x]);
        Ok(self.push(value, rg, Op::MaxPool2x2 { x, argmax }))
    }

    /// Batch normalisation with batch statistics over every axis except
    /// axis 1 (channels). Works for `[B, C]` and `[B, C, H, W]`.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let (value, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let xs = xv.shape();
            if xs.len() < 2 || gv.shape() != [xs[1]] || bv.shape() != [xs[1]] {
                return Err(Error::dim("batch_norm", xs, gv.shape()));
            }
            if xs[0] < 2 {
                return Err(Error::contract(
                    "training-mode batch norm needs a batch of at least 2",
                ));
            }
            let (batch, c, spatial) = channel_layout(xs);
            let count = batch * spatial;
            let n = T::from_f64(count as f64);
            let d = xv.data();
            let mut mean = vec![T::ZERO; c];
            let mut var = vec![T::ZERO; c];
            for b in 0..batch {
                for ch in 0..c {
                    let s = &d[(b * c + ch) * spatial..][..spatial];
                    mean[ch] += s.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            for b in 0..batch {
                for ch in 0..c {
                    let s = &d[(b * c + ch) * spatial..][..spatial];
                    var[ch] += s.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / n);
            let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::ZERO; d.len()];
            let mut out = vec![T::ZERO; d.len()];
            let (g, bt) = (gv.data(), bv.data());
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    for k in off..off + spatial {
                        xhat[k] = (d[k] - mean[ch]) * inv_std[ch];
                        out[k] = g[ch] * xhat[k] + bt[ch];
                    }
                }
            }
            (
                Tensor::new(xs, out)?,
                xhat,
                inv_std,
                BatchStats { mean, var, count },
            )
        };
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(
            value,
            rg,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Per-channel affine map `gamma * (x - mean) / sqrt(var + eps) + beta`
    /// with fixed statistics (batch norm in evaluation mode).
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (value, inv_std) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let xs = xv.shape();
            if xs.len() < 2
                || gv.shape() != [xs[1]]
                || bv.shape() != [xs[1]]
                || mean.len() != xs[1]
                || var.len() != xs[1]
            {
                return Err(Error::dim("batch_norm_eval", xs, gv.shape()));
            }
            let (batch, c, spatial) = channel_layout(xs);
            let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
            let d = xv.data();
            let (g, bt) = (gv.data(), bv.data());
            let mut out = vec![T::ZERO; d.len()];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    for k in off..off + spatial {
                        out[k] = g[ch] * (d[k] - mean[ch]) * inv_std[ch] + bt[ch];
                    }
                }
            }
            (Tensor::new(xs, out)?, inv_std)
        };
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                mean: mean.to_vec(),
            },
        ))
    }

    /// Populates `d root / d v` for every participating node. `root` must
    /// hold a single element. Gradients from earlier calls are discarded.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.0].value.shape()
            )));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        if !nodes[root.0].requires_grad {
            return Ok(());
        }
        nodes[root.0].grad = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            if nodes[i].grad.is_none() || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let contributions = backward_rule(&nodes, i);
            for (input, g) in contributions {
                let target = &mut nodes[input.0];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => target.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn im2col<T: Scalar>(x: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let total = batch * hw;
    let mut cols = vec![T::ZERO; c * 9 * total];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * total;
                for n in 0..batch {
                    let plane = &x[(n * c + ch) * hw..][..hw];
                    let dst = &mut cols[row + n * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..][..w];
                        let dst_row = &mut dst[y * w..][..w];
                        for (xx, d) in dst_row.iter_mut().enumerate() {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                *d = src_row[sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], batch: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let total = batch * hw;
    let mut x = vec![T::ZERO; batch * c * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * total;
                for n in 0..batch {
                    let src = &cols[row + n * hw..][..hw];
                    let plane = &mut x[(n * c + ch) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn backward_rule<T: Scalar>(nodes: &[Node<T>], i: usize) -> Vec<(Var, Vec<T>)> {
    let node = &nodes[i];
    let g = node.grad.as_deref().expect("grad present");
    let val = |v: Var| &nodes[v.0].value;
    let rg = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if rg(*a) {
                let mut da = vec![T::ZERO; m * k];
                gemm(MatRef::new(g, m, n), MatRef::new(bv.data(), k, n).t(), &mut da, false);
                out.push((*a, da));
            }
            if rg(*b) {
                let mut db = vec![T::ZERO; k * n];
                gemm(MatRef::new(av.data(), m, k).t(), MatRef::new(g, m, n), &mut db, false);
                out.push((*b, db));
            }
        }
        Op::Binary { op, a, b, broadcast } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let n = bd.len();
            if rg(*a) {
                let da = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().enumerate().map(|(k, &gk)| gk * bd[k % n]).collect(),
                };
                out.push((*a, da));
            }
            if rg(*b) {
                let per: Vec<T> = match op {
                    BinaryOp::Add => g.to_vec(),
                    BinaryOp::Sub => g.iter().map(|&gk| -gk).collect(),
                    BinaryOp::Mul => g.iter().zip(ad).map(|(&gk, &x)| gk * x).collect(),
                };
                let db = if *broadcast {
                    let mut acc = vec![T::ZERO; n];
                    for chunk in per.chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(s, &v)| *s += v);
                    }
                    acc
                } else {
                    per
                };
                out.push((*b, db));
            }
        }
        Op::Scale(a, c) => out.push((*a, g.iter().map(|&v| v * *c).collect())),
        Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
        Op::Reduce {
            op,
            a,
            outer,
            extent,
            inner,
        } => {
            let s = match op {
                ReduceOp::Sum => T::ONE,
                ReduceOp::Mean => T::ONE / T::from_f64(*extent as f64),
            };
            let mut da = vec![T::ZERO; outer * extent * inner];
            for o in 0..*outer {
                for e in 0..*extent {
                    for k in 0..*inner {
                        da[(o * extent + e) * inner + k] = g[o * inner + k] * s;
                    }
                }
            }
            out.push((*a, da));
        }
        Op::LeakyRelu(a, slope) => {
            let ad = val(*a).data();
            let da = g
                .iter()
                .zip(ad)
                .map(|(&gk, &x)| if x >= T::ZERO { gk } else { gk * *slope })
                .collect();
            out.push((*a, da));
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let cols = node.value.shape()[1];
            let mut da = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                let gs: T = gr.iter().copied().sum();
                da.extend(yr.iter().zip(gr).map(|(&yk, &gk)| gk - yk.exp() * gs));
            }
            out.push((*a, da));
        }
        Op::Gather(a, idx) => {
            let cols = val(*a).shape()[1];
            let mut da = vec![T::ZERO; val(*a).len()];
            for (r, &j) in idx.iter().enumerate() {
                da[r * cols + j] += g[r];
            }
            out.push((*a, da));
        }
        Op::SelectRows(a, idx) => {
            let av = val(*a);
            let cols = av.row_len();
            let mut da = vec![T::ZERO; av.len()];
            for (r, &src) in idx.iter().enumerate() {
                da[src * cols..][..cols]
                    .iter_mut()
                    .zip(&g[r * cols..][..cols])
                    .for_each(|(d, &v)| *d += v);
            }
            out.push((*a, da));
        }
        Op::Conv3x3 { x, w, b, cols } => {
            let xs = val(*x).shape();
            let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let o = val(*w).shape()[0];
            let hw = h * wd;
            // channel-major copy of the upstream gradient: [O, B*HW]
            let mut g_cm = vec![T::ZERO; o * batch * hw];
            for n in 0..batch {
                for oc in 0..o {
                    g_cm[oc * batch * hw + n * hw..][..hw]
                        .copy_from_slice(&g[(n * o + oc) * hw..][..hw]);
                }
            }
            if rg(*x) {
                let mut dcols = vec![T::ZERO; c * 9 * batch * hw];
                gemm(
                    MatRef::new(val(*w).data(), o, c * 9).t(),
                    MatRef::new(&g_cm, o, batch * hw),
                    &mut dcols,
                    false,
                );
                out.push((*x, col2im(&dcols, batch, c, h, wd)));
            }
            if rg(*w) {
                let mut dw = vec![T::ZERO; o * c * 9];
                gemm(
                    MatRef::new(&g_cm, o, batch * hw),
                    MatRef::new(cols, c * 9, batch * hw).t(),
                    &mut dw,
                    false,
                );
                out.push((*w, dw));
            }
            if rg(*b) {
                let db = g_cm
                    .chunks(batch * hw)
                    .map(|row| row.iter().copied().sum())
                    .collect();
                out.push((*b, db));
            }
        }
        Op::MaxPool2x2 { x, argmax } => {
            let mut dx = vec![T::ZERO; val(*x).len()];
            for (&k, &gk) in argmax.iter().zip(g) {
                dx[k] += gk;
            }
            out.push((*x, dx));
        }
        Op::BatchNormTrain {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (batch, c, spatial) = channel_layout(val(*x).shape());
            let gam = val(*gamma).data();
            let mut sum_g = vec![T::ZERO; c];
            let mut sum_gx = vec![T::ZERO; c];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    for k in off..off + spatial {
                        sum_g[ch] += g[k];
                        sum_gx[ch] += g[k] * xhat[k];
                    }
                }
            }
            if rg(*x) {
                let n = T::from_f64((batch * spatial) as f64);
                let mut dx = vec![T::ZERO; g.len()];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        let scale = gam[ch] * inv_std[ch] / n;
                        for k in off..off + spatial {
                            dx[k] = scale * (n * g[k] - sum_g[ch] - xhat[k] * sum_gx[ch]);
                        }
                    }
                }
                out.push((*x, dx));
            }
            if rg(*gamma) {
                out.push((*gamma, sum_gx));
            }
            if rg(*beta) {
                out.push((*beta, sum_g));
            }
        }
        Op::ChannelAffine {
            x,
            gamma,
            beta,
            inv_std,
            mean,
        } => {
            let xv = val(*x);
            let (batch, c, spatial) = channel_layout(xv.shape());
            let gam = val(*gamma).data();
            let xd = xv.data();
            let mut dx = vec![T::ZERO; g.len()];
            let mut dgam = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    for k in off..off + spatial {
                        dx[k] = g[k] * gam[ch] * inv_std[ch];
                        dgam[ch] += g[k] * (xd[k] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += g[k];
                    }
                }
            }
            if rg(*x) {
                out.push((*x, dx));
            }
            if rg(*gamma) {
                out.push((*gamma, dgam));
            }
            if rg(*beta) {
                out.push((*beta, dbeta));
            }
        }
    }
    out
}
