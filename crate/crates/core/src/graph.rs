//! Reverse-mode differentiation over dense arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to apply its local gradient rule. Parents always
//! have smaller ids than their children, so a reverse sweep over ids is a
//! valid topological order.
//!
//! Entity sets use the layout `[batch, feature, entity]` with a per-task
//! cardinality list. The masked ops (`mask`, `masked_mean`, `masked_max`,
//! `causal_mean`, `lstm_cell`) never read entity positions at or beyond a
//! task's length, so whatever sits in the padding cannot reach a result.

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar, Strides};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Linear { w: Var, x: Var },
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, F),
    Shift(Var),
    Clamp { x: Var, lo: F, hi: F },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    Mask { x: Var, lengths: Vec<usize> },
    MaskedMean { x: Var, lengths: Vec<usize> },
    MaskedMax { x: Var, argmax: Vec<usize> },
    CausalMean { x: Var, lengths: Vec<usize> },
    LogSoftmax(Var),
    LogSumExp(Var),
    Gather { x: Var, entries: Vec<(usize, F)> },
    LstmCell(Box<LstmSaved<F>>),
}

struct LstmSaved<F> {
    pre: Var,
    c_prev: Option<Var>,
    lengths: Option<Vec<usize>>,
    /// Gate activations `[B, 4H, N]` in order input, forget, output, candidate.
    acts: Array<F>,
    /// `tanh(c')`, `[B, H, N]`.
    tanh_c: Array<F>,
}

struct Node<F> {
    value: Array<F>,
    grad: Option<Array<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims3<F>(op: &'static str, a: &Array<F>) -> Result<(usize, usize, usize)>
where
    F: Scalar,
{
    match *a.shape() {
        [b, d, n] => Ok((b, d, n)),
        _ => Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

pub(crate) fn check_lengths(lengths: &[usize], batch: usize, n_max: usize) -> Result<()> {
    if lengths.len() != batch {
        return Err(Error::shape("lengths", &[lengths.len()], &[batch]));
    }
    for (task, &len) in lengths.iter().enumerate() {
        if len == 0 || len > n_max {
            return Err(Error::Cardinality {
                task,
                len,
                max: n_max,
            });
        }
    }
    Ok(())
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

/// Row-major strides of `shape`, zeroed on axes broadcast up to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        strides[ax] = if shape[ax] == 1 && out[ax] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[ax];
    }
    strides
}

/// Visit every output offset together with the matching offsets in two
/// broadcast operands.
fn walk(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if out.contains(&0) {
        return;
    }
    let r = out.len();
    if r == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let outer: usize = out[..r - 1].iter().product();
    let mut idx = vec![0usize; r - 1];
    let (mut base_a, mut base_b, mut o) = (0usize, 0usize, 0usize);
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += sa[r - 1];
            ib += sb[r - 1];
        }
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            base_a += sa[ax];
            base_b += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            base_a -= sa[ax] * out[ax];
            base_b -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are accumulated into it by [`Graph::backward`].
    pub fn param(&mut self, value: Array<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Array<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Array<F> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---------------------------------------------------------------- ops

    /// `a[M,K] · b[K,P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, p) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, p]) if k == k2 => (m, k, p),
            (sa, sb) => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = Array::zeros(&[m, p]);
        gemm(
            m,
            k,
            p,
            va.data(),
            Strides::row_major(k),
            vb.data(),
            Strides::row_major(p),
            F::zero(),
            out.data_mut(),
            Strides::row_major(p),
        );
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Entity-wise shared linear map: `w[M,K]` applied to every column of
    /// `x[B,K,N]`, giving `[B,M,N]`.
    pub fn linear(&mut self, w: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(w), self.value(x));
        let (m, k, b, n) = match (vw.shape(), vx.shape()) {
            (&[m, k], &[b, k2, n]) if k == k2 => (m, k, b, n),
            (sw, sx) => return Err(Error::shape("linear", sw, sx)),
        };
        let mut out = Array::zeros(&[b, m, n]);
        for bi in 0..b {
            gemm(
                m,
                k,
                n,
                vw.data(),
                Strides::row_major(k),
                &vx.data()[bi * k * n..(bi + 1) * k * n],
                Strides::row_major(n),
                F::zero(),
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                Strides::row_major(n),
            );
        }
        Ok(self.push(out, Op::Linear { w, x }, &[w, x]))
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let out = self.value(x).map(|v| match op {
            Unary::Sigmoid => sigmoid(v),
            Unary::Tanh => v.tanh(),
            Unary::Relu => v.max(F::zero()),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Neg => -v,
        });
        self.push(out, Op::Unary(op, x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    /// Elementwise binary op. Operands must have equal rank; any axis may be
    /// 1 on one side and is then broadcast.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape("elementwise", va.shape(), vb.shape())?;
        let mut out = Array::zeros(&out_shape);
        if va.shape() == vb.shape() {
            let it = out
                .data_mut()
                .iter_mut()
                .zip(va.data().iter().zip(vb.data()));
            for (o, (&x, &y)) in it {
                *o = apply_binary(op, x, y);
            }
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            let od = out.data_mut();
            walk(&out_shape, &sa, &sb, |o, ia, ib| {
                od[o] = apply_binary(op, da[ia], db[ib]);
            });
        }
        Ok(self.push(out, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x + c` for a constant scalar `c`.
    pub fn shift(&mut self, x: Var, c: F) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Shift(x), &[x])
    }

    /// Clamp into `[lo, hi]`; gradient is passed only where the input lies
    /// inside the interval.
    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Contiguous sub-range `start..start+len` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if axis >= vx.rank() || start + len > vx.dim(axis) {
            return Err(Error::Contract(format!(
                "slice {start}..{} of axis {axis} out of range for {:?}",
                start + len,
                vx.shape()
            )));
        }
        let (outer, ax, inner) = split_axis(vx.shape(), axis);
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ax + start) * inner;
            data.extend_from_slice(&vx.data()[from..from + len * inner]);
        }
        let out = Array::new(&shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero arrays".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let vv = self.value(v);
                let block = vv.dim(axis) * inner;
                data.extend_from_slice(&vv.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Array::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::Sum(x), &[x])
    }

    /// Zero every entity position at or beyond the task's length.
    pub fn mask(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (b, d, n) = dims3("mask", vx)?;
        check_lengths(lengths, b, n)?;
        let mut out = Array::zeros(vx.shape());
        for bi in 0..b {
            let len = lengths[bi];
            for di in 0..d {
                let row = (bi * d + di) * n;
                out.data_mut()[row..row + len].copy_from_slice(&vx.data()[row..row + len]);
            }
        }
        Ok(self.push(
            out,
            Op::Mask {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        ))
    }

    /// Per-task mean over valid entities: `[B,D,N] -> [B,D]`. Summation runs
    /// sequentially in ascending entity index.
    pub fn masked_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (b, d, n) = dims3("masked_mean", vx)?;
        check_lengths(lengths, b, n)?;
        let mut out = Array::zeros(&[b, d]);
        for bi in 0..b {
            let len = lengths[bi];
            let denom = F::from_usize(len).expect("length fits scalar");
            for di in 0..d {
                let row = (bi * d + di) * n;
                let mut acc = F::zero();
                for &v in &vx.data()[row..row + len] {
                    acc += v;
                }
                out.data_mut()[bi * d + di] = acc / denom;
            }
        }
        Ok(self.push(
            out,
            Op::MaskedMean {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        ))
    }

    /// Per-task max over valid entities: `[B,D,N] -> [B,D]`. On ties the
    /// lowest entity index wins and receives the gradient.
    pub fn masked_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (b, d, n) = dims3("masked_max", vx)?;
        check_lengths(lengths, b, n)?;
        let mut out = Array::zeros(&[b, d]);
        let mut argmax = Vec::with_capacity(b * d);
        for bi in 0..b {
            for di in 0..d {
                let row = (bi * d + di) * n;
                let mut best = row;
                for i in row + 1..row + lengths[bi] {
                    if vx.data()[i] > vx.data()[best] {
                        best = i;
                    }
                }
                out.data_mut()[bi * d + di] = vx.data()[best];
                argmax.push(best);
            }
        }
        Ok(self.push(out, Op::MaskedMax { x, argmax }, &[x]))
    }

    /// Strict-prefix mean along the entity axis:
    /// `out[b,:,i] = mean(x[b,:,0..i])`, with `out[b,:,0] = 0` and zero
    /// padding.
    pub fn causal_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (b, d, n) = dims3("causal_mean", vx)?;
        check_lengths(lengths, b, n)?;
        let mut out = Array::zeros(vx.shape());
        for bi in 0..b {
            for di in 0..d {
                let row = (bi * d + di) * n;
                let mut acc = F::zero();
                for i in 1..lengths[bi] {
                    acc += vx.data()[row + i - 1];
                    out.data_mut()[row + i] = acc / F::from_usize(i).expect("index fits scalar");
                }
            }
        }
        Ok(self.push(
            out,
            Op::CausalMean {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        ))
    }

    /// Log-softmax over axis 1 of a `[B,K,N]` array.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (b, k, n) = dims3("log_softmax", vx)?;
        let mut out = vx.clone();
        let lse = logsumexp_axis1(vx.data(), b, k, n);
        for bi in 0..b {
            for ki in 0..k {
                for ni in 0..n {
                    out.data_mut()[(bi * k + ki) * n + ni] -= lse[bi * n + ni];
                }
            }
        }
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    /// Log-sum-exp over axis 1: `[B,K,N] -> [B,1,N]`.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (b, k, n) = dims3("logsumexp", vx)?;
        let lse = logsumexp_axis1(vx.data(), b, k, n);
        let out = Array::new(&[b, 1, n], lse)?;
        Ok(self.push(out, Op::LogSumExp(x), &[x]))
    }

    /// `Σ w · x[flat_index]` over the given entries, as a scalar.
    pub fn gather(&mut self, x: Var, entries: Vec<(usize, F)>) -> Result<Var> {
        let vx = self.value(x);
        let mut acc = F::zero();
        for &(i, w) in &entries {
            let v = *vx
                .data()
                .get(i)
                .ok_or_else(|| Error::Contract(format!("gather index {i} out of range")))?;
            acc += w * v;
        }
        Ok(self.push(Array::scalar(acc), Op::Gather { x, entries }, &[x]))
    }

    /// Fused LSTM state update.
    ///
    /// `pre` holds gate pre-activations `[B,4H,N]` in the order input,
    /// forget, output, candidate. Computes `c' = σ(f)∘c + σ(i)∘tanh(u)` and
    /// `h' = σ(o)∘tanh(c')` and returns `concat(h', c')` as `[B,2H,N]`.
    /// A missing `c_prev` means a zero cell state. With `lengths`, every
    /// padding position of the output is zero.
    pub fn lstm_cell(
        &mut self,
        pre: Var,
        c_prev: Option<Var>,
        lengths: Option<&[usize]>,
    ) -> Result<Var> {
        let vp = self.value(pre);
        let (b, h4, n) = dims3("lstm_cell", vp)?;
        if h4 % 4 != 0 {
            return Err(Error::Contract(format!(
                "lstm_cell pre-activation axis {h4} is not a multiple of 4"
            )));
        }
        let h = h4 / 4;
        if let Some(c) = c_prev {
            let sc = self.shape(c);
            if sc != [b, h, n] {
                return Err(Error::shape("lstm_cell", &[b, h, n], sc));
            }
        }
        if let Some(l) = lengths {
            check_lengths(l, b, n)?;
        }
        let vp = self.value(pre);
        let mut acts = Array::zeros(&[b, h4, n]);
        let mut tanh_c = Array::zeros(&[b, h, n]);
        let mut out = Array::zeros(&[b, 2 * h, n]);
        for bi in 0..b {
            let len = lengths.map_or(n, |l| l[bi]);
            for hi in 0..h {
                let row = |g: usize| ((bi * h4) + g * h + hi) * n;
                let c_row = (bi * h + hi) * n;
                let h_out = (bi * 2 * h + hi) * n;
                let c_out = (bi * 2 * h + h + hi) * n;
                for e in 0..len {
                    let ig = sigmoid(vp.data()[row(0) + e]);
                    let fg = sigmoid(vp.data()[row(1) + e]);
                    let og = sigmoid(vp.data()[row(2) + e]);
                    let ug = vp.data()[row(3) + e].tanh();
                    let cp = match c_prev {
                        Some(c) => self.nodes[c.0].value.data()[c_row + e],
                        None => F::zero(),
                    };
                    let c_new = fg * cp + ig * ug;
                    let tc = c_new.tanh();
                    let a = acts.data_mut();
                    a[row(0) + e] = ig;
                    a[row(1) + e] = fg;
                    a[row(2) + e] = og;
                    a[row(3) + e] = ug;
                    tanh_c.data_mut()[c_row + e] = tc;
                    out.data_mut()[h_out + e] = og * tc;
                    out.data_mut()[c_out + e] = c_new;
                }
            }
        }
        let mut parents = vec![pre];
        parents.extend(c_prev);
        let saved = LstmSaved {
            pre,
            c_prev,
            lengths: lengths.map(<[usize]>::to_vec),
            acts,
            tanh_c,
        };
        Ok(self.push(out, Op::LstmCell(Box::new(saved)), &parents))
    }

    // ----------------------------------------------------------- backward

    /// Accumulate `∂root/∂node` into every gradient-requiring node reachable
    /// from the scalar `root`.
    ///
    /// Gradients add up across calls: calling `backward` twice without
    /// [`Graph::zero_grad`] leaves twice the gradient in every node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Array<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array::full(self.shape(root), F::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            match &mut self.nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Array<F>, grads: &mut [Option<Array<F>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, p) = (va.dim(0), va.dim(1), vb.dim(1));
                if let Some(ga) = self.slot(*a, grads) {
                    gemm(
                        m,
                        p,
                        k,
                        gd,
                        Strides::row_major(p),
                        vb.data(),
                        Strides::transposed(p),
                        F::one(),
                        ga.data_mut(),
                        Strides::row_major(k),
                    );
                }
                if let Some(gb) = self.slot(*b, grads) {
                    gemm(
                        k,
                        m,
                        p,
                        va.data(),
                        Strides::transposed(k),
                        gd,
                        Strides::row_major(p),
                        F::one(),
                        gb.data_mut(),
                        Strides::row_major(p),
                    );
                }
            }
            Op::Linear { w, x } => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, k) = (vw.dim(0), vw.dim(1));
                let (b, n) = (vx.dim(0), vx.dim(2));
                if let Some(gw) = self.slot(*w, grads) {
                    for bi in 0..b {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            Strides::row_major(n),
                            &vx.data()[bi * k * n..(bi + 1) * k * n],
                            Strides::transposed(n),
                            F::one(),
                            gw.data_mut(),
                            Strides::row_major(k),
                        );
                    }
                }
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        gemm(
                            k,
                            m,
                            n,
                            vw.data(),
                            Strides::transposed(k),
                            &gd[bi * m * n..(bi + 1) * m * n],
                            Strides::row_major(n),
                            F::one(),
                            &mut gx.data_mut()[bi * k * n..(bi + 1) * k * n],
                            Strides::row_major(n),
                        );
                    }
                }
            }
            Op::Unary(op, x) => {
                let vx = self.value(*x).data();
                let y = node.value.data();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, t) in gx.data_mut().iter_mut().enumerate() {
                        let local = match op {
                            Unary::Sigmoid => y[i] * (F::one() - y[i]),
                            Unary::Tanh => F::one() - y[i] * y[i],
                            Unary::Relu => {
                                if vx[i] > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Unary::Exp => y[i],
                            Unary::Log => F::one() / vx[i],
                            Unary::Neg => -F::one(),
                        };
                        *t += gd[i] * local;
                    }
                }
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let sa = broadcast_strides(va.shape(), out_shape);
                let sb = broadcast_strides(vb.shape(), out_shape);
                if let Some(ga) = self.slot(*a, grads) {
                    let (gad, vbd) = (ga.data_mut(), vb.data());
                    walk(out_shape, &sa, &sb, |o, ia, ib| {
                        gad[ia] += match op {
                            Binary::Add | Binary::Sub => gd[o],
                            Binary::Mul => gd[o] * vbd[ib],
                        };
                    });
                }
                if let Some(gb) = self.slot(*b, grads) {
                    let (gbd, vad) = (gb.data_mut(), va.data());
                    walk(out_shape, &sa, &sb, |o, ia, ib| {
                        gbd[ib] += match op {
                            Binary::Add => gd[o],
                            Binary::Sub => -gd[o],
                            Binary::Mul => gd[o] * vad[ia],
                        };
                    });
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (t, &v) in gx.data_mut().iter_mut().zip(gd) {
                        *t += v * *s;
                    }
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (t, &v) in gx.data_mut().iter_mut().zip(gd) {
                        *t += v;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(*x, grads) {
                    for (i, t) in gx.data_mut().iter_mut().enumerate() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            *t += gd[i];
                        }
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, ax, inner) = split_axis(&xs, *axis);
                let len = node.value.dim(*axis);
                if let Some(gx) = self.slot(*x, grads) {
                    for o in 0..outer {
                        let to = (o * ax + start) * inner;
                        let from = o * len * inner;
                        for (t, &v) in gx.data_mut()[to..to + len * inner]
                            .iter_mut()
                            .zip(&gd[from..from + len * inner])
                        {
                            *t += v;
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(v, grads) {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            let to = o * len * inner;
                            for (t, &s) in gv.data_mut()[to..to + len * inner]
                                .iter_mut()
                                .zip(&gd[from..from + len * inner])
                            {
                                *t += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(*x, grads) {
                    for t in gx.data_mut() {
                        *t += gd[0];
                    }
                }
            }
            Op::Mask { x, lengths } => {
                let (b, d, n) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        for di in 0..d {
                            let row = (bi * d + di) * n;
                            for i in row..row + lengths[bi] {
                                gx.data_mut()[i] += gd[i];
                            }
                        }
                    }
                }
            }
            Op::MaskedMean { x, lengths } => {
                let xs = self.shape(*x).to_vec();
                let (b, d, n) = (xs[0], xs[1], xs[2]);
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        let denom = F::from_usize(lengths[bi]).expect("length fits scalar");
                        for di in 0..d {
                            let share = gd[bi * d + di] / denom;
                            let row = (bi * d + di) * n;
                            for t in &mut gx.data_mut()[row..row + lengths[bi]] {
                                *t += share;
                            }
                        }
                    }
                }
            }
            Op::MaskedMax { x, argmax } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx.data_mut()[i] += gd[o];
                    }
                }
            }
            Op::CausalMean { x, lengths } => {
                let (b, d, n) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        let len = lengths[bi];
                        for di in 0..d {
                            let row = (bi * d + di) * n;
                            let mut acc = F::zero();
                            for j in (0..len.saturating_sub(1)).rev() {
                                acc += gd[row + j + 1]
                                    / F::from_usize(j + 1).expect("index fits scalar");
                                gx.data_mut()[row + j] += acc;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (b, k, n) = (node.value.dim(0), node.value.dim(1), node.value.dim(2));
                let y = node.value.data();
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        for ni in 0..n {
                            let at = |ki: usize| (bi * k + ki) * n + ni;
                            let total: F = (0..k).map(|ki| gd[at(ki)]).sum();
                            for ki in 0..k {
                                gx.data_mut()[at(ki)] += gd[at(ki)] - y[at(ki)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::LogSumExp(x) => {
                let vx = self.value(*x);
                let (b, k, n) = (vx.dim(0), vx.dim(1), vx.dim(2));
                let y = node.value.data();
                if let Some(gx) = self.slot(*x, grads) {
                    for bi in 0..b {
                        for ki in 0..k {
                            for ni in 0..n {
                                let i = (bi * k + ki) * n + ni;
                                let o = bi * n + ni;
                                gx.data_mut()[i] += gd[o] * (vx.data()[i] - y[o]).exp();
                            }
                        }
                    }
                }
            }
            Op::Gather { x, entries } => {
                if let Some(gx) = self.slot(*x, grads) {
                    for &(i, w) in entries {
                        gx.data_mut()[i] += gd[0] * w;
                    }
                }
            }
            Op::LstmCell(saved) => self.lstm_backward(node, saved, gd, grads),
        }
    }

    fn lstm_backward(
        &self,
        node: &Node<F>,
        saved: &LstmSaved<F>,
        gd: &[F],
        grads: &mut [Option<Array<F>>],
    ) {
        let (b, h4, n) = (saved.acts.dim(0), saved.acts.dim(1), saved.acts.dim(2));
        let h = h4 / 4;
        let c_vals = saved.c_prev.map(|c| self.value(c).data());
        let one = F::one();
        let mut d_pre = Array::zeros(&[b, h4, n]);
        let mut d_c = saved.c_prev.map(|_| Array::<F>::zeros(&[b, h, n]));
        let a = saved.acts.data();
        for bi in 0..b {
            let len = saved.lengths.as_ref().map_or(n, |l| l[bi]);
            for hi in 0..h {
                let row = |g: usize| ((bi * h4) + g * h + hi) * n;
                let c_row = (bi * h + hi) * n;
                let h_out = (bi * 2 * h + hi) * n;
                let c_out = (bi * 2 * h + h + hi) * n;
                for e in 0..len {
                    let (ig, fg, og, ug) =
                        (a[row(0) + e], a[row(1) + e], a[row(2) + e], a[row(3) + e]);
                    let tc = saved.tanh_c.data()[c_row + e];
                    let cp = c_vals.map_or(F::zero(), |c| c[c_row + e]);
                    let gh = gd[h_out + e];
                    let dc = gd[c_out + e] + gh * og * (one - tc * tc);
                    let dp = d_pre.data_mut();
                    dp[row(0) + e] = dc * ug * ig * (one - ig);
                    dp[row(1) + e] = dc * cp * fg * (one - fg);
                    dp[row(2) + e] = gh * tc * og * (one - og);
                    dp[row(3) + e] = dc * ig * (one - ug * ug);
                    if let Some(dcp) = d_c.as_mut() {
                        dcp.data_mut()[c_row + e] = dc * fg;
                    }
                }
            }
        }
        debug_assert_eq!(node.value.dim(1), 2 * h);
        if let Some(gp) = self.slot(saved.pre, grads) {
            gp.add_assign(&d_pre);
        }
        if let (Some(c), Some(dcp)) = (saved.c_prev, d_c) {
            if let Some(gc) = self.slot(c, grads) {
                gc.add_assign(&dcp);
            }
        }
    }

    /// Gradient accumulator of `v` for the current sweep, or `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Array<F>>]) -> Option<&'g mut Array<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Array::zeros(self.shape(v))))
    }
}

#[inline]
fn apply_binary<F: Scalar>(op: Binary, x: F, y: F) -> F {
    match op {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
    }
}

fn logsumexp_axis1<F: Scalar>(data: &[F], b: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); b * n];
    for bi in 0..b {
        for ni in 0..n {
            let at = |ki: usize| data[(bi * k + ki) * n + ni];
            let m = (0..k).map(at).fold(F::neg_infinity(), F::max);
            if !m.is_finite() {
                out[bi * n + ni] = m;
                continue;
            }
            let s: F = (0..k).map(|ki| (at(ki) - m).exp()).sum();
            out[bi * n + ni] = m + s.ln();
        }
    }
    out
}
