//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! The graph is a tape: nodes are appended in execution order and
//! [`Graph::backward`] walks them once in reverse. Every unroll (the T-step
//! network loop included) just appends more nodes, so variable-length
//! sequences need no special casing.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Forward rule used by the spike nonlinearity.
///
/// `Threshold` is the training behavior: a hard step with `H(0) = 1`.
/// `Ramp` replaces the step with its piecewise-linear antiderivative
/// `clamp((v + a) / 2a, 0, 1)` whose true derivative equals the rectangular
/// surrogate everywhere, so finite differences can validate the backward
/// pass end to end. Training never uses `Ramp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeForward {
    Threshold,
    Ramp,
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, F),
    MulScalar(Var, F),
    /// scalar - tensor
    ScalarSub(F, Var),
    /// scalar / tensor
    ScalarDiv(F, Var),
    PowScalar(Var, F),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// x[n,m] + b[m], b broadcast over rows
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    FrobNorm(Var),
    MaxAxis(Var),
    Spike {
        v: Var,
        width: F,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    /// scalar pick from a rank-1 tensor
    Select(Var, usize),
}

#[derive(Debug, Clone)]
enum Aux<F: Scalar> {
    None,
    /// im2col buffers, one per batch sample
    Cols(Vec<Vec<F>>),
    /// row-wise softmax of the logits
    Softmax(Vec<F>),
    /// winning flat input index per output position
    ArgIdx(Vec<usize>),
}

struct Node<F: Scalar> {
    tensor: Tensor<F>,
    op: Op<F>,
    aux: Aux<F>,
}

/// Tape of executed operations; rebuilt from scratch every training step.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
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

    /// Record `t` as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        if t.requires_grad && t.grad.is_none() {
            t.grad = Some(vec![F::ZERO; t.data.len()]);
        }
        self.push(t, Op::Leaf, Aux::None)
    }

    /// Record a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, Aux::None)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, mut t: Tensor<F>) -> Var {
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn scalar_const(&mut self, x: F) -> Var {
        self.constant(Tensor::scalar(x))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor<F>, op: Op<F>, aux: Aux<F>) -> Var {
        self.nodes.push(Node { tensor, op, aux });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn out_of(&mut self, data: Vec<F>, shape: Vec<usize>, requires: bool, op: Op<F>, aux: Aux<F>) -> Var {
        let mut t = Tensor::new(shape, data);
        t.requires_grad = requires;
        if requires {
            t.grad = Some(vec![F::ZERO; t.data.len()]);
        }
        self.push(t, op, aux)
    }

    // ── elementwise ─────────────────────────────────────────────────

    /// Shapes must match, or one operand must be a single-element tensor
    /// which then broadcasts against the other.
    fn binary_shapes(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape == tb.shape {
            Ok(ta.shape.clone())
        } else if ta.numel() == 1 {
            Ok(tb.shape.clone())
        } else if tb.numel() == 1 {
            Ok(ta.shape.clone())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            })
        }
    }

    fn zip<G: Fn(F, F) -> F>(&self, a: Var, b: Var, f: G) -> Vec<F> {
        let (da, db) = (&self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data);
        match (da.len(), db.len()) {
            (1, n) if n != 1 => db.iter().map(|&y| f(da[0], y)).collect(),
            (_, 1) if da.len() != 1 => da.iter().map(|&x| f(x, db[0])).collect(),
            _ => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "add")?;
        let data = self.zip(a, b, |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.out_of(data, shape, req, Op::Add(a, b), Aux::None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "sub")?;
        let data = self.zip(a, b, |x, y| x - y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.out_of(data, shape, req, Op::Sub(a, b), Aux::None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "mul")?;
        let data = self.zip(a, b, |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.out_of(data, shape, req, Op::Mul(a, b), Aux::None))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes(a, b, "div")?;
        let data = self.zip(a, b, |x, y| x / y);
        let req = self.requires(a) || self.requires(b);
        Ok(self.out_of(data, shape, req, Op::Div(a, b), Aux::None))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| x + s).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::AddScalar(a, s), Aux::None)
    }

    pub fn sub_scalar(&mut self, a: Var, s: F) -> Var {
        self.add_scalar(a, F::ZERO - s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: F) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| x * s).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::MulScalar(a, s), Aux::None)
    }

    pub fn div_scalar(&mut self, a: Var, s: F) -> Var {
        self.mul_scalar(a, F::ONE / s)
    }

    /// `s - a`
    pub fn scalar_sub(&mut self, s: F, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| s - x).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::ScalarSub(s, a), Aux::None)
    }

    /// `s / a`
    pub fn scalar_div(&mut self, s: F, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| s / x).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::ScalarDiv(s, a), Aux::None)
    }

    pub fn powf(&mut self, a: Var, e: F) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| x.powf(e)).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::PowScalar(a, e), Aux::None)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| F::ZERO - x).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::Neg(a), Aux::None)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| x.exp()).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::Exp(a), Aux::None)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) =
            (t.data.iter().map(|&x| x.ln()).collect(), t.shape.clone(), t.requires_grad);
        self.out_of(data, shape, req, Op::Log(a), Aux::None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) = (
            t.data.iter().map(|&x| sigmoid(x)).collect(),
            t.shape.clone(),
            t.requires_grad,
        );
        self.out_of(data, shape, req, Op::Sigmoid(a), Aux::None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let (data, shape, req): (Vec<F>, _, _) = (
            t.data.iter().map(|&x| if x > F::ZERO { x } else { F::ZERO }).collect(),
            t.shape.clone(),
            t.requires_grad,
        );
        self.out_of(data, shape, req, Op::Relu(a), Aux::None)
    }

    // ── matrix ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = mm(&ta.data, &tb.data, n, k, m);
        let req = ta.requires_grad || tb.requires_grad;
        Ok(self.out_of(data, vec![n, m], req, Op::MatMul(a, b), Aux::None))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].tensor;
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: t.shape.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (t.shape[0], t.shape[1]);
        let data = transpose_buf(&t.data, r, c);
        let req = t.requires_grad;
        Ok(self.out_of(data, vec![c, r], req, Op::Transpose(a), Aux::None))
    }

    /// Row-broadcast bias: `x[n,m] + b[m]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].tensor, &self.nodes[b.0].tensor);
        if tx.rank() != 2 || tb.rank() != 1 || tx.shape[1] != tb.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let m = tb.shape[0];
        let mut data = tx.data.clone();
        for row in data.chunks_mut(m) {
            for (v, &bv) in row.iter_mut().zip(&tb.data) {
                *v += bv;
            }
        }
        let shape = tx.shape.clone();
        let req = tx.requires_grad || tb.requires_grad;
        Ok(self.out_of(data, shape, req, Op::AddBias(x, b), Aux::None))
    }

    /// 2-D cross-correlation: `x[N,C,H,W] * w[O,C,kh,kw]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].tensor, &self.nodes[w.0].tensor);
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape[1] != tw.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: tx.shape.clone(),
                rhs: tw.shape.clone(),
            });
        }
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (n, c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let (o, _, kh, kw) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::KernelTooLarge);
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let pos = oh * ow;

        let mut out = vec![F::ZERO; n * o * pos];
        let mut cols_all = Vec::with_capacity(n);
        for i in 0..n {
            let sample = &tx.data[i * c * h * wd..(i + 1) * c * h * wd];
            let cols = im2col(sample, c, h, wd, kh, kw, stride, pad);
            // w viewed as [o, ckk] times cols [ckk, pos]
            let y = mm(&tw.data, &cols, o, ckk, pos);
            out[i * o * pos..(i + 1) * o * pos].copy_from_slice(&y);
            cols_all.push(cols);
        }
        let req = tx.requires_grad || tw.requires_grad;
        Ok(self.out_of(
            out,
            vec![n, o, oh, ow],
            req,
            Op::Conv2d { x, w, stride, pad },
            Aux::Cols(cols_all),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].tensor;
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape,
            });
        }
        let (data, req) = (t.data.clone(), t.requires_grad);
        Ok(self.out_of(data, shape, req, Op::Reshape(a), Aux::None))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let mut acc = F::ZERO;
        for &v in &t.data {
            acc += v;
        }
        let req = t.requires_grad;
        self.out_of(vec![acc], vec![], req, Op::SumAll(a), Aux::None)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        assert!(!t.data.is_empty(), "mean over empty tensor");
        let inv = F::ONE / F::from_f64(t.data.len() as f64);
        let mut acc = F::ZERO;
        for &v in &t.data {
            acc += v;
        }
        let req = t.requires_grad;
        self.out_of(vec![acc * inv], vec![], req, Op::MeanAll(a), Aux::None)
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, len, inner)
    }

    fn reduce_axis_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].tensor;
        if axis >= t.rank() {
            return Err(Error::BadAxis { axis, rank: t.rank() });
        }
        if t.shape[axis] == 0 {
            return Err(Error::EmptyInput("reduction over empty axis"));
        }
        let (outer, len, inner) = Self::axis_split(&t.shape, axis);
        let mut out = vec![F::ZERO; outer * inner];
        for i in 0..outer {
            for j in 0..len {
                let base = (i * len + j) * inner;
                for k in 0..inner {
                    out[i * inner + k] += t.data[base + k];
                }
            }
        }
        let shape = Self::reduce_axis_shape(&t.shape, axis);
        let req = t.requires_grad;
        Ok(self.out_of(out, shape, req, Op::SumAxis(a, axis), Aux::None))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = {
            let t = &self.nodes[a.0].tensor;
            if axis >= t.rank() {
                return Err(Error::BadAxis { axis, rank: t.rank() });
            }
            t.shape[axis]
        };
        if len == 0 {
            return Err(Error::EmptyInput("reduction over empty axis"));
        }
        let s = self.sum_axis(a, axis)?;
        // rewrite the recorded op so backward sees the mean scaling
        let inv = F::ONE / F::from_f64(len as f64);
        let node = &mut self.nodes[s.0];
        node.tensor.data.iter_mut().for_each(|v| *v = *v * inv);
        node.op = Op::MeanAxis(a, axis);
        Ok(s)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].tensor;
        let mut acc = F::ZERO;
        for &v in &t.data {
            acc += v * v;
        }
        let req = t.requires_grad;
        self.out_of(vec![acc.sqrt()], vec![], req, Op::FrobNorm(a), Aux::None)
    }

    /// Max along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.nodes[a.0].tensor;
        if axis >= t.rank() {
            return Err(Error::BadAxis { axis, rank: t.rank() });
        }
        if t.shape[axis] == 0 {
            return Err(Error::EmptyInput("max over empty axis"));
        }
        let (outer, len, inner) = Self::axis_split(&t.shape, axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for i in 0..outer {
            for k in 0..inner {
                let mut best_j = 0;
                let mut best = t.data[i * len * inner + k];
                for j in 1..len {
                    let v = t.data[(i * len + j) * inner + k];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out.push(best);
                arg.push((i * len + best_j) * inner + k);
            }
        }
        let shape = Self::reduce_axis_shape(&t.shape, axis);
        let req = t.requires_grad;
        Ok(self.out_of(out, shape, req, Op::MaxAxis(a), Aux::ArgIdx(arg)))
    }

    // ── network-specific ops ────────────────────────────────────────

    /// Spike nonlinearity on `v = u - v_th`.
    ///
    /// Backward always applies the rectangular surrogate: slope `1/(2a)`
    /// where `|v| < a`, zero outside.
    pub fn spike(&mut self, v: Var, width: F, forward: SpikeForward) -> Var {
        assert!(width > F::ZERO, "surrogate width must be positive");
        let t = &self.nodes[v.0].tensor;
        let data: Vec<F> = match forward {
            SpikeForward::Threshold => t
                .data
                .iter()
                .map(|&x| if x >= F::ZERO { F::ONE } else { F::ZERO })
                .collect(),
            SpikeForward::Ramp => {
                let two_a = width + width;
                t.data
                    .iter()
                    .map(|&x| {
                        let y = (x + width) / two_a;
                        if y < F::ZERO {
                            F::ZERO
                        } else if y > F::ONE {
                            F::ONE
                        } else {
                            y
                        }
                    })
                    .collect()
            }
        };
        let shape = t.shape.clone();
        let req = t.requires_grad;
        self.out_of(data, shape, req, Op::Spike { v, width }, Aux::None)
    }

    /// Softmax + NLL fused, mean over rows, natural log.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].tensor;
        if t.rank() != 2 || t.shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let (n, c) = (t.shape[0], t.shape[1]);
        for &y in targets {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, n_classes: c });
            }
        }
        let mut soft = vec![F::ZERO; n * c];
        let mut loss = F::ZERO;
        for i in 0..n {
            let row = &t.data[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = F::ZERO;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                soft[i * c + j] = e;
                denom += e;
            }
            let inv = F::ONE / denom;
            for j in 0..c {
                soft[i * c + j] = soft[i * c + j] * inv;
            }
            loss += denom.ln() + mx - row[targets[i]];
        }
        loss = loss / F::from_f64(n as f64);
        let req = t.requires_grad;
        Ok(self.out_of(
            vec![loss],
            vec![],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Aux::Softmax(soft),
        ))
    }

    /// Scalar pick from a rank-1 tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = &self.nodes[a.0].tensor;
        if t.rank() != 1 || index >= t.shape[0] {
            return Err(Error::BadAxis {
                axis: index,
                rank: t.shape.first().copied().unwrap_or(0),
            });
        }
        let x = t.data[index];
        let req = t.requires_grad;
        Ok(self.out_of(vec![x], vec![], req, Op::Select(a, index), Aux::None))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss.
    ///
    /// Adjoints are recomputed per call and then added into each
    /// `requires_grad` node's persistent `grad` buffer, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[loss.0].tensor.shape.clone(),
            });
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::ONE]);

        for idx in (0..=loss.0).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            if let Some(store) = &mut self.nodes[idx].tensor.grad {
                for (s, v) in store.iter_mut().zip(&g) {
                    *s += *v;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<F>>], v: Var, contrib: &[F]) {
        if !self.requires(v) {
            return;
        }
        let slot = &mut adj[v.0];
        match slot {
            Some(buf) => {
                for (b, &c) in buf.iter_mut().zip(contrib) {
                    *b += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Fold an output adjoint back onto an operand that may have been a
    /// broadcast single-element tensor.
    fn accumulate_maybe_scalar(&self, adj: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if self.nodes[v.0].tensor.numel() == 1 && contrib.len() != 1 {
            let mut acc = F::ZERO;
            for c in contrib {
                acc += c;
            }
            self.accumulate(adj, v, &[acc]);
        } else {
            self.accumulate(adj, v, &contrib);
        }
    }

    fn broadcast_get(data: &[F], i: usize) -> F {
        if data.len() == 1 {
            data[0]
        } else {
            data[i]
        }
    }

    fn propagate(&self, idx: usize, g: &[F], adj: &mut [Option<Vec<F>>]) {
        // Ops are cloned cheaply: they hold only Vars and small scalars,
        // except CrossEntropy whose target list stays modest.
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_maybe_scalar(adj, a, g.to_vec());
                self.accumulate_maybe_scalar(adj, b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate_maybe_scalar(adj, a, g.to_vec());
                let neg: Vec<F> = g.iter().map(|&v| F::ZERO - v).collect();
                self.accumulate_maybe_scalar(adj, b, neg);
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data);
                let ga: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * Self::broadcast_get(db, i))
                    .collect();
                let gb: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv * Self::broadcast_get(da, i))
                    .collect();
                self.accumulate_maybe_scalar(adj, a, ga);
                self.accumulate_maybe_scalar(adj, b, gb);
            }
            Op::Div(a, b) => {
                let (da, db) = (&self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data);
                let ga: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| gv / Self::broadcast_get(db, i))
                    .collect();
                let gb: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        let bv = Self::broadcast_get(db, i);
                        F::ZERO - gv * Self::broadcast_get(da, i) / (bv * bv)
                    })
                    .collect();
                self.accumulate_maybe_scalar(adj, a, ga);
                self.accumulate_maybe_scalar(adj, b, gb);
            }
            Op::AddScalar(a, _) => self.accumulate(adj, a, g),
            Op::MulScalar(a, s) => {
                let ga: Vec<F> = g.iter().map(|&v| v * s).collect();
                self.accumulate(adj, a, &ga);
            }
            Op::ScalarSub(_, a) => {
                let ga: Vec<F> = g.iter().map(|&v| F::ZERO - v).collect();
                self.accumulate(adj, a, &ga);
            }
            Op::ScalarDiv(s, a) => {
                let da = &self.nodes[a.0].tensor.data;
                let ga: Vec<F> = g
                    .iter()
                    .zip(da)
                    .map(|(&gv, &x)| F::ZERO - gv * s / (x * x))
                    .collect();
                self.accumulate(adj, a, &ga);
            }
            Op::PowScalar(a, e) => {
                let da = &self.nodes[a.0].tensor.data;
                let ga: Vec<F> = g
                    .iter()
                    .zip(da)
                    .map(|(&gv, &x)| gv * e * x.powf(e - F::ONE))
                    .collect();
                self.accumulate(adj, a, &ga);
            }
            Op::Neg(a) => {
                let ga: Vec<F> = g.iter().map(|&v| F::ZERO - v).collect();
                self.accumulate(adj, a, &ga);
            }
            Op::Exp(a) => {
                let y = &self.nodes[idx].tensor.data;
                let ga: Vec<F> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                self.accumulate(adj, a, &ga);
            }
            Op::Log(a) => {
                let da = &self.nodes[a.0].tensor.data;
                let ga: Vec<F> = g.iter().zip(da).map(|(&gv, &x)| gv / x).collect();
                self.accumulate(adj, a, &ga);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].tensor.data;
                let ga: Vec<F> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (F::ONE - yv))
                    .collect();
                self.accumulate(adj, a, &ga);
            }
            Op::Relu(a) => {
                let da = &self.nodes[a.0].tensor.data;
                let ga: Vec<F> = g
                    .iter()
                    .zip(da)
                    .map(|(&gv, &x)| if x > F::ZERO { gv } else { F::ZERO })
                    .collect();
                self.accumulate(adj, a, &ga);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
                let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.requires(a) {
                    // dA = G · Bᵀ
                    let ga = mm_bt(g, &tb.data, n, m, k);
                    self.accumulate(adj, a, &ga);
                }
                if self.requires(b) {
                    // dB = Aᵀ · G
                    let gb = mm_at(&ta.data, g, n, k, m);
                    self.accumulate(adj, b, &gb);
                }
            }
            Op::Transpose(a) => {
                let shape = &self.nodes[idx].tensor.shape;
                let ga = transpose_buf(g, shape[0], shape[1]);
                self.accumulate(adj, a, &ga);
            }
            Op::AddBias(x, b) => {
                self.accumulate(adj, x, g);
                if self.requires(b) {
                    let m = self.nodes[b.0].tensor.shape[0];
                    let mut gb = vec![F::ZERO; m];
                    for row in g.chunks(m) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(adj, b, &gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let cols_all = match &self.nodes[idx].aux {
                    Aux::Cols(c) => c,
                    _ => unreachable!("conv node without cols"),
                };
                let (tx, tw) = (&self.nodes[x.0].tensor, &self.nodes[w.0].tensor);
                let (n, c, h, wd) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
                let (o, _, kh, kw) = (tw.shape[0], tw.shape[1], tw.shape[2], tw.shape[3]);
                let ckk = c * kh * kw;
                let pos = self.nodes[idx].tensor.shape[2] * self.nodes[idx].tensor.shape[3];
                let need_x = self.requires(x);
                let need_w = self.requires(w);
                let mut gw = vec![F::ZERO; o * ckk];
                let mut gx = vec![F::ZERO; n * c * h * wd];
                for i in 0..n {
                    let gi = &g[i * o * pos..(i + 1) * o * pos];
                    if need_w {
                        // dW += Gᵢ · colsᵢᵀ
                        let part = mm_bt(gi, &cols_all[i], o, pos, ckk);
                        for (a, b) in gw.iter_mut().zip(&part) {
                            *a += *b;
                        }
                    }
                    if need_x {
                        // dcols = Wᵀ · Gᵢ, scattered back through im2col
                        let dcols = mm_at(&tw.data, gi, o, ckk, pos);
                        col2im(
                            &dcols,
                            &mut gx[i * c * h * wd..(i + 1) * c * h * wd],
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            stride,
                            pad,
                        );
                    }
                }
                if need_w {
                    self.accumulate(adj, w, &gw);
                }
                if need_x {
                    self.accumulate(adj, x, &gx);
                }
            }
            Op::Reshape(a) => self.accumulate(adj, a, g),
            Op::SumAll(a) => {
                let n = self.nodes[a.0].tensor.numel();
                let ga = vec![g[0]; n];
                self.accumulate(adj, a, &ga);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].tensor.numel();
                let v = g[0] / F::from_f64(n as f64);
                let ga = vec![v; n];
                self.accumulate(adj, a, &ga);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let t = &self.nodes[a.0].tensor;
                let (outer, len, inner) = Self::axis_split(&t.shape, axis);
                let scale = match self.nodes[idx].op {
                    Op::MeanAxis(..) => F::ONE / F::from_f64(len as f64),
                    _ => F::ONE,
                };
                let mut ga = vec![F::ZERO; t.numel()];
                for i in 0..outer {
                    for j in 0..len {
                        let base = (i * len + j) * inner;
                        for k in 0..inner {
                            ga[base + k] = g[i * inner + k] * scale;
                        }
                    }
                }
                self.accumulate(adj, a, &ga);
            }
            Op::FrobNorm(a) => {
                let y = self.nodes[idx].tensor.data[0];
                let da = &self.nodes[a.0].tensor.data;
                let ga: Vec<F> = if y == F::ZERO {
                    vec![F::ZERO; da.len()]
                } else {
                    da.iter().map(|&x| g[0] * x / y).collect()
                };
                self.accumulate(adj, a, &ga);
            }
            Op::MaxAxis(a) => {
                let arg = match &self.nodes[idx].aux {
                    Aux::ArgIdx(ix) => ix,
                    _ => unreachable!("max node without argmax indices"),
                };
                let mut ga = vec![F::ZERO; self.nodes[a.0].tensor.numel()];
                for (out_i, &src) in arg.iter().enumerate() {
                    ga[src] += g[out_i];
                }
                self.accumulate(adj, a, &ga);
            }
            Op::Spike { v, width } => {
                let dv = &self.nodes[v.0].tensor.data;
                let slope = F::ONE / (width + width);
                let ga: Vec<F> = g
                    .iter()
                    .zip(dv)
                    .map(|(&gv, &x)| if x.abs() < width { gv * slope } else { F::ZERO })
                    .collect();
                self.accumulate(adj, v, &ga);
            }
            Op::CrossEntropy { logits, targets } => {
                let soft = match &self.nodes[idx].aux {
                    Aux::Softmax(s) => s,
                    _ => unreachable!("ce node without softmax"),
                };
                let n = targets.len();
                let c = soft.len() / n;
                let scale = g[0] / F::from_f64(n as f64);
                let mut ga = soft.clone();
                for (i, &y) in targets.iter().enumerate() {
                    ga[i * c + y] = ga[i * c + y] - F::ONE;
                }
                ga.iter_mut().for_each(|v| *v = *v * scale);
                self.accumulate(adj, logits, &ga);
            }
            Op::Select(a, index) => {
                let mut ga = vec![F::ZERO; self.nodes[a.0].tensor.numel()];
                ga[index] = g[0];
                self.accumulate(adj, a, &ga);
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (F::ZERO - x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

/// `a[m,k] · b[k,n]`
pub(crate) fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == F::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `aᵀ[m,k] · b[k,n]` where `a` is stored as `[k,m]`
fn mm_at<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == F::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `a[m,k] · bᵀ[k,n]` where `b` is stored as `[n,k]`
fn mm_bt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn transpose_buf<F: Scalar>(data: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<F> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let pos = oh * ow;
    let mut cols = vec![F::ZERO; c * kh * kw * pos];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * pos;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        cols[row + oi * ow + oj] = x[(ci * h + ii) * w + jj - pad];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &[F],
    dx: &mut [F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let pos = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * pos;
                for oi in 0..oh {
                    let ii = oi * stride + ki;
                    if ii < pad || ii >= h + pad {
                        continue;
                    }
                    let ii = ii - pad;
                    for oj in 0..ow {
                        let jj = oj * stride + kj;
                        if jj < pad || jj >= w + pad {
                            continue;
                        }
                        dx[(ci * h + ii) * w + jj - pad] += dcols[row + oi * ow + oj];
                    }
                }
            }
        }
    }
}
