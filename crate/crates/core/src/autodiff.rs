//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in creation order, so the tape is a topological order
//! by construction and one reverse sweep visits every node exactly once.
//! Parameter leaves borrow from a [`ParamStore`] instead of copying it.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::nn::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::tensor::{dot, matmul_raw, transpose_raw, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.values.iter().map(Tensor::zeros_like).collect()
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Returns one gradient per input, each shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Softmax,
    Exp,
    Relu,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    MulColBroadcast(Var, Var),
    Affine(Var, f64),
    Unary(Var, Activation),
    Normalize(Var),
    Sum(Var),
    GatherCols(Var, Vec<usize>),
    Concat(Var, Var),
    Column(Var, usize),
    StackComplement(Var),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Dropout(Var, Vec<f64>),
    CrossEntropy(Var, Vec<f64>, usize),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    param: Option<ParamId>,
    /// Depends on a parameter or a gradient-carrying input.
    tracked: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Hadamard(a, b) | Op::MulColBroadcast(a, b) | Op::Concat(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(a, _)
            | Op::Unary(a, _)
            | Op::Normalize(a)
            | Op::Sum(a)
            | Op::GatherCols(a, _)
            | Op::Column(a, _)
            | Op::StackComplement(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Dropout(a, _)
            | Op::CrossEntropy(a, _, _) => vec![*a],
            Op::Conv2d { input, kernels, bias, .. } => vec![*input, *kernels, *bias],
            Op::Custom(xs, _) => xs.clone(),
        }
    }
}

#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value on tape");
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A non-parameter leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        let v = self.owned(value, Op::Leaf);
        self.nodes[v.0].tracked = true;
        v
    }

    /// A leaf that never receives a gradient; ops fed only by constants skip their backward.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.owned(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        self.nodes[v.0].tracked = true;
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a[m×k] · b`, where `b` is `[k]` or `[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() > 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let n = if sb.len() == 2 { sb[1] } else { 1 };
        let shape = if sb.len() == 2 { vec![m, n] } else { vec![m] };
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.owned(Tensor::from_parts(shape, data), Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.owned(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.owned(t, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("hadamard", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.owned(t, Op::Hadamard(a, b)))
    }

    /// Scales row `r` of `mat[m×n]` by `vec[r]`.
    pub fn mul_col_broadcast(&mut self, mat: Var, vec: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(mat), self.shape(vec));
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Error::shape("mul_col_broadcast", sm, sv));
        }
        let n = sm[1];
        let v = self.value(vec).data();
        let data = self
            .value(mat)
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * v[idx / n])
            .collect();
        let t = Tensor::from_parts(sm.to_vec(), data);
        Ok(self.owned(t, Op::MulColBroadcast(mat, vec)))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(a).map(|x| scale * x + shift);
        self.owned(t, Op::Affine(a, scale))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let x = self.value(a);
        let t = match kind {
            Activation::Tanh => x.map(f64::tanh),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Exp => x.map(f64::exp),
            Activation::Relu => x.map(|v| v.max(0.0)),
            Activation::Softmax => {
                let mut t = x.clone();
                let row = *x.shape().last().unwrap();
                for chunk in t.data_mut().chunks_mut(row) {
                    softmax_in_place(chunk);
                }
                t
            }
        };
        self.owned(t, Op::Unary(a, kind))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softmax)
    }

    /// `a / sum(a)` for a vector with positive sum.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.sum();
        if !(s > 0.0) {
            return Err(Error::Numerical(format!("normalize: sum {s}")));
        }
        let t = x.map(|v| v / s);
        Ok(self.owned(t, Op::Normalize(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.owned(Tensor::scalar(s), Op::Sum(a))
    }

    /// Selects columns of a rank-2 tensor, repeats allowed.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || idx.iter().any(|&c| c >= sa[1]) || idx.is_empty() {
            return Err(Error::shape("gather_cols", sa, &[idx.len()]));
        }
        let (m, n) = (sa[0], sa[1]);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(m * idx.len());
        for r in 0..m {
            data.extend(idx.iter().map(|&c| x[r * n + c]));
        }
        let t = Tensor::from_parts(vec![m, idx.len()], data);
        Ok(self.owned(t, Op::GatherCols(a, idx.to_vec())))
    }

    /// Stacks along the leading axis: vectors concatenate, matrices stack rows.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat", sa, sb));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.owned(Tensor::from_parts(shape, data), Op::Concat(a, b)))
    }

    /// Column `j` of a rank-2 tensor as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 || j >= sa[1] {
            return Err(Error::shape("column", sa, &[j]));
        }
        let (m, n) = (sa[0], sa[1]);
        let x = self.value(a).data();
        let data = (0..m).map(|r| x[r * n + j]).collect();
        Ok(self.owned(Tensor::from_parts(vec![m], data), Op::Column(a, j)))
    }

    /// `p[M]` to the `M×2` table with rows `(1 - p_i, p_i)`.
    pub fn stack_complement(&mut self, p: Var) -> Result<Var> {
        let sp = self.shape(p);
        if sp.len() != 1 {
            return Err(Error::shape("stack_complement", sp, &[]));
        }
        let data = self
            .value(p)
            .data()
            .iter()
            .flat_map(|&v| [1.0 - v, v])
            .collect();
        let t = Tensor::from_parts(vec![sp[0], 2], data);
        Ok(self.owned(t, Op::StackComplement(p)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.owned(t, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape("transpose", sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let t = Tensor::from_parts(vec![c, r], transpose_raw(self.value(a).data(), r, c));
        Ok(self.owned(t, Op::Transpose(a)))
    }

    /// Cross-correlation of `input[C×H×W]` with `kernels[F×C×k×k]` plus `bias[F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::infer(self.shape(input), self.shape(kernels), stride, pad)?;
        if self.shape(bias) != [geom.filters] {
            return Err(Error::shape("conv2d bias", self.shape(bias), &[geom.filters]));
        }
        let out = conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernels).data(),
            self.value(bias).data(),
        );
        let t = Tensor::from_parts(vec![geom.filters, geom.out_h, geom.out_w], out);
        Ok(self.owned(
            t,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            },
        ))
    }

    /// Multiplies by a precomputed mask (entries `0` or `1/(1-p)`).
    pub fn apply_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("dropout", self.shape(a), &[mask.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let t = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.owned(t, Op::Dropout(a, mask)))
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(Error::shape("cross_entropy", x.shape(), &[]));
        }
        if target >= x.len() {
            return Err(Error::Config(format!(
                "target {target} out of range for {} classes",
                x.len()
            )));
        }
        let mut p = x.data().to_vec();
        softmax_in_place(&mut p);
        let loss = -log_softmax_at(x.data(), target);
        Ok(self.owned(Tensor::scalar(loss), Op::CrossEntropy(logits, p, target)))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.owned(output, Op::Custom(inputs, op))
    }

    /// Seeds `d root = 1` and sweeps the tape once in reverse.
    pub fn backward(&self, root: Var) -> Grads {
        let seed = Tensor::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Reverse sweep from an explicit output cotangent.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Grads {
        assert_eq!(seed.shape(), self.shape(root), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &*node.value;
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                if self.nodes[a.0].tracked {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    accumulate(grads, *a, Tensor::from_parts(ta.shape().to_vec(), ga));
                }
                if self.nodes[b.0].tracked {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    accumulate(grads, *b, Tensor::from_parts(tb.shape().to_vec(), gb));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                accumulate(grads, *a, elementwise(g, tb, |g, y| g * y));
                accumulate(grads, *b, elementwise(g, ta, |g, x| g * x));
            }
            Op::MulColBroadcast(mat, vec) => {
                let (tm, tv) = (val(*mat), val(*vec));
                let n = tm.shape()[1];
                let gm = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &gv)| gv * tv.data()[idx / n])
                    .collect();
                let mut gv = vec![0.0; tv.len()];
                for (idx, (&gg, &x)) in g.data().iter().zip(tm.data()).enumerate() {
                    gv[idx / n] += gg * x;
                }
                accumulate(grads, *mat, Tensor::from_parts(tm.shape().to_vec(), gm));
                accumulate(grads, *vec, Tensor::from_parts(tv.shape().to_vec(), gv));
            }
            Op::Affine(a, scale) => accumulate(grads, *a, g.map(|v| v * scale)),
            Op::Unary(a, kind) => {
                let gi = match kind {
                    Activation::Tanh => elementwise(g, out, |g, y| g * (1.0 - y * y)),
                    Activation::Sigmoid => elementwise(g, out, |g, y| g * y * (1.0 - y)),
                    Activation::Exp => elementwise(g, out, |g, y| g * y),
                    Activation::Relu => {
                        elementwise(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                    }
                    Activation::Softmax => {
                        let row = *out.shape().last().unwrap();
                        let mut gi = g.clone();
                        for (gc, yc) in gi.data_mut().chunks_mut(row).zip(out.data().chunks(row)) {
                            let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                            for (gv, &y) in gc.iter_mut().zip(yc) {
                                *gv = y * (*gv - dot);
                            }
                        }
                        gi
                    }
                };
                accumulate(grads, *a, gi);
            }
            Op::Normalize(a) => {
                let s = val(*a).sum();
                let dot: f64 = g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                accumulate(grads, *a, g.map(|gv| (gv - dot) / s));
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gs));
            }
            Op::GatherCols(a, idx) => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    for (k, &c) in idx.iter().enumerate() {
                        ga[r * n + c] += g.data()[r * idx.len() + k];
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(vec![m, n], ga));
            }
            Op::Concat(a, b) => {
                let na = val(*a).len();
                let (ga, gb) = g.data().split_at(na);
                accumulate(grads, *a, Tensor::from_parts(val(*a).shape().to_vec(), ga.to_vec()));
                accumulate(grads, *b, Tensor::from_parts(val(*b).shape().to_vec(), gb.to_vec()));
            }
            Op::Column(a, j) => {
                let ta = val(*a);
                let (m, n) = (ta.shape()[0], ta.shape()[1]);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + j] = g.data()[r];
                }
                accumulate(grads, *a, Tensor::from_parts(vec![m, n], ga));
            }
            Op::StackComplement(p) => {
                let gp = g.data().chunks(2).map(|c| c[1] - c[0]).collect();
                accumulate(grads, *p, Tensor::from_parts(val(*p).shape().to_vec(), gp));
            }
            Op::Reshape(a) => {
                let t = Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec());
                accumulate(grads, *a, t);
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let t = Tensor::from_parts(vec![c, r], transpose_raw(g.data(), r, c));
                accumulate(grads, *a, t);
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
            } => {
                let need_input = self.nodes[input.0].tracked;
                let (gi, gk, gb) =
                    conv2d_backward(geom, val(*input).data(), val(*kernels).data(), g.data(), need_input);
                if let Some(gi) = gi {
                    accumulate(grads, *input, Tensor::from_parts(val(*input).shape().to_vec(), gi));
                }
                accumulate(grads, *kernels, Tensor::from_parts(val(*kernels).shape().to_vec(), gk));
                accumulate(grads, *bias, Tensor::from_parts(vec![geom.filters], gb));
            }
            Op::Dropout(a, mask) => {
                let gi = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), gi));
            }
            Op::CrossEntropy(logits, p, target) => {
                let gs = g.data()[0];
                let gl = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| gs * (pk - if k == *target { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *logits, Tensor::from_parts(vec![p.len()], gl));
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, out, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} gradient count", op.name());
                for (v, gi) in inputs.iter().zip(gs) {
                    accumulate(grads, *v, gi);
                }
            }
        }
    }
}

/// `a[m×n] · b[k×n]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if n == 1 {
        for (row, &av) in out.chunks_exact_mut(k).zip(a) {
            for (d, &bv) in row.iter_mut().zip(b) {
                *d = av * bv;
            }
        }
        return out;
    }
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(ar, &b[p * n..(p + 1) * n]);
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]`.
fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    if n == 1 {
        for (row, &gv) in a.chunks_exact(k).zip(g) {
            for (d, &av) in out.iter_mut().zip(row) {
                *d += av * gv;
            }
        }
        return out;
    }
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(gr) {
                *d += av * gv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Result of one reverse sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; `None` if `v` does not reach the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter leaf's gradient into `acc`, indexed by [`ParamId`].
    pub fn accumulate_params(&self, tape: &Tape<'_>, acc: &mut [Tensor]) {
        for (node, g) in tape.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                acc[id.0].add_assign(g);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_softmax_at(xs: &[f64], k: usize) -> f64 {
    xs[k] - log_sum_exp(xs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_direct() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let w2 = store.insert("w2", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let x = tape.input(Tensor::vector(vec![3.0, -1.0]));
        let y = tape.matmul(w, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
        let w2 = tape.param(&store, w2);
        let ones = tape.input(Tensor::vector(vec![1.0, 1.0]));
        let y2 = tape.matmul(w2, ones).unwrap();
        assert_eq!(tape.value(y2).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let w = tape.input(Tensor::zeros(&[2, 3]));
        let x = tape.input(Tensor::zeros(&[2]));
        let err = tape.matmul(w, x).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn activations_basic_values() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::vector(vec![0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let zeros = tape.input(Tensor::zeros(&[4]));
        let sm = tape.softmax(zeros);
        assert_eq!(tape.value(sm).data(), &[0.25; 4]);
    }

    #[test]
    fn hadamard_values_and_symmetry() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.input(Tensor::vector(vec![3.0, 4.0]));
        let ab = tape.hadamard(a, b).unwrap();
        let ba = tape.hadamard(b, a).unwrap();
        assert_eq!(tape.value(ab).data(), &[3.0, 8.0]);
        assert_eq!(tape.value(ab), tape.value(ba));
        let ones = tape.input(Tensor::ones(&[2]));
        let a1 = tape.hadamard(a, ones).unwrap();
        assert_eq!(tape.value(a1), tape.value(a));
        let bad = tape.input(Tensor::zeros(&[3]));
        assert!(tape.hadamard(a, bad).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::vector(vec![0.7, 0.7]));
        let ce = tape.cross_entropy(l, 1).unwrap();
        assert!((tape.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);

        let l = tape.input(Tensor::vector(vec![3f64.ln(), 0.0]));
        let ce = tape.cross_entropy(l, 0).unwrap();
        assert!((tape.value(ce).data()[0] + (0.75f64).ln()).abs() < 1e-15);
        let g = tape.backward(ce);
        let gl = g.get(l).unwrap().data();
        assert!((gl[0] - (0.75 - 1.0)).abs() < 1e-15);
        assert!((gl[1] - 0.25).abs() < 1e-15);

        assert!(tape.cross_entropy(l, 2).is_err());
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let mut store = ParamStore::new();
        let id = store.insert("a", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new();
        let a1 = tape.param(&store, id);
        let a2 = tape.param(&store, id);
        assert_eq!(a1, a2);
        let sq = tape.hadamard(a1, a2).unwrap();
        let g = tape.backward(sq);
        let mut acc = store.zeros_like();
        g.accumulate_params(&tape, &mut acc);
        assert_eq!(acc[0].data(), &[4.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 30.0, 29.0, -5.0]).unwrap());
        let y = tape.softmax(x);
        for row in tape.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}
