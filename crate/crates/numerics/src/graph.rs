//! Dynamically recorded computation graph with reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and the inputs it
//! needs for the backward pass. Nodes are only ever appended, so the node
//! order is already a topological order and [`Graph::backward`] walks it in
//! reverse.
//!
//! Binary elementwise primitives broadcast numpy-style. Matrix products
//! contract the last axis of the left operand with either a shared 2-D right
//! operand or a batch of right operands with identical leading axes.

use crate::error::{NumericsError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{
    axis_split, broadcast_index_map, broadcast_shape, gemm_acc, gemm_nt_acc, gemm_tn_acc, numel,
    reduce_to_shape, Real, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    LinComb(Vec<(Var, T)>),
    AddScalar(Var, T),
    MatMul { a: Var, b: Var, batched: bool },
    TransposeLast(Var),
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Sort { x: Var, axis: usize, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Expand(Var),
    Roll { x: Var, axis: usize, shift: usize },
    Gather { table: Var, indices: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::LinComb(_) => "lincomb",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::TransposeLast(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::SumAll(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Sort { .. } => "sort",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Expand(_) => "expand",
            Op::Roll { .. } => "roll",
            Op::Gather { .. } => "gather",
        }
    }

    fn any_input(&self, mut pred: impl FnMut(Var) -> bool) -> bool {
        match self {
            Op::Constant | Op::Param(_) => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => {
                pred(*a) || pred(*b)
            }
            Op::LinComb(terms) => terms.iter().any(|&(v, _)| pred(v)),
            Op::Concat { parts, .. } => parts.iter().any(|&v| pred(v)),
            Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::TransposeLast(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::Sort { x, .. }
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::Expand(x)
            | Op::Roll { x, .. } => pred(*x),
            Op::Gather { table, .. } => pred(*table),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records tensor operations for one forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// True when `small` broadcasts against `big` by repetition of its whole
/// buffer, i.e. its non-unit axes form a suffix of `big`.
fn is_tiling(small: &[usize], big: &[usize]) -> bool {
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    big.ends_with(&trimmed)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    /// Reports the first node whose output contains NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().position(|n| !n.value.is_finite()) {
            Some(node) => Err(NumericsError::NonFinite {
                op: self.nodes[node].op.name(),
                node,
            }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Records the current value of a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    // ---------------------------------------------------------------------
    // elementwise binary

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_values(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    // ---------------------------------------------------------------------
    // elementwise unary

    fn unary(&mut self, x: Var, op: Op<T>) -> Var {
        let v = unary_values(&op, self.value(x));
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c))
    }

    /// `Σ cᵢ·xᵢ` over operands of identical shape.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(NumericsError::InvalidArgument("lincomb needs at least one term".into()));
        };
        let shape = self.shape(first).to_vec();
        for &(v, _) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(NumericsError::Shape(format!(
                    "lincomb operands differ: {shape:?} vs {:?}",
                    self.shape(v)
                )));
            }
        }
        let t = lincomb_values(terms, |v| self.value(v));
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(t, Op::LinComb(terms.to_vec()), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x))
    }

    /// Square root whose derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x))
    }

    // ---------------------------------------------------------------------
    // products

    /// `a[..., m, k] · b[k, n]`, or batched `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(NumericsError::Shape(format!(
                "matmul needs rank ≥ 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let k = sa[sa.len() - 1];
        let kb = sb[sb.len() - 2];
        if k != kb {
            return Err(NumericsError::Shape(format!(
                "matmul inner dimensions differ: {sa:?} · {sb:?}"
            )));
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(NumericsError::Shape(format!(
                "batched matmul leading axes differ: {sa:?} · {sb:?}"
            )));
        }
        let t = matmul_values(self.value(a), self.value(b), batched);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, batched }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(NumericsError::Shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let v = transpose_last(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(v, Op::TransposeLast(x), rg))
    }

    // ---------------------------------------------------------------------
    // normalisations and reductions

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).is_empty() {
            return Err(NumericsError::Shape("softmax of a scalar".into()));
        }
        let v = softmax_values(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = sum_values(self.value(x));
        let rg = self.rg(x);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let v = sum_axis_values(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(v, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ext = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::lit(ext as f64)))
    }

    /// Sorts ascending along `axis`. Gradients follow the permutation.
    pub fn sort(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(x), axis)?;
        let (v, perm) = sort_values(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Sort { x, axis, perm }, rg))
    }

    // ---------------------------------------------------------------------
    // structural

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        check_axis(&s0, axis)?;
        for p in parts {
            let sp = self.shape(*p);
            let compatible = sp.len() == s0.len()
                && sp.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(NumericsError::Shape(format!(
                    "concat along axis {axis}: {s0:?} vs {sp:?}"
                )));
            }
        }
        let v = concat_values(parts, axis, |p| self.value(p));
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis)?;
        if start + len > s[axis] {
            return Err(NumericsError::Shape(format!(
                "narrow {start}..{} out of range for axis {axis} of {s:?}",
                start + len
            )));
        }
        let v = narrow_values(self.value(x), axis, start, len);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Narrow { x, axis, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Broadcasts `x` to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if broadcast_shape(&s, shape)? != shape {
            return Err(NumericsError::Shape(format!("cannot expand {s:?} to {shape:?}")));
        }
        let v = expand_values(self.value(x), shape);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Expand(x), rg))
    }

    /// Circular shift along `axis`: `out[i] = x[(i - shift) mod n]`.
    pub fn roll(&mut self, x: Var, axis: usize, shift: isize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis(&s, axis)?;
        let ext = s[axis] as isize;
        let shift = shift.rem_euclid(ext.max(1)) as usize;
        let v = roll_axis(self.value(x), axis, shift);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Roll { x, axis, shift }, rg))
    }

    /// Row lookup into a `[rows, dim]` table; output is `[indices.len(), dim]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::Shape(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let rows = s[0];
        if let Some(&ix) = indices.iter().find(|&&ix| ix >= rows) {
            return Err(NumericsError::InvalidArgument(format!(
                "row index {ix} out of range for table with {rows} rows"
            )));
        }
        let v = gather_values(self.value(table), indices);
        let rg = self.rg(table);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // composites built from the primitives above

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let last = self.shape(x).len() - 1;
        let mu = self.mean_axis(x, last)?;
        let centered = self.sub(x, mu)?;
        let sq = self.square(centered);
        let var = self.mean_axis(sq, last)?;
        let var = self.add_scalar(var, eps);
        let std = self.sqrt(var);
        let inv = self.reciprocal(std)?;
        let normed = self.mul(centered, inv)?;
        let scaled = self.mul(normed, gain)?;
        self.add(scaled, bias)
    }

    /// `1 / x` as `exp(-log x)`; requires positive input.
    pub fn reciprocal(&mut self, x: Var) -> Result<Var> {
        let l = self.log(x);
        let n = self.neg(l);
        Ok(self.exp(n))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ---------------------------------------------------------------------
    // incremental re-evaluation

    /// Value of `out` with parameter `id` replaced by `value`, recomputing
    /// only the nodes downstream of a changed input. A recomputed node whose
    /// value comes out bit-identical stops the propagation.
    ///
    /// Matches a fresh recording only when the recorded op sequence does not
    /// depend on parameter values.
    pub fn replay(&self, out: Var, id: ParamId, value: &Tensor<T>) -> Result<Tensor<T>> {
        let mut changed: Vec<Option<Tensor<T>>> = Vec::with_capacity(out.0 + 1);
        for idx in 0..=out.0 {
            let node = &self.nodes[idx];
            let fresh = match &node.op {
                Op::Param(pid) if *pid == id => {
                    if value.shape() != node.value.shape() {
                        return Err(NumericsError::Shape(format!(
                            "replay value {:?} does not match parameter shape {:?}",
                            value.shape(),
                            node.value.shape()
                        )));
                    }
                    Some(value.clone())
                }
                op if op.any_input(|v| changed[v.0].is_some()) => {
                    let get = |v: Var| changed[v.0].as_ref().unwrap_or(&self.nodes[v.0].value);
                    Some(recompute(op, &node.value, get)?)
                }
                _ => None,
            };
            changed.push(fresh.filter(|t| !same_values(t, &node.value)));
        }
        Ok(changed
            .pop()
            .flatten()
            .unwrap_or_else(|| self.nodes[out.0].value.clone()))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Reverse-mode derivative of a scalar `loss` with respect to every
    /// parameter leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(NumericsError::NonFiniteLoss(l.to_f64().unwrap_or(f64::NAN)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add(*id, g),
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        if self.rg(v) {
                            acc(&mut grads, v, g.map(|x| x * c));
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc_reduced(&mut grads, *a, &g);
                    self.acc_reduced(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    self.acc_reduced(&mut grads, *a, &g);
                    if self.rg(*b) {
                        let ng = g.map(|v| -v);
                        self.acc_reduced(&mut grads, *b, &ng);
                    }
                }
                Op::Mul(a, b) => {
                    let out_shape = y.shape();
                    if self.rg(*a) {
                        let other = self.broadcast_value(*b, out_shape);
                        let ga = zip_map(&g, &other, |x, y| x * y);
                        self.acc_reduced(&mut grads, *a, &ga);
                    }
                    if self.rg(*b) {
                        let other = self.broadcast_value(*a, out_shape);
                        let gb = zip_map(&g, &other, |x, y| x * y);
                        self.acc_reduced(&mut grads, *b, &gb);
                    }
                }
                Op::Neg(x) => acc(&mut grads, *x, g.map(|v| -v)),
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(&mut grads, *x, g.map(|v| v * c))
                }
                Op::AddScalar(x, _) => acc(&mut grads, *x, g),
                Op::MatMul { a, b, batched } => {
                    self.matmul_backward(&mut grads, &g, *a, *b, *batched);
                }
                Op::TransposeLast(x) => acc(&mut grads, *x, transpose_last(&g)),
                Op::Softmax(x) => {
                    let last = *y.shape().last().unwrap_or(&1);
                    let mut dx = vec![T::zero(); y.numel()];
                    for ((dr, yr), gr) in dx
                        .chunks_mut(last.max(1))
                        .zip(y.data().chunks(last.max(1)))
                        .zip(g.data().chunks(last.max(1)))
                    {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(y.shape(), dx)?);
                }
                Op::Sigmoid(x) => {
                    acc(&mut grads, *x, zip_map(&g, y, |g, y| g * y * (T::one() - y)))
                }
                Op::Tanh(x) => acc(&mut grads, *x, zip_map(&g, y, |g, y| g * (T::one() - y * y))),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    acc(
                        &mut grads,
                        *x,
                        zip_map(&g, xv, |g, x| if x > T::zero() { g } else { T::zero() }),
                    )
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let c = T::lit(GELU_C);
                    let a = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    acc(
                        &mut grads,
                        *x,
                        zip_map(&g, xv, |g, x| {
                            let t = (c * (x + a * x * x * x)).tanh();
                            let d = half * (T::one() + t)
                                + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
                            g * d
                        }),
                    )
                }
                Op::Exp(x) => acc(&mut grads, *x, zip_map(&g, y, |g, y| g * y)),
                Op::Log(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, zip_map(&g, xv, |g, x| g / x))
                }
                Op::Softplus(x) => {
                    let xv = self.value(*x);
                    acc(&mut grads, *x, zip_map(&g, xv, |g, x| g * sigmoid(x)))
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let two = T::lit(2.0);
                    acc(&mut grads, *x, zip_map(&g, xv, |g, x| g * two * x))
                }
                Op::Sqrt(x) => {
                    let half = T::lit(0.5);
                    acc(
                        &mut grads,
                        *x,
                        zip_map(&g, y, |g, y| if y > T::zero() { g * half / y } else { T::zero() }),
                    )
                }
                Op::SumAll(x) => {
                    let s = self.shape(*x).to_vec();
                    acc(&mut grads, *x, Tensor::full(&s, g.data()[0]));
                }
                Op::SumAxis(x, axis) => {
                    let s = self.shape(*x).to_vec();
                    let map = broadcast_index_map(g.shape(), &s);
                    let data = map.iter().map(|&i| g.data()[i]).collect();
                    let _ = axis;
                    acc(&mut grads, *x, Tensor::new(&s, data)?);
                }
                Op::Sort { x, perm, .. } => {
                    let mut dx = vec![T::zero(); g.numel()];
                    for (&gv, &src) in g.data().iter().zip(perm) {
                        dx[src] = dx[src] + gv;
                    }
                    acc(&mut grads, *x, Tensor::new(g.shape(), dx)?);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split(g.shape(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let sp = self.shape(*p).to_vec();
                        let ext = sp[*axis];
                        if self.rg(*p) {
                            let mut d = Vec::with_capacity(numel(&sp));
                            for o in 0..outer {
                                let base = (o * total + offset) * inner;
                                d.extend_from_slice(&g.data()[base..base + ext * inner]);
                            }
                            acc(&mut grads, *p, Tensor::new(&sp, d)?);
                        }
                        offset += ext;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let sx = self.shape(*x).to_vec();
                    let (outer, ext, inner) = axis_split(&sx, *axis);
                    let len = g.shape()[*axis];
                    let mut d = vec![T::zero(); numel(&sx)];
                    for o in 0..outer {
                        let dst = (o * ext + start) * inner;
                        let src = o * len * inner;
                        d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(&mut grads, *x, Tensor::new(&sx, d)?);
                }
                Op::Reshape(x) => {
                    let sx = self.shape(*x).to_vec();
                    acc(&mut grads, *x, g.reshape(&sx)?);
                }
                Op::Expand(x) => self.acc_reduced(&mut grads, *x, &g),
                Op::Roll { x, axis, shift } => {
                    let ext = g.shape()[*axis];
                    let back = (ext - shift % ext.max(1)) % ext.max(1);
                    acc(&mut grads, *x, roll_axis(&g, *axis, back));
                }
                Op::Gather { table, indices } => {
                    let st = self.shape(*table).to_vec();
                    let dim = st[1];
                    let mut d = vec![T::zero(); numel(&st)];
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..dim {
                            d[ix * dim + j] = d[ix * dim + j] + g.data()[r * dim + j];
                        }
                    }
                    acc(&mut grads, *table, Tensor::new(&st, d)?);
                }
            }
        }
        Ok(out)
    }

    fn acc_reduced(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        let target = self.shape(v);
        acc(grads, v, reduce_to_shape(g, target));
    }

    fn broadcast_value(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        let t = self.value(v);
        if t.shape() == shape {
            return t.clone();
        }
        let map = broadcast_index_map(t.shape(), shape);
        let data = map.iter().map(|&i| t.data()[i]).collect();
        Tensor::new(shape, data).expect("broadcast shape is consistent")
    }

    fn matmul_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        a: Var,
        b: Var,
        batched: bool,
    ) {
        let ta = self.value(a);
        let tb = self.value(b);
        let sa = ta.shape();
        let sb = tb.shape();
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let n = sb[sb.len() - 1];
        if batched {
            let batches = numel(&sa[..sa.len() - 2]);
            if self.rg(a) {
                let mut da = vec![T::zero(); ta.numel()];
                for bi in 0..batches {
                    gemm_nt_acc(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &tb.data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                acc(grads, a, Tensor::new(sa, da).expect("shape"));
            }
            if self.rg(b) {
                let mut db = vec![T::zero(); tb.numel()];
                for bi in 0..batches {
                    gemm_tn_acc(
                        &ta.data()[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(grads, b, Tensor::new(sb, db).expect("shape"));
            }
        } else {
            let rows = ta.numel() / k.max(1);
            if self.rg(a) {
                let mut da = vec![T::zero(); ta.numel()];
                gemm_nt_acc(g.data(), tb.data(), &mut da, rows, n, k);
                acc(grads, a, Tensor::new(sa, da).expect("shape"));
            }
            if self.rg(b) {
                let mut db = vec![T::zero(); tb.numel()];
                gemm_tn_acc(ta.data(), g.data(), &mut db, rows, k, n);
                acc(grads, b, Tensor::new(sb, db).expect("shape"));
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (d, &s) in existing.data_mut().iter_mut().zip(g.data()) {
                *d = *d + s;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map operands share a shape")
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(NumericsError::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

fn transpose_last<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let batches = numel(&s[..s.len() - 2]);
    let mut out = vec![T::zero(); t.numel()];
    let src = t.data();
    for bi in 0..batches {
        let off = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = src[off + i * c + j];
            }
        }
    }
    let mut os = s.to_vec();
    let n = os.len();
    os.swap(n - 1, n - 2);
    Tensor::new(&os, out).expect("transpose keeps element count")
}

fn roll_axis<T: Real>(t: &Tensor<T>, axis: usize, shift: usize) -> Tensor<T> {
    let (outer, ext, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for e in 0..ext {
            let to = (e + shift) % ext;
            let s = (o * ext + e) * inner;
            let d = (o * ext + to) * inner;
            out[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Tensor::new(t.shape(), out).expect("roll keeps shape")
}


/// Forward value of an already validated `op`, reading inputs through `get`.
/// `recorded` is the node's previous value and supplies its output shape.
fn recompute<'a, T: Real>(
    op: &Op<T>,
    recorded: &Tensor<T>,
    get: impl Fn(Var) -> &'a Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(match op {
        Op::Constant | Op::Param(_) => recorded.clone(),
        Op::Add(a, b) => binary_values(get(*a), get(*b), |x, y| x + y)?,
        Op::Sub(a, b) => binary_values(get(*a), get(*b), |x, y| x - y)?,
        Op::Mul(a, b) => binary_values(get(*a), get(*b), |x, y| x * y)?,
        Op::LinComb(terms) => lincomb_values(terms, get),
        Op::MatMul { a, b, batched } => matmul_values(get(*a), get(*b), *batched),
        Op::TransposeLast(x) => transpose_last(get(*x)),
        Op::Softmax(x) => softmax_values(get(*x)),
        Op::SumAll(x) => sum_values(get(*x)),
        Op::SumAxis(x, axis) => sum_axis_values(get(*x), *axis),
        Op::Sort { x, axis, .. } => sort_values(get(*x), *axis).0,
        Op::Concat { parts, axis } => concat_values(parts, *axis, get),
        Op::Narrow { x, axis, start } => {
            narrow_values(get(*x), *axis, *start, recorded.shape()[*axis])
        }
        Op::Reshape(x) => get(*x).clone().reshape(recorded.shape())?,
        Op::Expand(x) => expand_values(get(*x), recorded.shape()),
        Op::Roll { x, axis, shift } => roll_axis(get(*x), *axis, *shift),
        Op::Gather { table, indices } => gather_values(get(*table), indices),
        Op::Neg(x)
        | Op::Scale(x, _)
        | Op::AddScalar(x, _)
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Relu(x)
        | Op::Gelu(x)
        | Op::Exp(x)
        | Op::Log(x)
        | Op::Softplus(x)
        | Op::Square(x)
        | Op::Sqrt(x) => unary_values(op, get(*x)),
    })
}

fn binary_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let (va, vb) = (a.data(), b.data());
    if sa == sb {
        let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(sa, data);
    }
    let out = broadcast_shape(sa, sb)?;
    // Common cases: one operand repeats over the leading axes of the other.
    if out == sa && is_tiling(sb, sa) {
        let mut data = Vec::with_capacity(va.len());
        for chunk in va.chunks_exact(vb.len()) {
            data.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(&out, data);
    }
    if out == sb && is_tiling(sa, sb) {
        let mut data = Vec::with_capacity(vb.len());
        for chunk in vb.chunks_exact(va.len()) {
            data.extend(va.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(&out, data);
    }
    let ma = broadcast_index_map(sa, &out);
    let mb = broadcast_index_map(sb, &out);
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
    Tensor::new(&out, data)
}

fn unary_values<T: Real>(op: &Op<T>, x: &Tensor<T>) -> Tensor<T> {
    match *op {
        Op::Neg(_) => x.map(|v| -v),
        Op::Scale(_, c) => x.map(|v| v * c),
        Op::AddScalar(_, c) => x.map(|v| v + c),
        Op::Sigmoid(_) => x.map(sigmoid),
        Op::Tanh(_) => x.map(|v| v.tanh()),
        Op::Relu(_) => x.map(|v| v.max(T::zero())),
        Op::Gelu(_) => {
            let c = T::lit(GELU_C);
            let a = T::lit(GELU_A);
            let half = T::lit(0.5);
            x.map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
        }
        Op::Exp(_) => x.map(|v| v.exp()),
        Op::Log(_) => x.map(|v| v.ln()),
        Op::Softplus(_) => x.map(softplus),
        Op::Square(_) => x.map(|v| v * v),
        Op::Sqrt(_) => x.map(|v| v.sqrt()),
        _ => unreachable!("`{}` is not an elementwise unary op", op.name()),
    }
}

fn lincomb_values<'a, T: Real>(terms: &[(Var, T)], get: impl Fn(Var) -> &'a Tensor<T>) -> Tensor<T> {
    let shape = get(terms[0].0).shape().to_vec();
    let mut out = vec![T::zero(); numel(&shape)];
    for &(v, c) in terms {
        for (o, &x) in out.iter_mut().zip(get(v).data()) {
            *o = *o + c * x;
        }
    }
    Tensor::new(&shape, out).expect("lincomb operands share a shape")
}

fn matmul_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>, batched: bool) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let k = sa[sa.len() - 1];
    let m = sa[sa.len() - 2];
    let n = sb[sb.len() - 1];
    let mut out_shape = sa[..sa.len() - 1].to_vec();
    out_shape.push(n);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (va, vb) = (a.data(), b.data());
    if batched {
        let batches = numel(&sa[..sa.len() - 2]);
        for bi in 0..batches {
            gemm_acc(
                &va[bi * m * k..(bi + 1) * m * k],
                &vb[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
    } else {
        let rows = va.len() / k.max(1);
        gemm_acc(va, vb, &mut out, rows, k, n);
    }
    Tensor::new(&out_shape, out).expect("matmul output shape")
}

fn softmax_values<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.shape().last().unwrap_or(&1);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(last.max(1)) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape(), out).expect("softmax keeps shape")
}

fn sum_values<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(x.data().iter().fold(T::zero(), |a, &b| a + b))
}

fn sum_axis_values<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for e in 0..ext {
            let base = (o * ext + e) * inner;
            for (d, &v) in dst.iter_mut().zip(&src[base..base + inner]) {
                *d = *d + v;
            }
        }
    }
    let mut os = x.shape().to_vec();
    os[axis] = 1;
    Tensor::new(&os, out).expect("sum_axis output shape")
}

fn sort_values<T: Real>(x: &Tensor<T>, axis: usize) -> (Tensor<T>, Vec<usize>) {
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    let mut perm = vec![0usize; src.len()];
    let mut order: Vec<usize> = Vec::with_capacity(ext);
    for o in 0..outer {
        for i in 0..inner {
            let at = |e: usize| (o * ext + e) * inner + i;
            order.clear();
            order.extend(0..ext);
            order.sort_by(|&p, &q| {
                src[at(p)]
                    .partial_cmp(&src[at(q)])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            for (e, &from) in order.iter().enumerate() {
                out[at(e)] = src[at(from)];
                perm[at(e)] = at(from);
            }
        }
    }
    (Tensor::new(x.shape(), out).expect("sort keeps shape"), perm)
}

fn concat_values<'a, T: Real>(
    parts: &[Var],
    axis: usize,
    get: impl Fn(Var) -> &'a Tensor<T>,
) -> Tensor<T> {
    let mut os = get(parts[0]).shape().to_vec();
    os[axis] = parts.iter().map(|&p| get(p).shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&os, axis);
    let mut out = Vec::with_capacity(numel(&os));
    for o in 0..outer {
        for &p in parts {
            let t = get(p);
            let ext = t.shape()[axis];
            out.extend_from_slice(&t.data()[o * ext * inner..(o + 1) * ext * inner]);
        }
    }
    Tensor::new(&os, out).expect("concat output shape")
}

fn narrow_values<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, ext, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    let mut os = x.shape().to_vec();
    os[axis] = len;
    Tensor::new(&os, out).expect("narrow output shape")
}

fn expand_values<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let map = broadcast_index_map(x.shape(), shape);
    let src = x.data();
    let data = map.iter().map(|&i| src[i]).collect();
    Tensor::new(shape, data).expect("expand output shape")
}

fn gather_values<T: Real>(table: &Tensor<T>, indices: &[usize]) -> Tensor<T> {
    let dim = table.shape()[1];
    let src = table.data();
    let mut out = Vec::with_capacity(indices.len() * dim);
    for &ix in indices {
        out.extend_from_slice(&src[ix * dim..(ix + 1) * dim]);
    }
    Tensor::new(&[indices.len(), dim], out).expect("gather output shape")
}

/// Equal values with equal signs, so `0.0` and `-0.0` count as different.
fn same_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(&x, &y)| x == y && x.is_sign_negative() == y.is_sign_negative())
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}
