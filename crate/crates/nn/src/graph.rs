//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every leaf that requires them. Values are released while walking back, so a
//! graph is spent after one backward pass.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::error::{mismatch, NnError, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_strides, numel, strides, visit_broadcast, Tensor};

/// Additive surrogate for `-inf` written by [`Var::masked_fill`] before softmax.
pub const MASK_VALUE: f64 = -1e9;

/// Epsilon inside the norms of the differentiable Gram–Schmidt map.
pub const GRAM_SCHMIDT_EPS: f64 = 1e-8;

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, ta: bool, tb: bool },
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, stats: Vec<(F, F)> },
    Gelu(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute { a: usize, perm: Vec<usize> },
    MaskedFill { a: usize, mask: Vec<bool>, mask_shape: Vec<usize> },
    Gather { a: usize, axis: usize, index: Vec<Option<usize>> },
    Sum(usize),
    Mean(usize),
    SumSq(usize),
    Rot6dToMatrix(usize),
    Attention { q: usize, k: usize, v: usize, probs: Tensor<F>, scale: F },
    ForwardKinematics { rot: usize, root: usize, parents: Vec<Option<usize>>, offsets: Vec<[F; 3]>, globals: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording tape. Confined to one thread; create one per forward/backward pass.
pub struct Graph<F> {
    nodes: RefCell<Vec<Node<F>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, F> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    leaves: HashMap<usize, Tensor<F>>,
    params: Vec<(ParamId, usize)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a leaf variable, `None` if it received none.
    pub fn wrt(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.leaves.get(&var.id)
    }

    /// Gradients of every parameter bound into the graph, scaled by `weight`.
    pub fn accumulate_into(&self, out: &mut ParamGrads<F>, weight: F) {
        for &(pid, node) in &self.params {
            if let Some(g) = self.leaves.get(&node) {
                out.accumulate(pid, g, weight);
            }
        }
    }

    pub fn param_grads(&self, n_params: usize) -> ParamGrads<F> {
        let mut out = ParamGrads::new(n_params);
        self.accumulate_into(&mut out, F::one());
        out
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), param_nodes: RefCell::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Value that receives no gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter. Repeated calls return the same variable.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.input(store.get(id).clone());
        self.param_nodes.borrow_mut().insert(id, v.id);
        v
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.len() != 1 {
            return Err(NnError::Invalid(format!("backward needs a scalar, got shape {:?}", nodes[loss.id].value.shape())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), F::one()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else {
                nodes[i].value = Tensor::zeros(&[0]);
                continue;
            };
            if !nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = nodes[i].op {
                leaves.insert(i, g);
                continue;
            }
            let outs = backward_node(&nodes, i, &g);
            for (input, gin) in outs {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gin),
                    slot => *slot = Some(gin),
                }
            }
            // consumers of node i all sit above it on the tape
            nodes[i].value = Tensor::zeros(&[0]);
        }
        let params = self.param_nodes.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        Ok(Gradients { leaves, params })
    }
}

impl<'g, F: Scalar> Var<'g, F> {
    pub fn value(&self) -> Ref<'g, Tensor<F>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    fn unary(self, value: Tensor<F>, op: Op<F>) -> Var<'g, F> {
        let needs = self.graph.needs(&[self.id]);
        self.graph.push(value, op, needs)
    }

    fn binary(self, other: Var<'g, F>, value: Tensor<F>, op: Op<F>) -> Var<'g, F> {
        let needs = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, needs)
    }

    /// Broadcasting addition.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            broadcast_binary(&a, &b, "add", |x, y| x + y)?
        };
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    /// Broadcasting subtraction.
    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            broadcast_binary(&a, &b, "sub", |x, y| x - y)?
        };
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Broadcasting elementwise product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            broadcast_binary(&a, &b, "mul", |x, y| x * y)?
        };
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, c: f64) -> Var<'g, F> {
        let c = F::from_f64(c);
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(self, w: Var<'g, F>) -> Result<Var<'g, F>> {
        let v = {
            let (a, b) = (self.value(), w.value());
            matmul_forward(&a, &b)?
        };
        Ok(self.binary(w, v, Op::MatMul(self.id, w.id)))
    }

    /// Batched product of `[batch, ., .]` tensors with optional transposes.
    pub fn bmm(self, other: Var<'g, F>, ta: bool, tb: bool) -> Result<Var<'g, F>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            bmm_forward(&a, &b, ta, tb)?
        };
        Ok(self.binary(other, v, Op::Bmm { a: self.id, b: other.id, ta, tb }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, F>> {
        let v = softmax_forward(&self.value())?;
        Ok(self.unary(v, Op::Softmax(self.id)))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
        let (v, stats) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            layer_norm_forward(&x, &g, &b, F::from_f64(eps))?
        };
        let needs = self.graph.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(v, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, stats }, needs))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g, F> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn concat(parts: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        let graph = parts.first().ok_or_else(|| NnError::Invalid("concat of nothing".into()))?.graph;
        let v = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor<F>> = vals.iter().map(|r| &**r).collect();
            concat_forward(&refs, axis)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = graph.needs(&ids);
        Ok(graph.push(v, Op::Concat { inputs: ids, axis }, needs))
    }

    /// `start..start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, F>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.unary(v, Op::Slice { a: self.id, axis, start }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let v = self.value().clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, F>> {
        let v = permute_forward(&self.value(), perm)?;
        Ok(self.unary(v, Op::Permute { a: self.id, perm: perm.to_vec() }))
    }

    pub fn transpose(self, i: usize, j: usize) -> Result<Var<'g, F>> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        perm.swap(i, j);
        self.permute(&perm)
    }

    /// Replace entries where the (broadcast) `mask` is true by [`MASK_VALUE`].
    pub fn masked_fill(self, mask: &[bool], mask_shape: &[usize]) -> Result<Var<'g, F>> {
        if numel(mask_shape) != mask.len() {
            return Err(mismatch("masked_fill", mask_shape, &[mask.len()]));
        }
        let v = {
            let a = self.value();
            let out = broadcast_shape(a.shape(), mask_shape)
                .filter(|s| s == a.shape())
                .ok_or_else(|| mismatch("masked_fill", a.shape(), mask_shape))?;
            let sa = strides(&out);
            let sm = broadcast_strides(mask_shape, &out);
            let fill = F::from_f64(MASK_VALUE);
            let mut data = a.data().to_vec();
            visit_broadcast(&out, &sa, &sm, |o, _, im| {
                if mask[im] {
                    data[o] = fill;
                }
            });
            Tensor::new(&out, data)?
        };
        Ok(self.unary(v, Op::MaskedFill { a: self.id, mask: mask.to_vec(), mask_shape: mask_shape.to_vec() }))
    }

    /// Select slices along `axis`; `None` entries produce zeros.
    pub fn gather(self, axis: usize, index: &[Option<usize>]) -> Result<Var<'g, F>> {
        let v = gather_forward(&self.value(), axis, index)?;
        Ok(self.unary(v, Op::Gather { a: self.id, axis, index: index.to_vec() }))
    }

    pub fn sum(self) -> Var<'g, F> {
        let s: F = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, F> {
        let v = self.value();
        let n = F::from_f64(v.len().max(1) as f64);
        let s: F = v.data().iter().copied().sum::<F>() / n;
        drop(v);
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Sum of squares.
    pub fn sum_sq(self) -> Var<'g, F> {
        let s: F = self.value().data().iter().map(|&x| x * x).sum();
        self.unary(Tensor::scalar(s), Op::SumSq(self.id))
    }

    /// Mean squared difference over all entries.
    pub fn mse(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        let n = self.value().len().max(1) as f64;
        Ok(self.sub(other)?.sum_sq().scale(1.0 / n))
    }

    /// Fused `softmax(scale · q kᵀ + mask) v` over `[batch, L, d]` operands.
    ///
    /// `key_valid` has `rows * Lk` entries for some `rows` dividing `batch`;
    /// batch entry `i` uses mask row `i / (batch / rows)`. Only the attention
    /// probabilities are kept for the backward pass.
    pub fn attention(self, k: Var<'g, F>, v: Var<'g, F>, scale: f64, key_valid: Option<&[bool]>) -> Result<Var<'g, F>> {
        let (out, probs) = {
            let (qv, kv, vv) = (self.value(), k.value(), v.value());
            attention_forward(&qv, &kv, &vv, F::from_f64(scale), key_valid)?
        };
        let needs = self.graph.needs(&[self.id, k.id, v.id]);
        Ok(self.graph.push(out, Op::Attention { q: self.id, k: k.id, v: v.id, probs, scale: F::from_f64(scale) }, needs))
    }

    /// `[..., 6] -> [..., 3, 3]` via Gram–Schmidt; columns are the basis vectors.
    pub fn rot6d_to_matrix(self) -> Result<Var<'g, F>> {
        let v = rot6d_forward(&self.value())?;
        Ok(self.unary(v, Op::Rot6dToMatrix(self.id)))
    }

    /// Global joint positions `[T, N, 3]` from local rotations `[T, N, 3, 3]`
    /// and root positions `[T, 3]`. `parents[j] < j` for every non-root joint.
    pub fn forward_kinematics(self, root: Var<'g, F>, parents: &[Option<usize>], offsets: &[[f64; 3]]) -> Result<Var<'g, F>> {
        let offsets: Vec<[F; 3]> = offsets.iter().map(|o| [F::from_f64(o[0]), F::from_f64(o[1]), F::from_f64(o[2])]).collect();
        let (v, globals) = {
            let (r, p) = (self.value(), root.value());
            fk_forward(&r, &p, parents, &offsets)?
        };
        Ok(self.binary(root, v, Op::ForwardKinematics { rot: self.id, root: root.id, parents: parents.to_vec(), offsets, globals }))
    }
}

// ---------------------------------------------------------------------------
// forward kernels

fn broadcast_binary<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    // `b` tiles `a` (or the reverse): a bias row or a per-position table.
    if !b.is_empty() && is_trailing(b.shape(), a.shape()) {
        let data = a.data().chunks(b.len()).flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y))).collect();
        return Tensor::new(a.shape(), data);
    }
    if !a.is_empty() && is_trailing(a.shape(), b.shape()) {
        let data = b.data().chunks(a.len()).flat_map(|row| a.data().iter().zip(row).map(|(&x, &y)| f(x, y))).collect();
        return Tensor::new(b.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![F::zero(); numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    visit_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(&out, data)
}

/// Whether `small`, minus leading unit axes, equals the trailing axes of `big`.
fn is_trailing(small: &[usize], big: &[usize]) -> bool {
    let lead = small.iter().take_while(|&&d| d == 1).count();
    let core = &small[lead..];
    core.len() <= big.len() && big.len() >= small.len() && big[big.len() - core.len()..] == *core
}

/// Sum `g` (shaped like the broadcast output) down to `shape`.
fn reduce_to<F: Scalar>(g: &Tensor<F>, shape: &[usize], weight: impl Fn(usize, usize) -> F) -> Tensor<F> {
    let out = g.shape();
    if out == shape {
        let data = g.data().iter().enumerate().map(|(i, &x)| x * weight(i, i)).collect();
        return Tensor::new(shape, data).expect("reduce shape");
    }
    let len = numel(shape);
    if len > 0 && is_trailing(shape, out) {
        let mut acc = vec![F::zero(); len];
        for (c, row) in g.data().chunks(len).enumerate() {
            for (i, (a, &x)) in acc.iter_mut().zip(row).enumerate() {
                *a += x * weight(c * len + i, i);
            }
        }
        return Tensor::new(shape, acc).expect("reduce shape");
    }
    let so = strides(out);
    let sr = broadcast_strides(shape, out);
    let mut acc = vec![F::zero(); numel(shape)];
    let gd = g.data();
    visit_broadcast(out, &so, &sr, |o, _, ir| acc[ir] += gd[o] * weight(o, ir));
    Tensor::new(shape, acc).expect("reduce shape")
}

fn matmul_forward<F: Scalar>(a: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    if w.ndim() != 2 || a.ndim() == 0 || a.shape()[a.ndim() - 1] != w.shape()[0] {
        return Err(mismatch("matmul", a.shape(), w.shape()));
    }
    let k = w.shape()[0];
    let n = w.shape()[1];
    let m = a.len() / k.max(1);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    let mut out = vec![F::zero(); m * n];
    F::gemm(m, k, n, a.data(), k, 1, w.data(), n, 1, &mut out, n, 1, F::zero());
    Tensor::new(&shape, out)
}

/// Logical `(rows, cols, row_stride, col_stride)` of one batch slice.
fn logical(shape: &[usize], t: bool) -> (usize, usize, usize, usize) {
    let (r, c) = (shape[1], shape[2]);
    if t {
        (c, r, 1, c)
    } else {
        (r, c, c, 1)
    }
}

fn bmm_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, ta: bool, tb: bool) -> Result<Tensor<F>> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(mismatch("bmm", a.shape(), b.shape()));
    }
    let (m, k, rsa, csa) = logical(a.shape(), ta);
    let (k2, n, rsb, csb) = logical(b.shape(), tb);
    if k != k2 {
        return Err(mismatch("bmm", a.shape(), b.shape()));
    }
    let batch = a.shape()[0];
    let (sa, sb) = (m * k, k * n);
    let mut out = vec![F::zero(); batch * m * n];
    for i in 0..batch {
        F::gemm(
            m,
            k,
            n,
            &a.data()[i * sa..(i + 1) * sa],
            rsa,
            csa,
            &b.data()[i * sb..(i + 1) * sb],
            rsb,
            csb,
            &mut out[i * m * n..(i + 1) * m * n],
            n,
            1,
            F::zero(),
        );
    }
    Tensor::new(&[batch, m, n], out)
}

fn softmax_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let n = *x.shape().last().ok_or_else(|| mismatch("softmax", x.shape(), &[]))?;
    let mut out = x.data().to_vec();
    if n == 0 {
        return Tensor::new(x.shape(), out);
    }
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(x.shape(), out)
}

type LnStats<F> = Vec<(F, F)>;

fn layer_norm_forward<F: Scalar>(x: &Tensor<F>, gamma: &Tensor<F>, beta: &Tensor<F>, eps: F) -> Result<(Tensor<F>, LnStats<F>)> {
    let d = *x.shape().last().ok_or_else(|| mismatch("layer_norm", x.shape(), &[]))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(mismatch("layer_norm", x.shape(), gamma.shape()));
    }
    let nd = F::from_f64(d as f64);
    let mut out = vec![F::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / d.max(1));
    for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<F>() / nd;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nd;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..d {
            o[i] = (row[i] - mean) * rstd * gamma.data()[i] + beta.data()[i];
        }
        stats.push((mean, rstd));
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

// tanh through exp: libm's tanh is several times slower and dominated feed-forward cost.
#[inline]
fn fast_tanh<F: Scalar>(u: F) -> F {
    let two = F::from_f64(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let inner = F::from_f64(SQRT_2_OVER_PI) * (x + F::from_f64(GELU_C) * x * x * x);
    half * x * (F::one() + fast_tanh(inner))
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let c = F::from_f64(SQRT_2_OVER_PI);
    let k = F::from_f64(GELU_C);
    let t = fast_tanh(c * (x + k * x * x * x));
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::from_f64(3.0) * k * x * x)
}

fn concat_forward<F: Scalar>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts[0];
    if axis >= first.ndim() {
        return Err(mismatch("concat", first.shape(), &[axis]));
    }
    for p in parts {
        let ok = p.ndim() == first.ndim() && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(mismatch("concat", first.shape(), p.shape()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(&shape, data)
}

fn permute_forward<F: Scalar>(x: &Tensor<F>, perm: &[usize]) -> Result<Tensor<F>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(mismatch("permute", x.shape(), perm));
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let out_strides = strides(&out_shape);
    let mut data = vec![F::zero(); x.len()];
    let xd = x.data();
    if nd > 1 && perm[nd - 1] == nd - 1 {
        // Rows along the last axis stay contiguous: copy them whole.
        let inner = out_shape[nd - 1];
        let outer = &out_shape[..nd - 1];
        visit_broadcast(outer, &strides(outer), &src_strides[..nd - 1], |o, _, i| {
            data[o * inner..(o + 1) * inner].copy_from_slice(&xd[i..i + inner]);
        });
        return Tensor::new(&out_shape, data);
    }
    visit_broadcast(&out_shape, &out_strides, &src_strides, |o, _, i| data[o] = xd[i]);
    Tensor::new(&out_shape, data)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn gather_forward<F: Scalar>(x: &Tensor<F>, axis: usize, index: &[Option<usize>]) -> Result<Tensor<F>> {
    if axis >= x.ndim() {
        return Err(mismatch("gather", x.shape(), &[axis]));
    }
    let dim = x.shape()[axis];
    if let Some(bad) = index.iter().flatten().find(|&&i| i >= dim) {
        return Err(NnError::Invalid(format!("gather index {bad} out of range {dim}")));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * index.len() * inner);
    for o in 0..outer {
        for idx in index {
            match idx {
                Some(i) => {
                    let base = (o * dim + i) * inner;
                    data.extend_from_slice(&x.data()[base..base + inner]);
                }
                None => data.extend(std::iter::repeat_n(F::zero(), inner)),
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = index.len();
    Tensor::new(&shape, data)
}

fn dot3<F: Scalar>(a: [F; 3], b: [F; 3]) -> F {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3<F: Scalar>(a: [F; 3], b: [F; 3]) -> [F; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn rot6d_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.shape().last() != Some(&6) {
        return Err(mismatch("rot6d_to_matrix", x.shape(), &[6]));
    }
    let eps = F::from_f64(GRAM_SCHMIDT_EPS);
    let mut shape = x.shape()[..x.ndim() - 1].to_vec();
    shape.extend([3, 3]);
    let mut out = vec![F::zero(); x.len() / 6 * 9];
    for (r, m) in x.data().chunks(6).zip(out.chunks_mut(9)) {
        let a = [r[0], r[1], r[2]];
        let b = [r[3], r[4], r[5]];
        let na = (dot3(a, a) + eps).sqrt();
        let c1 = [a[0] / na, a[1] / na, a[2] / na];
        let s = dot3(b, c1);
        let u = [b[0] - s * c1[0], b[1] - s * c1[1], b[2] - s * c1[2]];
        let nu = (dot3(u, u) + eps).sqrt();
        let c2 = [u[0] / nu, u[1] / nu, u[2] / nu];
        let c3 = cross3(c1, c2);
        for i in 0..3 {
            m[i * 3] = c1[i];
            m[i * 3 + 1] = c2[i];
            m[i * 3 + 2] = c3[i];
        }
    }
    Tensor::new(&shape, out)
}

fn mat3_mul<F: Scalar>(a: &[F], b: &[F], out: &mut [F]) {
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
        }
    }
}

fn fk_forward<F: Scalar>(rot: &Tensor<F>, root: &Tensor<F>, parents: &[Option<usize>], offsets: &[[F; 3]]) -> Result<(Tensor<F>, Vec<F>)> {
    let n = parents.len();
    if rot.ndim() != 4 || rot.shape()[1] != n || rot.shape()[2..] != [3, 3] || offsets.len() != n {
        return Err(mismatch("forward_kinematics", rot.shape(), &[n, 3, 3]));
    }
    let t = rot.shape()[0];
    if root.shape() != [t, 3] {
        return Err(mismatch("forward_kinematics", root.shape(), &[t, 3]));
    }
    for (j, p) in parents.iter().enumerate() {
        match p {
            Some(p) if *p >= j => return Err(NnError::Invalid(format!("joint {j} has parent {p}"))),
            None if j != 0 => return Err(NnError::Invalid(format!("joint {j} has no parent"))),
            _ => {}
        }
    }
    let mut globals = vec![F::zero(); t * n * 9];
    let mut pos = vec![F::zero(); t * n * 3];
    let rd = rot.data();
    for f in 0..t {
        for j in 0..n {
            let g = (f * n + j) * 9;
            let local = &rd[g..g + 9];
            match parents[j] {
                None => {
                    globals[g..g + 9].copy_from_slice(local);
                    pos[(f * n) * 3..(f * n) * 3 + 3].copy_from_slice(&root.data()[f * 3..f * 3 + 3]);
                }
                Some(p) => {
                    let gp = (f * n + p) * 9;
                    let (before, after) = globals.split_at_mut(g);
                    let parent = &before[gp..gp + 9];
                    mat3_mul(parent, local, &mut after[..9]);
                    let o = offsets[j];
                    for i in 0..3 {
                        pos[(f * n + j) * 3 + i] =
                            pos[(f * n + p) * 3 + i] + parent[i * 3] * o[0] + parent[i * 3 + 1] * o[1] + parent[i * 3 + 2] * o[2];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[t, n, 3], pos)?, globals))
}

fn attention_forward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    scale: F,
    key_valid: Option<&[bool]>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if q.ndim() != 3 || k.ndim() != 3 || v.ndim() != 3 {
        return Err(mismatch("attention", q.shape(), k.shape()));
    }
    let (b, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lk, dv) = (k.shape()[1], v.shape()[2]);
    if k.shape() != [b, lk, d] {
        return Err(mismatch("attention", q.shape(), k.shape()));
    }
    if v.shape()[..2] != [b, lk] {
        return Err(mismatch("attention", k.shape(), v.shape()));
    }
    let per_row = match key_valid {
        Some(mask) => {
            let rows = mask.len().checked_div(lk).unwrap_or(0);
            if lk == 0 || mask.len() % lk != 0 || rows == 0 || b % rows != 0 {
                return Err(mismatch("attention mask", &[mask.len()], &[b, lk]));
            }
            if let Some(row) = mask.chunks(lk).position(|r| !r.iter().any(|&x| x)) {
                return Err(NnError::AllMaskedRow { row });
            }
            b / rows
        }
        None if lk == 0 => return Err(NnError::AllMaskedRow { row: 0 }),
        None => 1,
    };
    let mut probs = vec![F::zero(); b * lq * lk];
    let mut out = vec![F::zero(); b * lq * dv];
    let masked = F::from_f64(MASK_VALUE);
    for i in 0..b {
        let p = &mut probs[i * lq * lk..(i + 1) * lq * lk];
        let (qs, ks) = (&q.data()[i * lq * d..(i + 1) * lq * d], &k.data()[i * lk * d..(i + 1) * lk * d]);
        F::gemm(lq, d, lk, qs, d, 1, ks, 1, d, p, lk, 1, F::zero());
        let mrow = key_valid.map(|m| &m[(i / per_row) * lk..(i / per_row + 1) * lk]);
        for row in p.chunks_mut(lk) {
            let mut max = F::neg_infinity();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if mrow.is_some_and(|m| !m[j]) { masked } else { *x * scale };
                max = max.max(*x);
            }
            let mut sum = F::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = F::one() / sum;
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        let vs = &v.data()[i * lk * dv..(i + 1) * lk * dv];
        F::gemm(lq, lk, dv, p, lk, 1, vs, dv, 1, &mut out[i * lq * dv..(i + 1) * lq * dv], dv, 1, F::zero());
    }
    Ok((Tensor::new(&[b, lq, dv], out)?, Tensor::new(&[b, lq, lk], probs)?))
}

// ---------------------------------------------------------------------------
// backward rules

fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    probs: &Tensor<F>,
    scale: F,
    g: &Tensor<F>,
) -> [Tensor<F>; 3] {
    let (b, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lk, dv) = (k.shape()[1], v.shape()[2]);
    let mut gq = vec![F::zero(); q.len()];
    let mut gk = vec![F::zero(); k.len()];
    let mut gv = vec![F::zero(); v.len()];
    let mut ds = vec![F::zero(); lq * lk];
    for i in 0..b {
        let p = &probs.data()[i * lq * lk..(i + 1) * lq * lk];
        let go = &g.data()[i * lq * dv..(i + 1) * lq * dv];
        let vs = &v.data()[i * lk * dv..(i + 1) * lk * dv];
        // dV = Pᵀ dO
        F::gemm(lk, lq, dv, p, 1, lk, go, dv, 1, &mut gv[i * lk * dv..(i + 1) * lk * dv], dv, 1, F::zero());
        // dP = dO Vᵀ, then the softmax Jacobian and the score scale
        F::gemm(lq, dv, lk, go, dv, 1, vs, 1, dv, &mut ds, lk, 1, F::zero());
        for (dr, pr) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
            let dot: F = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
            for (x, &pv) in dr.iter_mut().zip(pr) {
                *x = pv * (*x - dot) * scale;
            }
        }
        let qs = &q.data()[i * lq * d..(i + 1) * lq * d];
        let ks = &k.data()[i * lk * d..(i + 1) * lk * d];
        // dQ = dS K, dK = dSᵀ Q
        F::gemm(lq, lk, d, &ds, lk, 1, ks, d, 1, &mut gq[i * lq * d..(i + 1) * lq * d], d, 1, F::zero());
        F::gemm(lk, lq, d, &ds, 1, lk, qs, d, 1, &mut gk[i * lk * d..(i + 1) * lk * d], d, 1, F::zero());
    }
    [Tensor::new(q.shape(), gq).unwrap(), Tensor::new(k.shape(), gk).unwrap(), Tensor::new(v.shape(), gv).unwrap()]
}

fn backward_node<F: Scalar>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Vec<(usize, Tensor<F>)> {
    let val = |j: usize| &nodes[j].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a).shape(), |_, _| F::one())), (*b, reduce_to(g, val(*b).shape(), |_, _| F::one()))],
        Op::Sub(a, b) => vec![(*a, reduce_to(g, val(*a).shape(), |_, _| F::one())), (*b, reduce_to(g, val(*b).shape(), |_, _| -F::one()))],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let shape = g.shape();
            let sa = broadcast_strides(av.shape(), shape);
            let sb = broadcast_strides(bv.shape(), shape);
            let mut ga = vec![F::zero(); av.len()];
            let mut gb = vec![F::zero(); bv.len()];
            let gd = g.data();
            visit_broadcast(shape, &sa, &sb, |o, ia, ib| {
                ga[ia] += gd[o] * bv.data()[ib];
                gb[ib] += gd[o] * av.data()[ia];
            });
            vec![(*a, Tensor::new(av.shape(), ga).unwrap()), (*b, Tensor::new(bv.shape(), gb).unwrap())]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
        Op::MatMul(a, w) => {
            let (av, wv) = (val(*a), val(*w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = av.len() / k.max(1);
            let mut ga = vec![F::zero(); av.len()];
            F::gemm(m, n, k, g.data(), n, 1, wv.data(), 1, n, &mut ga, k, 1, F::zero());
            let mut gw = vec![F::zero(); wv.len()];
            F::gemm(k, m, n, av.data(), 1, k, g.data(), n, 1, &mut gw, n, 1, F::zero());
            vec![(*a, Tensor::new(av.shape(), ga).unwrap()), (*w, Tensor::new(wv.shape(), gw).unwrap())]
        }
        Op::Bmm { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, rsa, csa) = logical(av.shape(), *ta);
            let (_, n, rsb, csb) = logical(bv.shape(), *tb);
            let batch = av.shape()[0];
            let mut ga = vec![F::zero(); av.len()];
            let mut gb = vec![F::zero(); bv.len()];
            let (sa, sb, sg) = (m * k, k * n, m * n);
            for bi in 0..batch {
                let gs = &g.data()[bi * sg..(bi + 1) * sg];
                let a_s = &av.data()[bi * sa..(bi + 1) * sa];
                let b_s = &bv.data()[bi * sb..(bi + 1) * sb];
                // dA = G · Bᵀ written through A's logical strides
                F::gemm(m, n, k, gs, n, 1, b_s, csb, rsb, &mut ga[bi * sa..(bi + 1) * sa], rsa, csa, F::zero());
                // dB = Aᵀ · G
                F::gemm(k, m, n, a_s, csa, rsa, gs, n, 1, &mut gb[bi * sb..(bi + 1) * sb], rsb, csb, F::zero());
            }
            vec![(*a, Tensor::new(av.shape(), ga).unwrap()), (*b, Tensor::new(bv.shape(), gb).unwrap())]
        }
        Op::Softmax(a) => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![F::zero(); out.len()];
            if n > 0 {
                for ((y, gy), gxr) in out.data().chunks(n).zip(g.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: F = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] = y[j] * (gy[j] - dot);
                    }
                }
            }
            vec![(*a, Tensor::new(out.shape(), gx).unwrap())]
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let d = gam.len();
            let nd = F::from_f64(d as f64);
            let mut gx = vec![F::zero(); xv.len()];
            let mut gg = vec![F::zero(); d];
            let mut gbeta = vec![F::zero(); d];
            let mut xhat = vec![F::zero(); d];
            let mut gxhat = vec![F::zero(); d];
            for (r, ((row, gr), gxr)) in xv.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                let (mean, rstd) = stats[r];
                let mut m1 = F::zero();
                let mut m2 = F::zero();
                for k in 0..d {
                    xhat[k] = (row[k] - mean) * rstd;
                    gxhat[k] = gr[k] * gam[k];
                    gg[k] += gr[k] * xhat[k];
                    gbeta[k] += gr[k];
                    m1 += gxhat[k];
                    m2 += gxhat[k] * xhat[k];
                }
                m1 /= nd;
                m2 /= nd;
                for k in 0..d {
                    gxr[k] = rstd * (gxhat[k] - m1 - xhat[k] * m2);
                }
            }
            vec![
                (*x, Tensor::new(xv.shape(), gx).unwrap()),
                (*gamma, Tensor::new(&[d], gg).unwrap()),
                (*beta, Tensor::new(&[d], gbeta).unwrap()),
            ]
        }
        Op::Gelu(a) => {
            let av = val(*a);
            let data = av.data().iter().zip(g.data()).map(|(&x, &gy)| gy * gelu_grad(x)).collect();
            vec![(*a, Tensor::new(av.shape(), data).unwrap())]
        }
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            inputs
                .iter()
                .map(|&p| {
                    let len = val(p).shape()[*axis];
                    let part = g.narrow(*axis, start, len).unwrap();
                    start += len;
                    (p, part)
                })
                .collect()
        }
        Op::Slice { a, axis, start } => {
            let av = val(*a);
            let outer: usize = av.shape()[..*axis].iter().product();
            let inner: usize = av.shape()[*axis + 1..].iter().product();
            let dim = av.shape()[*axis];
            let len = g.shape()[*axis];
            let mut ga = vec![F::zero(); av.len()];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                let src = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(*a, Tensor::new(av.shape(), ga).unwrap())]
        }
        Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape()).unwrap())],
        Op::Permute { a, perm } => vec![(*a, permute_forward(g, &inverse_perm(perm)).unwrap())],
        Op::MaskedFill { a, mask, mask_shape } => {
            let shape = g.shape();
            let so = strides(shape);
            let sm = broadcast_strides(mask_shape, shape);
            let mut ga = g.data().to_vec();
            visit_broadcast(shape, &so, &sm, |o, _, im| {
                if mask[im] {
                    ga[o] = F::zero();
                }
            });
            vec![(*a, Tensor::new(shape, ga).unwrap())]
        }
        Op::Gather { a, axis, index } => {
            let av = val(*a);
            let outer: usize = av.shape()[..*axis].iter().product();
            let inner: usize = av.shape()[*axis + 1..].iter().product();
            let dim = av.shape()[*axis];
            let mut ga = vec![F::zero(); av.len()];
            for o in 0..outer {
                for (k, idx) in index.iter().enumerate() {
                    if let Some(i) = idx {
                        let dst = (o * dim + i) * inner;
                        let src = (o * index.len() + k) * inner;
                        for c in 0..inner {
                            ga[dst + c] += g.data()[src + c];
                        }
                    }
                }
            }
            vec![(*a, Tensor::new(av.shape(), ga).unwrap())]
        }
        Op::Sum(a) => {
            let gv = g.item();
            vec![(*a, Tensor::full(val(*a).shape(), gv))]
        }
        Op::Mean(a) => {
            let av = val(*a);
            let gv = g.item() / F::from_f64(av.len().max(1) as f64);
            vec![(*a, Tensor::full(av.shape(), gv))]
        }
        Op::SumSq(a) => {
            let gv = g.item() * F::from_f64(2.0);
            vec![(*a, val(*a).map(|x| x * gv))]
        }
        Op::Rot6dToMatrix(a) => vec![(*a, rot6d_backward(val(*a), g))],
        Op::Attention { q, k, v, probs, scale } => {
            attention_backward(val(*q), val(*k), val(*v), probs, *scale, g).into_iter().zip([*q, *k, *v]).map(|(t, i)| (i, t)).collect()
        }
        Op::ForwardKinematics { rot, root, parents, offsets, globals } => {
            let (gr, groot) = fk_backward(val(*rot), g, parents, offsets, globals);
            vec![(*rot, gr), (*root, groot)]
        }
    }
}

fn rot6d_backward<F: Scalar>(x: &Tensor<F>, g: &Tensor<F>) -> Tensor<F> {
    let eps = F::from_f64(GRAM_SCHMIDT_EPS);
    let mut gx = vec![F::zero(); x.len()];
    for ((r, gm), out) in x.data().chunks(6).zip(g.data().chunks(9)).zip(gx.chunks_mut(6)) {
        let a = [r[0], r[1], r[2]];
        let b = [r[3], r[4], r[5]];
        let na = (dot3(a, a) + eps).sqrt();
        let c1 = [a[0] / na, a[1] / na, a[2] / na];
        let s = dot3(b, c1);
        let u = [b[0] - s * c1[0], b[1] - s * c1[1], b[2] - s * c1[2]];
        let nu = (dot3(u, u) + eps).sqrt();
        let c2 = [u[0] / nu, u[1] / nu, u[2] / nu];

        let col = |j: usize| [gm[j], gm[3 + j], gm[6 + j]];
        let (mut d1, mut d2, d3) = (col(0), col(1), col(2));
        // c3 = c1 × c2
        let t1 = cross3(c2, d3);
        let t2 = cross3(d3, c1);
        for i in 0..3 {
            d1[i] += t1[i];
            d2[i] += t2[i];
        }
        // c2 = u / |u|
        let ud2 = dot3(u, d2);
        let nu3 = nu * nu * nu;
        let du = [d2[0] / nu - u[0] * ud2 / nu3, d2[1] / nu - u[1] * ud2 / nu3, d2[2] / nu - u[2] * ud2 / nu3];
        // u = b - (b·c1) c1
        let c1du = dot3(c1, du);
        let bdu = dot3(b, du);
        for i in 0..3 {
            out[3 + i] = du[i] - c1[i] * c1du;
            d1[i] += -s * du[i] - c1du * b[i];
        }
        // c1 = a / |a|
        let ad1 = dot3(a, d1);
        let _ = bdu;
        let na3 = na * na * na;
        for i in 0..3 {
            out[i] = d1[i] / na - a[i] * ad1 / na3;
        }
    }
    Tensor::new(x.shape(), gx).unwrap()
}

fn fk_backward<F: Scalar>(
    rot: &Tensor<F>,
    g: &Tensor<F>,
    parents: &[Option<usize>],
    offsets: &[[F; 3]],
    globals: &[F],
) -> (Tensor<F>, Tensor<F>) {
    let t = rot.shape()[0];
    let n = parents.len();
    let rd = rot.data();
    let mut g_rot = vec![F::zero(); rot.len()];
    let mut g_root = vec![F::zero(); t * 3];
    let mut gpos = g.data().to_vec();
    let mut gglob = vec![F::zero(); t * n * 9];
    for f in 0..t {
        for j in (0..n).rev() {
            let gi = (f * n + j) * 9;
            match parents[j] {
                None => {
                    for i in 0..3 {
                        g_root[f * 3 + i] += gpos[(f * n + j) * 3 + i];
                    }
                    for k in 0..9 {
                        g_rot[gi + k] += gglob[gi + k];
                    }
                }
                Some(p) => {
                    let gp = (f * n + p) * 9;
                    let dp = [gpos[(f * n + j) * 3], gpos[(f * n + j) * 3 + 1], gpos[(f * n + j) * 3 + 2]];
                    let o = offsets[j];
                    let local = &rd[gi..gi + 9];
                    let parent = &globals[gp..gp + 9];
                    for r in 0..3 {
                        gpos[(f * n + p) * 3 + r] += dp[r];
                        for c in 0..3 {
                            // P_j = P_p + G_p o_j
                            let mut acc = dp[r] * o[c];
                            // G_j = G_p R_j  ->  dG_p += dG_j R_jᵀ
                            for k in 0..3 {
                                acc += gglob[gi + r * 3 + k] * local[c * 3 + k];
                            }
                            gglob[gp + r * 3 + c] += acc;
                        }
                    }
                    // dR_j = G_pᵀ dG_j
                    for r in 0..3 {
                        for c in 0..3 {
                            let mut acc = F::zero();
                            for k in 0..3 {
                                acc += parent[k * 3 + r] * gglob[gi + k * 3 + c];
                            }
                            g_rot[gi + r * 3 + c] += acc;
                        }
                    }
                }
            }
        }
    }
    (Tensor::new(rot.shape(), g_rot).unwrap(), Tensor::new(&[t, 3], g_root).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5], 0.3));
        let y = x.softmax().unwrap();
        for v in y.value().data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[3, 4], 7.0));
        let y = x.layer_norm(g.constant(Tensor::ones(&[4])), g.constant(Tensor::zeros(&[4])), 1e-5).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_sq_gradient_is_twice_input() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let grads = g.backward(x.sum_sq()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        let y = x.masked_fill(&[false, true, false, true, false, false], &[2, 3]).unwrap().softmax().unwrap();
        let v = y.value();
        assert!(v.data()[1].abs() < 1e-12 && v.data()[3].abs() < 1e-12);
        for row in v.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_pads_with_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = x.gather(0, &[Some(2), None, Some(0)]).unwrap();
        assert_eq!(y.value().data(), &[5., 6., 0., 0., 1., 2.]);
    }

    #[test]
    fn rot6d_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[6], vec![2., 0., 0., 0., 3., 0.]).unwrap());
        let m = x.rot6d_to_matrix().unwrap();
        let v = m.value();
        let expected = [1., 0., 0., 0., 1., 0., 0., 0., 1.];
        for (a, b) in v.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
