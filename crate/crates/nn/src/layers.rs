//! Neural building blocks over [`Graph`] variables.
//!
//! Layers only hold [`ParamId`]s; the values live in a [`ParamStore`] that is
//! bound into a graph through a [`Ctx`] for each forward pass.

use rand::Rng;

use crate::error::{mismatch, NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A graph paired with the parameter store it reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'g, 's, F> {
    pub graph: &'g Graph<F>,
    pub store: &'s ParamStore<F>,
}

impl<'g, 's, F: Scalar> Ctx<'g, 's, F> {
    pub fn new(graph: &'g Graph<F>, store: &'s ParamStore<F>) -> Self {
        Self { graph, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, F> {
        self.graph.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<F>) -> Var<'g, F> {
        self.graph.constant(t)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_linear_weight(format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let y = x.matmul(ctx.p(self.weight))?;
        match self.bias {
            Some(b) => y.add(ctx.p(b)),
            None => Ok(y),
        }
    }

    /// Set weight and bias to zero.
    pub fn zero_init<F: Scalar>(&self, store: &mut ParamStore<F>) {
        store.get_mut(self.weight).data_mut().iter_mut().for_each(|w| *w = F::zero());
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().iter_mut().for_each(|w| *w = F::zero());
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            eps: 1e-5,
        })
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), self.eps)
    }
}

/// Two linear layers with GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng)?,
        })
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        let h = self.fc1.forward(ctx, x)?.gelu();
        self.fc2.forward(ctx, h)
    }
}

/// Multiply by a freshly sampled inverted-dropout mask.
pub fn dropout<'g, F: Scalar, R: Rng + ?Sized>(x: Var<'g, F>, p: f64, rng: &mut R) -> Result<Var<'g, F>> {
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let keep = F::from_f64(1.0 / (1.0 - p));
    let mask: Vec<F> = (0..shape.iter().product::<usize>()).map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep }).collect();
    x.mul(x.graph().constant(Tensor::new(&shape, mask)?))
}

/// Standard multi-head scaled dot-product attention with in/out projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::HeadsDivisibility { dim, heads });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `query: [B, Lq, D]`, `key`/`value: [B, Lk, D]`, `key_valid: [B * Lk]`.
    pub fn forward<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        query: Var<'g, F>,
        key: Var<'g, F>,
        value: Var<'g, F>,
        key_valid: Option<&[bool]>,
    ) -> Result<Var<'g, F>> {
        let qs = query.shape();
        let ks = key.shape();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(mismatch("multi_head_attention", &qs, &ks));
        }
        if value.shape() != ks {
            return Err(mismatch("multi_head_attention", &ks, &value.shape()));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |x: Var<'g, F>, len: usize| -> Result<Var<'g, F>> {
            x.reshape(&[b, len, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, len, dh])
        };
        let q = split(self.q.forward(ctx, query)?, lq)?;
        let k = split(self.k.forward(ctx, key)?, lk)?;
        let v = split(self.v.forward(ctx, value)?, lk)?;
        let scale = 1.0 / (dh as f64).sqrt();
        if let Some(valid) = key_valid {
            if valid.len() != b * lk {
                return Err(mismatch("attention mask", &[valid.len()], &[b, lk]));
            }
        }
        let out = q.attention(k, v, scale, key_valid)?.reshape(&[b, h, lq, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, lq, self.dim])?;
        self.o.forward(ctx, out)
    }

    /// Attention weights `[B * heads, Lq, Lk]`, for inspection.
    pub fn weights<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, '_, F>,
        query: Var<'g, F>,
        key: Var<'g, F>,
        key_valid: Option<&[bool]>,
    ) -> Result<Var<'g, F>> {
        let (qs, ks) = (query.shape(), key.shape());
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.dim || ks[2] != self.dim {
            return Err(mismatch("multi_head_attention", &qs, &ks));
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let (h, dh) = (self.heads, self.dim / self.heads);
        let split = |x: Var<'g, F>, len: usize| -> Result<Var<'g, F>> {
            x.reshape(&[b, len, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, len, dh])
        };
        let q = split(self.q.forward(ctx, query)?, lq)?;
        let k = split(self.k.forward(ctx, key)?, lk)?;
        let mut scores = q.bmm(k, false, true)?.scale(1.0 / (dh as f64).sqrt());
        if let Some(valid) = key_valid {
            if valid.len() != b * lk {
                return Err(mismatch("attention mask", &[valid.len()], &[b, lk]));
            }
            if let Some(row) = valid.chunks(lk.max(1)).position(|r| !r.iter().any(|&v| v)) {
                return Err(NnError::AllMaskedRow { row });
            }
            let mut masked = Vec::with_capacity(b * h * lk);
            for row in valid.chunks(lk) {
                for _ in 0..h {
                    masked.extend(row.iter().map(|&v| !v));
                }
            }
            scores = scores.masked_fill(&masked, &[b * h, 1, lk])?;
        }
        scores.softmax()
    }
}

/// Attention pooling with learnable queries.
///
/// For every row of `tokens: [R, n, D]` and query `q_i` (a row of
/// `queries: [m, D]`), computes `α_ij = softmax_j(q_i·x_j / √D)` over the valid
/// tokens and returns `z_i = Σ_j α_ij x_j` as `[R, m, D]`.
pub fn attention_pool<'g, F: Scalar>(tokens: Var<'g, F>, queries: Var<'g, F>, valid: Option<&[bool]>) -> Result<Var<'g, F>> {
    let ts = tokens.shape();
    let qs = queries.shape();
    if ts.len() != 3 || qs.len() != 2 || ts[2] != qs[1] {
        return Err(mismatch("attention_pool", &ts, &qs));
    }
    let (r, n, d) = (ts[0], ts[1], ts[2]);
    let mut scores = tokens.matmul(queries.transpose(0, 1)?)?.permute(&[0, 2, 1])?.scale(1.0 / (d as f64).sqrt());
    match valid {
        Some(valid) => {
            if valid.len() != r * n {
                return Err(mismatch("attention_pool mask", &[valid.len()], &[r, n]));
            }
            if let Some(row) = valid.chunks(n.max(1)).position(|c| !c.iter().any(|&v| v)) {
                return Err(NnError::NoValidTokens { row });
            }
            let masked: Vec<bool> = valid.iter().map(|&v| !v).collect();
            scores = scores.masked_fill(&masked, &[r, 1, n])?;
        }
        None if n == 0 => return Err(NnError::NoValidTokens { row: 0 }),
        None => {}
    }
    scores.softmax()?.bmm(tokens, false, false)
}

/// Position-wise feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<F>, name: &str, dim: usize, mult: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { mlp: Mlp::new(store, name, dim, dim * mult, dim, rng)? })
    }

    pub fn forward<'g, F: Scalar>(&self, ctx: &Ctx<'g, '_, F>, x: Var<'g, F>) -> Result<Var<'g, F>> {
        self.mlp.forward(ctx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = MultiHeadAttention::new(&mut store, "a", 10, 3, &mut rng).unwrap_err();
        assert!(matches!(err, NnError::HeadsDivisibility { dim: 10, heads: 3 }));
    }

    #[test]
    fn single_key_attention_ignores_query() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let kv = g.constant(Tensor::uniform(&[1, 1, 8], -1.0, 1.0, &mut rng));
        let q1 = g.constant(Tensor::uniform(&[1, 1, 8], -1.0, 1.0, &mut rng));
        let q2 = g.constant(Tensor::uniform(&[1, 1, 8], -1.0, 1.0, &mut rng));
        let a = mha.forward(&ctx, q1, kv, kv, None).unwrap();
        let b = mha.forward(&ctx, q2, kv, kv, None).unwrap();
        let expected = mha.o.forward(&ctx, mha.v.forward(&ctx, kv).unwrap()).unwrap();
        assert!(a.value().max_abs_diff(&b.value()) < 1e-12);
        assert!(a.value().max_abs_diff(&expected.value()) < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng));
        let valid = [true, false, true, false, false, false];
        let err = mha.forward(&ctx, x, x, x, Some(&valid)).unwrap_err();
        assert!(matches!(err, NnError::AllMaskedRow { row: 1 }));
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid_keys() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng));
        let valid = [true, false, true, true, true, false];
        let w = mha.weights(&ctx, x, x, Some(&valid)).unwrap();
        let w = w.value();
        for (r, row) in w.data().chunks(3).enumerate() {
            let b = r / (2 * 3);
            let masked: f64 = row.iter().zip(&valid[b * 3..b * 3 + 3]).filter(|(_, v)| !**v).map(|(x, _)| *x).sum();
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(masked.abs() < 1e-12);
        }
    }

    #[test]
    fn fused_attention_matches_weights_times_values() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng));
        let valid = [true, false, true, true, true, false];
        let fused = mha.forward(&ctx, x, x, x, Some(&valid)).unwrap();
        let w = mha.weights(&ctx, x, x, Some(&valid)).unwrap();
        let v = mha.v.forward(&ctx, x).unwrap().reshape(&[2, 3, 2, 2]).unwrap().permute(&[0, 2, 1, 3]).unwrap();
        let manual = w
            .bmm(v.reshape(&[4, 3, 2]).unwrap(), false, false)
            .unwrap()
            .reshape(&[2, 2, 3, 2])
            .unwrap()
            .permute(&[0, 2, 1, 3])
            .unwrap()
            .reshape(&[2, 3, 4])
            .unwrap();
        let manual = mha.o.forward(&ctx, manual).unwrap();
        assert!(fused.value().max_abs_diff(&manual.value()) < 1e-12);
    }

    #[test]
    fn pooling_a_single_token_returns_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::uniform(&[2, 1, 6], -1.0, 1.0, &mut rng));
        let q = g.constant(Tensor::uniform(&[3, 6], 0.0, 1.0, &mut rng));
        let z = attention_pool(x, q, None).unwrap();
        let z = z.value();
        let xv = x.value();
        for r in 0..2 {
            for i in 0..3 {
                for d in 0..6 {
                    assert!((z.data()[(r * 3 + i) * 6 + d] - xv.data()[r * 6 + d]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_identical_tokens_is_identity() {
        let g = Graph::<f64>::new();
        let token = [0.5, -1.0, 2.0, 0.25];
        let x = g.constant(Tensor::new(&[1, 5, 4], token.repeat(5)).unwrap());
        let q = g.constant(Tensor::new(&[2, 4], vec![0.1, 0.9, 0.3, 0.7, 0.2, 0.4, 0.6, 0.8]).unwrap());
        let z = attention_pool(x, q, None).unwrap();
        for (i, v) in z.value().data().iter().enumerate() {
            assert!((v - token[i % 4]).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_without_valid_tokens_errors() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 2, 4]));
        let q = g.constant(Tensor::ones(&[1, 4]));
        let err = attention_pool(x, q, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, NnError::NoValidTokens { row: 1 }));
    }
}
