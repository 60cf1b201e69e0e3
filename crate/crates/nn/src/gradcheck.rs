//! Finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the gradient of `f` at `x` with central differences.
///
/// Returns the maximum elementwise relative error
/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn grad_check<Func>(f: Func, x: &Tensor<f64>) -> Result<f64>
where
    Func: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let g = Graph::new();
        let v = g.input(t);
        let out = f(&g, v)?;
        let y = out.value().item();
        Ok(y)
    };
    let g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&g, v)?;
    let grads = g.backward(out)?;
    let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * STEP);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Check parameter gradients of a scalar loss.
///
/// At most `per_param` coordinates of every parameter tensor are probed
/// (evenly spaced); `None` checks them all.
pub fn grad_check_params<Func>(store: &ParamStore<f64>, loss: Func, per_param: Option<usize>) -> Result<GradCheckReport>
where
    Func: for<'g> Fn(&'g Graph<f64>, &'g ParamStore<f64>) -> Result<Var<'g, f64>>,
{
    let g = Graph::new();
    let out = loss(&g, store)?;
    let grads = g.backward(out)?.param_grads(store.len());
    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| -> Result<f64> {
        let g = Graph::new();
        let out = loss(&g, work)?;
        let y = out.value().item();
        Ok(y)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in store.ids() {
        let len = store.get(id).len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        for i in picks {
            let base = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = base + STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = base - STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = base;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(id).map(|t| t.data()[i]).unwrap_or(0.0);
            worst = worst.max(rel_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_error: worst, checked })
}

/// Convenience: id-sorted parameter names whose gradient is identically zero.
pub fn zero_gradient_params(store: &ParamStore<f64>, grads: &crate::params::ParamGrads<f64>) -> Vec<String> {
    store
        .ids()
        .filter(|&id: &ParamId| grads.get(id).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)))
        .map(|id| store.name(id).to_string())
        .collect()
}

type UnaryOp<'a> = dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>> + 'a;

/// Finite-difference checks of every differentiable operation on small random
/// inputs, as `(name, max relative error)` pairs.
pub fn op_suite() -> Result<Vec<(String, f64)>> {
    use crate::layers::{attention_pool, dropout, Ctx, MultiHeadAttention};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let rng = |seed: u64| ChaCha8Rng::seed_from_u64(seed);
    let rand = |shape: &[usize], seed: u64| Tensor::<f64>::uniform(shape, -1.0, 1.0, &mut rng(seed));
    // Contract an output with a fixed random tensor so every entry matters.
    fn project<'g>(v: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
        let w = v.graph().constant(Tensor::uniform(&v.shape(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
        Ok(v.mul(w)?.sum())
    }
    let mut out = Vec::new();
    let mut check = |name: &str, x: Tensor<f64>, f: &UnaryOp<'_>| -> Result<()> {
        out.push((name.to_string(), grad_check(f, &x)?));
        Ok(())
    };

    let other = rand(&[3, 4], 11);
    let row = rand(&[4], 12);
    check("add", rand(&[3, 4], 1), &|g, x| project(x.add(g.constant(other.clone()))?, 99))?;
    check("add broadcast", rand(&[4], 2), &|g, x| project(g.constant(other.clone()).add(x)?, 98))?;
    check("sub broadcast lhs", rand(&[2, 3, 4], 3), &|g, x| project(x.sub(g.constant(row.clone()))?, 97))?;
    check("sub broadcast rhs", rand(&[3, 1], 4), &|g, x| project(g.constant(other.clone()).sub(x)?, 96))?;
    check("mul", rand(&[3, 4], 5), &|g, x| project(x.mul(g.constant(other.clone()))?, 95))?;
    check("mul broadcast", rand(&[1, 4], 6), &|g, x| project(g.constant(other.clone()).mul(x)?, 94))?;
    check("mul self", rand(&[5], 7), &|_, x| project(x.mul(x)?, 93))?;
    check("scale", rand(&[5], 8), &|_, x| project(x.scale(-2.5), 92))?;
    check("gelu", rand(&[10], 9), &|_, x| project(x.gelu(), 91))?;
    check("sum", rand(&[6], 10), &|_, x| Ok(x.sum().scale(3.0)))?;
    check("mean", rand(&[6], 13), &|_, x| Ok(x.mean().scale(3.0)))?;
    check("sum_sq", rand(&[6], 14), &|_, x| Ok(x.sum_sq()))?;
    check("dropout", rand(&[12], 15), &|_, x| project(dropout(x, 0.3, &mut rng(16))?, 90))?;

    let w = rand(&[4, 3], 21);
    let a = rand(&[2, 5, 4], 22);
    check("matmul lhs", rand(&[2, 5, 4], 23), &|g, x| project(x.matmul(g.constant(w.clone()))?, 89))?;
    check("matmul weight", rand(&[4, 3], 24), &|g, x| project(g.constant(a.clone()).matmul(x)?, 88))?;
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let ashape = if ta { [2, 4, 5] } else { [2, 5, 4] };
        let bshape = if tb { [2, 3, 4] } else { [2, 4, 3] };
        let bval = rand(&bshape, 25);
        let aval = rand(&ashape, 26);
        check(&format!("bmm lhs ta={ta} tb={tb}"), rand(&ashape, 27), &|g, x| project(x.bmm(g.constant(bval.clone()), ta, tb)?, 87))?;
        check(&format!("bmm rhs ta={ta} tb={tb}"), rand(&bshape, 28), &|g, x| project(g.constant(aval.clone()).bmm(x, ta, tb)?, 86))?;
    }

    check("softmax", rand(&[3, 5], 31), &|_, x| project(x.softmax()?, 85))?;
    let mask = [false, true, false, false, false, true, true, false, false, false];
    check("masked softmax", rand(&[2, 3, 5], 32), &|_, x| project(x.masked_fill(&mask, &[2, 1, 5])?.softmax()?, 84))?;
    let gamma = rand(&[6], 33);
    let beta = rand(&[6], 34);
    let x0 = rand(&[4, 6], 35);
    check("layer_norm x", x0.clone(), &|g, x| project(x.layer_norm(g.constant(gamma.clone()), g.constant(beta.clone()), 1e-5)?, 83))?;
    check("layer_norm gamma", gamma.clone(), &|g, x| project(g.constant(x0.clone()).layer_norm(x, g.constant(beta.clone()), 1e-5)?, 82))?;
    check("layer_norm beta", beta.clone(), &|g, x| project(g.constant(x0.clone()).layer_norm(g.constant(gamma.clone()), x, 1e-5)?, 81))?;

    let cat = rand(&[2, 2, 3], 41);
    check("concat", rand(&[2, 3, 3], 42), &|g, x| project(Var::concat(&[x, g.constant(cat.clone()), x], 1)?, 80))?;
    check("slice", rand(&[2, 5, 3], 43), &|_, x| project(x.slice(1, 1, 3)?, 79))?;
    check("reshape", rand(&[2, 6], 44), &|_, x| project(x.reshape(&[3, 4])?, 78))?;
    check("permute", rand(&[2, 3, 4], 45), &|_, x| project(x.permute(&[2, 0, 1])?, 77))?;
    check("transpose", rand(&[2, 3, 4], 47), &|_, x| project(x.transpose(0, 2)?, 76))?;
    check("gather", rand(&[2, 4, 3], 46), &|_, x| project(x.gather(1, &[Some(3), None, Some(0), Some(3)])?, 75))?;

    check("rot6d_to_matrix", rand(&[4, 6], 51), &|_, x| project(x.rot6d_to_matrix()?, 74))?;
    let parents = [None, Some(0), Some(1), Some(0), Some(3)];
    let offsets = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.3, 0.8, 0.1], [0.5, -0.2, 0.0], [0.0, -0.7, 0.2]];
    let root = rand(&[3, 3], 52);
    let rot6 = rand(&[3, 5, 6], 53);
    check("forward_kinematics rotations", rot6.clone(), &|g, x| {
        project(x.rot6d_to_matrix()?.forward_kinematics(g.constant(root.clone()), &parents, &offsets)?, 73)
    })?;
    check("forward_kinematics root", root.clone(), &|g, x| {
        project(g.constant(rot6.clone()).rot6d_to_matrix()?.forward_kinematics(x, &parents, &offsets)?, 72)
    })?;

    let queries = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng(61));
    let tokens = rand(&[2, 5, 4], 62);
    let valid = [true, true, false, true, false, true, false, false, false, false];
    check("attention_pool tokens", tokens.clone(), &|g, x| project(attention_pool(x, g.constant(queries.clone()), Some(&valid))?, 71))?;
    check("attention_pool queries", queries.clone(), &|g, x| project(attention_pool(g.constant(tokens.clone()), x, Some(&valid))?, 70))?;
    let kk = rand(&[4, 5, 3], 67);
    let vv = rand(&[4, 5, 2], 68);
    let qq = rand(&[4, 3, 3], 69);
    check("attention q", qq.clone(), &|g, x| project(x.attention(g.constant(kk.clone()), g.constant(vv.clone()), 0.7, Some(&valid))?, 60))?;
    check("attention k", kk.clone(), &|g, x| project(g.constant(qq.clone()).attention(x, g.constant(vv.clone()), 0.7, Some(&valid))?, 61))?;
    check("attention v", vv.clone(), &|g, x| project(g.constant(qq.clone()).attention(g.constant(kk.clone()), x, 0.7, None)?, 62))?;

    let mut store = ParamStore::<f64>::new();
    let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng(63))?;
    let kv = rand(&[2, 5, 4], 64);
    check("multi_head_attention query", rand(&[2, 3, 4], 65), &|g, x| {
        let ctx = Ctx::new(g, &store);
        let kv = g.constant(kv.clone());
        project(mha.forward(&ctx, x, kv, kv, Some(&valid))?, 59)
    })?;
    check("multi_head_attention kv", kv.clone(), &|g, x| {
        let ctx = Ctx::new(g, &store);
        let q = g.constant(rand(&[2, 3, 4], 66));
        project(mha.forward(&ctx, q, x, x, Some(&valid))?, 58)
    })?;
    let report = grad_check_params(
        &store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            let x = g.constant(kv.clone());
            project(mha.forward(&ctx, x, x, x, Some(&valid))?, 57)
        },
        None,
    )?;
    out.push(("multi_head_attention params".into(), report.max_rel_error));
    Ok(out)
}
