//! Central-difference checks of every differentiable op, in f64.

use cdc_tensor::{CustomOp, Graph64, Tensor64, Unary, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Build a scalar from the given leaves; compare the analytic gradient of
/// each leaf with a central difference.
fn check(inputs: &[Tensor64], f: impl Fn(&mut Graph64, &[Var]) -> Var) {
    let mut g = Graph64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |ins: &[Tensor64]| -> f64 {
        let mut g = Graph64::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };

    let h = 1e-6;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor64::zeros(input.shape()));
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let tol = 1e-5 * (1.0 + numeric.abs());
            assert!((a - numeric).abs() < tol, "input {i} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn rand(shape: &[usize], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum with fixed random weights, so the check sees a generic cotangent.
fn project(g: &mut Graph64, y: Var, seed: u64) -> Var {
    let w = rand(g.shape(y), seed + 1000);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

#[test]
fn elementwise_binary() {
    let a = rand(&[2, 3], 1);
    let b = rand(&[2, 3], 2).map(|v| v.abs() + 0.5);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let q = g.div(m, v[1]);
        let q = g.div(q, v[1]);
        let q = g.scale(q, 1.7);
        let q = g.add_scalar(q, 0.3);
        project(g, q, 3)
    });
}

#[test]
fn unary_functions() {
    let x = rand(&[10], 4);
    for f in [Unary::Silu, Unary::Tanh, Unary::Sigmoid, Unary::Softplus, Unary::LeakyRelu(0.2), Unary::Square, Unary::Neg, Unary::Exp] {
        check(&[x.clone()], |g, v| {
            let y = g.unary(v[0], f);
            project(g, y, 5)
        });
    }
    let pos = x.map(|v| v.abs() + 0.3);
    for f in [Unary::Sqrt, Unary::Ln, Unary::Abs] {
        check(&[pos.clone()], |g, v| {
            let y = g.unary(v[0], f);
            project(g, y, 6)
        });
    }
}

#[test]
fn conv_and_transposed_conv() {
    for (k, s, p) in [(3, 1, 1), (3, 1, 0), (5, 1, 3), (5, 2, 2), (1, 1, 0), (4, 2, 1)] {
        let x = rand(&[2, 3, 6, 6], 7);
        let w = rand(&[4, 3, k, k], 8);
        let b = rand(&[4], 9);
        check(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), s, p);
            project(g, y, 10)
        });
    }
    let x = rand(&[2, 3, 4, 4], 11);
    let w = rand(&[3, 2, 4, 4], 12);
    let b = rand(&[2], 13);
    check(&[x, w, b], |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1);
        project(g, y, 14)
    });
}

#[test]
fn group_norm() {
    let x = rand(&[2, 4, 3, 3], 15);
    let gamma = rand(&[4], 16);
    let beta = rand(&[4], 17);
    check(&[x, gamma, beta], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2);
        project(g, y, 18)
    });
}

#[test]
fn structural_ops() {
    let a = rand(&[2, 2, 4, 4], 19);
    let b = rand(&[2, 3, 4, 4], 20);
    let c = rand(&[2, 5], 21);
    check(&[a, b, c], |g, v| {
        let cat = g.concat(&[v[0], v[1]]);
        let cat = g.add_channel(cat, v[2]);
        let up = g.upsample2x(cat);
        let down = g.avg_pool2x(up);
        let down = g.avg_pool2x(down);
        let r = g.reshape(down, &[2, 5, 4]);
        let r = g.slice_channels(r, 1, 3);
        project(g, r, 22)
    });
    // Odd spatial size drops the trailing row and column.
    check(&[rand(&[1, 1, 5, 3], 23)], |g, v| {
        let y = g.avg_pool2x(v[0]);
        project(g, y, 24)
    });
}

#[test]
fn linear_bmm_softmax() {
    let x = rand(&[3, 4], 25);
    let w = rand(&[5, 4], 26);
    let b = rand(&[5], 27);
    check(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        project(g, y, 28)
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand(&[2, 4, 3], 29) } else { rand(&[2, 3, 4], 29) };
        let b = if tb { rand(&[2, 5, 4], 30) } else { rand(&[2, 4, 5], 30) };
        check(&[a, b], |g, v| {
            let y = g.bmm(v[0], v[1], ta, tb);
            let y = g.softmax_last(y);
            project(g, y, 31)
        });
    }
}

#[test]
fn reductions_and_per_sample() {
    let x = rand(&[3, 2, 2], 32);
    let w = rand(&[3], 33);
    check(&[x, w], |g, v| {
        let y = g.mul_per_sample(v[0], v[1]);
        let m = g.mean_per_sample(y);
        let m = project(g, m, 34);
        let a = g.mean(v[0]);
        let s = g.add(m, a);
        g.sum(s)
    });
}

#[test]
fn lower_bound_passes_upward_gradients() {
    let mut g = Graph64::new();
    let x = g.leaf(Tensor64::from_vec(&[3], vec![-1.0, 0.5, 2.0]));
    let y = g.lower_bound(x, 1.0);
    assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0]);
    // Pushing the loss down wants y larger: negative cotangent passes through.
    let w = g.constant(Tensor64::from_vec(&[3], vec![-1.0, 1.0, 1.0]));
    let p = g.mul(y, w);
    let s = g.sum(p);
    let grads = g.backward(s);
    assert_eq!(grads.wrt(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
}

struct Cube;

impl CustomOp<f64> for Cube {
    fn name(&self) -> &'static str {
        "cube"
    }

    fn backward(&self, inputs: &[&Tensor64], _output: &Tensor64, grad: &Tensor64, _needs: &[bool]) -> Vec<Option<Tensor64>> {
        vec![Some(grad.zip_map(inputs[0], |g, x| 3.0 * x * x * g))]
    }
}

#[test]
fn custom_op_and_shared_subexpressions() {
    check(&[rand(&[4], 35)], |g, v| {
        let value = g.value(v[0]).map(|x| x * x * x);
        let c = g.custom(&[v[0]], value, Box::new(Cube));
        // `v[0]` is used twice; both paths must accumulate.
        let s = g.add(c, v[0]);
        project(g, s, 36)
    });
}

#[test]
fn params_are_cached_and_constants_skip_gradients() {
    let mut store = cdc_tensor::ParamStore::<f64>::new();
    let id = store.add("w", Tensor64::from_vec(&[2], vec![1.0, 2.0]));
    let mut g = Graph64::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let c = g.constant(Tensor64::from_vec(&[2], vec![3.0, 4.0]));
    let p = g.mul(a, c);
    let s = g.sum(p);
    assert!(!g.needs_grad(c));
    let grads = g.backward(s);
    assert!(grads.wrt(c).is_none());
    assert_eq!(grads.param(id).unwrap().data(), &[3.0, 4.0]);
}
