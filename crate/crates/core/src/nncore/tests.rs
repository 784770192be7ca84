use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks reverse-mode gradients of `f` against central differences.
/// `f` builds a graph from the given parameter tensors and returns a scalar.
fn grad_check(params: Vec<(&str, Tensor)>, f: impl Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let eval = |ps: &[(&str, Tensor)]| -> (f64, Gradients) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|(n, t)| g.param(n, t.clone()).unwrap()).collect();
        let out = f(&mut g, &ids);
        let loss = g.value(out).item();
        (loss, g.backward(out).unwrap())
    };
    let (_, grads) = eval(&params);
    let eps = 1e-5;
    for (pi, (name, t)) in params.iter().enumerate() {
        let analytic = grads.get(name).unwrap();
        for i in 0..t.len() {
            let mut plus = params.clone();
            plus[pi].1.data_mut()[i] += eps;
            let mut minus = params.clone();
            minus[pi].1.data_mut()[i] -= eps;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let an = analytic.data()[i];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / scale < 1e-4,
                "{name}[{i}]: analytic {an} vs finite difference {fd}"
            );
        }
    }
}

/// Weights the output of an op by fixed random coefficients and sums, so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.input(rand_tensor(&mut rng, &shape)).unwrap();
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn identity_forward() {
    let mut inputs = HashMap::new();
    inputs.insert("x".to_string(), Tensor::vector(vec![2.0, 3.0]));
    let mut g = Graph::new();
    let x = g.bind(&inputs, "x").unwrap();
    assert_eq!(g.value(x).data(), &[2.0, 3.0]);
    assert!(matches!(g.bind(&inputs, "y"), Err(NnError::UnboundInput(_))));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let z = g.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let y = g.softmax(z, &Mask::None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn matmul_with_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::new();
    let an = g.input(a.clone()).unwrap();
    let i = g.input(Tensor::identity(3)).unwrap();
    let y = g.matmul(an, i).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 6.0);
}

#[test]
fn softmax_onehot_gradient_at_zero() {
    // loss = softmax(z) . e_0 at z = 0 -> d/dz = p0 (e0 - p) = [0.25, -0.25]
    let mut g = Graph::new();
    let z = g.param("z", Tensor::vector(vec![0.0, 0.0])).unwrap();
    let y = g.softmax(z, &Mask::None).unwrap();
    let oh = g.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
    let p = g.mul(y, oh).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    let d = grads.get("z").unwrap().data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] + 0.25).abs() < 1e-15);
}

#[test]
fn errors_surface() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
    assert!(matches!(g.backward(a), Err(NnError::NonScalarLoss(_))));
    let big = g.input(Tensor::vector(vec![1e300])).unwrap();
    assert!(matches!(g.mul(big, big), Err(NnError::NonFinite("mul"))));
    let t = g.input(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(
        g.embedding(t, &[5], &[1]),
        Err(NnError::IndexOutOfRange { .. })
    ));
}

#[test]
fn layernorm_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 4], 7.0)).unwrap();
    let gm = g.input(Tensor::full(&[4], 1.0)).unwrap();
    let bt = g.input(Tensor::zeros(&[4])).unwrap();
    let y = g.layernorm(x, gm, bt, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn causal_softmax_masks_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let s = g.input(rand_tensor(&mut rng, &[2, 5, 5])).unwrap();
    let y = g.softmax(s, &Mask::Causal).unwrap();
    let v = g.value(y);
    for r in 0..10 {
        let row = v.row(r);
        let t = r % 5;
        assert!(row[t + 1..].iter().all(|&p| p == 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_vanishes_with_margin() {
    let mut g = Graph::new();
    let l = g.input(Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap()).unwrap();
    let ce = g.cross_entropy(l, &[0]).unwrap();
    assert!(g.value(ce).item() < 1e-20);
    let u = g.input(Tensor::zeros(&[2, 13])).unwrap();
    let ce = g.cross_entropy(u, &[4, IGNORE_INDEX]).unwrap();
    assert!((g.value(ce).item() - 13f64.ln()).abs() < 1e-12);
}

#[test]
fn op_set_is_complete() {
    let ops = required_op_set();
    for k in [
        OpKind::MatMul,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::CrossEntropy,
        OpKind::Embedding,
    ] {
        assert!(ops.contains(&k));
    }
}

// Gradient checks, one per op kind.

#[test]
fn gradcheck_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    grad_check(
        vec![
            ("a", rand_tensor(&mut rng, &[2, 3, 4])),
            ("b", rand_tensor(&mut rng, &[4, 5])),
        ],
        |g, p| {
            let y = g.matmul(p[0], p[1]).unwrap();
            weighted_sum(g, y, 11)
        },
    );
}

#[test]
fn gradcheck_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trans in [false, true] {
        let bshape = if trans { [2, 5, 3] } else { [2, 3, 5] };
        grad_check(
            vec![
                ("a", rand_tensor(&mut rng, &[2, 4, 3])),
                ("b", rand_tensor(&mut rng, &bshape)),
            ],
            |g, p| {
                let y = g.bmm(p[0], p[1], trans).unwrap();
                weighted_sum(g, y, 13)
            },
        );
    }
}

#[test]
fn gradcheck_elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    grad_check(
        vec![
            ("a", rand_tensor(&mut rng, &[3, 4])),
            ("b", rand_tensor(&mut rng, &[4])),
        ],
        |g, p| {
            let s = g.add(p[0], p[1]).unwrap();
            let d = g.sub(s, p[1]).unwrap();
            let d = g.sub(d, p[1]).unwrap();
            let m = g.mul(d, p[1]).unwrap();
            let m = g.mul(m, s).unwrap();
            let c = g.scale(m, -1.7).unwrap();
            weighted_sum(g, c, 15)
        },
    );
}

#[test]
fn gradcheck_layernorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    grad_check(
        vec![
            ("x", rand_tensor(&mut rng, &[3, 6])),
            ("g", rand_tensor(&mut rng, &[6])),
            ("b", rand_tensor(&mut rng, &[6])),
        ],
        |g, p| {
            let y = g.layernorm(p[0], p[1], p[2], 1e-5).unwrap();
            weighted_sum(g, y, 17)
        },
    );
}

#[test]
fn gradcheck_softmax_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let valid = Arc::new(vec![true, true, false, true, false, true, true, true]);
    for mask in [
        Mask::None,
        Mask::Causal,
        Mask::KeyPadding {
            valid: valid.clone(),
            rows_per_batch: 4,
        },
    ] {
        grad_check(vec![("s", rand_tensor(&mut rng, &[2, 4, 4]))], |g, p| {
            let y = g.softmax(p[0], &mask).unwrap();
            weighted_sum(g, y, 19)
        });
    }
}

#[test]
fn gradcheck_activations() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut x = rand_tensor(&mut rng, &[12]);
    // keep relu inputs away from the kink
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 0.05 {
            *v += 0.1
        }
    });
    grad_check(vec![("x", x)], |g, p| {
        let a = g.gelu(p[0]).unwrap();
        let b = g.relu(p[0]).unwrap();
        let c = g.add(a, b).unwrap();
        weighted_sum(g, c, 21)
    });
}

#[test]
fn gradcheck_embedding_reshape_permute() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    grad_check(vec![("t", rand_tensor(&mut rng, &[4, 6]))], |g, p| {
        let e = g.embedding(p[0], &[0, 2, 2, 3, 1, 0], &[2, 3]).unwrap();
        let r = g.reshape(e, &[2, 3, 2, 3]).unwrap();
        let q = g.permute(r, &[0, 2, 1, 3]).unwrap();
        weighted_sum(g, q, 23)
    });
}

#[test]
fn gradcheck_reductions_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    grad_check(vec![("z", rand_tensor(&mut rng, &[4, 5]))], |g, p| {
        let ce = g.cross_entropy(p[0], &[1, IGNORE_INDEX, 4, 0]).unwrap();
        let m = g.mean(p[0]).unwrap();
        let s = g.sum(p[0]).unwrap();
        let sq = g.mul(s, m).unwrap();
        g.add(ce, sq).unwrap()
    });
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut g = Graph::new();
        let a = g.input(rand_tensor(&mut rng, &[8, 16])).unwrap();
        let b = g.input(rand_tensor(&mut rng, &[16, 8])).unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, &Mask::None).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
            let y = g.softmax(x, &Mask::None).unwrap();
            for r in 0..3 {
                prop_assert!((g.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
