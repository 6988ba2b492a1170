use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Central finite-difference gradient of `f` at `x`.
fn fd_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    out
}

fn spectral_radius(h: &Tensor) -> f64 {
    let d = h.shape()[0];
    let m = nalgebra::DMatrix::from_row_slice(d, d, h.data());
    m.symmetric_eigenvalues().iter().fold(0.0, |acc, e| acc.max(e.abs()))
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().max_abs();
    diff / b.max_abs().max(1e-3)
}

/// `½ xᵀ A x` over a `[1, d]` input leaf.
fn quadratic(a: &Tensor) -> ScalarGraph {
    let d = a.shape()[0];
    let mut g = Graph::new();
    let x = g.leaf("x", &[1, d]);
    let m = g.constant(a.clone());
    let ax = g.matmul(x, m).unwrap();
    let q = g.dot(x, ax).unwrap();
    let out = g.scale(q, 0.5).unwrap();
    ScalarGraph {
        graph: g,
        input: x,
        output: out,
    }
}

fn linear(w: &[f64]) -> ScalarGraph {
    let mut g = Graph::new();
    let x = g.leaf("x", &[w.len()]);
    let wn = g.constant(Tensor::vector(w.to_vec()));
    let out = g.dot(wn, x).unwrap();
    ScalarGraph {
        graph: g,
        input: x,
        output: out,
    }
}

/// 3 → 2 → 1 SWISH network with fixed weights; input is the leaf.
fn tiny_mlp() -> ScalarGraph {
    let mut g = Graph::new();
    let x = g.leaf("x", &[1, 3]);
    let w1 = g.constant(Tensor::matrix(3, 2, vec![0.7, -1.1, 0.4, 0.9, -0.6, 0.3]).unwrap());
    let b1 = g.constant(Tensor::vector(vec![0.2, -0.1]));
    let w2 = g.constant(Tensor::matrix(2, 1, vec![1.3, -0.8]).unwrap());
    let h = g.matmul(x, w1).unwrap();
    let h = g.bias_add(h, b1).unwrap();
    let h = g.swish(h).unwrap();
    let o = g.matmul(h, w2).unwrap();
    let out = g.sum(o).unwrap();
    ScalarGraph {
        graph: g,
        input: x,
        output: out,
    }
}

#[test]
fn forward_examples() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[]);
    let s = g.swish(x).unwrap();
    assert_eq!(g.forward(&[(x, Tensor::scalar(0.0))], s).unwrap().item(), 0.0);

    let mut lin = linear(&[0.6, 0.8]);
    assert!((lin.value_at(&Tensor::vector(vec![1.0, 1.0])).unwrap() - 1.4).abs() < 1e-15);

    let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
    let mut q = quadratic(&a);
    let x1 = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    assert_eq!(q.value_at(&x1).unwrap(), 3.0);
}

#[test]
fn gradient_examples() {
    let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
    let mut q = quadratic(&a);
    let x1 = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    assert_eq!(q.gradient_at(&x1).unwrap().data(), &[2.0, 4.0]);

    let mut g = Graph::new();
    let x = g.leaf("x", &[]);
    let s = g.swish(x).unwrap();
    let out = g.sum(s).unwrap();
    g.bind(x, Tensor::scalar(0.0)).unwrap();
    assert_eq!(g.gradient(out, &[x]).unwrap()[0].item(), 0.5);

    let mut lin = linear(&[0.6, 0.8]);
    for p in [[0.0, 0.0], [3.0, -7.0]] {
        assert_eq!(
            lin.gradient_at(&Tensor::vector(p.to_vec())).unwrap().data(),
            &[0.6, 0.8]
        );
    }
}

#[test]
fn gradient_of_non_scalar_is_rejected() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![1.0, 2.0]));
    let y = g.swish(x).unwrap();
    assert!(matches!(g.grad(y, &[x]), Err(Error::NotScalar(..))));
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::new();
    let a = g.leaf("weights", &[2, 3]);
    let b = g.leaf("inputs", &[2, 3]);
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("weights"), "{err}");
    assert!(err.contains("matmul"), "{err}");
    let err = g.bind(a, Tensor::zeros(&[3, 2])).unwrap_err().to_string();
    assert!(err.contains("weights"), "{err}");
    let c = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.bind(c, Tensor::scalar(2.0)), Err(Error::NotLeaf(_))));
}

#[test]
fn unbound_leaf_is_reported() {
    let mut g = Graph::new();
    let x = g.leaf("pixels", &[2]);
    let s = g.sum(x).unwrap();
    let err = g.value(s).unwrap_err().to_string();
    assert!(err.contains("pixels"));
}

#[test]
fn rebinding_invalidates_downstream_caches() {
    let mut lin = linear(&[1.0, 2.0]);
    assert_eq!(lin.value_at(&Tensor::vector(vec![1.0, 0.0])).unwrap(), 1.0);
    assert_eq!(lin.value_at(&Tensor::vector(vec![0.0, 1.0])).unwrap(), 2.0);
}

#[test]
fn hvp_examples() {
    let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
    let mut q = quadratic(&a);
    let x1 = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
    let v = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
    assert_eq!(q.hvp_at(&x1, &v).unwrap().data(), &[2.0, 0.0]);

    let mut lin = linear(&[0.6, 0.8]);
    lin.graph.bind(lin.input, Tensor::vector(vec![0.3, 0.1])).unwrap();
    let hv = lin
        .graph
        .hvp(lin.output, lin.input, &Tensor::vector(vec![1.0, -2.0]))
        .unwrap();
    assert_eq!(hv.data(), &[0.0, 0.0]);
}

#[test]
fn hvp_matches_finite_difference_of_gradients_on_mlp() {
    let mut net = tiny_mlp();
    let x = Tensor::matrix(1, 3, vec![0.3, -0.5, 0.8]).unwrap();
    let v = Tensor::matrix(1, 3, vec![0.2, 0.9, -0.4]).unwrap();
    let hv = net.hvp_at(&x, &v).unwrap();
    let h = 1e-4;
    let mut xp = x.clone();
    xp.axpy(h, &v).unwrap();
    let mut xm = x.clone();
    xm.axpy(-h, &v).unwrap();
    let gp = net.gradient_at(&xp).unwrap();
    let gm = net.gradient_at(&xm).unwrap();
    let fd = gp.sub(&gm).unwrap().scale(1.0 / (2.0 * h));
    assert!(rel_err(&hv, &fd) <= 1e-5, "{hv:?} vs {fd:?}");
}

#[test]
fn hvp_with_respect_to_parameters() {
    // 1 → 2 → 1 SWISH network, differentiated in its first-layer weights.
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 1, vec![0.7]).unwrap());
    let w1 = g.leaf("w1", &[1, 2]);
    let w2 = g.constant(Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap());
    let h = g.matmul(x, w1).unwrap();
    let h = g.swish(h).unwrap();
    let o = g.matmul(h, w2).unwrap();
    let out = g.sum(o).unwrap();
    let mut sg = ScalarGraph {
        graph: g,
        input: w1,
        output: out,
    };
    let p = Tensor::matrix(1, 2, vec![0.4, -1.2]).unwrap();
    let v = Tensor::matrix(1, 2, vec![1.0, 0.5]).unwrap();
    let hv = sg.hvp_at(&p, &v).unwrap();
    let fd = fd_grad(&p, 1e-4, |pp| {
        let gp = sg.gradient_at(pp).unwrap();
        gp.dot(&v)
    });
    // H is symmetric, so ∇(∇f·v) = H v.
    assert!(rel_err(&hv, &fd) <= 1e-5);
}

#[test]
fn explicit_hessian_examples() {
    let a = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
    let mut q = quadratic(&a);
    let x1 = Tensor::matrix(1, 2, vec![0.5, -3.0]).unwrap();
    assert_eq!(q.hessian_at(&x1).unwrap(), a);

    let mut lin = linear(&[0.6, 0.8, -1.0]);
    let h = lin.hessian_at(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
    assert_eq!(h, Tensor::zeros(&[3, 3]));

    let mut net = tiny_mlp();
    let x = Tensor::matrix(1, 3, vec![0.1, 0.4, -0.9]).unwrap();
    let h = net.hessian_at(&x).unwrap();
    let d = 3;
    let step = 1e-4;
    for col in 0..d {
        let mut xp = x.clone();
        xp.data_mut()[col] += step;
        let mut xm = x.clone();
        xm.data_mut()[col] -= step;
        let gp = net.gradient_at(&xp).unwrap();
        let gm = net.gradient_at(&xm).unwrap();
        for row in 0..d {
            let fd = (gp.data()[row] - gm.data()[row]) / (2.0 * step);
            assert!((h.data()[row * d + col] - fd).abs() <= 1e-4);
        }
    }
}

#[test]
fn explicit_hessian_refuses_large_inputs() {
    let mut lin = linear(&[0.0; 65]);
    let err = lin.hessian_at(&Tensor::zeros(&[65])).unwrap_err();
    assert!(matches!(err, Error::OracleLimit { dim: 65, limit: 64 }));
    assert!(err.to_string().contains("hvp"));
}

/// Builds `Σ R ∘ swish(op(inputs))`, returning the graph, leaves and output.
type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[NodeId]) -> NodeId);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, l| g.add(l[0], l[1]).unwrap()),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, l| g.sub(l[0], l[1]).unwrap()),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, l| g.mul(l[0], l[1]).unwrap()),
        ("safe_div", vec![vec![2, 3], vec![2, 3]], |g, l| {
            let d = g.affine(l[1], 1.0, 3.0).unwrap();
            g.safe_div(l[0], d).unwrap()
        }),
        ("neg", vec![vec![4]], |g, l| g.neg(l[0]).unwrap()),
        ("affine", vec![vec![4]], |g, l| g.affine(l[0], -1.5, 0.25).unwrap()),
        ("matmul", vec![vec![2, 3], vec![3, 4]], |g, l| {
            g.matmul(l[0], l[1]).unwrap()
        }),
        ("matmul_ta", vec![vec![3, 2], vec![3, 4]], |g, l| {
            g.matmul_t(l[0], l[1], true, false).unwrap()
        }),
        ("matmul_tb", vec![vec![2, 3], vec![4, 3]], |g, l| {
            g.matmul_t(l[0], l[1], false, true).unwrap()
        }),
        ("matmul_tab", vec![vec![3, 2], vec![4, 3]], |g, l| {
            g.matmul_t(l[0], l[1], true, true).unwrap()
        }),
        ("bias_add", vec![vec![2, 3, 2, 2], vec![3]], |g, l| {
            g.bias_add(l[0], l[1]).unwrap()
        }),
        ("channel_sum", vec![vec![2, 3, 2]], |g, l| g.channel_sum(l[0]).unwrap()),
        ("channel_broadcast", vec![vec![3]], |g, l| {
            g.channel_broadcast(l[0], &[2, 3, 2]).unwrap()
        }),
        ("conv2d_s1", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3]], |g, l| {
            g.conv2d(l[0], l[1], 1, 1).unwrap()
        }),
        ("conv2d_s2", vec![vec![1, 2, 7, 6], vec![2, 2, 3, 3]], |g, l| {
            g.conv2d(l[0], l[1], 2, 0).unwrap()
        }),
        ("conv2d_input_grad", vec![vec![1, 3, 3, 2], vec![3, 2, 3, 3]], |g, l| {
            g.conv2d_input_grad(l[0], l[1], 2, 0, &[1, 2, 7, 5]).unwrap()
        }),
        (
            "conv2d_weight_grad",
            vec![vec![1, 2, 5, 4], vec![1, 3, 5, 4]],
            |g, l| g.conv2d_weight_grad(l[0], l[1], 1, 1, &[3, 2, 3, 3]).unwrap(),
        ),
        ("sigmoid", vec![vec![5]], |g, l| g.sigmoid(l[0]).unwrap()),
        ("swish", vec![vec![5]], |g, l| g.swish(l[0]).unwrap()),
        ("exp", vec![vec![5]], |g, l| g.exp(l[0]).unwrap()),
        ("logsumexp", vec![vec![3, 4]], |g, l| g.logsumexp_last(l[0]).unwrap()),
        ("sum_last", vec![vec![3, 4]], |g, l| g.sum_last(l[0]).unwrap()),
        ("broadcast_last", vec![vec![3]], |g, l| {
            g.broadcast_last(l[0], 2).unwrap()
        }),
        ("norm_last", vec![vec![3, 4]], |g, l| g.norm_last(l[0]).unwrap()),
        ("sum", vec![vec![2, 2]], |g, l| g.sum(l[0]).unwrap()),
        ("fill", vec![vec![]], |g, l| g.fill(l[0], &[2, 3]).unwrap()),
        ("reshape", vec![vec![2, 3]], |g, l| g.reshape(l[0], &[3, 2]).unwrap()),
        ("slice", vec![vec![2, 5]], |g, l| g.slice_last(l[0], 1, 4).unwrap()),
        ("pad", vec![vec![2, 2]], |g, l| g.pad_last(l[0], 1, 5).unwrap()),
    ]
}

fn build_case(case: &OpCase, rng: &mut ChaCha8Rng) -> (Graph, Vec<NodeId>, NodeId) {
    let (_, shapes, build) = case;
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let leaf = g.leaf(&format!("in{i}"), s);
            g.bind(leaf, random(rng, s, 1.0)).unwrap();
            leaf
        })
        .collect();
    let y = build(&mut g, &leaves);
    let shape = g.shape(y).to_vec();
    let r = g.constant(random(rng, &shape, 1.0));
    let s = g.swish(y).unwrap();
    let out = g.dot(s, r).unwrap();
    (g, leaves, out)
}

#[test]
fn every_op_kind_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in op_cases() {
        let (mut g, leaves, out) = build_case(&case, &mut rng);
        let grads = g.gradient(out, &leaves).unwrap();
        for (leaf, grad) in leaves.iter().zip(&grads) {
            let x0 = g.value(*leaf).unwrap().clone();
            let fd = fd_grad(&x0, 1e-4, |x| g.forward(&[(*leaf, x.clone())], out).unwrap().item());
            g.bind(*leaf, x0).unwrap();
            let e = rel_err(grad, &fd);
            assert!(e <= 1e-5, "{}: gradient rel err {e}", case.0);
        }
    }
}

#[test]
fn every_op_kind_passes_hvp_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in op_cases() {
        let (mut g, leaves, out) = build_case(&case, &mut rng);
        for leaf in &leaves {
            let x0 = g.value(*leaf).unwrap().clone();
            let v = random(&mut rng, x0.shape(), 1.0);
            let hv = g.hvp(out, *leaf, &v).unwrap();
            let h = 1e-4;
            let mut grad_at = |x: Tensor| {
                g.bind(*leaf, x).unwrap();
                g.gradient(out, &[*leaf]).unwrap().remove(0)
            };
            let mut xp = x0.clone();
            xp.axpy(h, &v).unwrap();
            let mut xm = x0.clone();
            xm.axpy(-h, &v).unwrap();
            let fd = grad_at(xp).sub(&grad_at(xm)).unwrap().scale(0.5 / h);
            grad_at(x0);
            let e = rel_err(&hv, &fd);
            assert!(e <= 1e-5, "{}: hvp rel err {e}", case.0);
        }
    }
}

#[test]
fn third_order_gradient_through_hvp_matches_finite_difference() {
    // ∇_w ‖H_x(w) v‖² for f = Σ swish(x·w): differentiating an HVP graph.
    let mut g = Graph::new();
    let x = g.leaf("x", &[1, 3]);
    let w = g.leaf("w", &[3, 2]);
    let h = g.matmul(x, w).unwrap();
    let s = g.swish(h).unwrap();
    let out = g.sum(s).unwrap();
    let nodes = g.hvp_nodes(out, x).unwrap();
    let sq = g.dot(nodes.hv, nodes.hv).unwrap();
    let gw = g.grad(sq, &[w]).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    g.bind(x, random(&mut rng, &[1, 3], 1.0)).unwrap();
    let w0 = random(&mut rng, &[3, 2], 1.0);
    g.bind(w, w0.clone()).unwrap();
    g.bind(nodes.v, random(&mut rng, &[1, 3], 1.0)).unwrap();
    let analytic = g.value(gw).unwrap().clone();
    let fd = fd_grad(&w0, 1e-4, |ww| g.forward(&[(w, ww.clone())], sq).unwrap().item());
    assert!(rel_err(&analytic, &fd) <= 1e-5);
}

#[test]
fn taylor_remainder_is_bounded_by_sampled_curvature() {
    // |f(x+δ) − f(x) − ⟨∇f(x), δ⟩| ≤ ½‖δ‖² · max over sampled ball points of ‖H‖₂.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, -3.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
    let mut cases = vec![quadratic(&a), tiny_mlp()];
    for sg in cases.iter_mut() {
        for _ in 0..20 {
            let x = random(&mut rng, &[1, 3], 1.0);
            let delta = random(&mut rng, &[1, 3], 0.5);
            let r = delta.norm(crate::tensor::Lp::L2);
            let f0 = sg.value_at(&x).unwrap();
            let g0 = sg.gradient_at(&x).unwrap();
            let mut xd = x.clone();
            xd.axpy(1.0, &delta).unwrap();
            let f1 = sg.value_at(&xd).unwrap();
            let remainder = (f1 - f0 - g0.dot(&delta)).abs();
            let mut k_max: f64 = 0.0;
            for i in 0..=50 {
                let t = i as f64 / 50.0;
                let mut p = x.clone();
                p.axpy(t, &delta).unwrap();
                let h = sg.hessian_at(&p).unwrap();
                k_max = k_max.max(spectral_radius(&h));
            }
            assert!(
                remainder <= 0.5 * r * r * k_max + 1e-9,
                "{remainder} > {}",
                0.5 * r * r * k_max
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hvp_is_symmetric_and_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = tiny_mlp();
        let x = random(&mut rng, &[1, 3], 1.0);
        let u = random(&mut rng, &[1, 3], 1.0);
        let v = random(&mut rng, &[1, 3], 1.0);
        let hu = net.hvp_at(&x, &u).unwrap();
        let hv = net.hvp_at(&x, &v).unwrap();
        prop_assert!((v.dot(&hu) - u.dot(&hv)).abs() <= 1e-8);

        let mut comb = u.scale(alpha);
        comb.axpy(beta, &v).unwrap();
        let hc = net.hvp_at(&x, &comb).unwrap();
        let mut expect = hu.scale(alpha);
        expect.axpy(beta, &hv).unwrap();
        prop_assert!(hc.sub(&expect).unwrap().max_abs() <= 1e-8);

        let h = net.hessian_at(&x).unwrap();
        let hv_dense = nalgebra::DMatrix::from_row_slice(3, 3, h.data()) * nalgebra::DVector::from_row_slice(v.data());
        for (a, b) in hv.data().iter().zip(&hv_dense) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
    }
}
