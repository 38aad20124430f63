use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

#[test]
fn relu_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv2d_ones_through_graph() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let v = g.value(y);
    assert_eq!(v.shape(), &[1, 1, 3, 3]);
    assert_eq!(v.data()[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(v.data()[corner], 4.0);
    }
}

#[test]
fn group_norm_constant_input_is_zero_before_shift() {
    // Constant input has zero deviation in every group; epsilon guards the
    // division, so the normalized output is exactly zero.
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4, 3, 3], 3.25));
    let gamma = g.constant(Tensor::full(&[4], 1.0));
    let beta = g.constant(Tensor::zeros(&[4]));
    for groups in [1, 2, 4] {
        let y = g.group_norm(x, gamma, beta, groups, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = g.backward_values(loss, &[x]).unwrap();
    assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn disconnected_leaf_gets_zeros() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let other = g.leaf(Tensor::from_vec(vec![4], vec![1.0; 4]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum_all(sq).unwrap();
    let grads = g.backward_values(loss, &[x, other]).unwrap();
    assert_eq!(grads[1].shape(), &[4]);
    assert!(grads[1].data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let y = g.mul(x, x).unwrap();
    assert!(matches!(g.backward(y, &[x]), Err(Error::Contract(_))));
}

#[test]
fn backward_is_linear() {
    // grad of (a*L1 + b*L2) == a*grad(L1) + b*grad(L2) within 1e-12.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = rand_tensor(&mut rng, &[5]);
    let (a, b) = (1.7, -0.4);

    let mut g = Graph::new();
    let x = g.leaf(xt.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let l1 = g.sum_all(sq).unwrap();
    let e = g.exp(x).unwrap();
    let l2 = g.sum_all(e).unwrap();
    let l1s = g.scale(l1, a).unwrap();
    let l2s = g.scale(l2, b).unwrap();
    let combined = g.add(l1s, l2s).unwrap();
    let g_combined = g.backward_values(combined, &[x]).unwrap();
    let g1 = g.backward_values(l1, &[x]).unwrap();
    let g2 = g.backward_values(l2, &[x]).unwrap();
    for i in 0..5 {
        let lin = a * g1[0].data()[i] + b * g2[0].data()[i];
        assert!((g_combined[0].data()[i] - lin).abs() < 1e-12);
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xt = rand_tensor(&mut rng, &[4, 6]);
    let wt = rand_tensor(&mut rng, &[6, 3]);
    let build = |xt: &Tensor, wt: &Tensor| -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(xt.clone(), true);
        let w = g.leaf(wt.clone(), true);
        let mm = g.matmul(x, w).unwrap();
        let r = g.relu(mm).unwrap();
        let ls = g.log_softmax(r).unwrap();
        let loss = g.mean_all(ls).unwrap();
        let grads = g.backward_values(loss, &[x, w]).unwrap();
        let mut out = g.value(loss).data().to_vec();
        for t in grads {
            out.extend_from_slice(t.data());
        }
        out
    };
    let r1 = build(&xt, &wt);
    let r2 = build(&xt, &wt);
    assert_eq!(r1.len(), r2.len());
    for (a, b) in r1.iter().zip(&r2) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn second_order_through_recorded_backward() {
    // y = sum(x^3): dy/dx = 3x^2, and d/dx of sum(dy/dx) = 6x.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
    let x2 = g.mul(x, x).unwrap();
    let x3 = g.mul(x2, x).unwrap();
    let y = g.sum_all(x3).unwrap();
    let first = g.backward(y, &[x]).unwrap()[0];
    for (got, want) in g.value(first).data().iter().zip([3.0, 12.0, 0.75]) {
        assert!((got - want).abs() < 1e-12);
    }
    let s = g.sum_all(first).unwrap();
    let second = g.backward_values(s, &[x]).unwrap();
    for (got, want) in second[0].data().iter().zip([6.0, -12.0, 3.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn grad_check_quadratic_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = rand_tensor(&mut rng, &[7]);
    let report = grad_check(
        |g, vars| {
            let sq = g.mul(vars[0], vars[0])?;
            g.sum_all(sq)
        },
        &[point],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error);
}

#[test]
fn grad_check_constant_function() {
    let point = Tensor::from_vec(vec![3], vec![0.3, -0.7, 2.0]).unwrap();
    let report = grad_check(
        |g, vars| {
            let c = g.scalar(4.0);
            let zero = g.scale(vars[0], 0.0)?;
            let z = g.sum_all(zero)?;
            g.add(c, z)
        },
        &[point],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn overflow_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1], vec![1e308]).unwrap());
    let doubled = g.add(x, x);
    assert!(matches!(doubled, Err(Error::NumericOverflow { .. })));
}

#[test]
fn shape_mismatch_names_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 3]));
    match g.add(a, b) {
        Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
        other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
    }
}
