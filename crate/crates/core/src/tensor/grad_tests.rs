use super::*;
use crate::rng;

type T64 = Tensor<f64>;
use super::gradcheck::{self, randn, weighted_sum, Build};

fn fd_error(inputs: &[T64], build: &Build<'_>) -> f64 {
    gradcheck::max_relative_error(inputs, build, gradcheck::DEFAULT_STEP, None).unwrap()
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = t.constant(Tensor::new([2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = t.constant(Tensor::new([1, 1], vec![2.0]).unwrap());
    let b = t.constant(Tensor::new([1, 1], vec![3.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[6.0]);

    let bad = t.constant(Tensor::zeros([3, 1]));
    match t.matmul(a, bad) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 1]);
            assert_eq!(rhs, vec![3, 1]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng::seeded(1);
    let ins = vec![randn(&[4, 5], &mut r), randn(&[5, 3], &mut r)];
    let err = fd_error(&ins, &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        weighted_sum(t, c, 1)
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::new([3], vec![0.0, 0.0, 0.0]).unwrap());
    let s = t.softmax_lastdim(a).unwrap();
    for &v in t.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }
    let a = t.constant(Tensor::new([3], vec![1000.0, 0.0, 0.0]).unwrap());
    let s = t.softmax_lastdim(a).unwrap();
    let v = t.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1].abs() < 1e-6 && v[2].abs() < 1e-6);

    let a = t.constant(Tensor::new([2], vec![f32::NAN, 0.0]).unwrap());
    assert!(matches!(t.softmax_lastdim(a), Err(Error::Numeric(_))));

    let mut r = rng::seeded(7);
    let ins = vec![randn(&[3, 7], &mut r)];
    let err = fd_error(&ins, &|t, v| {
        let s = t.softmax_lastdim(v[0])?;
        weighted_sum(t, s, 2)
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn layernorm_examples() {
    let mut t = Tape::<f32>::new();
    let g = t.constant(Tensor::full([2], 1.0));
    let b = t.constant(Tensor::zeros([2]));
    let x = t.constant(Tensor::new([1, 2], vec![5.0, 5.0]).unwrap());
    let y = t.layernorm(x, g, b, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0]);

    let x = t.constant(Tensor::new([1, 2], vec![1.0, 3.0]).unwrap());
    let y = t.layernorm(x, g, b, 1e-5).unwrap();
    let v = t.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-3 && (v[1] - 1.0).abs() < 1e-3);

    // mean 0, variance 1 per row before the affine
    let mut r = rng::seeded(3);
    let x = t.constant(randn(&[4, 16], &mut r).cast());
    let g = t.constant(Tensor::full([16], 1.0));
    let b = t.constant(Tensor::zeros([16]));
    let y = t.layernorm(x, g, b, 1e-5).unwrap();
    for row in t.value(y).data().chunks(16) {
        let m: f32 = row.iter().sum::<f32>() / 16.0;
        let v: f32 = row.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 16.0;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-4);
    }

    let ins = vec![randn(&[3, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r)];
    let err = fd_error(&ins, &|t, v| {
        let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 3)
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
#[allow(clippy::approx_constant)]
fn cross_entropy_examples() {
    let mut t = Tape::<f32>::new();
    let z = t.constant(Tensor::zeros([10]));
    let l = t.cross_entropy(z, &[3]).unwrap();
    assert!((t.value(l).item() - 10f32.ln()).abs() < 1e-6);
    assert!((t.value(l).item() - 2.302585).abs() < 1e-5);

    let z = t.constant(Tensor::new([2], vec![50.0, -50.0]).unwrap());
    let l = t.cross_entropy(z, &[0]).unwrap();
    assert!(t.value(l).item().abs() < 1e-6);

    assert!(matches!(t.cross_entropy(z, &[2]), Err(Error::Index { .. })));
    assert!(cross_entropy_value(&[0.0, 0.0], 5).is_err());
    assert!((cross_entropy_value(&[0.0; 10], 0).unwrap() - 10f64.ln()).abs() < 1e-12);

    // closed form: softmax - onehot
    let mut r = rng::seeded(11);
    let logits: Vec<f64> = (0..5).map(|_| rng::normal(&mut r) as f64).collect();
    let mut t = Tape::<f64>::new();
    let z = t.leaf(Tensor::new([5], logits.clone()).unwrap());
    let l = t.cross_entropy(z, &[2]).unwrap();
    t.backward(l).unwrap();
    let g = t.grad(z).unwrap().data().to_vec();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let zsum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    for k in 0..5 {
        let expected = (logits[k] - max).exp() / zsum - if k == 2 { 1.0 } else { 0.0 };
        assert!((g[k] - expected).abs() < 1e-6);
    }
}

#[test]
fn backward_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 6.0);

    // repeated calls accumulate
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap().item(), 12.0);
    t.zero_grad();
    assert!(t.grad(x).is_none());

    // disconnected leaf
    let lonely = t.leaf(Tensor::full([2], 1.0));
    t.backward(y).unwrap();
    assert!(t.grad(lonely).is_none());

    // non-scalar root
    let v = t.leaf(Tensor::zeros([3]));
    let w = t.scale(v, 2.0);
    assert!(matches!(t.backward(w), Err(Error::Contract(_))));

    let mut r = rng::seeded(5);
    let ins = vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)];
    let err = fd_error(&ins, &|t, v| {
        let c = t.matmul(v[0], v[1])?;
        Ok(t.sum(c))
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn no_grad_tape_never_accumulates() {
    let mut t = Tape::<f32>::no_grad();
    let x = t.leaf(Tensor::scalar(2.0));
    let y = t.mul(x, x).unwrap();
    assert!(!t.requires_grad(y));
    t.backward(y).unwrap();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_is_linear_over_independent_graphs() {
    let mut r = rng::seeded(9);
    let a = randn(&[3, 3], &mut r);
    let b = randn(&[3, 3], &mut r);

    let grads = |joint: bool| -> (T64, T64) {
        let mut t = Tape::<f64>::new();
        let va = t.leaf(a.clone());
        let vb = t.leaf(b.clone());
        let fa = t.softmax_lastdim(va).unwrap();
        let fa = weighted_sum(&mut t, fa, 1).unwrap();
        let fb = t.gelu(vb);
        let fb = weighted_sum(&mut t, fb, 2).unwrap();
        if joint {
            let s = t.add(fa, fb).unwrap();
            t.backward(s).unwrap();
        } else {
            t.backward(fa).unwrap();
            t.backward(fb).unwrap();
        }
        (t.grad(va).unwrap().clone(), t.grad(vb).unwrap().clone())
    };
    let (ja, jb) = grads(true);
    let (sa, sb) = grads(false);
    for (x, y) in ja.data().iter().zip(sa.data()).chain(jb.data().iter().zip(sb.data())) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn gate_rows_uses_straight_through_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let p = t.leaf(Tensor::new([2], vec![0.9, 0.1]).unwrap());
    let y = t.gate_rows(x, p, &[1, 2], &[true, false]).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    let s = t.sum(y);
    t.backward(s).unwrap();
    // d/dp = <x_row, dy_row>
    assert_eq!(t.grad(p).unwrap().data(), &[7.0, 11.0]);
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn masked_attention_matches_removed_rows() {
    // one sequence of 4 rows with row 2 masked vs the same sequence without it
    let mut r = rng::seeded(21);
    let qkv = randn(&[4, 12], &mut r).cast::<f32>();
    let mut t = Tape::<f32>::no_grad();
    let full = t.constant(qkv.clone());
    let keep = [true, true, false, true];
    let y = t.attention(full, &SeqLayout::uniform(1, 4), 2, Some(&keep)).unwrap();
    let rows: Vec<f32> = [0, 1, 3].iter().flat_map(|&i| qkv.row(i).to_vec()).collect();
    let reduced = t.constant(Tensor::new([3, 12], rows).unwrap());
    let z = t.attention(reduced, &SeqLayout::uniform(1, 3), 2, None).unwrap();
    for (o, i) in [(0, 0), (1, 1), (2, 3)] {
        assert_eq!(t.value(z).row(o), t.value(y).row(i));
    }
    let none = [false; 4];
    assert!(matches!(
        t.attention(full, &SeqLayout::uniform(1, 4), 2, Some(&none)),
        Err(Error::Contract(_))
    ));
}

/// Every differentiable op against central differences over 100 seeds.
#[test]
fn every_op_passes_gradient_check_over_100_seeds() {
    for seed in 0..100u64 {
        for (name, err) in gradcheck::op_suite(seed).unwrap() {
            assert!(err < 1e-3, "{name} seed {seed}: {err}");
        }
    }
}
