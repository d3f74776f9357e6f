use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfagc::params::{finite_diff_grad, max_relative_error, Adam, ParamStore};
use sfagc::tape::{softmax_in_place, ParamId, Tape, Var};
use sfagc::tensor::matmul;
use sfagc::{Error, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the tape gradient of `f(θ)` against central differences.
fn grad_check(theta: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let p = tape.param(ParamId(0), theta.clone());
    let loss = f(&mut tape, p);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads
        .get(ParamId(0))
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(theta.shape()));
    let numeric = finite_diff_grad(
        |t| {
            let mut tape = Tape::new();
            let p = tape.param(ParamId(0), t.clone());
            let l = f(&mut tape, p);
            Ok(tape.value(l).item())
        },
        theta,
        1e-6,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(x));
    let w = tape.constant(w);
    let m = tape.mul(x, w).unwrap();
    tape.sum(m).unwrap()
}

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    assert!(matmul(&Tensor::zeros(&[2, 2]), &a).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(matches!(matmul(&a, &Tensor::zeros(&[3, 1])), Err(Error::Shape { .. })));
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
    let l = t.leaky_relu(a, 0.2).unwrap();
    assert_eq!(t.value(l).data(), &[-0.2, 2.0]);
    let b = t.constant(Tensor::vector(vec![-3.0, 4.0]).unwrap());
    let ab = t.abs(b).unwrap();
    assert_eq!(t.value(ab).data(), &[3.0, 4.0]);
    let one = t.constant(Tensor::vector(vec![1.0]).unwrap());
    let two = t.constant(Tensor::vector(vec![2.0]).unwrap());
    let s = t.add(one, two).unwrap();
    assert_eq!(t.value(s).data(), &[3.0]);
}

#[test]
fn softmax_examples() {
    let mut r = vec![0.3; 4];
    softmax_in_place(&mut r, 1.0);
    assert!(r.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    let mut r = vec![7.0];
    softmax_in_place(&mut r, 2.0);
    assert_eq!(r, vec![1.0]);
    let mut r = vec![0.0, 3f64.ln()];
    softmax_in_place(&mut r, 1.0);
    assert!((r[0] - 0.25).abs() < 1e-15 && (r[1] - 0.75).abs() < 1e-15);
}

#[test]
fn concat_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1.0]).unwrap());
    let b = t.constant(Tensor::vector(vec![2.0, 3.0]).unwrap());
    let c = t.concat(&[a, b], 0).unwrap();
    assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
    let one = t.concat(&[b], 0).unwrap();
    assert_eq!(t.value(one), t.value(b));
    let x = t.constant(Tensor::zeros(&[2, 3]));
    let y = t.constant(Tensor::zeros(&[2, 5]));
    let xy = t.concat(&[x, y], 1).unwrap();
    assert_eq!(t.shape(xy), &[2, 8]);
    assert!(t.concat(&[x, y], 0).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    assert!(matches!(Tensor::new(vec![1], vec![f64::INFINITY]), Err(Error::NonFinite(_))));
    let mut t = Tape::new();
    let a = t.constant(Tensor::vector(vec![1e300]).unwrap());
    assert!(matches!(t.scale(a, 1e300), Err(Error::NonFinite(_))));
}

#[test]
fn backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&mut rng, &[3, 4]);
    let x = rand_tensor(&mut rng, &[1, 4]);

    // sum(W·x): every row of the gradient is x
    let mut t = Tape::new();
    let wv = t.param(ParamId(0), w.clone());
    let xv = t.constant(x.clone());
    let y = t.linear(xv, wv).unwrap();
    let l = t.sum(y).unwrap();
    let g = t.backward(l).unwrap();
    let g = g.get(ParamId(0)).unwrap();
    for r in 0..3 {
        assert_eq!(g.row(r), x.data());
    }

    // loss independent of W
    let mut t = Tape::new();
    t.param(ParamId(0), w.clone());
    let c = t.constant(x.clone());
    let l = t.sum(c).unwrap();
    assert!(t.backward(l).unwrap().get(ParamId(0)).is_none());

    // ½‖W‖²
    let mut t = Tape::new();
    let wv = t.param(ParamId(0), w.clone());
    let sq = t.mul(wv, wv).unwrap();
    let s = t.sum(sq).unwrap();
    let l = t.scale(s, 0.5).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(ParamId(0)).unwrap().max_abs_diff(&w) < 1e-15);

    let mut t = Tape::new();
    let wv = t.param(ParamId(0), w);
    assert!(t.backward(wv).is_err());
}

#[test]
fn finite_diff_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = rand_tensor(&mut rng, &[5]);
    let ones = finite_diff_grad(|t| Ok(t.data().iter().sum()), &theta, 1e-6).unwrap();
    assert!(ones.data().iter().all(|g| (g - 1.0).abs() < 1e-8));
    let half = finite_diff_grad(|t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()), &theta, 1e-5).unwrap();
    assert!(half.max_abs_diff(&theta) < 1e-8);
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.5, -0.25]).unwrap()).unwrap();
    let before = store.get(id).clone();

    let mut adam = Adam::new(0.01);
    adam.step(&mut store, &[Tensor::vector(vec![0.3, -2.0]).unwrap()]).unwrap();
    let moved: Vec<f64> = store.get(id).data().iter().zip(before.data()).map(|(a, b)| a - b).collect();
    assert!((moved[0] + 0.01).abs() < 1e-9, "{moved:?}");
    assert!((moved[1] - 0.01).abs() < 1e-9, "{moved:?}");

    let m_before = adam.first_moment(id).unwrap().to_vec();
    let v_before = adam.second_moment(id).unwrap().to_vec();
    let snapshot = store.get(id).clone();
    adam.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
    let m_after = adam.first_moment(id).unwrap();
    let v_after = adam.second_moment(id).unwrap();
    for i in 0..2 {
        assert!((m_after[i] - 0.9 * m_before[i]).abs() < 1e-15);
        assert!((v_after[i] - 0.999 * v_before[i]).abs() < 1e-15);
    }
    // decayed moments still move the parameters; a fresh optimizer with zero grads does not
    assert_ne!(store.get(id), &snapshot);
    let mut fresh = Adam::new(0.01);
    let snapshot = store.get(id).clone();
    fresh.step(&mut store, &[Tensor::zeros(&[2])]).unwrap();
    assert_eq!(store.get(id), &snapshot);

    let run = || {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        s.add_uniform("w", 3, 4, &mut rng).unwrap();
        let mut a = Adam::new(0.1);
        for _ in 0..2 {
            a.step(&mut s, &[Tensor::filled(&[3, 4], 0.7)]).unwrap();
        }
        s.get(ParamId(0)).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn uniform_init_respects_fan_in_bound() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let id = store.add_uniform("w", 50, 16, &mut rng).unwrap();
    let bound = (1.0f64 / 16.0).sqrt();
    assert!(store.get(id).data().iter().all(|v| v.abs() <= bound));
}

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..5, 1usize..5, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn matmul_and_linear_gradients((m, k, n) in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let bb = b.clone();
        let e = grad_check(&a, |t, p| {
            let c = t.constant(bb.clone());
            let y = t.matmul(p, c).unwrap();
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        let aa = a.clone();
        let e = grad_check(&b, |t, p| {
            let c = t.constant(aa.clone());
            let y = t.matmul(c, p).unwrap();
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        let w = rand_tensor(&mut rng, &[n, k]);
        let e = grad_check(&w, |t, p| {
            let c = t.constant(aa.clone());
            let y = t.linear(c, p).unwrap();
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        let e = grad_check(&a, |t, p| {
            let c = t.constant(w.clone());
            let y = t.linear(p, c).unwrap();
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < 1e-4, "max relative error {}", e);
    }

    #[test]
    fn elementwise_gradients((m, n, _) in shape_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[m, n]);
        let b = rand_tensor(&mut rng, &[n]);
        let ops: Vec<Box<dyn Fn(&mut Tape, Var, Var) -> Var>> = vec![
            Box::new(|t, x, y| t.add(x, y).unwrap()),
            Box::new(|t, x, y| t.sub(x, y).unwrap()),
            Box::new(|t, x, y| t.mul(x, y).unwrap()),
            Box::new(|t, x, _| t.scale(x, -1.7).unwrap()),
            Box::new(|t, x, _| t.leaky_relu(x, 0.2).unwrap()),
            Box::new(|t, x, _| t.abs(x).unwrap()),
            Box::new(|t, x, _| t.softmax_rows(x, 1.3).unwrap()),
        ];
        for op in &ops {
            let bb = b.clone();
            let e = grad_check(&a, |t, p| {
                let c = t.constant(bb.clone());
                let y = op(t, p, c);
                weighted_sum(t, y, seed)
            });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        }
        for op in &ops[..3] {
            let aa = a.clone();
            let e = grad_check(&b, |t, p| {
                let c = t.constant(aa.clone());
                let y = op(t, c, p);
                weighted_sum(t, y, seed)
            });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        }
    }

    #[test]
    fn row_and_group_gradients(groups in 1usize..4, size in 1usize..4, width in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = groups * size;
        let a = rand_tensor(&mut rng, &[rows, width]);
        let b = rand_tensor(&mut rng, &[rows, width]);
        let s = rand_tensor(&mut rng, &[rows, 1]);
        let idx: Vec<usize> = (0..rows + 2).map(|_| rng.gen_range(0..rows)).collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..width)).collect();
        let unary: Vec<Box<dyn Fn(&mut Tape, Var) -> Var>> = vec![
            Box::new(|t, x| t.group_sum(x, size).unwrap()),
            Box::new(|t, x| t.group_mean(x, size).unwrap()),
            Box::new(|t, x| t.group_max(x, size).unwrap()),
            Box::new(|t, x| t.gather(x, &idx).unwrap()),
            Box::new(|t, x| t.reshape(x, &[width, rows]).unwrap()),
            Box::new(|t, x| { let c = t.constant(b.clone()); t.row_dot(x, c).unwrap() }),
            Box::new(|t, x| { let c = t.constant(b.clone()); t.row_cosine(x, c).unwrap() }),
            Box::new(|t, x| { let c = t.constant(s.clone()); t.mul_rows(x, c).unwrap() }),
            Box::new(|t, x| { let c = t.constant(b.clone()); t.concat(&[x, c, x], 1).unwrap() }),
            Box::new(|t, x| { let c = t.constant(b.clone()); t.concat(&[c, x], 0).unwrap() }),
        ];
        for op in &unary {
            let e = grad_check(&a, |t, p| { let y = op(t, p); weighted_sum(t, y, seed) });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        }
        let e = grad_check(&s, |t, p| {
            let c = t.constant(a.clone());
            let y = t.mul_rows(c, p).unwrap();
            weighted_sum(t, y, seed)
        });
        prop_assert!(e < 1e-4, "max relative error {}", e);
        let e = grad_check(&a, |t, p| t.cross_entropy(p, &labels).unwrap());
        prop_assert!(e < 1e-4, "max relative error {}", e);
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0, scale in 0.1f64..10.0) {
        let mut p = row.clone();
        softmax_in_place(&mut p, scale);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let mut q: Vec<f64> = row.iter().map(|v| v + shift).collect();
        softmax_in_place(&mut q, scale);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_and_concat_shapes(m in 1usize..6, k in 1usize..6, n in 1usize..6, n2 in 1usize..6) {
        let a = Tensor::zeros(&[m, k]);
        let prod = matmul(&a, &Tensor::zeros(&[k, n])).unwrap();
        prop_assert_eq!(prod.shape(), &[m, n]);
        prop_assert!(matmul(&a, &Tensor::zeros(&[k + 1, n])).is_err());
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[m, n]));
        let y = t.constant(Tensor::zeros(&[m, n2]));
        let c = t.concat(&[x, y], 1).unwrap();
        prop_assert_eq!(t.shape(c), &[m, n + n2]);
        if n != n2 {
            prop_assert!(t.concat(&[x, y], 0).is_err());
        }
    }
}
