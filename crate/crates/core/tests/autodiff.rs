use gvit_core::autodiff::{CustomOp, FnOp, Tape, Var};
use gvit_core::{Error, Result, Tensor};
use gvit_oracles::{finite_diff, max_relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'a;

/// Analytic gradients of `build` w.r.t. every input, and the worst relative
/// error against central differences.
fn grad_check(inputs: &[Tensor], build: &Build<'_>, h: f64) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars);
    tape.backward(&loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(&vars[i]).unwrap();
        let numeric = finite_diff(
            |x| {
                let t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, inp)| {
                        if j == i {
                            t.param(Tensor::new(inp.shape().to_vec(), x.to_vec()).unwrap())
                        } else {
                            t.param(inp.clone())
                        }
                    })
                    .collect();
                build(&t, &vs).item()
            },
            input.data(),
            h,
        )
        .unwrap();
        let (err, _) = max_relative_error(analytic.data(), &numeric, 1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Random weights for a `Σ w ⊙ out` reduction so every output element matters.
fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Var<'t> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(out.shape(), 1.0, &mut rng);
    let wv = out.tape().constant(w);
    out.mul(&wv).unwrap().sum()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let out = i.matmul(&m).unwrap();
    assert_eq!(out.value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_grads_are_transposed_counterparts() {
    let tape = Tape::new();
    let a = tape.param(Tensor::identity(2));
    let b = tape.param(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let loss = a.matmul(&b).unwrap().sum();
    tape.backward(&loss).unwrap();
    // d/da sum(a b) = 1 · bᵀ, d/db = aᵀ · 1
    assert_eq!(tape.grad(&a).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);
    assert_eq!(tape.grad(&b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn matmul_matches_finite_differences() {
    let mut r = rng(1);
    let a = Tensor::uniform([4, 5], 1.0, &mut r);
    let b = Tensor::uniform([5, 3], 1.0, &mut r);
    let err = grad_check(&[a, b], &|_, v| weighted_sum(v[0].matmul(&v[1]).unwrap(), 2), 1e-6);
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 2]));
    match a.matmul(&b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn elementwise_fixed_points() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().item(), 0.5);
    assert_eq!(z.tanh().item(), 0.0);
    assert_eq!(z.gelu().item(), 0.0);
    assert_eq!(z.exp().item(), 1.0);
}

#[test]
fn gelu_gradient_at_37_points() {
    let mut r = rng(3);
    let x = Tensor::uniform([37], 4.0, &mut r);
    let err = grad_check(&[x], &|_, v| weighted_sum(v[0].gelu(), 4), 1e-6);
    assert!(err < 1e-6, "gelu rel err {err}");
}

#[test]
fn non_broadcastable_shapes_are_rejected() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2]));
    assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
    let c = tape.constant(Tensor::zeros([3]));
    assert!(a.add(&c).is_ok());
    let s = tape.constant(Tensor::scalar(2.0));
    assert!(a.mul(&s).is_ok());
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros([3]));
    for v in x.softmax().unwrap().value().data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let s = big.softmax().unwrap().value();
    assert_eq!(s.data()[0], 1.0);
    assert!(s.data()[1] < 1e-300);
    assert!(s.all_finite());
}

#[test]
fn softmax_gradient_on_random_vectors() {
    for seed in 0..10 {
        let x = Tensor::uniform([8], 3.0, &mut rng(seed));
        let err = grad_check(&[x], &|_, v| weighted_sum(v[0].softmax().unwrap(), seed + 100), 1e-6);
        assert!(err < 1e-6, "softmax rel err {err}");
    }
}

#[test]
fn layernorm_constant_row_and_zero_gain() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::full([2, 4], 3.5));
    let g = tape.constant(Tensor::full([4], 1.0));
    let b = tape.constant(Tensor::zeros([4]));
    assert!(x.layernorm(&g, &b, 1e-5).unwrap().value().data().iter().all(|v| *v == 0.0));

    let x = tape.constant(Tensor::uniform([3, 4], 1.0, &mut rng(5)));
    let g0 = tape.constant(Tensor::zeros([4]));
    let bias = tape.constant(Tensor::new([4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
    let out = x.layernorm(&g0, &bias, 1e-5).unwrap().value();
    for row in out.data().chunks(4) {
        assert_eq!(row, &[0.1, -0.2, 0.3, 0.4]);
    }
}

#[test]
fn layernorm_gradient() {
    let mut r = rng(6);
    let x = Tensor::uniform([4, 16], 2.0, &mut r);
    let g = Tensor::uniform([16], 1.5, &mut r);
    let b = Tensor::uniform([16], 1.0, &mut r);
    let err = grad_check(&[x, g, b], &|_, v| weighted_sum(v[0].layernorm(&v[1], &v[2], 1e-5).unwrap(), 7), 1e-5);
    assert!(err < 1e-5, "layernorm rel err {err}");
}

#[test]
fn backward_polynomial_and_accumulation() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = x.mul(&x).unwrap();
    tape.backward(&y).unwrap();
    assert_eq!(tape.grad(&x).unwrap().item(), 6.0);
    tape.backward(&y).unwrap();
    assert_eq!(tape.grad(&x).unwrap().item(), 12.0);
    tape.zero_grad();
    tape.backward(&y).unwrap();
    assert_eq!(tape.grad(&x).unwrap().item(), 6.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros([2]));
    assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
}

#[test]
fn every_reachable_grad_is_populated() {
    let tape = Tape::new();
    let x = tape.param(Tensor::uniform([3], 1.0, &mut rng(8)));
    let h = x.tanh();
    let c = tape.constant(Tensor::full([3], 2.0));
    let y = h.mul(&c).unwrap().sum();
    tape.backward(&y).unwrap();
    assert!(tape.grad(&x).is_some());
    assert!(tape.grad(&h).is_some());
    assert!(tape.grad(&c).is_none());
}

fn identity_op() -> Box<dyn CustomOp> {
    Box::new(FnOp::new(
        "identity",
        |xs: &[&Tensor]| Ok(xs[0].clone()),
        |_: &[&Tensor], _: &Tensor, g: &Tensor| Ok(vec![g.clone()]),
    ))
}

#[test]
fn custom_identity_is_bit_exact() {
    let x0 = Tensor::uniform([5], 2.0, &mut rng(9));
    let plain = {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = x.tanh().mul(&x).unwrap().sum();
        tape.backward(&y).unwrap();
        (y.item(), tape.grad(&x).unwrap())
    };
    let wrapped = {
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let xi = tape.custom(&[x], identity_op()).unwrap();
        let y = xi.tanh().mul(&xi).unwrap().sum();
        tape.backward(&y).unwrap();
        (y.item(), tape.grad(&x).unwrap())
    };
    assert_eq!(plain.0.to_bits(), wrapped.0.to_bits());
    assert_eq!(plain.1, wrapped.1);
}

#[test]
fn custom_times_two() {
    let tape = Tape::new();
    let x = tape.param(Tensor::uniform([4], 1.0, &mut rng(10)));
    let op = FnOp::new(
        "double",
        |xs: &[&Tensor]| Ok(Tensor::from_fn(xs[0].shape().to_vec(), |i| 2.0 * xs[0].data()[i])),
        |_: &[&Tensor], _: &Tensor, g: &Tensor| {
            Ok(vec![Tensor::from_fn(g.shape().to_vec(), |i| 2.0 * g.data()[i])])
        },
    );
    let y = tape.custom(&[x], Box::new(op)).unwrap().sum();
    tape.backward(&y).unwrap();
    assert!(tape.grad(&x).unwrap().data().iter().all(|g| *g == 2.0));
}

#[test]
fn custom_shape_mismatch_is_a_contract_violation() {
    let tape = Tape::new();
    let x = tape.param(Tensor::zeros([3]));
    let op = FnOp::new(
        "broken",
        |xs: &[&Tensor]| Ok(xs[0].clone()),
        |_: &[&Tensor], _: &Tensor, _: &Tensor| Ok(vec![Tensor::zeros([2])]),
    );
    let y = tape.custom(&[x], Box::new(op)).unwrap().sum();
    assert!(matches!(tape.backward(&y), Err(Error::Contract(_))));
}

fn op_zoo(which: usize, seed: u64) -> (Vec<Tensor>, Box<Build<'static>>) {
    let mut r = rng(seed);
    let u = |shape: &[usize], r: &mut ChaCha8Rng| Tensor::uniform(shape.to_vec(), 1.0, r);
    match which {
        0 => (vec![u(&[3, 4], &mut r), u(&[3, 4], &mut r)], Box::new(move |_, v| weighted_sum(v[0].add(&v[1]).unwrap(), seed))),
        1 => (vec![u(&[2, 3, 4], &mut r), u(&[4], &mut r)], Box::new(move |_, v| weighted_sum(v[0].sub(&v[1]).unwrap(), seed))),
        2 => (vec![u(&[2, 3, 4], &mut r), u(&[3, 4], &mut r)], Box::new(move |_, v| weighted_sum(v[0].mul(&v[1]).unwrap(), seed))),
        3 => (vec![u(&[5], &mut r), u(&[], &mut r)], Box::new(move |_, v| weighted_sum(v[0].mul(&v[1]).unwrap(), seed))),
        4 => (vec![u(&[6], &mut r)], Box::new(move |_, v| weighted_sum(v[0].tanh(), seed))),
        5 => (vec![u(&[6], &mut r)], Box::new(move |_, v| weighted_sum(v[0].sigmoid(), seed))),
        6 => (vec![u(&[6], &mut r)], Box::new(move |_, v| weighted_sum(v[0].exp(), seed))),
        7 => {
            let x = Tensor::from_fn([6], |i| 0.5 + 0.3 * i as f64 + r.gen::<f64>());
            (vec![x], Box::new(move |_, v| weighted_sum(v[0].ln(), seed)))
        }
        8 => (vec![u(&[2, 3, 4], &mut r), u(&[2, 4, 5], &mut r)], Box::new(move |_, v| weighted_sum(v[0].bmm(&v[1]).unwrap(), seed))),
        9 => (vec![u(&[2, 3, 4], &mut r), u(&[2, 5, 4], &mut r)], Box::new(move |_, v| weighted_sum(v[0].bmm_nt(&v[1]).unwrap(), seed))),
        10 => (vec![u(&[2, 3, 4, 2], &mut r)], Box::new(move |_, v| weighted_sum(v[0].permute(&[0, 2, 1, 3]).unwrap(), seed))),
        11 => (vec![u(&[3, 5, 2], &mut r)], Box::new(move |_, v| weighted_sum(v[0].narrow(1, 1, 3).unwrap(), seed))),
        12 => (vec![u(&[2, 2, 3], &mut r), u(&[2, 4, 3], &mut r)], Box::new(move |t, v| weighted_sum(t.concat(&[v[0], v[1]], 1).unwrap(), seed))),
        13 => (vec![u(&[2, 5, 3], &mut r)], Box::new(move |_, v| weighted_sum(v[0].mean_axis(1).unwrap(), seed))),
        14 => (vec![u(&[4, 6], &mut r)], Box::new(move |_, v| v[0].scale(3.0).cross_entropy(&[0, 5, 2, 2]).unwrap())),
        15 => (vec![u(&[3, 4], &mut r)], Box::new(move |_, v| weighted_sum(v[0].reshape(&[4, 3]).unwrap().square(), seed))),
        16 => (vec![u(&[7], &mut r)], Box::new(move |_, v| weighted_sum(v[0].offset(0.3).clamp(-0.5, 0.5).neg(), seed))),
        17 => (vec![u(&[2, 5], &mut r)], Box::new(move |_, v| v[0].mean())),
        _ => unreachable!(),
    }
}

#[test]
fn every_op_matches_finite_differences_on_30_instances() {
    for which in 0..18 {
        for seed in 0..30 {
            let (inputs, build) = op_zoo(which, 1000 * which as u64 + seed);
            let err = grad_check(&inputs, build.as_ref(), 1e-5);
            // Clamp kinks at ±0.5 are avoided by construction only in expectation.
            let tol = if which == 16 { 1e-3 } else { 1e-4 };
            assert!(err < tol, "op {which} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn backward_is_deterministic_and_inputs_untouched() {
    let run = || -> Result<(Vec<u64>, Tensor)> {
        let mut r = rng(11);
        let x0 = Tensor::uniform([3, 8], 1.0, &mut r);
        let w0 = Tensor::uniform([8, 8], 1.0, &mut r);
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let w = tape.param(w0.clone());
        let y = x.matmul(&w)?.gelu().softmax()?;
        let loss = weighted_sum(y, 12);
        tape.backward(&loss)?;
        assert_eq!(*x.value(), x0);
        assert_eq!(*w.value(), w0);
        let g = tape.grad(&w).unwrap();
        Ok((g.data().iter().map(|v| v.to_bits()).collect(), g))
    };
    let (a, _) = run().unwrap();
    let (b, _) = run().unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradients_does_not_touch_stored_grads() {
    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let y = x.mul(&x).unwrap().mul(&x).unwrap();
    let g = tape.gradients(&y, &[x]).unwrap();
    assert_eq!(g[0].item(), 12.0);
    assert!(tape.grad(&x).is_none());
}
