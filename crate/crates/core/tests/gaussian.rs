use gvit_core::autodiff::Tape;
use gvit_core::gaussian::*;
use gvit_core::Tensor;
use gvit_oracles::{finite_diff, max_relative_error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn random_batches_decode_in_range() {
    for seed in 0..20 {
        let raw = init_random(64, seed).unwrap();
        decode(&raw, ScaleBound::default()).unwrap().check_ranges(ScaleBound::default()).unwrap();
    }
}

#[test]
fn decode_var_matches_plain_decode_and_gradient() {
    let raw = init_random(5, 11).unwrap();
    let bound = ScaleBound::new(0.7).unwrap();
    let plain = decode(&raw, bound).unwrap();

    let tape = Tape::new();
    let x = tape.param(raw.params().clone());
    let y = decode_var(&x, bound).unwrap();
    assert_eq!(&*y.value(), plain.params());

    let weights = Tensor::randn([5, 9], &mut ChaCha8Rng::seed_from_u64(2));
    let w = tape.constant(weights.clone());
    let loss = y.mul(&w).unwrap().sum();
    tape.backward(&loss).unwrap();
    let analytic = tape.grad(&x).unwrap();

    let numeric = finite_diff(
        |p| {
            let t = Tensor::new([5, 9], p.to_vec()).unwrap();
            let d = decode(&RawGaussianBatch::new(t).unwrap(), bound).unwrap();
            d.params().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        },
        raw.params().data(),
        1e-6,
    )
    .unwrap();
    let (err, _) = max_relative_error(analytic.data(), &numeric, 1e-8);
    assert!(err < 1e-6, "decode gradient rel err {err}");
}

#[test]
fn decode_var_rejects_non_finite() {
    let tape = Tape::new();
    let mut t = Tensor::zeros([2, 9]);
    t.data_mut()[9 + 3] = f64::INFINITY;
    let err = decode_var(&tape.param(t), ScaleBound::default()).unwrap_err().to_string();
    assert!(err.contains("row 1"), "{err}");
}

fn constant_image(h: usize, w: usize, rgb: [f64; 3]) -> Tensor {
    Tensor::from_fn([h, w, 3], |i| rgb[i % 3])
}

#[test]
fn kmeans_constant_image() {
    let img = constant_image(8, 8, [0.3, 0.6, 0.1]);
    let raw = init_kmeans_colors(&img, 1, 0, ScaleBound::default()).unwrap();
    let d = decode(&raw, ScaleBound::default()).unwrap();
    let [x, y] = d.center(0);
    assert!(x.abs() < 1e-9 && y.abs() < 1e-9);
    let c = d.color(0);
    for (a, b) in c.iter().zip([0.3, 0.6, 0.1]) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!((d.opacity(0) - 0.5).abs() < 1e-15);
}

#[test]
fn kmeans_half_split() {
    let (left, right) = ([0.2, 0.4, 0.6], [0.9, 0.1, 0.3]);
    let img = Tensor::from_fn([8, 8, 3], |i| {
        let col = (i / 3) % 8;
        if col < 4 { left[i % 3] } else { right[i % 3] }
    });
    for seed in 0..5 {
        let raw = init_kmeans_colors(&img, 2, seed, ScaleBound::default()).unwrap();
        let d = decode(&raw, ScaleBound::default()).unwrap();
        let mut seen = [false; 2];
        for g in 0..2 {
            let [x, y] = d.center(g);
            assert!(y.abs() < 1e-9);
            let expect = if x < 0.0 { left } else { right };
            seen[usize::from(x > 0.0)] = true;
            for (a, b) in d.color(g).iter().zip(expect) {
                assert!((a - b).abs() < 1e-9);
            }
            // Columns 0..4 of 8 map to -1, -5/7, -3/7, -1/7.
            assert!((x.abs() - 4.0 / 7.0).abs() < 1e-9);
        }
        assert_eq!(seen, [true, true]);
    }
}

#[test]
fn kmeans_random_images_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..100 {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let img = Tensor::from_fn([h, w, 3], |_| rng.gen::<f64>());
        let k = rng.gen_range(1..=h * w);
        let raw = init_kmeans_colors(&img, k, seed, ScaleBound::default()).unwrap();
        assert_eq!(raw.len(), k);
        decode(&raw, ScaleBound::default()).unwrap().check_ranges(ScaleBound::default()).unwrap();
    }
}

#[test]
fn kmeans_rejects_too_many_clusters() {
    let img = constant_image(2, 2, [0.5; 3]);
    assert!(init_kmeans_colors(&img, 5, 0, ScaleBound::default()).is_err());
    assert!(init_kmeans_colors(&img, 0, 0, ScaleBound::default()).is_err());
}

fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-4.0f64..4.0, 9)
}

proptest! {
    #[test]
    fn encode_inverts_decode(row in row_strategy(), c in 0.1f64..3.0) {
        let bound = ScaleBound::new(c).unwrap();
        let raw = RawGaussianBatch::new(Tensor::new([1, 9], row.clone()).unwrap()).unwrap();
        let back = encode(&decode(&raw, bound).unwrap(), bound).unwrap();
        for (a, b) in back.params().data().iter().zip(&row) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales(s1 in 1e-3f64..3.0, s2 in 1e-3f64..3.0, phi in -10.0f64..10.0) {
        let cov = covariance([s1, s2], phi).unwrap();
        let m = cov.sigma;
        prop_assert!((m[0][1] - m[1][0]).abs() == 0.0);
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
        let (hi, lo) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let (v_hi, v_lo) = ((s1 * s1).max(s2 * s2), (s1 * s1).min(s2 * s2));
        prop_assert!((hi - v_hi).abs() < 1e-9 * v_hi.max(1.0));
        prop_assert!((lo - v_lo).abs() < 1e-9 * v_hi.max(1.0));
        prop_assert!((cov.det - s1 * s1 * s2 * s2).abs() < 1e-12 * cov.det.max(1.0));
        // Σ Σ⁻¹ = I
        let inv = cov.inverse;
        for i in 0..2 {
            for j in 0..2 {
                let p = m[i][0] * inv[0][j] + m[i][1] * inv[1][j];
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((p - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn determinant_ignores_rotation(s1 in 0.01f64..2.0, s2 in 0.01f64..2.0, a in -7.0f64..7.0, b in -7.0f64..7.0) {
        let d1 = covariance([s1, s2], a).unwrap().det;
        let d2 = covariance([s1, s2], b).unwrap().det;
        prop_assert_eq!(d1, d2);
    }
}
