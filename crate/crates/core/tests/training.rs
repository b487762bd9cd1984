use gvit_core::autodiff::Tape;
use gvit_core::data::{synthetic_shapes, Dataset, ShapesConfig};
use gvit_core::losses::{cross_entropy, LossWeights, ReconstructionVariant};
use gvit_core::models::{ModelConfig, ParamSet, TransformerConfig};
use gvit_core::seeding::purpose;
use gvit_core::training::*;
use gvit_core::Tensor;
use gvit_oracles::{adamw_reference, linear_cls_gradient, AdamReference};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(k: usize, classes: usize) -> ModelConfig {
    let t = TransformerConfig {
        width: 16,
        depth: 1,
        heads: 2,
        mlp_hidden: 32,
    };
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        encoder: t,
        classifier: t,
        ..ModelConfig::toy(k, classes)
    }
}

fn shapes(count: usize, seed: u64) -> Dataset {
    synthetic_shapes(ShapesConfig {
        num_classes: 3,
        count,
        image_size: 16,
        seed,
    })
    .unwrap()
}

fn batch_of(data: &Dataset, k: usize, seed: u64) -> Batch {
    let ids: Vec<usize> = (0..data.len()).collect();
    let (images, labels) = data.batch(&ids).unwrap();
    Batch {
        images,
        labels,
        g0: sample_g0(ids.len(), k, seed, purpose::G0, 0),
    }
}

fn settings(gamma: f64, lr: f64) -> StepSettings {
    StepSettings::new(LossWeights::new(0.1, 1.0, gamma).unwrap(), lr)
}

fn same_params(a: &ParamSet, b: &ParamSet) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x.value.data() == y.value.data())
}

#[test]
fn adamw_matches_scalar_reference() {
    let hp = AdamW::default();
    let mut ps = ParamSet::new();
    let id = ps.add("w", Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap(), true);
    let grads = [[0.3, -0.2, 1.0], [0.1, 0.4, -2.0], [-0.5, 0.0, 0.5], [0.2, 0.2, 0.2], [1e-3, -1e-3, 7.0]];
    let mut state = OptimizerState::new(&ps);
    let mut trace = Vec::new();
    for g in &grads {
        adamw_step(&mut ps, &[Tensor::new([3], g.to_vec()).unwrap()], &mut state, 1e-2, &hp).unwrap();
        trace.push(ps.get(id).data().to_vec());
    }
    let h = AdamReference {
        lr: 1e-2,
        beta1: hp.beta1,
        beta2: hp.beta2,
        eps: hp.eps,
        weight_decay: hp.weight_decay,
    };
    for (j, p0) in [0.5, -1.0, 2.0].into_iter().enumerate() {
        let g: Vec<f64> = grads.iter().map(|g| g[j]).collect();
        let reference = adamw_reference(p0, &g, h);
        for (t, r) in reference.iter().enumerate() {
            assert!((trace[t][j] - r).abs() <= 1e-15 * r.abs().max(1.0), "step {t} coord {j}");
        }
    }
}

#[test]
fn zero_gradient_leaves_undecayed_parameters() {
    let hp = AdamW::default();
    let mut ps = ParamSet::new();
    ps.add("bias", Tensor::new([2], vec![0.25, -3.0]).unwrap(), false);
    let before = ps.clone();
    let mut state = OptimizerState::new(&ps);
    for _ in 0..4 {
        adamw_step(&mut ps, &[Tensor::zeros([2])], &mut state, 0.1, &hp).unwrap();
    }
    assert!(same_params(&ps, &before));
}

#[test]
fn constant_gradient_moves_by_learning_rate() {
    let hp = AdamW {
        weight_decay: 0.0,
        ..AdamW::default()
    };
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::new([2], vec![1.0, 1.0]).unwrap(), true);
    let mut state = OptimizerState::new(&ps);
    let g = Tensor::new([2], vec![0.7, -4.0]).unwrap();
    for _ in 0..30 {
        let prev = ps.get(0).data().to_vec();
        adamw_step(&mut ps, &[g.clone()], &mut state, 1e-3, &hp).unwrap();
        let now = ps.get(0).data();
        assert!((prev[0] - now[0] - 1e-3).abs() < 1e-10);
        assert!((now[1] - prev[1] - 1e-3).abs() < 1e-10);
    }
}

#[test]
fn optimizer_rejects_mismatched_gradients() {
    let mut ps = ParamSet::new();
    ps.add("w", Tensor::zeros([2]), true);
    let mut state = OptimizerState::new(&ps);
    let err = adamw_step(&mut ps, &[Tensor::zeros([3])], &mut state, 0.1, &AdamW::default());
    assert!(err.is_err());
    let nan = Tensor::new([2], vec![f64::NAN, 0.0]).unwrap();
    assert!(adamw_step(&mut ps, &[nan], &mut state, 0.1, &AdamW::default()).is_err());
}

#[test]
fn zero_gamma_guidance_equals_reconstruction_step() {
    let data = shapes(6, 3);
    let batch = batch_of(&data, 4, 9);
    let models = Models::new(tiny(4, 3), 2).unwrap();
    let s = settings(0.0, 1e-3);

    let mut a = models.clone();
    let mut opt_a = OptimizerState::new(&a.encoder.params);
    guidance_step(&mut a, &mut opt_a, &batch, &s).unwrap();

    let mut b = models.clone();
    let mut opt_b = OptimizerState::new(&b.encoder.params);
    reconstruction_step(&mut b, &mut opt_b, &batch, &s).unwrap();

    assert!(same_params(&a.encoder.params, &b.encoder.params));
    assert_eq!(opt_a, opt_b);
    assert!(!same_params(&a.encoder.params, &models.encoder.params));
}

#[test]
fn phases_touch_only_their_parameters() {
    let data = shapes(6, 4);
    let batch = batch_of(&data, 4, 1);
    let models = Models::new(tiny(4, 3), 5).unwrap();
    let s = settings(0.1, 1e-3);

    let mut m = models.clone();
    let mut opt = OptimizerState::new(&m.classifier.params);
    classifier_step(&mut m, &mut opt, &batch, &s).unwrap();
    assert!(same_params(&m.encoder.params, &models.encoder.params));
    assert!(!same_params(&m.classifier.params, &models.classifier.params));

    let mut m = models.clone();
    let mut opt = OptimizerState::new(&m.encoder.params);
    guidance_step(&mut m, &mut opt, &batch, &s).unwrap();
    assert!(same_params(&m.classifier.params, &models.classifier.params));

    let mut m = models.clone();
    let mut opt = OptimizerState::new(&m.encoder.params);
    reconstruction_step(&mut m, &mut opt, &batch, &s).unwrap();
    assert!(same_params(&m.classifier.params, &models.classifier.params));
}

#[test]
fn zero_class_weight_joint_step_matches_reconstruction_for_encoder() {
    let data = shapes(6, 8);
    let batch = batch_of(&data, 4, 3);
    let models = Models::new(tiny(4, 3), 11).unwrap();
    let s = StepSettings::new(LossWeights::new(0.1, 0.0, 0.0).unwrap(), 1e-3);

    let mut a = models.clone();
    let mut enc_a = OptimizerState::new(&a.encoder.params);
    let mut cls_a = OptimizerState::new(&a.classifier.params);
    train_step_joint(&mut a, &mut enc_a, &mut cls_a, &batch, &s).unwrap();

    let mut b = models.clone();
    let mut enc_b = OptimizerState::new(&b.encoder.params);
    reconstruction_step(&mut b, &mut enc_b, &batch, &s).unwrap();

    for (x, y) in a.encoder.params.iter().zip(b.encoder.params.iter()) {
        assert!(x.value.max_abs_diff(&y.value) < 1e-12, "{}", x.name);
    }
}

#[test]
fn chunking_does_not_change_gradients() {
    let data = shapes(6, 2);
    let batch = batch_of(&data, 4, 5);
    let models = Models::new(tiny(4, 3), 1).unwrap();
    let mut s = settings(0.1, 1e-3);
    s.chunk_size = 6;
    let whole = batch_gradients(&models, &batch, StepKind::Joint, &s).unwrap();
    s.chunk_size = 4;
    let split = batch_gradients(&models, &batch, StepKind::Joint, &s).unwrap();
    assert!((whole.report.total - split.report.total).abs() < 1e-12);
    for (x, y) in whole.encoder.unwrap().iter().zip(split.encoder.unwrap().iter()) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn joint_step_decreases_loss_on_most_seeds() {
    let mut decreased = 0;
    for seed in 0..20u64 {
        let data = shapes(4, 100 + seed);
        let batch = batch_of(&data, 4, seed);
        let mut m = Models::new(tiny(4, 3), seed).unwrap();
        let s = settings(0.0, 1e-4);
        let before = batch_gradients(&m, &batch, StepKind::Joint, &s).unwrap().report.total;
        let mut enc = OptimizerState::new(&m.encoder.params);
        let mut cls = OptimizerState::new(&m.classifier.params);
        train_step_joint(&mut m, &mut enc, &mut cls, &batch, &s).unwrap();
        let after = batch_gradients(&m, &batch, StepKind::Joint, &s).unwrap().report.total;
        decreased += usize::from(after < before);
    }
    assert!(decreased >= 18, "loss fell on {decreased}/20 seeds");
}

#[test]
fn linear_classifier_gradient_matches_closed_form() {
    let (k, classes) = (3, 4);
    let mut cfg = tiny(k, classes);
    cfg.classifier.depth = 0;
    cfg.use_class_token = false;
    cfg.classifier_positions = false;
    cfg.classifier_final_norm = false;
    let models = Models::new(cfg, 7).unwrap();
    let cls = &models.classifier;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta: Vec<f64> = (0..k * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();

    // Mean pooling of a linear lift followed by a linear head is one linear map.
    let lift_w = cls.params.get(cls.params.index_of("classifier.gauss_embed.weight").unwrap());
    let lift_b = cls.params.get(cls.params.index_of("classifier.gauss_embed.bias").unwrap());
    let head_w = cls.params.get(cls.params.index_of("classifier.head.weight").unwrap());
    let head_b = cls.params.get(cls.params.index_of("classifier.head.bias").unwrap());
    let d = cfg.classifier.width;
    let mut weights = vec![0.0; k * 9 * classes];
    for i in 0..k {
        for j in 0..9 {
            for c in 0..classes {
                let w: f64 = (0..d).map(|e| lift_w.data()[j * d + e] * head_w.data()[e * classes + c]).sum();
                weights[(i * 9 + j) * classes + c] = w / k as f64;
            }
        }
    }
    let bias: Vec<f64> = (0..classes)
        .map(|c| head_b.data()[c] + (0..d).map(|e| lift_b.data()[e] * head_w.data()[e * classes + c]).sum::<f64>())
        .collect();

    for label in 0..classes {
        let tape = Tape::new();
        let p = cls.params.bind(&tape, false);
        let x = tape.leaf(Tensor::new([1, k, 9], theta.clone()).unwrap(), true);
        let loss = cross_entropy(&cls.forward(&p, &x).unwrap().logits, &[label]).unwrap();
        let g = tape.gradients(&loss, &[x]).unwrap().remove(0);
        let expected = linear_cls_gradient(&theta, &weights, &bias, label);
        for (a, b) in g.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

fn quick_config(epochs: PhaseEpochs) -> TrainConfig {
    TrainConfig {
        base_lr: 0.05,
        batch_size: 4,
        epochs,
        warmup_epochs: 1,
        augment: Augment { hflip: true, crop: true },
        seed: 21,
        ..TrainConfig::default()
    }
}

fn one_each() -> PhaseEpochs {
    PhaseEpochs {
        warmup_encoder: 1,
        perc_on: 1,
        classifier_pretrain: 1,
        classifier_joint: 1,
        guidance: 1,
    }
}

#[test]
fn first_steps_are_deterministic() {
    let data = shapes(40, 6);
    let run = || {
        let mut t = Trainer::new(tiny(4, 3), quick_config(one_each())).unwrap();
        t.run_epoch(&data, None).unwrap();
        t.step_losses
    };
    let a = run();
    assert_eq!(a.len(), 10);
    assert_eq!(a, run());
}

#[test]
fn full_schedule_logs_every_phase() {
    let data = shapes(12, 7);
    let (train, val) = data.split(4, 1).unwrap();
    let (trainer, log) = run_schedule(tiny(4, 3), quick_config(one_each()), &train, Some(&val)).unwrap();
    let phases: Vec<Phase> = log.iter().map(|m| m.phase).collect();
    assert_eq!(phases, Phase::ALL);
    assert!(log[0].l_cls.is_nan() && log[0].l_pix.is_finite());
    assert!(log[1].l_perc.is_finite());
    assert!(log[2].l_pix.is_nan() && log[2].train_acc.is_finite());
    assert!(log.iter().all(|m| (0.0..=1.0).contains(&m.val_acc) && m.mean_det_sigma > 0.0));
    assert_eq!(trainer.global_step, 10);
    assert!(trainer.is_finished());
    assert_eq!(METRICS_HEADER.split(',').count(), log[3].csv_row().split(',').count());
}

#[test]
fn empty_schedule_yields_no_metrics() {
    let data = shapes(4, 1);
    let zero = PhaseEpochs {
        warmup_encoder: 0,
        perc_on: 0,
        classifier_pretrain: 0,
        classifier_joint: 0,
        guidance: 0,
    };
    let (_, log) = run_schedule(tiny(4, 3), quick_config(zero), &data, None).unwrap();
    assert!(log.is_empty());
}

#[test]
fn gamma_above_cap_is_rejected() {
    let mut cfg = quick_config(one_each());
    cfg.weights.gamma = 0.2;
    assert!(Trainer::new(tiny(4, 3), cfg).is_err());
}

#[test]
fn evaluation_modes_and_contracts() {
    let data = shapes(5, 12);
    let models = Models::new(tiny(4, 3), 4).unwrap();
    let g = evaluate(&models, &data, EvalMode::Gaussians, 0).unwrap();
    assert_eq!((g.total, g.predictions.len()), (5, 5));
    assert_eq!(g, evaluate(&models, &data, EvalMode::Gaussians, 0).unwrap());
    let r = evaluate(&models, &data, EvalMode::Rendered, 0).unwrap();
    assert_eq!(r.total, 5);
    assert!(evaluate(&models, &data.subset(&[]), EvalMode::Gaussians, 0).is_err());
    assert_eq!("rendered".parse::<EvalMode>().unwrap(), EvalMode::Rendered);
    assert!("pixels".parse::<EvalMode>().is_err());
}

#[test]
fn fitting_a_flat_image_with_one_gaussian() {
    let image = Tensor::from_fn([16, 16, 3], |i| [0.3, 0.6, 0.2][i % 3]);
    let opts = FitOptions {
        lr: 0.05,
        scale_bound: 4.0,
        seed: 2,
        ..FitOptions::default()
    };
    let fit = fit_image_sgd(&image, 1, 500, opts).unwrap();
    assert!(fit.final_mse < 1e-3, "final mse {}", fit.final_mse);

    let means: Vec<f64> = fit.losses.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

#[test]
fn fitting_rejects_bad_inputs() {
    let image = Tensor::zeros([8, 8, 3]);
    assert!(fit_image_sgd(&image, 2, 0, FitOptions::default()).is_err());
    assert!(fit_image_sgd(&Tensor::zeros([8, 8]), 2, 10, FitOptions::default()).is_err());
    let opts = FitOptions {
        variant: ReconstructionVariant::Bce,
        ..FitOptions::default()
    };
    assert_eq!(fit_image_sgd(&image, 2, 3, opts).unwrap().losses.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_stays_within_peak(step in 0u64..2000, total in 1u64..1000, warmup in 0u64..500, batch in 1usize..4096) {
        let warmup = warmup.min(total / 2);
        let lr = lr_schedule(step, total, warmup, 1e-4, batch);
        let peak = 1e-4 * batch as f64 / 256.0;
        prop_assert!(lr >= 0.0 && lr <= peak * (1.0 + 1e-12));
    }

    #[test]
    fn augmentation_keeps_pixel_range(seed in 0u64..1000, hflip: bool, crop: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn([8, 8, 3], |i| ((i * 37 % 101) as f64) / 100.0);
        let out = augment_image(&img, Augment { hflip, crop }, &mut rng);
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if !hflip && !crop {
            prop_assert_eq!(out, img);
        }
    }
}
