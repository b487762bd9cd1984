use gvit_core::gaussian::PARAMS_PER_GAUSSIAN;
use gvit_core::losses::LossWeights;
use gvit_core::models::{ModelConfig, TransformerConfig};
use gvit_core::raster::RenderMode;
use gvit_core::seeding::purpose;
use gvit_core::tensor::Tensor;
use gvit_core::training::{batch_gradients, sample_g0, Batch, Models, StepKind, StepSettings};
use gvit_oracles::relative_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    let t = TransformerConfig {
        width: 16,
        depth: 2,
        heads: 2,
        mlp_hidden: 32,
    };
    ModelConfig {
        image_size: 16,
        patch_size: 8,
        k: 8,
        num_classes: 3,
        encoder: t,
        classifier: t,
        ..ModelConfig::toy(8, 3)
    }
}

fn tiny_models(seed: u64) -> Models {
    let mut m = Models::new(tiny_config(), seed).unwrap();
    m.render_mode = RenderMode::Exact;
    // The zero-initialized residual head would hide every upstream gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = m.encoder.params.index_of("encoder.head.fc2.weight").unwrap();
    for v in m.encoder.params.get_mut(head).data_mut() {
        *v = rng.gen_range(-0.3..0.3);
    }
    m
}

fn tiny_batch(seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch {
        images: Tensor::from_fn([2, 16, 16, 3], |_| rng.gen_range(0.05..0.95)),
        labels: vec![0, 2],
        g0: sample_g0(2, 8, seed, purpose::G0, 0),
    }
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let settings = StepSettings::new(LossWeights::new(0.1, 1.0, 0.0).unwrap(), 0.0);
    let base = tiny_models(3);
    let batch = tiny_batch(4);
    let grads = batch_gradients(&base, &batch, StepKind::Joint, &settings).unwrap();
    let (enc, cls) = (grads.encoder.unwrap(), grads.classifier.unwrap());
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for (model, grads) in [(0, &enc), (1, &cls)] {
        let count = if model == 0 { base.encoder.params.len() } else { base.classifier.params.len() };
        for id in 0..count {
            let n = grads[id].numel();
            for _ in 0..3 {
                let j = rng.gen_range(0..n);
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    let ps = if model == 0 { &mut m.encoder.params } else { &mut m.classifier.params };
                    ps.get_mut(id).data_mut()[j] += delta;
                    batch_gradients(&m, &batch, StepKind::Joint, &settings).unwrap().report.total
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = relative_error(grads[id].data()[j], numeric, 1e-6);
                let name = if model == 0 { &base.encoder.params.param(id).name } else { &base.classifier.params.param(id).name };
                assert!(err < 1e-4, "{name}[{j}]: analytic {} numeric {numeric}", grads[id].data()[j]);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst.is_finite());
    let _ = PARAMS_PER_GAUSSIAN;
}
