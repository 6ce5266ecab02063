//! Finite-difference oracle over the complete model at micro scale: every
//! trainable parameter of a K=2, 8x8, 2-class build, checked in double
//! precision with the losses the trainer actually uses.

use tempora_core::fusion::FusionMode;
use tempora_core::params::ParamBinding;
use tempora_core::pipeline::{Model, ModelConfig, ForwardOpts};
use tempora_core::rng::SplitMix64;
use tempora_core::tensor::{grad_check, Tensor};

fn micro_config(mode: FusionMode) -> ModelConfig {
    let mut cfg = ModelConfig::new(2);
    cfg.k = 2;
    cfg.stack = 1;
    cfg.stage_channels = vec![3, 4];
    cfg.blocks_per_stage = 1;
    cfg.fusion_mode = mode;
    cfg.fused_stages = vec![1, 2];
    cfg.dropout_spatial = 0.8;
    cfg.dropout_temporal = 0.7;
    cfg.dropout_ttn = 0.8;
    cfg
}

fn random_inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = SplitMix64::new(seed);
    let rgb = Tensor::from_vec(
        vec![2, 3, 8, 8],
        (0..2 * 3 * 64).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap();
    let motion = Tensor::from_vec(
        vec![2, 2, 8, 8],
        (0..2 * 2 * 64).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .unwrap();
    (rgb, motion)
}

fn check_model(mode: FusionMode) -> f64 {
    let model = Model::<f64>::build(micro_config(mode), 7).unwrap();
    let ids = model.store.weight_ids();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| model.store.get(id).clone()).collect();
    let (rgb, motion) = random_inputs(90);
    let model_ref = &model;
    grad_check(
        |g, vars| {
            // Fresh store per evaluation: batch-norm running updates stay
            // local, prebound vars stand in for the weights.
            let mut m = model_ref.clone();
            let mut binding = ParamBinding::prebound(&ids, vars);
            let scores = m.forward_batch(
                g,
                &mut binding,
                rgb.clone(),
                motion.clone(),
                1,
                ForwardOpts {
                    train_streams: true,
                    train_ttn: true,
                    with_spatial: true,
                    with_temporal: true,
                    with_ttn: true,
                },
            )?;
            let fused = m.combined_logits(g, &scores, (1.0, 1.0, 1.0))?;
            g.softmax_cross_entropy(fused, &[1])
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn whole_model_gradients_attention() {
    let err = check_model(FusionMode::Attention);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn whole_model_gradients_adaptive() {
    let err = check_model(FusionMode::Adaptive);
    assert!(err < 1e-4, "relative error {err}");
}
