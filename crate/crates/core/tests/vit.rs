use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sata_core::attention::AttentionConfig;
use sata_core::sata::{SataConfig, SuppressionScale};
use sata_core::tensor::{finite_diff_check, Tape, Tensor};
use sata_core::vit::{
    load_checkpoint, param_count, predict_logits, save_checkpoint, vit_forward, ModelState,
    ViTConfig,
};

fn config(
    image: usize,
    patch: usize,
    d: usize,
    heads: usize,
    depth: usize,
    classes: usize,
) -> ViTConfig {
    ViTConfig {
        image_size: image,
        patch_size: patch,
        channels: 3,
        embed_dim: d,
        depth,
        mlp_ratio: 2.0,
        num_classes: classes,
        attention: AttentionConfig::new(heads, d / heads),
        sata: None,
        layer_norm_eps: 1e-6,
    }
}

fn random_images(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Tensor {
    Tensor::new(
        vec![b, 3, size, size],
        (0..b * 3 * size * size)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

#[test]
fn token_counts() {
    assert_eq!(config(32, 4, 8, 1, 1, 10).num_tokens(), 65);
    assert_eq!(config(64, 8, 8, 1, 1, 10).num_tokens(), 65);
    assert_eq!(config(8, 8, 8, 1, 1, 10).num_tokens(), 2);
}

#[test]
fn depth_zero_parameter_count_by_hand() {
    let cfg = config(8, 8, 8, 1, 0, 10);
    // patch 192·8 + 8, class token 8, positions 2·8, final norm 2·8, head 8·10 + 10
    let by_hand = 192 * 8 + 8 + 8 + 16 + 16 + 80 + 10;
    assert_eq!(by_hand, 1674);
    assert_eq!(param_count(&cfg), by_hand);
    assert_eq!(ModelState::init(&cfg, 0).unwrap().num_scalars(), by_hand);
}

#[test]
fn parameter_count_matches_enumeration() {
    for (lsa, sata) in [(false, false), (true, true), (false, true)] {
        let mut cfg = config(16, 4, 12, 3, 3, 7);
        cfg.attention.lsa_learnable_temperature = lsa;
        cfg.sata = sata.then(SataConfig::default);
        assert_eq!(
            param_count(&cfg),
            ModelState::init(&cfg, 1).unwrap().num_scalars()
        );
    }
}

#[test]
fn learnable_scales_add_one_per_layer() {
    let fixed = ViTConfig {
        sata: Some(SataConfig::relative(0.1, SuppressionScale::Fixed(0.5))),
        ..ViTConfig::default()
    };
    let learnable = ViTConfig::default();
    assert_eq!(param_count(&learnable) - param_count(&fixed), 9);
}

#[test]
fn default_model_is_about_2_8_million_parameters() {
    let n = param_count(&ViTConfig::default()) as f64;
    assert!((n - 2.8e6).abs() <= 0.28e6, "{n}");
}

#[test]
fn depth_zero_ignores_the_image() {
    let cfg = config(8, 4, 8, 2, 0, 5);
    let state = ModelState::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = predict_logits(&state, &cfg, &random_images(&mut rng, 3, 8)).unwrap();
    for r in 1..3 {
        assert_eq!(logits.row(r), logits.row(0));
    }
}

#[test]
fn zeroed_residual_branches_reduce_to_depth_zero() {
    let cfg = config(8, 4, 8, 2, 2, 5);
    let mut state = ModelState::init(&cfg, 11).unwrap();
    for b in &mut state.blocks {
        b.attn.proj_weight = Tensor::zeros(b.attn.proj_weight.shape());
        b.fc2_weight = Tensor::zeros(b.fc2_weight.shape());
    }
    let shallow_cfg = config(8, 4, 8, 2, 0, 5);
    let mut shallow = state.clone();
    shallow.blocks.clear();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let images = random_images(&mut rng, 2, 8);
    let deep = predict_logits(&state, &cfg, &images).unwrap();
    let flat = predict_logits(&shallow, &shallow_cfg, &images).unwrap();
    assert_eq!(deep, flat);
}

#[test]
fn initialization_and_forward_are_deterministic() {
    let mut cfg = config(8, 4, 8, 2, 2, 5);
    cfg.sata = Some(SataConfig::default());
    let a = ModelState::init(&cfg, 5).unwrap();
    let b = ModelState::init(&cfg, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, ModelState::init(&cfg, 6).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images = random_images(&mut rng, 4, 8);
    assert_eq!(
        predict_logits(&a, &cfg, &images).unwrap(),
        predict_logits(&b, &cfg, &images).unwrap()
    );
}

#[test]
fn zero_threshold_matches_suppression_off() {
    let mut on = config(16, 4, 16, 4, 2, 6);
    on.sata = Some(SataConfig::relative(
        0.0,
        SuppressionScale::Learnable { init: 0.5 },
    ));
    let mut off = on.clone();
    off.sata = None;
    let state = ModelState::init(&on, 8).unwrap();
    let mut plain = state.clone();
    for b in &mut plain.blocks {
        b.sata_scale = None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random_images(&mut rng, 3, 16);
    let x = predict_logits(&state, &on, &images).unwrap();
    let y = predict_logits(&plain, &off, &images).unwrap();
    assert!(x.max_abs_diff(&y) <= 1e-15);
}

#[test]
fn bad_images_are_rejected() {
    let cfg = config(8, 4, 8, 2, 1, 5);
    let state = ModelState::init(&cfg, 0).unwrap();
    let err = predict_logits(&state, &cfg, &Tensor::zeros(&[1, 3, 16, 16])).unwrap_err();
    assert_eq!(err.category(), "data");
    let mut bad = cfg.clone();
    bad.patch_size = 3;
    assert_eq!(ModelState::init(&bad, 0).unwrap_err().category(), "config");
}

/// Tiny model with attention sharp enough that relative t = 0.4 marks
/// weights trivial in every layer.
fn tiny_model() -> (ViTConfig, ModelState) {
    let mut cfg = config(8, 4, 16, 2, 2, 4);
    cfg.sata = Some(SataConfig::relative(
        0.4,
        SuppressionScale::Learnable { init: 0.5 },
    ));
    let mut state = ModelState::init(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for (i, b) in state.blocks.iter_mut().enumerate() {
        for x in b.attn.qkv_weight.data_mut() {
            *x *= 4.0;
        }
        for x in b
            .fc1_bias
            .data_mut()
            .iter_mut()
            .chain(b.norm1_bias.data_mut())
        {
            *x = rng.random_range(-0.2..0.2);
        }
        b.sata_scale = Some(Tensor::scalar(0.3 + 0.4 * i as f64));
    }
    for x in state.pos_embed.data_mut() {
        *x *= 20.0;
    }
    (cfg, state)
}

#[test]
fn tiny_vit_loss_passes_the_gradient_check() {
    let (cfg, state) = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let images = random_images(&mut rng, 2, 8);
    let labels = [1usize, 3];

    let mut probe = sata_core::attention::AttentionProbe::default();
    let mut tape = Tape::new();
    let params = state.register(&mut tape, false);
    vit_forward(&mut tape, &images, &params, &cfg, Some(&mut probe)).unwrap();
    for layer in 0..cfg.depth {
        let masked: usize = probe
            .records
            .iter()
            .filter(|r| r.layer == layer)
            .map(|r| r.mask.as_ref().unwrap().count())
            .sum();
        assert!(masked > 0, "layer {layer} has nothing to suppress");
    }

    let inputs: Vec<Tensor> = state.named().into_iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape, v: &[sata_core::tensor::Var]| {
        let params = state.from_flat(v)?;
        let logits = vit_forward(tape, &images, &params, &cfg, None)?;
        tape.cross_entropy(logits, &labels)
    };
    let report = finite_diff_check(f, &inputs, 1e-5).unwrap();
    assert!(report.pass, "{report:?}");
    assert_eq!(report.checked, param_count(&cfg));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (cfg, state) = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &cfg, &state).unwrap();
    let (cfg2, state2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(state, state2);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let (cfg, state) = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &cfg, &state).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["config"]["num_classes"] = serde_json::json!(5);
    std::fs::write(&path, json.to_string()).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().category(), "checkpoint");
    std::fs::write(&path, "{\"format\": \"other\"}").unwrap();
    assert_eq!(load_checkpoint(&path).unwrap_err().category(), "checkpoint");
}
