use super::*;
use crate::params::Module;

fn small_config(shape: [usize; 3]) -> ModelConfig {
    ModelConfig { input_shape: shape, ..ModelConfig::desk() }
}

fn random_volume<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Tensor<T> {
    let [z, y, x] = cfg.tensor_dims();
    let mut r = Rng::new(seed);
    Tensor::new(&[1, z, y, x], (0..z * y * x).map(|_| T::from_f64(r.normal())).collect()).unwrap()
}

/// Closed-form parameter count, written out layer by layer.
fn analytic_count(cfg: &ModelConfig) -> usize {
    let f = cfg.base_features;
    let p = cfg.patch;
    let mut n = p * p * p * cfg.in_channels * f + f;
    for i in 0..4 {
        let c = f << i;
        let sub_block = (2 * c) + (3 * c * c + 3 * c) + (c * c + c) + (2 * c) + (4 * c * c + 4 * c) + (4 * c * c + c);
        n += cfg.stage_depths[i] * 2 * sub_block;
        n += 16 * c + 8 * c * 2 * c + 2 * c;
    }
    let res = |a: usize, b: usize| 27 * a * b + 27 * b * b + if a != b { a * b } else { 0 };
    n += res(cfg.in_channels, f) + res(f, f) + res(2 * f, 2 * f) + res(4 * f, 4 * f) + res(16 * f, 16 * f);
    for (a, b) in [(16, 8), (8, 4), (4, 2), (2, 1), (1, 1)] {
        n += 8 * a * f * b * f + res(2 * b * f, b * f);
    }
    n += cfg.seg_classes * f + cfg.seg_classes;
    n += 16 * f * cfg.cls_classes + cfg.cls_classes;
    n
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::desk();
    let m = build_model::<f32>(&cfg, &mut Rng::new(0)).unwrap();
    assert_eq!(m.param_count(), analytic_count(&cfg));
    let paper = ModelConfig::paper();
    let m = build_model::<f32>(&paper, &mut Rng::new(0)).unwrap();
    assert_eq!(m.param_count(), analytic_count(&paper));
}

#[test]
fn paper_profile_stage_widths() {
    let m = build_model::<f32>(&ModelConfig::paper(), &mut Rng::new(0)).unwrap();
    let widths: Vec<usize> = m.stages.iter().map(|s| s.blocks[0].regular.dim()).collect();
    assert_eq!(widths, [60, 120, 240, 480]);
}

#[test]
fn same_seed_same_parameters() {
    let cfg = ModelConfig::desk();
    let a = build_model::<f32>(&cfg, &mut Rng::new(5)).unwrap();
    let b = build_model::<f32>(&cfg, &mut Rng::new(5)).unwrap();
    for ((na, ta), (nb, tb)) in a.named_params().iter().zip(b.named_params()) {
        assert_eq!(na, &nb);
        assert_eq!(ta.data(), tb.data());
    }
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = ModelConfig::desk();
    cfg.stage_depths = vec![1, 1, 1];
    assert!(matches!(build_model::<f32>(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
}

#[test]
fn desk_forward_shapes_and_determinism() {
    let cfg = ModelConfig::desk();
    let m = build_model::<f32>(&cfg, &mut Rng::new(1)).unwrap();
    let v = random_volume::<f32>(&cfg, 2);
    let _g = no_grad();
    let a = forward(&m, &v, Mode::Eval).unwrap();
    assert_eq!(a.seg_logits.shape(), &[4, 16, 64, 64]);
    assert_eq!(a.cls_logits.shape(), &[3]);
    let b = forward(&m, &v, Mode::Eval).unwrap();
    assert_eq!(a.seg_logits.data(), b.seg_logits.data());
    assert_eq!(a.cls_logits.data(), b.cls_logits.data());
    let probs = a.seg_logits.softmax(0).unwrap();
    let n = 16 * 64 * 64;
    for i in (0..n).step_by(97) {
        let s: f32 = (0..4).map(|c| probs.data()[c * n + i]).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn output_matches_input_dims_for_odd_shapes() {
    let _g = no_grad();
    for shape in [[20, 12, 6], [18, 34, 9], [8, 8, 3]] {
        let cfg = ModelConfig { base_features: 6, ..small_config(shape) };
        let m = build_model::<f32>(&cfg, &mut Rng::new(3)).unwrap();
        let out = forward(&m, &random_volume(&cfg, 4), Mode::Eval).unwrap();
        let [z, y, x] = cfg.tensor_dims();
        assert_eq!(out.seg_logits.shape(), &[4, z, y, x], "input {shape:?}");
    }
}

#[test]
fn training_mode_applies_dropout_to_classifier_only() {
    let cfg = small_config([16, 16, 8]);
    let m = build_model::<f32>(&cfg, &mut Rng::new(1)).unwrap();
    let v = random_volume::<f32>(&cfg, 2);
    let _g = no_grad();
    let eval = forward(&m, &v, Mode::Eval).unwrap();
    let train = forward(&m, &v, Mode::Train(&mut Rng::new(9))).unwrap();
    assert_eq!(eval.seg_logits.data(), train.seg_logits.data());
    assert_ne!(eval.cls_logits.data(), train.cls_logits.data());
}

fn zero_all<T: Scalar>(m: &mut ModelParams<T>) {
    m.visit_mut("", &mut |_, t| *t = Tensor::zeros(t.shape()));
}

#[test]
fn zero_weights_give_zero_decoder_output() {
    let cfg = small_config([16, 16, 8]);
    let mut m = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    zero_all(&mut m);
    let v = random_volume::<f64>(&cfg, 2);
    let hidden: Vec<Tensor<f64>> = encoder_forward(&m, &v)
        .unwrap()
        .iter()
        .map(|h| h.permute(&[3, 0, 1, 2]).unwrap())
        .collect();
    let d = decoder_forward(&m, &v, &hidden).unwrap();
    assert_eq!(d.shape(), &[12, 8, 16, 16]);
    assert!(d.data().iter().all(|&x| x == 0.0));
}

#[test]
fn zeroed_skips_change_decoder_output() {
    let cfg = small_config([16, 16, 8]);
    let m = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    let v = random_volume::<f64>(&cfg, 2);
    let hidden: Vec<Tensor<f64>> = encoder_forward(&m, &v)
        .unwrap()
        .iter()
        .map(|h| h.layer_norm(None, None, 1e-5).unwrap().permute(&[3, 0, 1, 2]).unwrap())
        .collect();
    let full = decoder_forward(&m, &v, &hidden).unwrap();
    let mut ablated = hidden.clone();
    for h in ablated.iter_mut().take(4) {
        *h = Tensor::zeros(h.shape());
    }
    let cut = decoder_forward(&m, &Tensor::zeros(v.shape()), &ablated).unwrap();
    let diff: f64 = full.data().iter().zip(cut.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3, "skip ablation had no effect");
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = ModelConfig::desk();
    let m = build_model::<f32>(&cfg, &mut Rng::new(7)).unwrap();
    let v = random_volume::<f32>(&cfg, 8);
    let out = forward(&m, &v, Mode::Train(&mut Rng::new(1))).unwrap();
    let [z, y, x] = cfg.tensor_dims();
    let mut r = Rng::new(2);
    let mask: Vec<usize> = (0..z * y * x).map(|_| r.below(4)).collect();
    let loss = out
        .seg_logits
        .cross_entropy(&mask, 0)
        .unwrap()
        .add(&out.cls_logits.reshape(&[1, 3]).unwrap().cross_entropy(&[1], 1).unwrap())
        .unwrap();
    loss.backward().unwrap();
    for (name, t) in m.named_params() {
        let g = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm: f64 = g.iter().map(|&v| (v as f64) * (v as f64)).sum();
        assert!(norm > 0.0, "{name} has a zero gradient");
    }
}

#[test]
fn ensemble_contracts() {
    let cfg = small_config([16, 16, 8]);
    let a = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    let v = random_volume::<f64>(&cfg, 3);
    let out = forward(&a, &v, Mode::Eval).unwrap();
    let (seg, cls) = ensemble_predict(std::slice::from_ref(&a), &v).unwrap();
    assert_eq!(seg.data(), out.seg_logits.softmax(0).unwrap().data());
    assert_eq!(cls.data(), out.cls_logits.softmax(0).unwrap().data());
    let twin = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    let (seg2, cls2) = ensemble_predict(&[a, twin], &v).unwrap();
    for (p, q) in seg2.data().iter().zip(seg.data()).chain(cls2.data().iter().zip(cls.data())) {
        assert!((p - q).abs() < 1e-15);
    }
    let other = build_model::<f64>(&ModelConfig { base_features: 6, ..cfg.clone() }, &mut Rng::new(1)).unwrap();
    let again = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    assert!(matches!(ensemble_predict(&[again, other], &v), Err(Error::Config(_))));
    assert!(matches!(ensemble_predict::<f64>(&[], &v), Err(Error::Config(_))));
}

#[test]
fn ensemble_of_two_is_mean_of_probabilities() {
    let cfg = small_config([16, 16, 8]);
    let a = build_model::<f64>(&cfg, &mut Rng::new(1)).unwrap();
    let b = build_model::<f64>(&cfg, &mut Rng::new(2)).unwrap();
    let v = random_volume::<f64>(&cfg, 3);
    let pa = forward(&a, &v, Mode::Eval).unwrap().cls_logits.softmax(0).unwrap().to_vec();
    let pb = forward(&b, &v, Mode::Eval).unwrap().cls_logits.softmax(0).unwrap().to_vec();
    let (_, cls) = ensemble_predict(&[a, b], &v).unwrap();
    for i in 0..3 {
        assert!((cls.data()[i] - (pa[i] + pb[i]) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let cfg = small_config([16, 16, 8]);
    let m = build_model::<f32>(&cfg, &mut Rng::new(4)).unwrap();
    let bytes = write_checkpoint(&m);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(write_checkpoint(&back), bytes);
    let v = random_volume::<f32>(&cfg, 5);
    let _g = no_grad();
    let a = forward(&m, &v, Mode::Eval).unwrap();
    let b = forward(&back, &v, Mode::Eval).unwrap();
    assert_eq!(a.seg_logits.data(), b.seg_logits.data());
    assert_eq!(a.cls_logits.data(), b.cls_logits.data());
}

#[test]
fn checkpoint_rejects_damage() {
    let m = build_model::<f32>(&small_config([16, 16, 8]), &mut Rng::new(4)).unwrap();
    let bytes = write_checkpoint(&m);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Format(_))));
    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[30] ^= 1; // inside the config text
    assert!(read_checkpoint(&bad).is_err());
}

#[test]
fn cast_preserves_values() {
    let cfg = small_config([16, 16, 8]);
    let m = build_model::<f32>(&cfg, &mut Rng::new(4)).unwrap();
    let d = m.cast::<f64>();
    assert_eq!(d.embed.weight.data()[3], m.embed.weight.data()[3] as f64);
    assert_eq!(d.param_count(), m.param_count());
}
