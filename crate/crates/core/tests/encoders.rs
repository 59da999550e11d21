mod common;

use common::*;
use eavl::encoders::{tokenize, ImageEncoder, TextEncoder, VocabError, Vocabulary};
use eavl::harness::gradcheck::default_options;
use eavl::tensor::{grad_check, Tape, Tensor, TensorError};
use eavl::ModelConfig;
use proptest::prelude::*;

fn vocab() -> Vocabulary {
    Vocabulary::synthetic()
}

#[test]
fn empty_expression_is_sos_eos_then_pad() {
    let v = vocab();
    let t = tokenize("", &v, 17).unwrap();
    assert_eq!(t.ids.len(), 17);
    assert_eq!(t.ids[..2], [v.sos(), v.eos()]);
    assert!(t.ids[2..].iter().all(|&i| i == v.pad()));
    assert_eq!(t.eos_position, 1);
    assert_eq!(t.true_length, 2);
}

#[test]
fn two_words_put_eos_at_three() {
    let v = vocab();
    let t = tokenize("red circle", &v, 17).unwrap();
    assert_eq!(t.ids.len(), 17);
    assert_eq!(t.eos_position, 3);
    assert_eq!(t.ids[..4], [v.sos(), v.id("red").unwrap(), v.id("circle").unwrap(), v.eos()]);
}

#[test]
fn long_expression_keeps_eos_last() {
    let v = vocab();
    let words = vec!["red"; 30].join(" ");
    let t = tokenize(&words, &v, 17).unwrap();
    assert_eq!(t.ids.len(), 17);
    // SOS, fifteen words, EOS
    assert_eq!(t.ids[16], v.eos());
    assert_eq!(t.eos_position, 16);
    assert!(t.ids[1..16].iter().all(|&i| i == v.id("red").unwrap()));
}

#[test]
fn unknown_word_is_named() {
    let err = tokenize("red dodecahedron", &vocab(), 17).unwrap_err();
    assert_eq!(err, VocabError::UnknownWord("dodecahedron".into()));
    assert!(err.to_string().contains("dodecahedron"));
}

#[test]
fn vocabulary_text_round_trip() {
    let v = vocab();
    let back = Vocabulary::parse(&v.to_text()).unwrap();
    assert_eq!(back, v);
    for id in 0..v.len() {
        assert_eq!(v.id(v.token(id).unwrap()), Some(id));
    }
    let reserved = [v.pad(), v.sos(), v.eos()];
    assert!(reserved[0] != reserved[1] && reserved[1] != reserved[2] && reserved[0] != reserved[2]);
    assert!(matches!(Vocabulary::parse("a\nb\n"), Err(VocabError::MissingReserved(_))));
}

fn text_model(cfg: &ModelConfig, seed: u64) -> (eavl::tensor::ParamStore<f64>, TextEncoder) {
    build(seed, |b| TextEncoder::new(b, cfg, vocab().len()))
}

#[test]
fn pad_contents_never_reach_real_tokens() {
    let cfg = ModelConfig::desk();
    let (mut ps, enc) = text_model(&cfg, 1);
    let tokens = tokenize("green triangle left of red square", &vocab(), cfg.max_len).unwrap();
    let tape = Tape::new();
    let before = enc.encode(&ps, &tape, &tokens).unwrap();
    let (g0, t0) = (before.global.value(), before.tokens.value());

    // scramble the PAD embedding and every position embedding past EOS
    let mut r = rng(2);
    let mut table = param(&ps, "text.token_embedding").to_vec();
    let pad = vocab().pad();
    for v in &mut table[pad * cfg.width..(pad + 1) * cfg.width] {
        *v += 5.0 * rand::Rng::gen_range(&mut r, -1.0..1.0);
    }
    set(&mut ps, "text.token_embedding", t64(&[vocab().len(), cfg.width], &table));
    let mut pos = param(&ps, "text.position_embedding").to_vec();
    for v in &mut pos[(tokens.eos_position + 1) * cfg.width..] {
        *v = 3.0;
    }
    set(&mut ps, "text.position_embedding", t64(&[cfg.max_len, cfg.width], &pos));

    // parameter leaves are cached per tape
    let tape = Tape::new();
    let after = enc.encode(&ps, &tape, &tokens).unwrap();
    assert!(max_diff(&g0, &after.global.value()) <= 1e-6);
    let real = tokens.eos_position + 1;
    let t1 = after.tokens.value();
    let head = |t: &Tensor<f64>| t64(&[real, cfg.width], &t.data()[..real * cfg.width]);
    assert!(max_diff(&head(&t0), &head(&t1)) <= 1e-6);
    // the PAD rows themselves did change
    assert!(max_diff(&t0, &t1) > 1e-3);
}

#[test]
fn text_encoder_is_deterministic() {
    let cfg = ModelConfig::desk();
    let (ps, enc) = text_model(&cfg, 3);
    let tokens = tokenize("the blue circle", &vocab(), cfg.max_len).unwrap();
    let tape = Tape::new();
    let a = enc.encode(&ps, &tape, &tokens).unwrap();
    let b = enc.encode(&ps, &tape, &tokens).unwrap();
    assert_eq!(a.global.value(), b.global.value());
    assert_eq!(a.tokens.value(), b.tokens.value());
    assert_eq!(a.global.shape(), vec![1, cfg.text_global_width]);
    assert_eq!(a.tokens.shape(), vec![cfg.max_len, cfg.width]);
}

#[test]
fn text_encoder_gradients() {
    let cfg = ModelConfig::tiny();
    let (ps, enc) = text_model(&cfg, 4);
    let tokens = tokenize("red circle left of blue square", &vocab(), cfg.max_len).unwrap();
    let report = grad_check(
        |t, ps| {
            let f = enc.encode(ps, t, &tokens).map_err(|e| TensorError::Config(e.to_string()))?;
            Ok(f.global.sum().add(f.tokens.mean())?)
        },
        &ps,
        &default_options(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn image(cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    random(&mut rng(seed), &[cfg.image_height, cfg.image_width, 3]).map(|v| 0.5 + 0.5 * v)
}

#[test]
fn pyramid_sizes_at_64() {
    let cfg = ModelConfig::desk();
    let (ps, enc) = build(5, |b| ImageEncoder::new(b, &cfg));
    let tape = Tape::new();
    let f = enc.encode(&ps, tape.constant(image(&cfg, 6))).unwrap();
    assert_eq!(f.v2.shape(), vec![16, 16, cfg.width]);
    assert_eq!(f.v3.shape(), vec![8, 8, cfg.width]);
    assert_eq!(f.v4.shape(), vec![4, 4, cfg.width]);
    assert_eq!(f.global.shape(), vec![1, cfg.width]);
    assert!([f.v2, f.v3, f.v4, f.global].iter().all(|v| v.value().all_finite()));
}

#[test]
fn pyramid_ratios_for_rectangular_input() {
    let mut cfg = ModelConfig::tiny();
    cfg.image_height = 32;
    cfg.image_width = 48;
    cfg.validate().unwrap();
    let (ps, enc) = build(7, |b| ImageEncoder::new(b, &cfg));
    let tape = Tape::new();
    let f = enc.encode(&ps, tape.constant(image(&cfg, 8))).unwrap();
    assert_eq!(f.v2.shape()[..2], [8, 12]);
    assert_eq!(f.v3.shape()[..2], [4, 6]);
    assert_eq!(f.v4.shape()[..2], [2, 3]);
}

#[test]
fn indivisible_image_size_is_config_error() {
    let mut cfg = ModelConfig::desk();
    cfg.image_height = 60;
    assert!(matches!(cfg.validate(), Err(TensorError::Config(_))));

    let cfg = ModelConfig::tiny();
    let (ps, enc) = build(9, |b| ImageEncoder::new(b, &cfg));
    let tape = Tape::new();
    let wrong = tape.constant(Tensor::zeros(&[16, 8, 3]));
    assert!(matches!(enc.encode(&ps, wrong), Err(TensorError::Config(_))));
}

#[test]
fn global_vision_feature_sees_every_pixel() {
    let cfg = ModelConfig::desk();
    let (ps, enc) = build(10, |b| ImageEncoder::new(b, &cfg));
    let img = image(&cfg, 11);
    let tape = Tape::new();
    let g0 = enc.encode(&ps, tape.constant(img.clone())).unwrap().global.value();
    for &(y, x) in &[(0, 0), (63, 63), (17, 40)] {
        let mut d = img.to_vec();
        d[(y * 64 + x) * 3] += 0.5;
        let g1 = enc.encode(&ps, tape.constant(t64(img.shape(), &d))).unwrap().global.value();
        assert!(max_diff(&g0, &g1) > 0.0, "pixel ({y},{x})");
    }
    let again = enc.encode(&ps, tape.constant(img)).unwrap().global.value();
    assert_eq!(g0, again);
}

#[test]
fn image_encoder_gradients() {
    let cfg = ModelConfig::tiny();
    let (ps, enc) = build(12, |b| ImageEncoder::new(b, &cfg));
    let img = image(&cfg, 13);
    let report = grad_check(
        |t, ps| {
            let f = enc.encode(ps, t.constant(img.clone()))?;
            Ok(f.v2.mean().add(f.v3.mean())?.add(f.v4.mean())?.add(f.global.sum())?)
        },
        &ps,
        &default_options(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #[test]
    fn token_sequences_are_well_formed(picks in prop::collection::vec(3usize..19, 0..25), max_len in 2usize..20) {
        let v = vocab();
        let words: Vec<&str> = picks.iter().map(|&i| v.token(i).unwrap()).collect();
        let t = tokenize(&words.join(" "), &v, max_len).unwrap();
        prop_assert_eq!(t.ids.len(), max_len);
        prop_assert_eq!(t.ids[0], v.sos());
        prop_assert_eq!(t.ids[t.eos_position], v.eos());
        prop_assert!(t.ids[t.eos_position + 1..].iter().all(|&i| i == v.pad()));
        prop_assert!(t.true_length <= max_len);
        prop_assert_eq!(t.eos_position, words.len().min(max_len - 2) + 1);
        let mask = t.key_mask();
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), t.true_length);
    }
}
