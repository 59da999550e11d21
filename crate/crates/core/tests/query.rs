mod common;

use common::*;
use eavl::fusion::coord_features;
use eavl::harness::gradcheck::default_options;
use eavl::query::QueryGenerator;
use eavl::tensor::{grad_check, kernels, ParamStore, Tape, Tensor};
use eavl::ModelConfig;
use proptest::prelude::*;

struct Inputs {
    v2: Tensor<f64>,
    v3: Tensor<f64>,
    v4: Tensor<f64>,
    vg: Tensor<f64>,
    ft: Tensor<f64>,
}

fn inputs(cfg: &ModelConfig, seed: u64) -> Inputs {
    let mut r = rng(seed);
    let c = cfg.width;
    let [(h2, w2), (h3, w3), (h4, w4)] = cfg.pyramid();
    Inputs {
        v2: random(&mut r, &[h2, w2, c]),
        v3: random(&mut r, &[h3, w3, c]),
        v4: random(&mut r, &[h4, w4, c]),
        vg: random(&mut r, &[1, c]),
        ft: random(&mut r, &[cfg.max_len, c]),
    }
}

fn generator(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, QueryGenerator) {
    build(seed, |b| QueryGenerator::new(b, cfg))
}

fn mask(len: usize, real: usize) -> Vec<bool> {
    (0..len).map(|i| i < real).collect()
}

fn w(ps: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    param(ps, &format!("query.{name}.weight"))
}

fn dense_oracle(ps: &ParamStore<f64>, x: &Inputs) -> Tensor<f64> {
    let d = |n: &str| param(ps, &format!("query.dense.{n}"));
    let m4 = kernels::upsample2x(&relu(&linear(&x.v4, &d("w_v4.weight")))).unwrap();
    let m3 = concat_last(&[&relu(&linear(&m4, &d("w_m4.weight"))), &relu(&linear(&x.v3, &d("w_v3.weight")))]);
    let pooled = kernels::avgpool2x(&x.v2).unwrap();
    let m2 = concat_last(&[&relu(&linear(&m3, &d("w_m3.weight"))), &relu(&linear(&pooled, &d("w_v2.weight")))]);
    let fm = conv(&concat_last(&[&m2, &m3, &m4]), &d("aggregate.kernel"), &d("aggregate.bias"));
    let (h, wd) = (fm.shape()[0], fm.shape()[1]);
    let inte = conv(
        &concat_last(&[&fm, &coord_features(h, wd).unwrap()]),
        &d("integrate.kernel"),
        &d("integrate.bias"),
    );
    let r1 = relu(&conv(&inte, &d("reduce1.kernel"), &d("reduce1.bias")));
    let r2 = relu(&conv(&r1, &d("reduce2.kernel"), &d("reduce2.bias")));
    let maps = conv(&r2, &d("reduce3.kernel"), &d("reduce3.bias"));
    let nq = maps.shape()[2];
    // column q of the flattened maps is query q's saliency
    let mut out = Vec::with_capacity(nq * h * wd);
    for q in 0..nq {
        for p in 0..h * wd {
            out.push(maps.data()[p * nq + q]);
        }
    }
    t64(&[nq, h * wd], &out)
}

/// Row softmax restricted to unmasked columns; masked columns are 0.
fn masked_softmax(s: &Tensor<f64>, keep: &[bool]) -> Tensor<f64> {
    let (rows, cols) = (s.shape()[0], s.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &s.data()[r * cols..(r + 1) * cols];
        let m = (0..cols).filter(|&j| keep[j]).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..cols).filter(|&j| keep[j]).map(|j| (row[j] - m).exp()).sum();
        for j in (0..cols).filter(|&j| keep[j]) {
            out[r * cols + j] = (row[j] - m).exp() / z;
        }
    }
    t64(&[rows, cols], &out)
}

#[test]
fn dense_vision_shape_and_oracle() {
    let cfg = ModelConfig::desk();
    let (ps, g) = generator(&cfg, 1);
    let x = inputs(&cfg, 2);
    let tape = Tape::new();
    let [a, b, d] = [&x.v2, &x.v3, &x.v4].map(|t| tape.constant(t.clone()));
    let got = g.dense.forward(&ps, a, b, d).unwrap().value();
    assert_eq!(got.shape(), &[cfg.num_queries, 64]);
    assert!(max_diff(&got, &dense_oracle(&ps, &x)) < 1e-12);
}

#[test]
fn single_query_dense_map() {
    let mut cfg = ModelConfig::desk();
    cfg.num_queries = 1;
    let (ps, g) = generator(&cfg, 3);
    let x = inputs(&cfg, 4);
    let tape = Tape::new();
    let [a, b, d] = [&x.v2, &x.v3, &x.v4].map(|t| tape.constant(t.clone()));
    let got = g.dense.forward(&ps, a, b, d).unwrap().value();
    assert_eq!(got.shape(), &[1, 64]);
    assert!(max_diff(&got, &dense_oracle(&ps, &x)) < 1e-12);
}

#[test]
fn language_global_gate() {
    let cfg = ModelConfig::desk();
    let c = cfg.width;
    let (mut ps, g) = generator(&cfg, 5);
    let x = inputs(&cfg, 6);
    let tape = Tape::new();
    let ft = tape.constant(x.ft.clone());

    let zero = tape.constant(Tensor::zeros(&[1, c]));
    let got = g.fuse_language_global(&ps, ft, Some(zero)).unwrap().value();
    assert!(got.data().iter().all(|&v| v == 0.0));

    // a unit basis vector against a weight whose first row is all ones
    let mut wvg = w(&ps, "w_vg").to_vec();
    wvg[..c].fill(1.0);
    set(&mut ps, "query.w_vg.weight", t64(&[c, c], &wvg));
    let tape = Tape::new();
    let ft = tape.constant(x.ft.clone());
    let mut e0 = vec![0.0; c];
    e0[0] = 1.0;
    let got = g.fuse_language_global(&ps, ft, Some(tape.constant(t64(&[1, c], &e0)))).unwrap().value();
    assert!(max_diff(&got, &relu(&linear(&x.ft, &w(&ps, "w_t")))) < 1e-12);

    let got = g.fuse_language_global(&ps, ft, Some(tape.constant(x.vg.clone()))).unwrap().value();
    let gate = relu(&linear(&x.vg, &w(&ps, "w_vg")));
    let want = mul_rows(&relu(&linear(&x.ft, &w(&ps, "w_t"))), gate.data());
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn identical_words_get_uniform_attention() {
    let cfg = ModelConfig::desk();
    let (ps, g) = generator(&cfg, 7);
    let x = inputs(&cfg, 8);
    let tape = Tape::new();
    let row = &x.ft.data()[..cfg.width];
    let same: Vec<f64> = (0..cfg.max_len).flat_map(|_| row.to_vec()).collect();
    let dense = tape.constant(dense_oracle(&ps, &x));
    let ftv = tape.constant(t64(&[cfg.max_len, cfg.width], &same));
    let real = 6;
    let a = g.attention_map(&ps, dense, ftv, &mask(cfg.max_len, real)).unwrap().value();
    for q in 0..cfg.num_queries {
        for j in 0..cfg.max_len {
            let want = if j < real { 1.0 / real as f64 } else { 0.0 };
            assert!((a.at(&[q, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn dominant_word_wins_attention() {
    let cfg = ModelConfig::desk();
    let (ps, g) = generator(&cfg, 9);
    let x = inputs(&cfg, 10);
    let dense = dense_oracle(&ps, &x);
    // pick a base row with a positive score for every query, then scale one
    // copy of it; ReLU is positively homogeneous, so that word's score
    // scales by the same factor
    let vis = relu(&linear(&dense, &w(&ps, "w_vd")));
    let c = cfg.width;
    let base = (0..cfg.max_len)
        .map(|i| t64(&[1, c], &x.ft.data()[i * c..(i + 1) * c]))
        .find(|r| {
            let word = relu(&linear(r, &w(&ps, "w_a")));
            let s = kernels::matmul(&vis, &word.reshape(&[c, 1]).unwrap()).unwrap();
            s.data().iter().all(|&v| v > 1e-3)
        })
        .expect("some word scores positively against every query");
    let target = 4;
    let rows: Vec<f64> = (0..cfg.max_len)
        .flat_map(|i| base.data().iter().map(move |v| if i == target { 6.0 * v } else { *v }))
        .collect();
    let tape = Tape::new();
    let a = g
        .attention_map(
            &ps,
            tape.constant(dense),
            tape.constant(t64(&[cfg.max_len, c], &rows)),
            &mask(cfg.max_len, 9),
        )
        .unwrap()
        .value();
    for q in 0..cfg.num_queries {
        let argmax = (0..cfg.max_len).max_by(|&i, &j| a.at(&[q, i]).total_cmp(&a.at(&[q, j]))).unwrap();
        assert_eq!(argmax, target, "query {q}");
    }
}

#[test]
fn one_hot_and_uniform_selection() {
    let cfg = ModelConfig::desk();
    let (ps, g) = generator(&cfg, 11);
    let x = inputs(&cfg, 12);
    let c = cfg.width;
    let l = cfg.max_len;
    let projected = relu(&linear(&x.ft, &w(&ps, "w_tv")));
    let tape = Tape::new();

    let mut a = vec![0.0; 2 * l];
    a[3] = 1.0;
    for j in 0..5 {
        a[l + j] = 0.2;
    }
    let q = g
        .make_queries(&ps, tape.constant(t64(&[2, l], &a)), tape.constant(x.ft.clone()))
        .unwrap()
        .value();
    for k in 0..c {
        assert!((q.at(&[0, k]) - projected.at(&[3, k])).abs() < 1e-12);
        let mean: f64 = (0..5).map(|j| projected.at(&[j, k])).sum::<f64>() / 5.0;
        assert!((q.at(&[1, k]) - mean).abs() < 1e-12);
    }
}

#[test]
fn full_generator_matches_oracle() {
    let cfg = ModelConfig::desk();
    let (ps, g) = generator(&cfg, 13);
    let x = inputs(&cfg, 14);
    let real = 7;
    let keep = mask(cfg.max_len, real);
    let tape = Tape::new();
    let [a, b, d, vg, ft] = [&x.v2, &x.v3, &x.v4, &x.vg, &x.ft].map(|t| tape.constant(t.clone()));
    let out = g.forward(&ps, a, b, d, Some(vg), ft, &keep).unwrap();

    let dense = dense_oracle(&ps, &x);
    let ftv = mul_rows(
        &relu(&linear(&x.ft, &w(&ps, "w_t"))),
        relu(&linear(&x.vg, &w(&ps, "w_vg"))).data(),
    );
    let vis = relu(&linear(&dense, &w(&ps, "w_vd")));
    let words = relu(&linear(&ftv, &w(&ps, "w_a")));
    let c = cfg.width;
    let scores = kernels::matmul(&vis, &t64(&[c, cfg.max_len], &{
        let mut t = vec![0.0; c * cfg.max_len];
        for i in 0..cfg.max_len {
            for k in 0..c {
                t[k * cfg.max_len + i] = words.at(&[i, k]);
            }
        }
        t
    }))
    .unwrap();
    let attn = masked_softmax(&scores, &keep);
    let queries = kernels::matmul(&attn, &relu(&linear(&ftv, &w(&ps, "w_tv")))).unwrap();

    assert!(max_diff(&out.dense.value(), &dense) < 1e-12);
    assert!(max_diff(&out.fused_text.value(), &ftv) < 1e-12);
    assert!(max_diff(&out.attention.value(), &attn) < 1e-12);
    assert!(max_diff(&out.queries.value(), &queries) < 1e-12);
    assert_eq!(out.queries.shape(), vec![cfg.num_queries, c]);
}

#[test]
fn generator_gradients() {
    let cfg = ModelConfig::tiny();
    let (ps, g) = generator(&cfg, 15);
    let x = inputs(&cfg, 16);
    let keep = mask(cfg.max_len, 5);
    let report = grad_check(
        |t, ps| {
            let [a, b, d, vg, ft] = [&x.v2, &x.v3, &x.v4, &x.vg, &x.ft].map(|v| t.constant(v.clone()));
            let out = g.forward(ps, a, b, d, Some(vg), ft, &keep)?;
            Ok(out.queries.sum().add(out.attention.mean())?)
        },
        &ps,
        &default_options(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(seed: u64, real in 2usize..=8, nq in 1usize..=4) {
        let mut cfg = ModelConfig::tiny();
        cfg.num_queries = nq;
        let (ps, g) = generator(&cfg, seed);
        let x = inputs(&cfg, seed ^ 0x77);
        let keep = mask(cfg.max_len, real);
        let tape = Tape::new();
        let [a, b, d, vg, ft] = [&x.v2, &x.v3, &x.v4, &x.vg, &x.ft].map(|t| tape.constant(t.clone()));
        let out = g.forward(&ps, a, b, d, Some(vg), ft, &keep).unwrap();
        let attn = out.attention.value();
        prop_assert_eq!(attn.shape(), &[nq, cfg.max_len]);
        for q in 0..nq {
            let s: f64 = (0..cfg.max_len).map(|j| attn.at(&[q, j])).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for j in 0..cfg.max_len {
                let v = attn.at(&[q, j]);
                prop_assert!(v >= 0.0);
                if j >= real {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
        prop_assert_eq!(out.queries.shape(), vec![nq, cfg.width]);
    }
}
