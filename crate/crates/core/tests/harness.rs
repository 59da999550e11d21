mod common;

use std::fs;

use common::*;
use eavl::data::{Dataset, LossTarget};
use eavl::harness::checkpoint::{peek_precision, VERSION};
use eavl::harness::gradcheck::default_options;
use eavl::harness::{poly_lr, run_ablation, run_training, Adam, Checkpoint, Trainer, Variant, LOG_FILE};
use eavl::nn::Linear;
use eavl::tensor::{grad_check, ParamStore, Precision, Tape, Tensor};
use eavl::harness::TrainConfig;
use eavl::kv;
use eavl::{Eavl, Error, Mode, ModelConfig};
use proptest::prelude::*;

fn tiny(steps: usize) -> TrainConfig {
    let mut c = TrainConfig::new(ModelConfig::tiny());
    c.steps = steps;
    c.batch_size = 2;
    c.manifest.splits[0].count = 6;
    c.manifest.splits[1].count = 4;
    c
}

fn splits(c: &TrainConfig) -> (Dataset, Dataset) {
    (
        Dataset::generate(&c.manifest, &c.train_split).unwrap(),
        Dataset::generate(&c.manifest, &c.eval_split).unwrap(),
    )
}

#[test]
fn config_text_round_trip() {
    let mut c = tiny(12);
    c.target = LossTarget::Nearest;
    c.mode = Mode::NoEstimator;
    c.seed = 99;
    c.power = 1.5;
    c.eval_every = 4;
    let back = TrainConfig::parse(&c.to_text(), None).unwrap();
    assert_eq!(back, c);
    assert_eq!(TrainConfig::new(ModelConfig::desk()).target, LossTarget::Coverage);
    assert!(TrainConfig::parse("train.target = fuzzy\n", None).is_err());
}

#[test]
fn config_reads_a_manifest_file_next_to_it() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(3);
    fs::write(dir.path().join("data.manifest"), c.manifest.render()).unwrap();
    let text = kv::render(&ModelConfig::tiny().to_pairs()) + "train.steps = 3\ndata.manifest = data.manifest\n";
    fs::write(dir.path().join("run.cfg"), &text).unwrap();
    let loaded = TrainConfig::load(dir.path().join("run.cfg")).unwrap();
    assert_eq!(loaded.manifest, c.manifest);
    let both = format!("{text}grammar.width = 16\n");
    assert!(matches!(TrainConfig::parse(&both, Some(dir.path())), Err(Error::Config(_))));
}

#[test]
fn polynomial_schedule() {
    assert_eq!(poly_lr(3e-4, 0, 1000, 0.9), 3e-4);
    assert!((poly_lr(3e-4, 500, 1000, 0.9) - 3e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    assert_eq!(poly_lr(3e-4, 1000, 1000, 0.9), 0.0);
    assert_eq!(poly_lr(3e-4, 1200, 1000, 0.9), 0.0);
    assert!((poly_lr(1.0, 25, 100, 1.0) - 0.75).abs() < 1e-15);
}

#[test]
fn adam_matches_hand_recurrence() {
    let mut ps = ParamStore::<f64>::new();
    let id = ps.add("w", t64(&[1], &[2.0])).unwrap();
    let mut adam = Adam::new(&ps, 0.9, 0.999, 1e-8);
    let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    for t in 1..=5 {
        // loss w³ has gradient 3w²
        let tape = Tape::new();
        let x = tape.param(&ps, id);
        let loss = x.mul(x).unwrap().mul(x).unwrap().sum();
        let g = tape.backward(loss, &ps).unwrap();
        adam.step(&mut ps, &g, 0.01).unwrap();
        let gw = 3.0 * w * w;
        m = 0.9 * m + 0.1 * gw;
        v = 0.999 * v + 0.001 * gw * gw;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
        w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((ps.value(id).data()[0] - w).abs() < 1e-14, "step {t}");
    }
    assert_eq!(adam.t, 5);
}

#[test]
fn zero_steps_is_the_initialization() {
    let c = tiny(5);
    let t = Trainer::<f64>::new(c.clone()).unwrap();
    let ckpt = t.checkpoint();
    assert_eq!(ckpt.step, 0);
    let mut fresh = ParamStore::<f64>::new();
    Eavl::new(c.model.clone(), c.mode, &mut fresh, c.seed).unwrap();
    let init: Vec<_> = fresh.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    assert_eq!(ckpt.params, init);
    assert!(ckpt.adam_m.iter().chain(&ckpt.adam_v).all(|m| m.data().iter().all(|&v| v == 0.0)));
    let back = Trainer::from_checkpoint(Checkpoint::<f64>::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.checkpoint(), ckpt);
}

fn trained(c: &TrainConfig, steps: usize) -> (Trainer<f32>, Dataset) {
    let (train, _) = splits(c);
    let mut t = Trainer::<f32>::new(c.clone()).unwrap();
    let prep = t.prepare(&train).unwrap();
    for _ in 0..steps {
        t.train_step(&train, &prep).unwrap();
    }
    (t, train)
}

#[test]
fn checkpoint_round_trips_exactly() {
    let c = tiny(10);
    let (t, train) = trained(&c, 4);
    let ckpt = t.checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.eavc");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());

    // forward outputs are bit-identical after a reload
    let r = Trainer::from_checkpoint(back).unwrap();
    let s = &train.samples[0];
    let img = eavl::data::image_tensor::<f32>(&s.image);
    let tok = t.model.tokenize(&s.expression).unwrap();
    let a = t.model.predict(&t.store, &img, &tok).unwrap();
    let b = r.model.predict(&r.store, &img, &tok).unwrap();
    assert_eq!(a.y, b.y);
    assert_eq!(a.masks, b.masks);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (t, _) = trained(&tiny(10), 1);
    let bytes = t.checkpoint().to_bytes();
    for cut in [0, 3, 8, 9, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let msg = Checkpoint::<f32>::from_bytes(&newer).unwrap_err().to_string();
    assert!(msg.contains(&(VERSION + 1).to_string()) && msg.contains(&VERSION.to_string()), "{msg}");

    assert_eq!(peek_precision(&bytes).unwrap(), Precision::Single);
    let msg = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err().to_string();
    assert!(msg.contains("cannot be loaded"), "{msg}");

    let mut bad = bytes;
    bad[0] = b'X';
    assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
}

#[test]
fn resume_reproduces_the_next_step() {
    let c = tiny(10);
    let (mut t, train) = trained(&c, 3);
    let bytes = t.checkpoint().to_bytes();
    let prep = t.prepare(&train).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::<f32>::from_bytes(&bytes).unwrap()).unwrap();
    for _ in 0..3 {
        let (a, lr_a) = t.train_step(&train, &prep).unwrap();
        let (b, lr_b) = resumed.train_step(&train, &prep).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(lr_a, lr_b);
    }
    assert_eq!(t.checkpoint(), resumed.checkpoint());
}

#[test]
fn identical_runs_write_identical_logs() {
    let mut c = tiny(6);
    c.eval_every = 3;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_training(&c, a.path()).unwrap();
    let rb = run_training(&c, b.path()).unwrap();
    let la = fs::read(&ra.log).unwrap();
    assert_eq!(la, fs::read(&rb.log).unwrap());
    assert_eq!(fs::read(&ra.checkpoint).unwrap(), fs::read(&rb.checkpoint).unwrap());
    assert_eq!(ra.log, a.path().join(LOG_FILE));

    let text = String::from_utf8(la).unwrap();
    let recs: Vec<eavl::harness::LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6);
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
    assert!(recs[2].metrics.is_some() && recs[5].metrics.is_some() && recs[0].metrics.is_none());
    assert_eq!(recs[5].metrics, ra.report);
    assert_eq!(recs[0].lr, c.lr);

    let mut other = c.clone();
    other.seed = 1;
    let d = tempfile::tempdir().unwrap();
    let rd = run_training(&other, d.path()).unwrap();
    assert_ne!(fs::read(&rd.log).unwrap(), fs::read(&ra.log).unwrap());
}

#[test]
fn one_variant_ablation_is_a_plain_run() {
    let c = tiny(4);
    let table = run_ablation(&c, &[Variant::Mode(Mode::Full)], &[c.seed], &mut |_, _, _| {}).unwrap();
    let (train, eval) = splits(&c);
    let mut t = Trainer::<f32>::new(c).unwrap();
    t.run(&train, &eval, &mut std::io::sink()).unwrap();
    let want = t.evaluate(&eval).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].per_seed[0].1, want);
    assert_eq!(table.row("full").unwrap().median_mean_iou(), want.mean_iou);
    assert!(table.render().lines().count() == 2);
    assert!(run_ablation(&tiny(4), &[], &[0], &mut |_, _, _| {}).is_err());
}

#[test]
fn query_variants_rewrite_the_model() {
    let base = tiny(4);
    let c = Variant::Queries(4).apply(&base);
    assert_eq!((c.mode, c.model.num_queries), (Mode::Full, 4));
    let c = Variant::Mode(Mode::NoFvg).apply(&base);
    assert_eq!((c.mode, c.model.num_queries), (Mode::NoFvg, base.model.num_queries));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let c = tiny(10);
    let (train, _) = splits(&c);
    let mut t = Trainer::<f32>::new(c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.dump_dir = Some(dir.path().to_path_buf());
    let id = t.store.id("aligner.w_p.weight").unwrap();
    let shape = t.store.value(id).shape().to_vec();
    t.store.set_value(id, Tensor::full(&shape, f32::NAN)).unwrap();
    let prep = t.prepare(&train).unwrap();
    let err = t.train_step(&train, &prep).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("nan_batch.json")).unwrap()).unwrap();
    assert_eq!(dump["batch"].as_array().unwrap().len(), 2);
    assert_eq!(t.step, 0);
}

#[test]
fn gradcheck_stub_and_unused_parameter() {
    let x = random(&mut rng(50), &[4, 5]);
    let (mut ps, lin) = build(51, |b| Linear::new(b, "stub", 5, 3, true, false));
    ps.add("unused", t64(&[2], &[1.0, 2.0])).unwrap();
    let report = grad_check(|t, ps| lin.forward(ps, t.constant(x.clone())), &ps, &default_options()).unwrap();
    assert!(report.max_rel_err < 1e-9, "{report:?}");
    assert_eq!(report.zero_grad_params, vec!["unused".to_string()]);
}

#[test]
fn fixed_batch_loss_falls_at_desk_scale() {
    // Adam overshoots after its first large step, so single steps may rise;
    // the property is that fifty steps end below both the first and second
    // losses, in the median over three seeds.
    let mut c = TrainConfig::new(ModelConfig::desk());
    c.manifest.splits[0].count = 4;
    c.steps = 50;
    let mut ends = Vec::new();
    for seed in 0..3 {
        c.seed = seed;
        let (train, _) = splits(&c);
        let mut t = Trainer::<f32>::new(c.clone()).unwrap();
        let prep = t.prepare(&train).unwrap();
        let batch = [0, 1, 2, 3];
        let mut losses = Vec::new();
        for step in 0..=50 {
            let (loss, g) = t.batch_gradients(&prep, &batch).unwrap();
            losses.push(loss);
            t.adam.step(&mut t.store, &g, poly_lr(c.lr, step, c.steps, c.power)).unwrap();
        }
        ends.push(losses[50] / losses[0].min(losses[1]));
    }
    ends.sort_by(f64::total_cmp);
    assert!(ends[1] < 1.0, "{ends:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_pass_visits_each_sample_once(n in 1usize..20, bs in 1usize..7, seed: u64) {
        let mut c = tiny(5);
        c.batch_size = bs;
        c.seed = seed;
        let mut t = Trainer::<f32>::new(c).unwrap();
        let order: Vec<usize> = (0..3 * n).flat_map(|_| t.next_batch(n)).take(3 * n).collect();
        for pass in order.chunks(n) {
            let mut p = pass.to_vec();
            p.sort();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
