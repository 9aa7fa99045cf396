//! Loss, optimiser, schedule and data generator against hand-written
//! references, plus short end-to-end training runs.

use std::path::Path;

use csunet::config::RunConfig;
use csunet::network::CsUnet;
use csunet::params::ParamStore;
use csunet::tensor::{Tape, Tensor};
use csunet::training::{
    combined_loss, lr_schedule, synth_dataset, train, AdamW, Checkpoint, EpochRecord, OptimState, SynthConfig,
    TrainState, BEST_CHECKPOINT, DICE_SMOOTH, LAST_CHECKPOINT, METRICS_LOG,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cross-entropy plus batch-pooled soft Dice, written as plain loops over
/// `[N, K, H, W]` logits.
fn loop_loss(logits: &[f64], labels: &[usize], n: usize, k: usize, hw: usize) -> f64 {
    let mut ce = 0.0;
    let (mut inter, mut psum, mut gsum) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    for b in 0..n {
        for pix in 0..hw {
            let z: Vec<f64> = (0..k).map(|c| logits[(b * k + c) * hw + pix]).collect();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let y = labels[b * hw + pix];
            ce -= z[y] - lse;
            for c in 0..k {
                let p = (z[c] - lse).exp();
                psum[c] += p;
                if c == y {
                    inter[c] += p;
                    gsum[c] += 1.0;
                }
            }
        }
    }
    ce /= (n * hw) as f64;
    let dice: f64 = (0..k)
        .map(|c| (2.0 * inter[c] + DICE_SMOOTH) / (psum[c] + gsum[c] + DICE_SMOOTH))
        .sum::<f64>()
        / k as f64;
    0.5 * ce + 0.5 * (1.0 - dice)
}

fn loss_value(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let tape = Tape::new();
    combined_loss(tape.constant(logits.clone()), labels).unwrap().value().item()
}

#[test]
fn combined_loss_matches_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (n, k, h, w) = (rng.gen_range(1..4), rng.gen_range(2..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let logits = Tensor::from_fn(vec![n, k, h, w], |_| rng.gen_range(-4.0..4.0));
        let labels: Vec<usize> = (0..n * h * w).map(|_| rng.gen_range(0..k)).collect();
        let got = loss_value(&logits, &labels);
        let want = loop_loss(logits.data(), &labels, n, k, h * w);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

proptest! {
    #[test]
    fn loss_is_never_negative(values in prop::collection::vec(-30.0f64..30.0, 24), labels in prop::collection::vec(0usize..3, 8)) {
        let logits = Tensor::new(vec![2, 3, 2, 2], values).unwrap();
        prop_assert!(loss_value(&logits, &labels) >= 0.0);
    }
}

fn store_with(values: &[Vec<f64>]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for (i, v) in values.iter().enumerate() {
        store.insert(format!("p{i}"), Tensor::new(vec![v.len()], v.clone()).unwrap()).unwrap();
    }
    store
}

#[test]
fn adamw_matches_textbook_update_over_five_steps() {
    let opt = AdamW { beta1: 0.8, beta2: 0.95, eps: 1e-6, weight_decay: 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let init: Vec<Vec<f64>> = vec![(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), vec![0.3, -2.0]];
    let mut store = store_with(&init);
    let mut state = OptimState::new(&store);

    let mut p = init.concat();
    let (mut m, mut v) = (vec![0.0; p.len()], vec![0.0; p.len()]);
    for t in 1..=5 {
        let lr = 0.01 * t as f64;
        let g: Vec<f64> = (0..p.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / (1.0 - opt.beta1.powi(t));
            let v_hat = v[i] / (1.0 - opt.beta2.powi(t));
            p[i] -= lr * opt.weight_decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
        let grads = vec![
            Some(Tensor::new(vec![4], g[..4].to_vec()).unwrap()),
            Some(Tensor::new(vec![2], g[4..].to_vec()).unwrap()),
        ];
        opt.step(&mut store, &grads, &mut state, lr).unwrap();
    }
    let got: Vec<f64> = store.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    for (a, b) in got.iter().zip(&p) {
        assert!((a - b).abs() < 1e-7, "{a} vs {b}");
    }
    assert_eq!(state.step, 5);
}

#[test]
fn adamw_with_zero_learning_rate_is_the_identity() {
    for weight_decay in [0.0, 0.3] {
        let opt = AdamW { weight_decay, ..AdamW::default() };
        let init = vec![vec![0.5, -1.5, 2.0]];
        let mut store = store_with(&init);
        let mut state = OptimState::new(&store);
        let grads = vec![Some(Tensor::new(vec![3], vec![1.0, -3.0, 0.2]).unwrap())];
        for _ in 0..3 {
            opt.step(&mut store, &grads, &mut state, 0.0).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().1.data(), &init[0][..]);
    }
}

#[test]
fn schedule_warms_up_linearly_then_follows_a_half_cosine() {
    let base = 2e-3;
    for e in 0..3 {
        assert_eq!(lr_schedule(e, 23, base, 3), base * (e + 1) as f64 / 3.0);
    }
    assert_eq!(lr_schedule(3, 23, base, 3), base);
    // halfway through the decay span the cosine factor is exactly 1/2
    assert!((lr_schedule(13, 23, base, 3) - base / 2.0).abs() < 1e-18);
    // 55% of the way: 0.5 (1 + cos(0.55 pi))
    let expected = 0.5 * base * (1.0 + (0.55 * std::f64::consts::PI).cos());
    assert!((lr_schedule(14, 23, base, 3) - expected).abs() < 1e-15);
}

#[test]
fn synthetic_masks_respect_the_configured_class_fractions() {
    let cfg = SynthConfig { samples: 12, size: 64, ..SynthConfig::default() };
    let data = synth_dataset(&cfg).unwrap();
    assert_eq!(data.len(), 12);
    for s in &data {
        let mut counts = vec![0usize; cfg.num_classes];
        for &c in &s.mask {
            assert!((c as usize) < cfg.num_classes, "invalid class id {c}");
            counts[c as usize] += 1;
        }
        let total = s.mask.len() as f32;
        for &n in &counts[1..] {
            let f = n as f32 / total;
            assert!((cfg.min_fraction..=cfg.max_fraction).contains(&f), "{}: fraction {f}", s.id);
        }
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(synth_dataset(&cfg).unwrap(), data);
    let other = synth_dataset(&SynthConfig { seed: cfg.seed + 1, ..cfg.clone() }).unwrap();
    assert_ne!(other[0].image, data[0].image);
}

/// A fast configuration: 64x64 inputs, 2x2 windows, a handful of samples.
fn small_run(epochs: usize) -> RunConfig {
    let o = |s: &str| s.to_string();
    RunConfig::from_overrides(&[
        o("model.input_size=[64, 64]"),
        o("model.window_size=2"),
        o("data.synthetic.size=64"),
        o("data.synthetic.samples=15"),
        format!("train.epochs={epochs}"),
        o("train.warmup_epochs=1"),
    ])
    .unwrap()
}

fn run(cfg: &RunConfig, dir: &Path, keep_first: Option<&Path>) -> Vec<EpochRecord> {
    let (train_set, val_set) = cfg.data.load().unwrap();
    let (model, params) = CsUnet::new::<f32>(&cfg.model, cfg.train.seed).unwrap();
    let mut state = TrainState::fresh(params);
    train(&model, &mut state, &cfg.train, &train_set, &val_set, dir, |r| {
        if let (0, Some(copy)) = (r.epoch, keep_first) {
            std::fs::copy(dir.join(LAST_CHECKPOINT), copy).unwrap();
        }
    })
    .unwrap()
}

#[test]
fn short_run_writes_log_and_checkpoints() {
    let cfg = small_run(2);
    let dir = tempfile::tempdir().unwrap();
    let records = run(&cfg, dir.path(), None);
    let log = std::fs::read_to_string(dir.path().join(METRICS_LOG)).unwrap();
    let parsed: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, records);
    assert_eq!(parsed.len(), 2);
    for r in &parsed {
        assert!(r.train_loss.is_finite() && (0.0..=1.0).contains(&r.val_mean_dsc));
        assert_eq!(r.val_dsc.len(), 3);
    }
    assert!(dir.path().join(LAST_CHECKPOINT).is_file() && dir.path().join(BEST_CHECKPOINT).is_file());
    let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.epochs_completed, 2);
    assert_eq!(ck.model, cfg.model);
}

#[test]
fn loss_drops_within_three_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let records = run(&small_run(3), dir.path(), None);
    assert!(records[2].train_loss < records[0].train_loss, "{records:?}");
}

#[test]
fn resuming_reproduces_the_uninterrupted_run_bitwise() {
    let cfg = small_run(2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let snapshot = a.path().join("after-first-epoch.ckpt");
    let straight = run(&cfg, a.path(), Some(&snapshot));

    let (train_set, val_set) = cfg.data.load().unwrap();
    let (model, _) = CsUnet::new::<f32>(&cfg.model, cfg.train.seed).unwrap();
    let mut state = TrainState::resume(&model, Checkpoint::load(&snapshot).unwrap()).unwrap();
    assert_eq!(state.epochs_completed, 1);
    let resumed = train(&model, &mut state, &cfg.train, &train_set, &val_set, b.path(), |_| {}).unwrap();
    assert_eq!(resumed.len(), 1);
    assert_eq!(serde_json::to_string(&resumed[0]).unwrap(), serde_json::to_string(&straight[1]).unwrap());
    let read = |d: &Path| std::fs::read(d.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn seeded_runs_write_identical_logs() {
    let cfg = small_run(2);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, a.path(), None);
    run(&cfg, b.path(), None);
    let read = |d: &Path| std::fs::read(d.join(METRICS_LOG)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}
