//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]`
//! line with the measured quantity before asserting.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::ops::ControlFlow;
use std::time::Instant;

use cabilstm::attention::{attention_maps, ClassAttentionParams, ClassFeatureSet};
use cabilstm::checkpoint;
use cabilstm::dataio::{
    crop_origins, crop_tiles, mask_to_labels, synth_dataset, DependencySpec, Sample, SegMask, SynthConfig,
    DEFAULT_SENTINEL,
};
use cabilstm::deps::cooccurrence;
use cabilstm::extractor::ExtractorConfig;
use cabilstm::lstm::{bilstm_run, lstm_step, LstmCellParams, LstmState};
use cabilstm::metrics::{binarize, example_prf2, label_prf, mean_example_metrics, ConfusionCounts, ExampleScores};
use cabilstm::model::Recurrence;
use cabilstm::train::{log_csv, train, TrainSchedule};
use cabilstm::{Model, ModelConfig, Tensor};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes through the stdout handle so the line survives output capture.
fn report(name: &str, ok: bool, detail: String) {
    let line = format!("[{}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

#[test]
fn gradient_integrity() {
    let start = Instant::now();
    let ex = ExtractorConfig::from_filters(&[(2, 8), (2, 16), (2, 32)], &[true, true, false], 16);
    let mut model = Model::init(ModelConfig::new(ex, 8, 3), 42).unwrap();
    common::jitter_biases(&mut model, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::uniform(&[16, 16, 3], 0.5, &mut rng).map(|v| v + 0.5);
    let check = common::model_gradcheck(&model, &image, &[1.0, 0.0, 1.0]);
    let secs = start.elapsed().as_secs_f64();
    let ok = check.max_rel_err < 1e-4
        && secs < 60.0
        && check.checked == model.param_count()
        && check.kinks * 50 < check.checked;
    report(
        "full-model gradient check",
        ok,
        format!(
            "max rel err {:.2e} over {} parameters ({} at activation kinks skipped) in {secs:.1}s (< 1e-4, < 60s)",
            check.max_rel_err, check.checked, check.kinks
        ),
    );
    assert!(ok);
}

#[test]
fn attention_matches_weighted_channel_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (w, k, n) = (rng.random_range(1..7), rng.random_range(1..9), rng.random_range(1..6));
        let features = Tensor::uniform(&[w, w, k], 2.0, &mut rng);
        let params = ClassAttentionParams::init(k, n, &mut rng);
        let maps = attention_maps(&features, &params).unwrap();
        for p in 0..w {
            for q in 0..w {
                for l in 0..n {
                    let mut m = 0.0;
                    for c in 0..k {
                        m += params.weight(l, c) * features.data()[(p * w + q) * k + c];
                    }
                    if maps.data()[(p * w + q) * n + l] != m {
                        mismatches += 1;
                    }
                }
            }
        }
    }
    report(
        "class attention equals explicit weighted sum",
        mismatches == 0,
        format!("{mismatches} mismatching pixels over 100 random instances"),
    );
    assert_eq!(mismatches, 0);
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn lstm_cell_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut fixed_point = true;
    for _ in 0..20 {
        let (h, i) = (rng.random_range(1..6), rng.random_range(1..6));
        let v = Tensor::uniform(&[i], 3.0, &mut rng);
        let s = lstm_step(&LstmCellParams::zeros(h, i), &v, &LstmState::zeros(h)).unwrap();
        fixed_point &= s.c.data().iter().chain(s.h.data()).all(|&x| x == 0.0);
    }

    let ones = LstmCellParams::from_fn(1, 1, |shape| {
        if shape.len() == 2 {
            Tensor::full(shape, 1.0)
        } else {
            Tensor::zeros(shape)
        }
    });
    let prev = LstmState {
        c: Tensor::vector(vec![1.0]),
        h: Tensor::vector(vec![0.0]),
    };
    let s = lstm_step(&ones, &Tensor::vector(vec![0.0]), &prev).unwrap();
    let c = sigmoid(1.0) * 0.0f64.tanh() + sigmoid(1.0) * 1.0;
    let h = sigmoid(c) * c.tanh();
    let hand_err = (s.c.item() - c).abs().max((s.h.item() - h).abs());
    let hand = hand_err <= 1e-12 && (s.c.item() - 0.7311).abs() < 1e-4 && (s.h.item() - 0.4210).abs() < 1e-4;

    let mut dual = 0;
    for _ in 0..50 {
        let (hid, inp, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..7));
        let a = LstmCellParams::init(hid, inp, &mut rng);
        let b = LstmCellParams::init(hid, inp, &mut rng);
        let vectors: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[inp], 2.0, &mut rng)).collect();
        let forward = ClassFeatureSet {
            vectors: vectors.clone(),
            side: 1,
        };
        let reversed = ClassFeatureSet {
            vectors: vectors.into_iter().rev().collect(),
            side: 1,
        };
        let ab = bilstm_run(&a, &b, &forward).unwrap();
        let ba = bilstm_run(&b, &a, &reversed).unwrap();
        let back: Vec<&Tensor> = ab.iter().map(|p| &p.1).collect();
        let fwd_rev: Vec<&Tensor> = ba.iter().rev().map(|p| &p.0).collect();
        if back == fwd_rev {
            dual += 1;
        }
    }

    let ok = fixed_point && hand && dual == 50;
    report(
        "peephole LSTM cell",
        ok,
        format!(
            "zero fixed point {fixed_point}; hand step c={:.6} h={:.6} err {hand_err:.1e}; duality {dual}/50",
            s.c.item(),
            s.h.item()
        ),
    );
    assert!(ok);
}

/// Set-based reference for one example.
fn naive_example(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i]).collect();
    let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i]).collect();
    if p.is_empty() && t.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let hit = p.intersection(&t).count() as f64;
    let prec = if p.is_empty() { 0.0 } else { hit / p.len() as f64 };
    let rec = if t.is_empty() { 0.0 } else { hit / t.len() as f64 };
    let f2 = if prec + rec == 0.0 {
        0.0
    } else {
        5.0 * prec * rec / (4.0 * prec + rec)
    };
    (prec, rec, f2)
}

#[test]
fn metrics_match_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let mut bad = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..10);
        let density = rng.random_range(0.1..0.7);
        let draw = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_bool(density)).collect::<Vec<bool>>();
        let preds: Vec<Vec<bool>> = (0..20).map(|_| draw(&mut rng)).collect();
        let truths: Vec<Vec<bool>> = (0..20).map(|_| draw(&mut rng)).collect();
        let mut sums = (0.0, 0.0, 0.0);
        for (p, t) in preds.iter().zip(&truths) {
            let got = example_prf2(p, t).unwrap();
            let want = naive_example(p, t);
            if !(close(got.precision, want.0) && close(got.recall, want.1) && close(got.f2, want.2)) {
                bad += 1;
            }
            sums.0 += want.0;
            sums.1 += want.1;
            sums.2 += want.2;
        }
        let mean = mean_example_metrics(&preds, &truths).unwrap();
        if !(close(mean.precision, sums.0 / 20.0) && close(mean.recall, sums.1 / 20.0) && close(mean.f2, sums.2 / 20.0))
        {
            bad += 1;
        }
        let labels = label_prf(&preds, &truths).unwrap();
        for c in 0..n {
            let pc: BTreeSet<usize> = (0..20).filter(|&i| preds[i][c]).collect();
            let tc: BTreeSet<usize> = (0..20).filter(|&i| truths[i][c]).collect();
            let want = (!tc.is_empty()).then(|| {
                let hit = pc.intersection(&tc).count() as f64;
                let p = if pc.is_empty() { 0.0 } else { hit / pc.len() as f64 };
                (p, hit / tc.len() as f64)
            });
            match (labels.per_class[c], want) {
                (None, None) => {}
                (Some(g), Some(w)) if close(g.0, w.0) && close(g.1, w.1) => {}
                _ => bad += 1,
            }
        }
    }
    let worked = ExampleScores::from_counts(ConfusionCounts { tp: 2, fp: 1, fn_: 1 });
    let exact =
        worked.precision == 2.0 / 3.0 && worked.recall == 2.0 / 3.0 && (worked.f2 - 2.0 / 3.0).abs() <= f64::EPSILON;
    let ok = bad == 0 && exact;
    report(
        "example- and label-based metrics",
        ok,
        format!(
            "{bad} disagreements with the set oracle over 1000 pairs; TP2/FP1/FN1 gives F2 {}",
            worked.f2
        ),
    );
    assert!(ok);
}

#[test]
fn cooccurrence_counts() {
    let classes = vec!["A".to_string(), "B".to_string()];
    let toy = [[true, true], [true, false], [false, true], [true, true]];
    let m = cooccurrence(&toy, &classes).unwrap();
    let hand = m.conditional_ratio(0, 1) == Some((2, 3)) && m.conditional_ratio(1, 0) == Some((2, 3));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let images = rng.random_range(1..40);
        let labels: Vec<Vec<bool>> = (0..images)
            .map(|_| (0..n).map(|_| rng.random_bool(0.4)).collect())
            .collect();
        let m = cooccurrence(&labels, &names(n)).unwrap();
        for r in 0..n {
            for p in 0..n {
                if let (Some(a), Some(b)) = (m.conditional(r, p), m.conditional(p, r)) {
                    let lhs = a * m.prior(r);
                    let rhs = b * m.prior(p);
                    let joint = m.joint_probability(r, p);
                    if (lhs - rhs).abs() > 1e-15 || (lhs - joint).abs() > 1e-15 || m.joint[r][p] != m.joint[p][r] {
                        violations += 1;
                    }
                }
            }
        }
    }
    let ok = hand && violations == 0;
    report(
        "class co-occurrence",
        ok,
        format!(
            "toy P(B|A)={:?} P(A|B)={:?}; {violations} Bayes violations on 100 random manifests",
            m.conditional_ratio(0, 1),
            m.conditional_ratio(1, 0)
        ),
    );
    assert!(ok);
}

#[test]
fn dataset_pipeline() {
    let count = crop_origins(10000, 10000, 600, 200).unwrap().len();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    let mut rejections = (0, 0);
    for _ in 0..300 {
        let (h, w, classes) = (
            rng.random_range(1..12),
            rng.random_range(1..12),
            rng.random_range(1..10),
        );
        let with_sentinel = rng.random_bool(0.3);
        let ids: Vec<u16> = (0..h * w)
            .map(|_| {
                if with_sentinel && rng.random_bool(0.05) {
                    DEFAULT_SENTINEL
                } else {
                    rng.random_range(0..classes as u16)
                }
            })
            .collect();
        let mask = SegMask::new(h, w, ids).unwrap();
        let mut present = vec![false; classes];
        let mut unclassified = false;
        for y in 0..h {
            for x in 0..w {
                match mask.get(y, x) {
                    DEFAULT_SENTINEL => unclassified = true,
                    id => present[id as usize] = true,
                }
            }
        }
        match mask_to_labels(&mask, classes, DEFAULT_SENTINEL).unwrap() {
            None if unclassified => rejections.0 += 1,
            Some(labels) if !unclassified && labels == present => {}
            _ => mismatches += 1,
        }
        rejections.1 += unclassified as usize;
    }

    // a single unclassified pixel in one crop of a real tile
    let tile = RgbImage::new(10, 10);
    let mut ids = vec![1u16; 100];
    ids[0] = DEFAULT_SENTINEL;
    let mask = SegMask::new(10, 10, ids).unwrap();
    let kept = crop_tiles(&tile, &mask, 6, 2)
        .unwrap()
        .iter()
        .filter(|c| mask_to_labels(&c.mask, 3, DEFAULT_SENTINEL).unwrap().is_some())
        .count();

    let ok = count == 2304 && mismatches == 0 && rejections.0 == rejections.1 && kept == 8;
    report(
        "tile cropping and mask labels",
        ok,
        format!(
            "{count} crops from a 10000² tile; {mismatches} brute-force mismatches; {}/{} unclassified masks rejected; {kept}/9 crops kept",
            rejections.0, rejections.1
        ),
    );
    assert!(ok);
}

fn synth_classes(count: usize, spec: &DependencySpec, size: usize, visibility: f64, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig {
        size,
        visibility,
        ..Default::default()
    };
    synth_dataset(&names(spec.classes()), count, spec, &cfg, seed)
        .unwrap()
        .samples
}

fn mean_f2(model: &Model, samples: &[Sample]) -> f64 {
    let preds: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| binarize(&model.predict(&s.image).unwrap(), 0.5))
        .collect();
    let truths: Vec<Vec<bool>> = samples.iter().map(|s| s.labels.clone()).collect();
    mean_example_metrics(&preds, &truths).unwrap().f2
}

#[test]
fn overfit_small_set() {
    let start = Instant::now();
    let spec = DependencySpec::independent(vec![0.4; 6]);
    let data = synth_classes(50, &spec, 64, 1.0, 7);
    let mut model = Model::init(ModelConfig::new(ExtractorConfig::desk(), 64, 6), 7).unwrap();
    let schedule = TrainSchedule {
        batch_size: 10,
        max_epochs: 200,
        learning_rate: 1e-3,
        decay_patience: 200,
        early_stop_patience: 200,
        ..Default::default()
    };
    // validating on the training set makes val_f2 the training-set F2
    let out = train(&mut model, &data, &data, &schedule, 7, |e| {
        if e.val_f2 > 0.95 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    let f2 = mean_f2(&model, &data);
    let secs = start.elapsed().as_secs_f64();
    let ok = f2 > 0.95 && out.log.len() <= 200 && secs < 600.0;
    report(
        "overfit 50 synthetic images",
        ok,
        format!(
            "training-set mean F2 {f2:.4} after {} epochs in {secs:.0}s",
            out.log.len()
        ),
    );
    assert!(ok);
}

#[test]
fn bilstm_beats_independent_heads() {
    let start = Instant::now();
    // classes 1 and 3 follow 0 and 2: P(B|A) = 0.95, P(A|B) = 0.45
    let spec = DependencySpec::independent(vec![0.2, 0.0, 0.2, 0.0, 0.25, 0.25])
        .with_pair(0, 1, 0.95, 0.45)
        .unwrap()
        .with_pair(2, 3, 0.95, 0.45)
        .unwrap();
    // partly occluded objects make the co-occurring class informative
    let data = synth_classes(2000, &spec, 32, 0.6, 2024);
    let (train_part, test) = data.split_at(1600);
    let (fit, val) = train_part.split_at(1440);
    let schedule = TrainSchedule {
        max_epochs: 30,
        learning_rate: 1e-3,
        decay_patience: 10,
        ..Default::default()
    };
    let mut scores = [0.0; 2];
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        for (slot, recurrence) in [Recurrence::Bidirectional, Recurrence::Independent]
            .into_iter()
            .enumerate()
        {
            let ex = ExtractorConfig::from_filters(&[(2, 8), (2, 16), (2, 32)], &[true, true, false], 32);
            let mut cfg = ModelConfig::new(ex, 64, 6);
            cfg.recurrence = recurrence;
            let mut model = Model::init(cfg, 100 + seed).unwrap();
            let out = train(&mut model, fit, val, &schedule, seed, |_| ControlFlow::Continue(())).unwrap();
            let f2 = mean_f2(&out.best, test);
            lines.push(format!("{recurrence:?}/seed {seed}: {f2:.4}"));
            scores[slot] += f2 / 3.0;
        }
    }
    let gain = scores[0] - scores[1];
    let ok = gain >= 0.02;
    report(
        "recurrent dependency model vs independent heads",
        ok,
        format!(
            "test mean F2 {:.4} vs {:.4}, gain {gain:+.4} (need ≥ +0.02); {} ; {:.0}s",
            scores[0],
            scores[1],
            lines.join(", "),
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(ok);
}

#[test]
fn seeded_runs_are_reproducible() {
    let spec = DependencySpec::independent(vec![0.5, 0.3, 0.4])
        .with_pair(0, 1, 0.9, 0.6)
        .unwrap();
    let run = |dir: &std::path::Path| {
        let data = synth_classes(24, &spec, 16, 0.9, 9);
        let ex = ExtractorConfig::from_filters(&[(1, 4), (1, 8), (1, 16)], &[true, true, false], 16);
        let mut model = Model::init(ModelConfig::new(ex, 8, 3), 9).unwrap();
        let schedule = TrainSchedule {
            batch_size: 8,
            max_epochs: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let out = train(&mut model, &data[..20], &data[20..], &schedule, 9, |_| {
            ControlFlow::Continue(())
        })
        .unwrap();
        std::fs::write(dir.join("log.csv"), log_csv(&out.log)).unwrap();
        checkpoint::save(&out.best, &dir.join("model.ckpt")).unwrap();
        (
            std::fs::read(dir.join("log.csv")).unwrap(),
            std::fs::read(dir.join("model.ckpt")).unwrap(),
        )
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (log_a, ckpt_a) = run(a.path());
    let (log_b, ckpt_b) = run(b.path());
    let ok = log_a == log_b && ckpt_a == ckpt_b;
    report(
        "byte-identical seeded runs",
        ok,
        format!(
            "log {} bytes, checkpoint {} bytes, identical: {ok}",
            log_a.len(),
            ckpt_a.len()
        ),
    );
    assert!(ok);
}
