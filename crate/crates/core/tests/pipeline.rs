mod common;

use std::collections::{BTreeMap, HashSet};
use std::ops::ControlFlow;

use common::{all_triples, check_pairs, grid_corpus};
use contourlab::autodiff::PlateauSchedule;
use contourlab::contour::{segment_track, ContourSequence};
use contourlab::ingest::{generate_synthetic_corpus, SynthSpec};
use contourlab::matrix::Matrix;
use contourlab::pipeline::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pair_samplers_match_brute_force_on_small_corpus() {
    let corpus = grid_corpus(3, 5);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for n in [1, 10, 37] {
            let f = sample_file_pairs(&corpus, n, &mut rng).unwrap();
            check_pairs(&f, PairScheme::File, &corpus, n).unwrap();
            let c = sample_contiguous_pairs(&corpus, n, &mut rng).unwrap();
            check_pairs(&c, PairScheme::Contiguous, &corpus, n).unwrap();
        }
    }
}

#[test]
fn adjacent_first_two_contours_are_a_positive() {
    let corpus = vec![grid_corpus(1, 2).remove(0), grid_corpus(2, 4).remove(1)];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pairs = sample_contiguous_pairs(&corpus, 400, &mut rng).unwrap();
    assert!(pairs
        .iter()
        .any(|p| p.label == 1 && p.a.recording_id == "rec0" && (p.a.start_frame, p.b.start_frame) == (0, 100)));
}

#[test]
fn samplers_reject_degenerate_corpora() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = grid_corpus(1, 10);
    let e = sample_file_pairs(&one, 10, &mut rng).unwrap_err();
    assert!(e.to_string().starts_with("infeasible corpus"));
    assert!(sample_contiguous_pairs(&one, 10, &mut rng).is_err());
    // Two recordings of two contours: adjacency exists but no same-file negative.
    assert!(sample_contiguous_pairs(&grid_corpus(2, 2), 10, &mut rng).is_err());
    assert!(sample_contiguous_pairs(&grid_corpus(2, 1), 10, &mut rng).is_err());
}

#[test]
fn triples_come_from_enumerated_windows() {
    let corpus = grid_corpus(1, 5);
    let windows: HashSet<(String, usize)> = all_triples(&corpus).into_iter().collect();
    assert_eq!(windows.len(), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = sample_triples(&corpus, 300, &mut rng).unwrap();
    let mut seen = HashSet::new();
    for s in &t {
        assert_eq!(s.p2.start_frame, s.p1.start_frame + 100);
        assert_eq!(s.p3.start_frame, s.p1.start_frame + 200);
        assert!(s.p1.recording_id == s.p3.recording_id);
        let key = (s.p1.recording_id.clone(), s.p1.start_frame);
        assert!(windows.contains(&key));
        seen.insert(key);
    }
    assert_eq!(seen.len(), 3);
    let again = sample_triples(&corpus, 300, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(t, again);
}

#[test]
fn split_is_by_recording() {
    let corpus = grid_corpus(20, 3);
    let (train, val) = split_by_recording(&corpus, 0.1, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(val.len(), 2);
    assert_eq!(train.len(), 18);
    let t: HashSet<&str> = train.iter().map(|s| s.recording_id.as_str()).collect();
    assert!(val.iter().all(|s| !t.contains(s.recording_id.as_str())));
    assert!(split_by_recording(&grid_corpus(3, 3), 0.1, 2, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}

fn block(name: &str, rows: usize, cols: usize, seed: u64) -> (String, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
    (name.to_string(), Matrix::new(Matrix::numbered_columns("e", cols), rows, data).unwrap())
}

#[test]
fn combined_widths_and_names() {
    let file = block("File", 30, 128, 1);
    let contig = block("Contig", 30, 128, 2);
    let stat = block("PyMus", 30, 17, 3);
    let (name, m) = combine_features(&[file.clone(), stat.clone()]).unwrap();
    assert_eq!((name.as_str(), m.cols), ("File-PyMus", 145));
    let (_, m3) = combine_features(&[file.clone(), contig, stat]).unwrap();
    assert_eq!(m3.cols, 128 + 128 + 17);
    let (_, single) = combine_features(&[file.clone()]).unwrap();
    assert_eq!(single.cols, 128);
    let short = block("X", 29, 3, 4);
    assert!(combine_features(&[file, short]).is_err());
}

#[test]
fn combined_blocks_are_standardized() {
    let (_, m) = combine_features(&[block("A", 50, 4, 7), block("B", 50, 2, 8)]).unwrap();
    for c in 0..m.cols {
        let col: Vec<f64> = (0..m.rows).map(|i| m.row(i)[c]).collect();
        let mean = col.iter().sum::<f64>() / 50.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn combine_is_row_order_stable(seed in 0u64..1000, rows in 3usize..20) {
        let blocks = [block("A", rows, 3, seed), block("B", rows, 2, seed + 1)];
        let mut perm: Vec<usize> = (0..rows).collect();
        perm.rotate_left(1);
        perm.swap(0, rows - 1);
        let permuted: Vec<(String, Matrix)> =
            blocks.iter().map(|(n, m)| (n.clone(), m.select_rows(&perm))).collect();
        let (_, a) = combine_features(&blocks).unwrap();
        let (_, b) = combine_features(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.row(i).iter().zip(b.row(k)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn undersampled_histogram_is_uniform(labels in prop::collection::vec(0usize..4, 8..200), seed in any::<u64>()) {
        let k = 4;
        prop_assume!((0..k).all(|c| labels.contains(&c)));
        let kept = undersample(&labels, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let min = (0..k).map(|c| labels.iter().filter(|&&l| l == c).count()).min().unwrap();
        let mut hist = vec![0; k];
        for &i in &kept { hist[labels[i]] += 1; }
        prop_assert!(hist.iter().all(|&h| h == min));
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn folds_partition_and_stratify(labels in prop::collection::vec(0usize..3, 15..120), seed in any::<u64>()) {
        let folds = stratified_folds(&labels, 3, 5, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(folds.len(), labels.len());
        prop_assert!(folds.iter().all(|&f| f < 5));
        for c in 0..3 {
            let mut per = [0usize; 5];
            for (i, &l) in labels.iter().enumerate() {
                if l == c { per[folds[i]] += 1; }
            }
            let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}

fn clouds(n: usize, sep: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..n {
            let centre = if c == 0 { -sep } else { sep };
            data.push(centre + rng.random_range(-1.0..1.0));
            data.push(rng.random_range(-1.0..1.0));
            labels.push(c);
        }
    }
    (Matrix::new(vec!["x".into(), "y".into()], 2 * n, data).unwrap(), labels)
}

#[test]
fn separable_clouds_are_classified() {
    let (x, y) = clouds(100, 10.0, 3);
    let classes = vec!["a".to_string(), "b".to_string()];
    let r = crossval_eval(&x, &y, &classes, "toy", "xy", &EvalConfig::default()).unwrap();
    assert!(r.mean_acc >= 0.99, "{r:?}");
    assert_eq!(r.fold_accuracy.len(), 5);
    assert_eq!(r.chance, 0.5);
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 200);
}

#[test]
fn permuted_labels_stay_near_chance() {
    let (x, mut y) = clouds(100, 10.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    use rand::seq::SliceRandom;
    y.shuffle(&mut rng);
    let classes = vec!["a".to_string(), "b".to_string()];
    let r = crossval_eval(&x, &y, &classes, "toy", "xy", &EvalConfig::default()).unwrap();
    assert!((r.mean_acc - 0.5).abs() <= 0.10, "{}", r.mean_acc);
}

#[test]
fn crossval_rejects_thin_classes() {
    let (x, mut y) = clouds(10, 1.0, 1);
    for l in y.iter_mut().skip(4).take(16) {
        *l = 0;
    }
    let classes = vec!["a".to_string(), "b".to_string()];
    assert!(matches!(
        crossval_eval(&x, &y, &classes, "t", "f", &EvalConfig::default()),
        Err(PipelineError::InsufficientClass { .. })
    ));
}

fn report(task: &str, set: &str, acc: f64, k: usize) -> EvalReport {
    EvalReport {
        task: task.into(),
        feature_set: set.into(),
        fold_accuracy: vec![acc; 5],
        mean_acc: acc,
        std_acc: 0.0,
        macro_f1: vec![acc; 5],
        mean_f1: acc,
        confusion: vec![vec![1; k]; k],
        chance: 1.0 / k as f64,
        n_per_class: 10,
        classes: (0..k).map(|c| c.to_string()).collect(),
    }
}

#[test]
fn single_report_renders_one_row_plus_chance() {
    let r = render_report(&[report("Gender", "File", 0.65, 2)]);
    let lines: Vec<&str> = r.table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("File") && lines[2].ends_with("65.0"));
    assert!(lines[3].starts_with("Chance") && lines[3].ends_with("50.0"));
}

#[test]
fn report_json_round_trips_and_fills_grid() {
    let reports = vec![
        report("Gender", "File", 0.745, 2),
        report("Gender", "File-PyMus", 0.8123, 2),
        report("Emotion", "File", 0.3, 8),
    ];
    let r = render_report(&reports);
    assert_eq!(parse_reports(&r.json).unwrap(), reports);
    assert!(r.table.contains("74.5"));
    assert!(r.table.contains("81.2"));
    assert!(r.table.contains("12.5"));
    let pymus = r.table.lines().find(|l| l.starts_with("File-PyMus")).unwrap();
    assert!(pymus.trim_end().ends_with('-'));
}

#[test]
fn never_improving_metric_decays_in_steps_of_ten() {
    let mut driver = EpochDriver::new(PlateauSchedule::new(1e-4), Some(1.0));
    let mut lrs = BTreeMap::new();
    for epoch in 1..=25 {
        lrs.insert(epoch, driver.lr());
        driver.finish_epoch(1.0);
    }
    let expect = |e: usize| match e {
        1..=5 => 1e-4,
        6..=10 => 1e-5,
        11..=15 => 1e-6,
        _ => 1e-7,
    };
    for (e, lr) in lrs {
        assert!((lr - expect(e)).abs() <= 1e-12 * expect(e), "epoch {e}: {lr}");
    }
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        width_multiplier: 0.25,
        seed,
        train_samples: 60,
        val_samples: 40,
        max_epochs: 30,
        slot_hidden: 64,
        ..TrainConfig::default()
    }
}

fn synth_corpus(recordings: usize, frames: usize, seed: u64) -> Vec<ContourSequence> {
    let spec = SynthSpec {
        n_recordings: recordings,
        frames_per_recording: frames,
        seed,
        ..SynthSpec::default()
    };
    let (tracks, _) = generate_synthetic_corpus(&spec).unwrap();
    tracks.iter().map(|t| segment_track(t, 0.5).unwrap()).collect()
}

fn first_epoch(kind: TaskKind, corpus: &[ContourSequence], cfg: &TrainConfig) -> TrainOutcome {
    train_pseudotask_with(kind, corpus, cfg, |_| ControlFlow::Break(())).unwrap()
}

#[test]
fn same_seed_same_first_epoch() {
    let corpus = synth_corpus(8, 600, 2);
    for kind in [TaskKind::File, TaskKind::Contiguous, TaskKind::SlotFill] {
        let a = first_epoch(kind, &corpus, &tiny_config(5));
        let b = first_epoch(kind, &corpus, &tiny_config(5));
        assert_eq!(a.history.len(), 1);
        assert_eq!(a.history[0].train_loss.to_bits(), b.history[0].train_loss.to_bits());
        assert_eq!(a.checkpoint, b.checkpoint);
        let c = first_epoch(kind, &corpus, &tiny_config(6));
        assert_ne!(a.history[0].train_loss, c.history[0].train_loss);
        let train: HashSet<&String> = a.train_recordings.iter().collect();
        assert!(a.val_recordings.iter().all(|r| !train.contains(r)));
    }
}

#[test]
fn contiguous_on_one_recording_is_infeasible() {
    let corpus = synth_corpus(1, 1000, 1);
    let e = train_pseudotask(TaskKind::Contiguous, &corpus, &tiny_config(0)).unwrap_err();
    assert!(e.to_string().contains("infeasible corpus"), "{e}");
}

#[test]
fn non_finite_input_aborts_with_diagnostic() {
    let mut corpus = synth_corpus(6, 600, 3);
    for s in &mut corpus {
        s.contours[0].values_cents[3] = f64::NAN;
    }
    let e = train_pseudotask(TaskKind::File, &corpus, &tiny_config(0)).unwrap_err();
    assert!(matches!(e, PipelineError::NonFinite { epoch: 1, .. }), "{e}");
}

#[test]
fn epoch_budget_outside_range_is_rejected() {
    let corpus = synth_corpus(6, 600, 3);
    let cfg = TrainConfig { max_epochs: 5, ..tiny_config(0) };
    assert!(matches!(
        train_pseudotask(TaskKind::File, &corpus, &cfg),
        Err(PipelineError::Config(_))
    ));
}

#[test]
fn long_runs_stay_finite() {
    let corpus = synth_corpus(6, 600, 4);
    for kind in [TaskKind::File, TaskKind::SlotFill] {
        let cfg = TrainConfig {
            max_epochs: 100,
            train_samples: 50,
            val_samples: 25,
            slot_hidden: 2048,
            ..tiny_config(1)
        };
        let out = train_pseudotask(kind, &corpus, &cfg).unwrap();
        assert_eq!(out.history.len(), 100);
        assert!(out.history.iter().all(|r| r.train_loss.is_finite() && r.val_metric.is_finite()));
    }
}
