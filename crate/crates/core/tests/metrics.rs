use milrank::eval::{auc, evaluate, false_alarm_rate, miss_rate, roc_auc, roc_curve, EvalLevel, EvalOptions, EvalVideo};
use milrank::dataset::{SyntheticConfig, SyntheticData, Split};
use milrank::scorer::init_params;
use milrank::seeding::stream;
use milrank::Error;
use proptest::prelude::*;
use rand::Rng;

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut hits = 0.0;
    let mut total = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li && !*lj {
                total += 1.0;
                if scores[i] > scores[j] {
                    hits += 1.0;
                } else if scores[i] == scores[j] {
                    hits += 0.5;
                }
            }
        }
    }
    hits / total
}

#[test]
fn auc_equals_pair_counting_on_fifty_random_sets() {
    let mut rng = stream(&[3141]);
    let mut done = 0;
    while done < 50 {
        let n = rng.random_range(2..=20);
        // Coarse scores so ties actually happen.
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().all(|l| *l) || labels.iter().all(|l| !*l) {
            continue;
        }
        let got = roc_auc(&scores, &labels).unwrap();
        assert!((got - pair_count_auc(&scores, &labels)).abs() <= 1e-9, "set {done}");
        done += 1;
    }
}

#[test]
fn separated_and_inverted_scores() {
    let labels = [true, true, false, false];
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap(), 0.5);
}

#[test]
fn single_class_is_rejected() {
    assert!(matches!(roc_curve(&[0.1, 0.2], &[false, false]), Err(Error::SingleClass(_))));
    assert!(matches!(roc_curve(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass(_))));
}

#[test]
fn roc_runs_from_origin_to_corner() {
    let pts = roc_curve(&[0.3, 0.7, 0.7, 0.1], &[true, false, true, false]).unwrap();
    assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
    let last = pts.last().unwrap();
    assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    // Two tied scores form one step.
    assert_eq!(pts.len(), 4);
}

#[test]
fn false_alarm_threshold_is_inclusive() {
    let labels = [false, false, false, false, true];
    let scores = [0.5, 0.49, 0.51, 0.0, 0.9];
    assert_eq!(false_alarm_rate(&scores, &labels, 0.5).unwrap(), 50.0);
    assert_eq!(miss_rate(&scores, &labels, 0.95).unwrap(), 100.0);
    assert!(false_alarm_rate(&[0.2], &[true], 0.5).is_err());
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40)
        .prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(any::<bool>(), n)))
        .prop_filter("both classes", |(_, l)| l.iter().any(|x| *x) && l.iter().any(|x| !*x))
}

proptest! {
    #[test]
    fn auc_is_invariant_under_monotone_transforms((scores, labels) in scores_and_labels()) {
        let a = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((a - roc_auc(&warped, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn flipping_labels_complements_auc((scores, labels) in scores_and_labels()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_stays_in_unit_interval((scores, labels) in scores_and_labels()) {
        let pts = roc_curve(&scores, &labels).unwrap();
        let a = auc(&pts);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - pair_count_auc(&scores, &labels)).abs() <= 1e-9);
    }

    #[test]
    fn false_alarm_extremes((scores, labels) in scores_and_labels()) {
        prop_assert_eq!(false_alarm_rate(&scores, &labels, 0.0).unwrap(), 100.0);
        prop_assert_eq!(false_alarm_rate(&scores, &labels, 1.0 + 1e-9).unwrap(), 0.0);
    }
}

#[test]
fn segment_and_frame_level_auc_agree_when_frames_divide_evenly() {
    let cfg = SyntheticConfig {
        dim: 8,
        train_bags_per_class: 1,
        test_bags_per_class: 6,
        seed: 4,
        ..SyntheticConfig::default()
    };
    let data = SyntheticData::generate(&cfg).unwrap();
    let bags = data.bags::<f64>(Split::Test).unwrap();
    let videos: Vec<EvalVideo<f64>> = data
        .split(Split::Test)
        .map(|v| EvalVideo {
            entry: v.entry.clone(),
            segments: bags
                .positives
                .iter()
                .chain(&bags.negatives)
                .find(|b| b.video_id == v.entry.id)
                .unwrap()
                .instances
                .clone(),
            segment_truth: Some(v.truth.clone()),
        })
        .collect();
    let params = init_params::<f64>(1, &[8, 6, 4, 1]).unwrap();
    let run = |level| {
        evaluate(&params, &videos, &EvalOptions { level, ..EvalOptions::default() }).unwrap()
    };
    let seg = run(EvalLevel::Segment);
    let frame = run(EvalLevel::Frame);
    assert_eq!(frame.n_units, seg.n_units * 16);
    assert!((seg.auc - frame.auc).abs() < 1e-12, "{} vs {}", seg.auc, frame.auc);
}
