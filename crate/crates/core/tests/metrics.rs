use proptest::prelude::*;
use texvit_autodiff::RngState;
use texvit_core::metrics::*;

/// Pairwise count over every (positive, negative) pair, ties worth one half.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut good, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                good += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    good / pairs
}

fn random_instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = RngState::new(seed);
    let n = 2 + rng.below(60);
    let levels = 1 + rng.below(12) as u64;
    let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
    labels[0] = 0;
    labels[1] = 1;
    // Coarse score levels force ties.
    let scores = (0..n).map(|_| (rng.below(levels as usize) as f64 + 0.5) / levels as f64).collect();
    (scores, labels)
}

#[test]
fn worked_examples() {
    let r = compute_metrics(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0], "none").unwrap();
    for v in [r.precision, r.recall, r.f1, r.accuracy, r.auc.unwrap()] {
        assert_eq!(v, 1.0);
    }

    let r = compute_metrics(&[0.9, 0.7, 0.6, 0.55], &[1, 0, 1, 0], "none").unwrap();
    assert_eq!((r.precision, r.recall, r.accuracy), (0.5, 1.0, 0.5));
    assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);

    let r = compute_metrics(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1], "none").unwrap();
    assert_eq!(r.auc, Some(0.75));
    assert_eq!(auc_mann_whitney(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), Some(0.75));
}

#[test]
fn undefined_precision_is_zero() {
    let r = compute_metrics(&[0.1, 0.2, 0.3], &[1, 0, 1], "none").unwrap();
    assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    assert_eq!(r.accuracy, 1.0 / 3.0);
}

#[test]
fn single_class_flags_auc() {
    let r = compute_metrics(&[0.2, 0.9], &[1, 1], "blur").unwrap();
    assert_eq!(r.auc, None);
    assert!(r.roc.is_none() && r.roc_csv().is_none());
    assert!(r.to_json().contains("\"auc\": null"));
    assert!(roc_curve(&[0.1, 0.2], &[0, 0]).is_none());
}

#[test]
fn invalid_inputs_are_errors() {
    assert!(compute_metrics(&[], &[], "none").is_err());
    assert!(compute_metrics(&[0.1, 0.2], &[0], "none").is_err());
    assert!(compute_metrics(&[0.1, 0.2], &[0, 2], "none").is_err());
    assert!(compute_metrics(&[0.1, f64::NAN], &[0, 1], "none").is_err());
}

#[test]
fn three_auc_computations_agree() {
    for seed in 0..100 {
        let (scores, labels) = random_instance(seed);
        let oracle = pairwise_auc(&scores, &labels);
        let mw = auc_mann_whitney(&scores, &labels).unwrap();
        let trap = roc_auc(&roc_curve(&scores, &labels).unwrap());
        assert!((mw - oracle).abs() <= 1e-9, "seed {seed}: {mw} vs {oracle}");
        assert!((trap - oracle).abs() <= 1e-9, "seed {seed}: {trap} vs {oracle}");
        assert_eq!(compute_metrics(&scores, &labels, "none").unwrap().auc, Some(mw));
    }
}

#[test]
fn separated_scores_trace_the_corner() {
    let pts = roc_curve(&[0.9, 0.9, 0.1, 0.1], &[1, 1, 0, 0]).unwrap();
    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.fpr, p.tpr)).collect();
    assert_eq!(xy, [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    assert_eq!(pts[0].threshold, f64::INFINITY);

    // Distinct scores add collinear points along the same polyline.
    let pts = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
    assert!(pts.iter().all(|p| p.fpr == 0.0 || p.tpr == 1.0));
}

#[test]
fn report_json_keys_and_roc_csv() {
    let r = compute_metrics(&[0.3, 0.6, 0.6], &[0, 1, 0], "compress").unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["accuracy", "auc", "corruption", "f1", "fn", "fp", "precision", "recall", "tn", "tp"]);
    assert_eq!(v["corruption"], "compress");
    let csv = r.roc_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fpr,tpr,threshold");
    assert_eq!(lines.len(), 1 + 3);
    assert_eq!(*lines.last().unwrap(), "1,1,0.3");
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0u8..2, n)).prop_map(|(s, mut l)| {
            l[0] = 0;
            l[1] = 1;
            (s, l)
        })
    })
}

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in instance()) {
        let base = auc_mann_whitney(&scores, &labels).unwrap();
        for f in [|s: f64| s.powi(3) + 2.0 * s, |s: f64| (4.0 * s).exp(), |s: f64| (s + 1e-3).ln()] {
            let moved: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            prop_assert_eq!(auc_mann_whitney(&moved, &labels).unwrap(), base);
        }
    }

    #[test]
    fn counts_and_derived_scores((scores, labels) in instance()) {
        let r = compute_metrics(&scores, &labels, "none").unwrap();
        prop_assert_eq!(r.total(), scores.len());
        prop_assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / scores.len() as f64);
        let f1 = if r.precision + r.recall > 0.0 { 2.0 * r.precision * r.recall / (r.precision + r.recall) } else { 0.0 };
        prop_assert!((r.f1 - f1).abs() < 1e-15);
        for v in [r.precision, r.recall, r.f1, r.accuracy, r.auc.unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner((scores, labels) in instance()) {
        let pts = roc_curve(&scores, &labels).unwrap();
        prop_assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in pts.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
    }
}
