mod common;

use common::*;
use particul::baselines::mcp_confidence;
use particul::calibration::{calibrate_bank, class_confidence};
use particul::detectors::{detector_loss, train_class_based, DetectorTrainConfig};
use particul::metrics::{aupr, auroc, fpr_at_tpr, spearman, ScorePair};
use particul::tensor::{FeatureMap, Image};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn forward_matches_direct_convolution() {
    for seed in 0..10 {
        let m = random_model(seed);
        let px = random_pixels(seed + 50, 8 * 8 * 3);
        let (f, l) = m
            .forward(&Image::new(8, 8, 3, px.clone()).unwrap())
            .unwrap();
        let (fo, lo) = naive_forward(&m, &px);
        for (a, b) in f.data().iter().zip(&fo).chain(l.iter().zip(&lo)) {
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn detector_loss_matches_definition() {
    for seed in 0..20 {
        let (f, ks) = detector_instance(seed);
        for lambda in [0.0, 1.0, 2.5] {
            let a = detector_loss(&f, &ks, lambda).unwrap();
            let b = oracle_detector_loss(&f, &ks, lambda);
            assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut unicity_seen = false;
    for seed in 0..6 {
        let (err, uni) = detector_fd_error(seed);
        unicity_seen |= uni;
        assert!(err < 1e-4, "detector seed {seed}: {err}");
        let err = input_fd_error(seed);
        assert!(err < 1e-4, "input seed {seed}: {err}");
    }
    assert!(unicity_seen, "no instance exercised the unicity term");
}

#[test]
fn metrics_match_exhaustive_oracles() {
    for seed in 0..40 {
        let (iod, ood) = metric_instance(seed);
        let pair = ScorePair::new(iod.clone(), ood.clone()).unwrap();
        assert!((auroc(&pair).unwrap() - mann_whitney(&iod, &ood)).abs() < 1e-9);
        assert!((aupr(&pair).unwrap() - sweep_aupr(&iod, &ood)).abs() < 1e-9);
        for t in [0.1, 0.5, 0.8, 1.0] {
            assert!((fpr_at_tpr(&pair, t).unwrap() - sweep_fpr_at_tpr(&iod, &ood, t)).abs() < 1e-9);
        }
        let n = iod.len().min(ood.len());
        if let Ok(rs) = spearman(&iod[..n], &ood[..n]) {
            assert!((rs - rank_pearson(&iod[..n], &ood[..n])).abs() < 1e-9);
        }
    }
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(
        prop_oneof![(-5i32..5).prop_map(f64::from), -5.0..5.0f64],
        1..40,
    )
}

proptest! {
    #[test]
    fn metrics_invariant_under_increasing_transform(iod in scores(), ood in scores()) {
        let f = |v: &Vec<f64>| v.iter().map(|x| (0.7 * x).exp() + 3.0).collect::<Vec<_>>();
        let a = ScorePair::new(iod.clone(), ood.clone()).unwrap();
        let b = ScorePair::new(f(&iod), f(&ood)).unwrap();
        prop_assert!((auroc(&a).unwrap() - auroc(&b).unwrap()).abs() < 1e-12);
        prop_assert!((aupr(&a).unwrap() - aupr(&b).unwrap()).abs() < 1e-12);
        prop_assert_eq!(fpr_at_tpr(&a, 0.8).unwrap(), fpr_at_tpr(&b, 0.8).unwrap());
    }

    #[test]
    fn fpr_is_monotone_in_target(iod in scores(), ood in scores(), t1 in 0.01..1.0f64, t2 in 0.01..1.0f64) {
        let pair = ScorePair::new(iod, ood).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(fpr_at_tpr(&pair, lo).unwrap() <= fpr_at_tpr(&pair, hi).unwrap());
    }

    #[test]
    fn spearman_symmetric_and_rank_based(pairs in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 3..30)) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        match (spearman(&xs, &ys), spearman(&ys, &xs)) {
            (Ok(a), Ok(b)) => {
                prop_assert!((a - b).abs() < 1e-12);
                let cubed: Vec<f64> = xs.iter().map(|v| v.powi(3)).collect();
                prop_assert!((spearman(&cubed, &ys).unwrap() - a).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "symmetry of degeneracy"),
        }
    }

    #[test]
    fn mcp_ignores_logit_shift(logits in prop::collection::vec(-20.0..20.0f64, 2..8), c in -50.0..50.0f64) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        let a = mcp_confidence(&logits).unwrap().value();
        let b = mcp_confidence(&shifted).unwrap().value();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

fn class_fixture(seed: u64) -> (Vec<FeatureMap>, Vec<usize>) {
    let mut r = rng(seed);
    let feats = (0..18).map(|_| random_fmap(&mut r, 4, 4, 5)).collect();
    let labels = (0..18).map(|i| i % 3).collect();
    (feats, labels)
}

#[test]
fn removing_a_class_leaves_other_kernels_untouched() {
    let (feats, labels) = class_fixture(3);
    let cfg = DetectorTrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let full = train_class_based(&feats, &labels, 3, 2, &cfg).unwrap();
    // drop class 1 entirely; its slot is filled with unrelated data
    let mut r = rng(99);
    let (f2, l2): (Vec<FeatureMap>, Vec<usize>) = feats
        .iter()
        .zip(&labels)
        .map(|(f, &l)| {
            if l == 1 {
                (random_fmap(&mut r, 4, 4, 5), 1)
            } else {
                (f.clone(), l)
            }
        })
        .unzip();
    let ablated = train_class_based(&f2, &l2, 3, 2, &cfg).unwrap();
    for c in [0, 2] {
        assert_eq!(full.class_kernels(c), ablated.class_kernels(c));
    }
    assert_ne!(full.class_kernels(1), ablated.class_kernels(1));
}

#[test]
fn class_confidence_ignores_other_class_detectors() {
    let (feats, labels) = class_fixture(4);
    let cfg = DetectorTrainConfig {
        epochs: 2,
        ..Default::default()
    };
    let bank = train_class_based(&feats, &labels, 3, 2, &cfg).unwrap();
    let cal = calibrate_bank(&bank, &feats, &labels).unwrap();
    let mut r = rng(5);
    for f in &feats {
        let logits: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
        let z = particul::tensor::argmax(&logits);
        let before = class_confidence(f, &logits, &bank, &cal).unwrap().value();
        let (mut b2, mut c2) = (bank.clone(), cal.clone());
        for c in (0..3).filter(|&c| c != z) {
            for i in 0..2 {
                b2.kernel_mut(c, i)
                    .iter_mut()
                    .for_each(|v| *v = r.random_range(-9.0..9.0));
                c2.set(
                    c,
                    i,
                    particul::calibration::LogisticParams {
                        mu: 17.0,
                        sigma: 0.01,
                    },
                );
            }
        }
        let after = class_confidence(f, &logits, &b2, &c2).unwrap().value();
        assert_eq!(before.to_bits(), after.to_bits());
    }
}
