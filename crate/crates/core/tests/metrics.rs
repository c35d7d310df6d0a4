use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transaction_core::metrics::{
    action_scores, mean_topk_recall, tie_break_topk, top1_accuracy, topk_recall_per_class, ActionMode,
};
use transaction_core::{Error, Tensor};

fn scores(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows)
}

fn all_classes(c: usize) -> BTreeSet<usize> {
    (0..c).collect()
}

/// Full sort of every (score, index) pair.
fn brute_topk(row: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = row.iter().cloned().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    pairs.into_iter().take(k).map(|p| p.1).collect()
}

/// Naive loops over classes, then over samples.
fn brute_mean_recall(s: &[Vec<f64>], targets: &[usize], k: usize, classes: &BTreeSet<usize>) -> Option<f64> {
    let mut recalls = Vec::new();
    for &c in classes {
        let mut n = 0;
        let mut hit = 0;
        for (row, &t) in s.iter().zip(targets) {
            if t == c {
                n += 1;
                if brute_topk(row, k).contains(&c) {
                    hit += 1;
                }
            }
        }
        if n > 0 {
            recalls.push(hit as f64 / n as f64);
        }
    }
    if recalls.is_empty() {
        None
    } else {
        Some(recalls.iter().sum::<f64>() / recalls.len() as f64)
    }
}

#[test]
fn tie_break_examples() {
    assert_eq!(tie_break_topk(&[0.5; 4], 2), vec![0, 1]);
    assert_eq!(tie_break_topk(&[0.1, 0.9, 0.9], 1), vec![1]);
    assert_eq!(tie_break_topk(&[0.1, 0.9, 0.9], 5), vec![1, 2, 0]);
}

#[test]
fn tie_break_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let c = rng.random_range(1..12);
        // Coarse values so ties are common.
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
        let k = rng.random_range(1..=c);
        assert_eq!(tie_break_topk(&row, k), brute_topk(&row, k), "{row:?} k={k}");
    }
}

#[test]
fn recall_examples() {
    let s = scores(&[&[0.9, 0.1, 0.0], &[0.0, 0.2, 0.8], &[0.3, 0.3, 0.4]]);
    let t = [0, 1, 2];
    let per = topk_recall_per_class(&s, &t, 3, &all_classes(3), None).unwrap();
    assert!(per.values().all(|&r| r == 1.0));

    // Class 0 twice: one hit, one miss at k = 1.
    let s = scores(&[&[0.9, 0.1], &[0.2, 0.8]]);
    let per = topk_recall_per_class(&s, &[0, 0], 1, &all_classes(2), None).unwrap();
    assert_eq!(per, BTreeMap::from([(0, 0.5)]));

    // Per-class recalls 1.0, 0.5, 0.0 average to 0.5 even though 2 of 4 instances hit.
    let s = scores(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
    let mean = mean_topk_recall(&s, &[0, 1, 1, 2], 1, &all_classes(3), None).unwrap().unwrap();
    assert_eq!(mean, 0.5);
}

#[test]
fn recall_errors_and_absent_classes() {
    let s = scores(&[&[0.5, 0.5]]);
    assert!(matches!(
        topk_recall_per_class(&s, &[0], 3, &all_classes(2), None),
        Err(Error::TopK { k: 3, classes: 2 })
    ));
    assert!(topk_recall_per_class(&s, &[0], 0, &all_classes(2), None).is_err());
    let only_one = BTreeSet::from([1]);
    assert_eq!(mean_topk_recall(&s, &[0], 1, &only_one, None).unwrap(), None);
}

#[test]
fn row_subsets_restrict_samples() {
    let s = scores(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
    let rows = [0usize, 2];
    let per = topk_recall_per_class(&s, &[0, 1, 1], 1, &all_classes(2), Some(&rows)).unwrap();
    assert_eq!(per, BTreeMap::from([(0, 1.0), (1, 1.0)]));
}

#[test]
fn top1_accuracy_counts_hits() {
    let s = scores(&[&[0.1, 0.9], &[0.6, 0.4], &[0.5, 0.5]]);
    assert!((top1_accuracy(&s, &[1, 1, 0]) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn mean_recall_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        let c = rng.random_range(1..=10);
        let b = rng.random_range(1..=50);
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..c).map(|_| rng.random_range(0..5) as f64).collect())
            .collect();
        let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let k = rng.random_range(1..=c.min(5));
        let classes: BTreeSet<usize> = (0..c).filter(|_| rng.random_bool(0.7)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let got = mean_topk_recall(&Tensor::from_rows(&refs), &targets, k, &classes, None).unwrap();
        assert_eq!(got, brute_mean_recall(&rows, &targets, k, &classes), "trial {trial}");
    }
}

fn random_case(seed: u64) -> (Tensor<f64>, Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(2..=8);
    let b = rng.random_range(1..=30);
    let data = (0..b * c).map(|_| rng.random_range(0.0..1.0)).collect();
    let t = (0..b).map(|_| rng.random_range(0..c)).collect();
    (Tensor::from_vec(&[b, c], data).unwrap(), t, c)
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let (s, t, c) = random_case(seed);
        for k in 1..c {
            let a = topk_recall_per_class(&s, &t, k, &all_classes(c), None).unwrap();
            let b = topk_recall_per_class(&s, &t, k + 1, &all_classes(c), None).unwrap();
            for (cls, r) in &a {
                prop_assert!(*r <= b[cls]);
            }
        }
    }

    #[test]
    fn duplicating_a_class_keeps_per_class_recall(seed in any::<u64>(), pick in any::<usize>()) {
        let (s, t, c) = random_case(seed);
        let cls = t[pick % t.len()];
        let mut rows: Vec<Vec<f64>> = (0..s.rows()).map(|r| s.row(r).to_vec()).collect();
        let mut targets = t.clone();
        for r in 0..s.rows() {
            if t[r] == cls {
                rows.push(s.row(r).to_vec());
                targets.push(cls);
            }
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let k = 2.min(c);
        let before = topk_recall_per_class(&s, &t, k, &all_classes(c), None).unwrap();
        let after = topk_recall_per_class(&Tensor::from_rows(&refs), &targets, k, &all_classes(c), None).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn positive_rescaling_keeps_top_k(seed in any::<u64>(), factor in 1e-3f64..1e3) {
        let (s, _, c) = random_case(seed);
        for r in 0..s.rows() {
            let scaled: Vec<f64> = s.row(r).iter().map(|v| v * factor).collect();
            for k in 1..=c {
                prop_assert_eq!(tie_break_topk(s.row(r), k), tie_break_topk(&scaled, k));
            }
        }
    }
}

mod action {
    use super::*;
    use transaction_core::data::{ActionSpace, ModalitySample, Split, TailRule, Vocab};

    fn space(pairs: &[(usize, usize)], n_verbs: usize, n_nouns: usize) -> ActionSpace {
        let samples: Vec<ModalitySample> = pairs
            .iter()
            .enumerate()
            .map(|(a, &(v, n))| ModalitySample {
                sample_id: format!("s{a}"),
                rgb: Tensor::zeros(&[1, 2]),
                flow: Tensor::zeros(&[1, 2]),
                obj: Tensor::zeros(&[1, 2]),
                verb: v,
                noun: n,
                action: a,
                participant_id: "P01".into(),
                split: Split::Train,
            })
            .collect();
        let vocab = Vocab {
            n_verbs,
            n_nouns,
            n_actions: pairs.len(),
        };
        ActionSpace::build(&samples, vocab, TailRule::default()).unwrap()
    }

    #[test]
    fn product_mode_hand_case() {
        let sp = space(&[(0, 0), (0, 1), (1, 1)], 2, 2);
        let out = action_scores(&[0.7, 0.3], &[0.4, 0.6], &[0.0; 3], ActionMode::Product, &sp);
        let raw = [0.7 * 0.4, 0.7 * 0.6, 0.3 * 0.6];
        let total: f64 = raw.iter().sum();
        for (o, r) in out.iter().zip(raw) {
            assert!((o - r / total).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_verb_keeps_mass_on_its_actions() {
        let sp = space(&[(0, 0), (0, 1), (1, 1), (1, 0)], 2, 2);
        let out = action_scores(&[0.0, 1.0], &[0.5, 0.5], &[0.0; 4], ActionMode::Product, &sp);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
        assert!((out[2] + out[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn both_modes_return_distributions() {
        let sp = space(&[(0, 0), (0, 1), (1, 1)], 2, 2);
        for mode in [ActionMode::Head, ActionMode::Product] {
            let out = action_scores(&[0.2, 0.8], &[0.9, 0.1], &[3.0, -1.0, 0.5], mode, &sp);
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!("sum".parse::<ActionMode>().is_err());
        assert_eq!("product".parse::<ActionMode>().unwrap(), ActionMode::Product);
    }
}
