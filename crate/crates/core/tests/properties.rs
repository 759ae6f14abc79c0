//! Property tests for the metric and numeric invariants.

use pfd_core::eval::{auc, auc_pairwise_oracle, gmv_rank, RankedItem};
use pfd_core::synthdata::discretize;
use pfd_core::tensor::{l2_normalize, logistic_loss, sigmoid, EPS_NORM};
use proptest::prelude::*;

proptest! {
    #[test]
    fn auc_matches_pairwise_oracle(
        scores in prop::collection::vec(0u8..12, 2..120),
        labels_seed in any::<u64>(),
    ) {
        let n = scores.len();
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|i| (labels_seed >> (i % 64)) & 1 == 1).collect();
        if labels.iter().all(|&b| b) { labels[0] = false; }
        if labels.iter().all(|&b| !b) { labels[0] = true; }
        let fast = auc(&scores, &labels).unwrap();
        let slow = auc_pairwise_oracle(&scores, &labels).unwrap();
        prop_assert_eq!(fast, slow);
    }

    #[test]
    fn auc_invariant_under_increasing_transform(
        raw in prop::collection::vec(-50i32..50, 2..80),
        labels_seed in any::<u64>(),
        scale in 0.1f64..4.0,
        shift in -5.0f64..5.0,
    ) {
        let n = raw.len();
        let scores: Vec<f64> = raw.iter().map(|&s| s as f64 / 7.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|i| (labels_seed >> (i % 64)) & 1 == 1).collect();
        if labels.iter().all(|&b| b) { labels[0] = false; }
        if labels.iter().all(|&b| !b) { labels[0] = true; }
        let a = auc(&scores, &labels).unwrap();
        // exp is strictly increasing; affine pre-map keeps order for scale > 0
        let transformed: Vec<f64> = scores.iter().map(|&s| (scale * s + shift).exp()).collect();
        let b = auc(&transformed, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn auc_negation_complements_without_ties(
        n in 2usize..100,
        labels_seed in any::<u64>(),
    ) {
        // distinct scores by construction: no ties
        let scores: Vec<f64> = (0..n).map(|i| i as f64 + 0.5).collect();
        let mut labels: Vec<bool> = (0..n).map(|i| (labels_seed >> (i % 64)) & 1 == 1).collect();
        if labels.iter().all(|&b| b) { labels[0] = false; }
        if labels.iter().all(|&b| !b) { labels[0] = true; }
        let a = auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = auc(&neg, &labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_rows_have_unit_norm(
        rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 1..20),
    ) {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = pfd_core::tensor::Tensor::from_values(&[rows.len(), 4], flat);
        let (y, _) = l2_normalize(&x);
        for r in 0..rows.len() {
            let raw_norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if raw_norm > EPS_NORM {
                let norm: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logistic_loss_dominates_binary_entropy(
        f in -8.0f64..8.0,
        t in 0.0f64..1.0,
    ) {
        let (loss, _) = logistic_loss(&[f], &[t]).unwrap();
        let entropy = if t == 0.0 || t == 1.0 {
            0.0
        } else {
            -(t * t.ln() + (1.0 - t) * (1.0 - t).ln())
        };
        prop_assert!(loss >= entropy - 1e-12);
    }

    #[test]
    fn gmv_topk_invariant_to_price_scale(
        items in prop::collection::vec((1u32..1000, 1u32..99, 1u32..99, 1u32..500), 1..40),
        factor in 0.01f64..100.0,
        k_frac in 0.0f64..1.0,
    ) {
        // distinct ids keep the tie rule deterministic
        let mut seen = std::collections::BTreeSet::new();
        let items: Vec<RankedItem> = items
            .into_iter()
            .filter(|(id, ..)| seen.insert(*id))
            .map(|(id, c, v, p)| {
                RankedItem::new(id, c as f64 / 100.0, v as f64 / 100.0, p as f64)
            })
            .collect();
        prop_assume!(!items.is_empty());
        let k = ((items.len() as f64) * k_frac) as usize;
        let scaled: Vec<RankedItem> = items
            .iter()
            .map(|r| RankedItem::new(r.item_id, r.ctr, r.cvr, r.price * factor))
            .collect();
        let a: Vec<u32> = gmv_rank(&items, k).unwrap().iter().map(|r| r.item_id).collect();
        let b: Vec<u32> = gmv_rank(&scaled, k).unwrap().iter().map(|r| r.item_id).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn discretize_matches_linear_scan_on_arbitrary_inputs(
        mut raw_bounds in prop::collection::vec(-100i64..100, 1..10),
        value in -150.0f64..150.0,
    ) {
        raw_bounds.sort_unstable();
        raw_bounds.dedup();
        let bounds: Vec<f64> = raw_bounds.iter().map(|&b| b as f64 / 3.0).collect();
        let scan = bounds.iter().filter(|b| **b <= value).count() as u32;
        prop_assert_eq!(discretize(value, &bounds), scan);
    }
}

/// Equality in `loss >= entropy` holds exactly at matched soft targets and
/// only there, checked on a deterministic grid.
#[test]
fn logistic_loss_equality_iff_matched() {
    for fi in -16..=16 {
        let f = fi as f64 / 2.0;
        for ti in 1..20 {
            let t = ti as f64 / 20.0;
            let (loss, _) = logistic_loss(&[f], &[t]).unwrap();
            let entropy = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
            let gap = loss - entropy;
            assert!(gap >= -1e-12);
            let matched = (sigmoid(f) - t).abs() < 1e-9;
            if matched {
                assert!(gap.abs() < 1e-12, "matched target must attain the entropy bound");
            } else {
                // KL divergence between Bernoulli(t) and Bernoulli(sigma(f))
                let p = sigmoid(f);
                let kl = t * (t / p).ln() + (1.0 - t) * ((1.0 - t) / (1.0 - p)).ln();
                assert!((gap - kl).abs() < 1e-9, "gap must equal the KL divergence");
                assert!(gap > 0.0);
            }
        }
    }
}
