//! Classification and localization metrics.

use serde::{Deserialize, Serialize};

use crate::imaging::resize_bilinear;
use crate::tensor::Mat;
use crate::{Error, Result};

/// Mann-Whitney AUC: the fraction of (fake, real) pairs where the fake
/// scores higher, with ties counted as one half. Computed from mid-ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("AUC scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Overlap of a thresholded map with a binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// No pixel reached the threshold, so precision is reported as 0.
    pub empty_prediction: bool,
    /// The mask is empty, so recall is reported as 0.
    pub empty_mask: bool,
}

/// Resizes `map` to the mask's shape if needed, binarizes at `map ≥
/// threshold`, and compares against `gt > 0.5`.
pub fn map_metrics(map: &Mat, gt: &Mat, threshold: f64) -> MapMetrics {
    let resized;
    let map = if map.shape() == gt.shape() {
        map
    } else {
        resized = resize_bilinear(map, gt.rows(), gt.cols());
        &resized
    };
    let (mut inter, mut pred, mut truth) = (0usize, 0usize, 0usize);
    for (&m, &g) in map.data().iter().zip(gt.data()) {
        let p = m >= threshold;
        let t = g > 0.5;
        pred += p as usize;
        truth += t as usize;
        inter += (p && t) as usize;
    }
    let union = pred + truth - inter;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    MapMetrics {
        iou: ratio(inter, union),
        precision: ratio(inter, pred),
        recall: ratio(inter, truth),
        empty_prediction: pred == 0,
        empty_mask: truth == 0,
    }
}

/// Metrics averaged over samples.
pub fn mean_metrics(items: &[MapMetrics]) -> MapMetrics {
    if items.is_empty() {
        return MapMetrics::default();
    }
    let n = items.len() as f64;
    MapMetrics {
        iou: items.iter().map(|m| m.iou).sum::<f64>() / n,
        precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: items.iter().map(|m| m.recall).sum::<f64>() / n,
        empty_prediction: items.iter().any(|m| m.empty_prediction),
        empty_mask: items.iter().any(|m| m.empty_mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut total, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    total += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn map_metric_examples() {
        let gt = Mat::from_fn(4, 4, |y, x| (y < 2 && x < 2) as u8 as f64);
        let same = map_metrics(&gt, &gt, 0.5);
        assert_eq!((same.iou, same.precision, same.recall), (1.0, 1.0, 1.0));
        let disjoint = Mat::from_fn(4, 4, |y, _| (y == 3) as u8 as f64);
        let d = map_metrics(&disjoint, &gt, 0.5);
        assert_eq!((d.iou, d.precision, d.recall), (0.0, 0.0, 0.0));
        let half = Mat::from_fn(4, 4, |y, x| (y == 0 && x < 2) as u8 as f64);
        let h = map_metrics(&half, &gt, 0.5);
        assert_eq!((h.iou, h.precision, h.recall), (0.5, 1.0, 0.5));
        let empty = map_metrics(&Mat::zeros(4, 4), &gt, 0.5);
        assert!(empty.empty_prediction);
        assert_eq!(empty.precision, 0.0);
        let resized = map_metrics(&Mat::filled(2, 2, 0.9), &gt, 0.5);
        assert_eq!(resized.recall, 1.0);
    }

    #[test]
    fn nested_predictions_move_precision_and_recall_oppositely() {
        // every mask pixel outranks every background pixel
        let gt = Mat::from_fn(6, 6, |y, x| (y >= 2 && x >= 3) as u8 as f64);
        let map = Mat::from_fn(6, 6, |y, x| {
            let r = ((y * 6 + x) % 7) as f64 / 7.0;
            if gt.get(y, x) > 0.5 {
                0.5 + 0.5 * r
            } else {
                0.5 * r
            }
        });
        let mut prev: Option<MapMetrics> = None;
        for t in 1..10 {
            let m = map_metrics(&map, &gt, t as f64 / 10.0);
            if let Some(p) = prev {
                assert!(m.precision >= p.precision || m.empty_prediction);
                assert!(m.recall <= p.recall);
            }
            prev = Some(m);
        }
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        proptest::collection::vec((0u8..6, 0u8..2), 2..12)
            .prop_filter("both classes", |v| v.iter().any(|x| x.1 == 0) && v.iter().any(|x| x.1 == 1))
            .prop_map(|v| (v.iter().map(|x| x.0 as f64 / 5.0).collect(), v.iter().map(|x| x.1).collect()))
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count((s, l) in scored()) {
            prop_assert_eq!(auc(&s, &l).unwrap(), brute_auc(&s, &l));
        }

        #[test]
        fn auc_invariant_to_monotone_transform((s, l) in scored()) {
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
        }

        #[test]
        fn precision_recall_monotone_in_threshold(
            values in proptest::collection::vec(0.0f64..1.0, 16),
            mask in proptest::collection::vec(0u8..2, 16),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let map = Mat::from_vec(4, 4, values);
            let gt = Mat::from_vec(4, 4, mask.iter().map(|&m| m as f64).collect());
            let a = map_metrics(&map, &gt, lo);
            let b = map_metrics(&map, &gt, hi);
            prop_assert!(b.recall <= a.recall);
            for m in [a, b] {
                prop_assert!((0.0..=1.0).contains(&m.iou));
                prop_assert!((0.0..=1.0).contains(&m.precision));
            }
        }
    }
}
