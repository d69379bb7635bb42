//! Ranking metrics for the irregular-vs-rest task.
//!
//! Irregular test images are labeled +1, regular and other-class images -1,
//! and each method's scores rank images with higher meaning more irregular.
//! Average precision sums precision at each positive rank (no interpolation);
//! AUC uses the rank-statistic form, equivalent to trapezoidal integration of
//! the ROC curve, with ties contributing half.

use crate::dataset::{DatasetManifest, Status};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEval {
    pub ap: f64,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
}

/// Per-class AP/AUC/ROC and the mean average precision across classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassEval>,
    pub map: f64,
}

/// Indices 0..n sorted by score descending, ties keeping input order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Average precision of the ranking induced by `scores` (+1 = positive).
pub fn average_precision(labels: &[i32], scores: &[f64]) -> Result<f64> {
    assert_eq!(labels.len(), scores.len());
    let total_pos = labels.iter().filter(|&&l| l > 0).count();
    if total_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] > 0 {
            seen_pos += 1;
            sum += seen_pos as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_pos as f64)
}

/// AUC by the rank statistic plus the ROC curve points, threshold swept over
/// distinct scores descending.
pub fn roc_auc(labels: &[i32], scores: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    assert_eq!(labels.len(), scores.len());
    let pos = labels.iter().filter(|&&l| l > 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }

    // average ranks over tied groups, ascending by score
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] > 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    let n = neg as f64;
    let auc = (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n);

    // ROC points from (0,0) to (1,1), one per distinct score
    let mut roc = Vec::new();
    roc.push((0.0, 0.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let desc = ranking(scores);
    let mut i = 0;
    while i < desc.len() {
        let mut j = i;
        while j < desc.len() && scores[desc[j]] == scores[desc[i]] {
            if labels[desc[j]] > 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        roc.push((fp as f64 / n, tp as f64 / p));
        i = j;
    }
    Ok((auc, roc))
}

/// Per-class evaluation over the test split; every test image of a selected
/// class must have a score. Passing no classes evaluates all classes present.
pub fn evaluate(
    manifest: &DatasetManifest,
    scores_by_id: &BTreeMap<String, f64>,
    classes: &[String],
) -> Result<EvalReport> {
    let classes: Vec<String> = if classes.is_empty() {
        let mut all: Vec<String> = manifest.test().map(|r| r.class.clone()).collect();
        all.sort();
        all.dedup();
        all
    } else {
        classes.to_vec()
    };

    let mut per_class = BTreeMap::new();
    for class in &classes {
        let mut labels = Vec::new();
        let mut scores = Vec::new();
        for record in manifest.test().filter(|r| &r.class == class) {
            let score = scores_by_id
                .get(&record.id)
                .copied()
                .ok_or_else(|| Error::ScoreMissing {
                    id: record.id.clone(),
                })?;
            labels.push(if record.status == Status::Irregular {
                1
            } else {
                -1
            });
            scores.push(score);
        }
        let ap = average_precision(&labels, &scores)?;
        let (auc, roc) = roc_auc(&labels, &scores)?;
        per_class.insert(class.clone(), ClassEval { ap, auc, roc });
    }

    let map = per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len().max(1) as f64;
    Ok(EvalReport { per_class, map })
}

/// Plain-text table, classes as columns and methods as rows, AP in percent.
pub fn render_table(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut classes: Vec<&String> = reports
        .values()
        .flat_map(|r| r.per_class.keys())
        .collect();
    classes.sort();
    classes.dedup();

    let mut out = String::new();
    out.push_str(&format!("{:<14}", "method"));
    for class in &classes {
        out.push_str(&format!(" {:>12}", class));
    }
    out.push_str(&format!(" {:>8}\n", "mAP"));
    for (method, report) in reports {
        out.push_str(&format!("{method:<14}"));
        for class in &classes {
            match report.per_class.get(class.as_str()) {
                Some(c) => out.push_str(&format!(" {:>12.1}", c.ap * 100.0)),
                None => out.push_str(&format!(" {:>12}", "-")),
            }
        }
        out.push_str(&format!(" {:>8.1}\n", report.map * 100.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BoundingBox, ImageRecord, Proposal, Split};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ap_perfect_ranking() {
        let labels = [1, 1, -1, -1];
        let scores = [4.0, 3.0, 2.0, 1.0];
        assert_eq!(average_precision(&labels, &scores).unwrap(), 1.0);
    }

    #[test]
    fn ap_single_positive_at_bottom() {
        assert_relative_eq!(
            average_precision(&[1, -1], &[1.0, 2.0]).unwrap(),
            0.5
        );
    }

    #[test]
    fn ap_hand_computed() {
        assert_relative_eq!(
            average_precision(&[1, -1, 1], &[3.0, 2.0, 1.0]).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn ap_requires_a_positive() {
        assert!(matches!(
            average_precision(&[-1, -1], &[1.0, 2.0]).unwrap_err(),
            Error::NoPositives
        ));
    }

    #[test]
    fn auc_basics() {
        assert_eq!(
            roc_auc(&[1, 1, -1], &[3.0, 2.0, 1.0]).unwrap().0,
            1.0
        );
        assert_eq!(
            roc_auc(&[1, -1, 1, -1], &[5.0, 5.0, 5.0, 5.0]).unwrap().0,
            0.5
        );
        assert_relative_eq!(
            roc_auc(&[1, -1, 1, -1], &[4.0, 3.0, 2.0, 1.0]).unwrap().0,
            0.75
        );
        assert!(matches!(
            roc_auc(&[1, 1], &[1.0, 2.0]).unwrap_err(),
            Error::SingleClass
        ));
    }

    #[test]
    fn roc_points_monotone_and_bracketed() {
        let labels = [1, -1, 1, -1, 1, -1, -1];
        let scores = [0.9, 0.8, 0.8, 0.5, 0.4, 0.4, 0.1];
        let (_, roc) = roc_auc(&labels, &scores).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        for w in roc.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    // Exhaustive prefix-precision oracle for AP and pairwise-comparison
    // oracle for AUC.
    fn ap_oracle(labels: &[i32], scores: &[f64]) -> f64 {
        let order = ranking(scores);
        let total_pos = labels.iter().filter(|&&l| l > 0).count();
        let mut sum = 0.0;
        for k in 1..=order.len() {
            if labels[order[k - 1]] > 0 {
                let pos_in_prefix = order[..k].iter().filter(|&&i| labels[i] > 0).count();
                sum += pos_in_prefix as f64 / k as f64;
            }
        }
        sum / total_pos as f64
    }

    fn auc_oracle(labels: &[i32], scores: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..labels.len() {
            if labels[i] <= 0 {
                continue;
            }
            for j in 0..labels.len() {
                if labels[j] > 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn metrics_match_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..100 {
            let n = rng.gen_range(2..=12);
            let mut labels: Vec<i32> = (0..n).map(|_| if rng.gen_bool(0.4) { 1 } else { -1 }).collect();
            // force both classes
            labels[0] = 1;
            if n > 1 {
                labels[1] = -1;
            }
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        // encourage ties
                        rng.gen_range(0..4) as f64
                    } else {
                        rng.gen_range(-2.0..2.0)
                    }
                })
                .collect();
            assert_eq!(
                average_precision(&labels, &scores).unwrap(),
                ap_oracle(&labels, &scores)
            );
            let (auc, _) = roc_auc(&labels, &scores).unwrap();
            assert_relative_eq!(auc, auc_oracle(&labels, &scores), epsilon = 1e-12);
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for _ in 0..20 {
            let n = rng.gen_range(4..12);
            let mut labels: Vec<i32> = (0..n).map(|_| if rng.gen_bool(0.5) { 1 } else { -1 }).collect();
            labels[0] = 1;
            labels[1] = -1;
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (0.5 * s).exp() + 1.0).collect();
            assert_eq!(
                average_precision(&labels, &scores).unwrap(),
                average_precision(&labels, &transformed).unwrap()
            );
            assert_eq!(
                roc_auc(&labels, &scores).unwrap().0,
                roc_auc(&labels, &transformed).unwrap().0
            );
        }
    }

    #[test]
    fn auc_complement_without_ties() {
        let labels = [1, -1, 1, -1, -1, 1];
        let scores = [2.0, 1.5, 0.7, 0.3, -0.4, -1.2];
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&labels, &scores).unwrap().0;
        let b = roc_auc(&labels, &neg).unwrap().0;
        assert_relative_eq!(a + b, 1.0, epsilon = 1e-12);
    }

    fn test_record(id: &str, class: &str, status: Status) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            class: class.into(),
            status,
            split: Split::Test,
            width: 10.0,
            height: 10.0,
            global_feature: None,
            proposals: vec![Proposal {
                bbox: BoundingBox {
                    x1: 0.0,
                    y1: 0.0,
                    x2: 5.0,
                    y2: 5.0,
                },
                feature: None,
                score: Some(0.0),
            }],
        }
    }

    #[test]
    fn evaluate_single_perfect_class() {
        let manifest = DatasetManifest {
            class_name: "car".into(),
            feature_dim: None,
            records: vec![
                test_record("a", "car", Status::Irregular),
                test_record("b", "car", Status::Regular),
                test_record("c", "car", Status::Other),
            ],
        };
        let scores = BTreeMap::from([
            ("a".to_string(), 3.0),
            ("b".to_string(), 1.0),
            ("c".to_string(), 0.0),
        ]);
        let report = evaluate(&manifest, &scores, &[]).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.per_class["car"].auc, 1.0);
    }

    #[test]
    fn evaluate_averages_class_aps() {
        // class x: positive ranked first (AP 1); class y: positive second of
        // two (AP 0.5); mAP 0.75
        let manifest = DatasetManifest {
            class_name: "x".into(),
            feature_dim: None,
            records: vec![
                test_record("x1", "x", Status::Irregular),
                test_record("x2", "x", Status::Regular),
                test_record("y1", "y", Status::Irregular),
                test_record("y2", "y", Status::Other),
            ],
        };
        let scores = BTreeMap::from([
            ("x1".to_string(), 2.0),
            ("x2".to_string(), 1.0),
            ("y1".to_string(), 1.0),
            ("y2".to_string(), 2.0),
        ]);
        let report = evaluate(&manifest, &scores, &[]).unwrap();
        assert_relative_eq!(report.per_class["x"].ap, 1.0);
        assert_relative_eq!(report.per_class["y"].ap, 0.5);
        assert_relative_eq!(report.map, 0.75);
    }

    #[test]
    fn evaluate_missing_score_is_error() {
        let manifest = DatasetManifest {
            class_name: "x".into(),
            feature_dim: None,
            records: vec![
                test_record("x1", "x", Status::Irregular),
                test_record("x2", "x", Status::Regular),
            ],
        };
        let scores = BTreeMap::from([("x1".to_string(), 2.0)]);
        assert!(matches!(
            evaluate(&manifest, &scores, &[]).unwrap_err(),
            Error::ScoreMissing { id } if id == "x2"
        ));
    }
}
