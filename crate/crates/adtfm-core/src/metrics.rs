//! Classification metrics: confusion matrix, precision/recall/F1,
//! one-vs-rest ROC curves, and AUC.
//!
//! Multi-class scalars use macro averaging. ROC curves are built per
//! class against all others, grouping tied scores into one threshold so
//! that the trapezoidal AUC equals the pairwise-comparison probability
//! `P(s+ > s-) + P(s+ = s-)/2` exactly (up to rounding).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Precision, recall, and F1 for one class. `zero_division` flags that a
/// denominator was empty and the value was defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub zero_division: bool,
}

/// One point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Full evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// One-vs-rest curve per class; empty when the class is degenerate
    /// (no positives or no negatives) in the evaluated set.
    pub roc: Vec<Vec<RocPoint>>,
    /// Trapezoidal AUC per class; `None` for degenerate classes.
    pub auc: Vec<Option<f64>>,
    /// Mean AUC over classes that have one.
    pub macro_auc: Option<f64>,
}

/// Tallies a `C x C` confusion matrix (rows true, columns predicted).
pub fn confusion_matrix(
    true_labels: &[usize],
    pred_labels: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    if true_labels.len() != pred_labels.len() {
        return Err(CoreError::dim("confusion_matrix", true_labels.len(), pred_labels.len()));
    }
    if true_labels.is_empty() {
        return Err(CoreError::Contract("confusion matrix over an empty sample set".into()));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in true_labels.iter().zip(pred_labels) {
        if t >= num_classes || p >= num_classes {
            return Err(CoreError::Contract(format!(
                "label out of range: true={t} pred={p} with {num_classes} classes"
            )));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Per-class and macro precision/recall/F1 from a confusion matrix.
pub fn prf1(confusion: &[Vec<usize>]) -> Result<(Vec<ClassMetrics>, f64, f64, f64)> {
    let c = confusion.len();
    if confusion.iter().any(|row| row.len() != c) {
        return Err(CoreError::dim("prf1", "square matrix", "ragged rows"));
    }
    let mut per_class = Vec::with_capacity(c);
    for cls in 0..c {
        let tp = confusion[cls][cls];
        let fp: usize = (0..c).filter(|&t| t != cls).map(|t| confusion[t][cls]).sum();
        let fneg: usize = (0..c).filter(|&p| p != cls).map(|p| confusion[cls][p]).sum();
        let mut zero_division = false;
        let precision = if tp + fp == 0 {
            zero_division = true;
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fneg == 0 {
            zero_division = true;
            0.0
        } else {
            tp as f64 / (tp + fneg) as f64
        };
        let f1 = if precision + recall == 0.0 {
            zero_division = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            zero_division,
        });
    }
    let n = c as f64;
    let macro_p = per_class.iter().map(|m| m.precision).sum::<f64>() / n;
    let macro_r = per_class.iter().map(|m| m.recall).sum::<f64>() / n;
    let macro_f = per_class.iter().map(|m| m.f1).sum::<f64>() / n;
    Ok((per_class, macro_p, macro_r, macro_f))
}

/// One-vs-rest ROC curve for `class`, sweeping thresholds over the
/// distinct scores (ties share a threshold). Runs from (0,0) to (1,1).
pub fn roc_curve(
    scores: &[Vec<f64>],
    true_labels: &[usize],
    class: usize,
) -> Result<Vec<RocPoint>> {
    if scores.len() != true_labels.len() {
        return Err(CoreError::dim("roc_curve", scores.len(), true_labels.len()));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(true_labels)
        .map(|(s, &t)| {
            s.get(class)
                .copied()
                .ok_or_else(|| CoreError::dim("roc_curve", class + 1, s.len()))
                .map(|v| (v, t == class))
        })
        .collect::<Result<_>>()?;
    let positives = pairs.iter().filter(|(_, pos)| *pos).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CoreError::Contract(format!(
            "class {class} needs at least one positive and one negative sample"
        )));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let threshold = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == threshold {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / negatives as f64,
            tpr: tp as f64 / positives as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under a ROC curve; the points must have
/// nondecreasing false-positive rates.
pub fn auc(points: &[RocPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(CoreError::Contract("AUC needs at least two ROC points".into()));
    }
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.fpr < a.fpr {
            return Err(CoreError::Contract(format!(
                "ROC points not sorted: fpr {} after {}",
                b.fpr, a.fpr
            )));
        }
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0;
    }
    Ok(area)
}

/// Assembles the full report from per-sample class scores.
///
/// Degenerate classes (no positives or no negatives) get an empty ROC
/// and no AUC instead of failing the whole report.
pub fn report(
    scores: &[Vec<f64>],
    true_labels: &[usize],
    class_names: &[String],
) -> Result<MetricsReport> {
    let c = class_names.len();
    let pred: Vec<usize> = scores.iter().map(|s| crate::model::argmax(s)).collect();
    let confusion = confusion_matrix(true_labels, &pred, c)?;
    let n: usize = true_labels.len();
    let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
    let accuracy = trace as f64 / n as f64;
    let (per_class, macro_precision, macro_recall, macro_f1) = prf1(&confusion)?;

    let mut roc = Vec::with_capacity(c);
    let mut auc_per_class = Vec::with_capacity(c);
    for cls in 0..c {
        let has_pos = true_labels.iter().any(|&t| t == cls);
        let has_neg = true_labels.iter().any(|&t| t != cls);
        if has_pos && has_neg {
            let curve = roc_curve(scores, true_labels, cls)?;
            auc_per_class.push(Some(auc(&curve)?));
            roc.push(curve);
        } else {
            roc.push(Vec::new());
            auc_per_class.push(None);
        }
    }
    let defined: Vec<f64> = auc_per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    Ok(MetricsReport {
        class_names: class_names.to_vec(),
        confusion,
        accuracy,
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        roc,
        auc: auc_per_class,
        macro_auc,
    })
}

impl MetricsReport {
    /// Serializes the report as pretty-printed JSON.
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::parse(None, e.to_string()))?;
        std::fs::write(path, json + "\n")?;
        Ok(())
    }

    /// Writes ROC points as `class,fpr,tpr` rows for external plotting.
    pub fn save_roc_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "class,fpr,tpr")?;
        for (cls, curve) in self.roc.iter().enumerate() {
            let name = &self.class_names[cls];
            for p in curve {
                writeln!(out, "{name},{},{}", p.fpr, p.tpr)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = vec![0, 1, 2, 1, 0];
        let m = confusion_matrix(&labels, &labels, 3).unwrap();
        assert_eq!(m, vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        let (per_class, p, r, f) = prf1(&m).unwrap();
        assert!(per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_predictor_fills_one_column() {
        let truth = vec![0, 1, 2, 2];
        let pred = vec![0, 0, 0, 0];
        let m = confusion_matrix(&truth, &pred, 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![1, 0, 0], vec![2, 0, 0]]);
        let (per_class, ..) = prf1(&m).unwrap();
        // Classes never predicted get precision 0 with the flag set.
        assert!(per_class[1].zero_division && per_class[2].zero_division);
        assert_eq!(per_class[1].precision, 0.0);
    }

    #[test]
    fn confusion_matrix_matches_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..200).map(|_| rng.random_range(0..4)).collect();
        let m = confusion_matrix(&truth, &pred, 4).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                let want = truth
                    .iter()
                    .zip(&pred)
                    .filter(|(&a, &b)| a == t && b == p)
                    .count();
                assert_eq!(m[t][p], want);
            }
        }
        let total: usize = m.iter().flatten().sum();
        assert_eq!(total, 200);
    }

    #[test]
    fn hand_worked_three_class_example() {
        // Confusion: rows true, cols predicted.
        let m = vec![vec![5, 2, 0], vec![1, 3, 1], vec![0, 2, 6]];
        let (per_class, macro_p, ..) = prf1(&m).unwrap();
        // Class 0: TP=5, FP=1, FN=2.
        assert!((per_class[0].precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((per_class[0].recall - 5.0 / 7.0).abs() < 1e-12);
        // Class 1: TP=3, FP=4, FN=2.
        assert!((per_class[1].precision - 3.0 / 7.0).abs() < 1e-12);
        assert!((per_class[1].recall - 3.0 / 5.0).abs() < 1e-12);
        // Class 2: TP=6, FP=1, FN=2.
        assert!((per_class[2].precision - 6.0 / 7.0).abs() < 1e-12);
        let want_macro = (5.0 / 6.0 + 3.0 / 7.0 + 6.0 / 7.0) / 3.0;
        assert!((macro_p - want_macro).abs() < 1e-12);
    }

    #[test]
    fn separated_scores_pass_through_top_left() {
        let scores = vec![vec![0.9], vec![0.8], vec![0.2], vec![0.1]];
        let labels = vec![0, 0, 1, 1];
        let curve = roc_curve(&scores, &labels, 0).unwrap();
        assert!(curve.contains(&RocPoint { fpr: 0.0, tpr: 1.0 }));
        assert_eq!(auc(&curve).unwrap(), 1.0);
    }

    #[test]
    fn identical_scores_give_diagonal() {
        let scores = vec![vec![0.5]; 6];
        let labels = vec![0, 1, 0, 1, 0, 1];
        let curve = roc_curve(&scores, &labels, 0).unwrap();
        assert_eq!(curve, vec![RocPoint { fpr: 0.0, tpr: 0.0 }, RocPoint { fpr: 1.0, tpr: 1.0 }]);
        assert_eq!(auc(&curve).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_class_is_rejected() {
        let scores = vec![vec![0.5], vec![0.4]];
        assert!(roc_curve(&scores, &[0, 0], 0).is_err());
    }

    #[test]
    fn auc_rejects_unsorted_points() {
        let points = vec![
            RocPoint { fpr: 0.0, tpr: 0.0 },
            RocPoint { fpr: 0.6, tpr: 0.5 },
            RocPoint { fpr: 0.4, tpr: 0.9 },
        ];
        assert!(auc(&points).is_err());
    }

    /// Brute-force pairwise AUC: P(s+ > s-) + P(s+ = s-) / 2.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (sp, &lp) in scores.iter().zip(labels) {
            if !lp {
                continue;
            }
            for (sn, &ln) in scores.iter().zip(labels) {
                if ln {
                    continue;
                }
                total += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn trapezoid_equals_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for round in 0..100 {
            let n = rng.random_range(4..60);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let class_scores: Vec<Vec<f64>> = scores.iter().map(|&s| vec![s]).collect();
            let int_labels: Vec<usize> = labels.iter().map(|&l| if l { 0 } else { 1 }).collect();
            let curve = roc_curve(&class_scores, &int_labels, 0).unwrap();
            let trap = auc(&curve).unwrap();
            let pair = pairwise_auc(&scores, &labels);
            assert!((trap - pair).abs() <= 1e-9, "round {round}: {trap} vs {pair}");
        }
    }

    #[test]
    fn report_accuracy_is_trace_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let scores: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let mut s: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let sum: f64 = s.iter().sum();
                s.iter_mut().for_each(|v| *v /= sum);
                s
            })
            .collect();
        let rep = report(&scores, &labels, &names).unwrap();
        let trace: usize = (0..3).map(|i| rep.confusion[i][i]).sum();
        assert_eq!(rep.accuracy, trace as f64 / 50.0);
        // Macro metrics equal the mean of per-class metrics.
        let mean_f1: f64 = rep.per_class.iter().map(|c| c.f1).sum::<f64>() / 3.0;
        assert!((rep.macro_f1 - mean_f1).abs() < 1e-12);
    }
}
