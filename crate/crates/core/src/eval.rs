//! Evaluation metrics: confusion matrix, per-class sensitivity, specificity
//! and F1, overall accuracy, and the challenge score (mean of the F1 scores
//! for normal rhythm, atrial fibrillation, and other rhythm; noise is
//! excluded).
//!
//! Degenerate counts (zero support, zero predicted positives) yield
//! explicit `None` metrics rather than NaN. Only the challenge-score
//! aggregation substitutes zero for an undefined F1, with a logged warning.

use serde::Serialize;
use thiserror::Error;

use crate::record_io::RhythmClass;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction and truth lists differ in length ({pred} vs {truth})")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("score input out of [0, 1]: {0}")]
    OutOfRange(f64),
}

/// 4 x 4 counts; rows are the true class, columns the predicted class, in
/// the order N, A, O, ~.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
}

impl ConfusionMatrix {
    pub fn add(&mut self, truth: RhythmClass, pred: RhythmClass) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, class: RhythmClass) -> u64 {
        self.counts[class.index()].iter().sum()
    }

    pub fn col_sum(&self, class: RhythmClass) -> u64 {
        self.counts.iter().map(|row| row[class.index()]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..4).map(|k| self.counts[k][k]).sum()
    }
}

/// Tallies paired (truth, prediction) lists.
pub fn confusion(
    pred: &[RhythmClass],
    truth: &[RhythmClass],
) -> Result<ConfusionMatrix, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch { pred: pred.len(), truth: truth.len() });
    }
    if pred.is_empty() {
        return Err(EvalError::EmptyMatrix);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        cm.add(t, p);
    }
    Ok(cm)
}

/// One-vs-rest metrics for a single class; `None` marks 0/0 cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub support: u64,
}

/// Per-class metrics plus overall accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_class: [ClassMetrics; 4],
    pub accuracy: f64,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 { None } else { Some(num as f64 / den as f64) }
}

/// Sensitivity `TP/(TP+FN)`, specificity `TN/(TN+FP)`, and
/// `F1 = 2TP/(2TP+FP+FN)` per class, plus `accuracy = trace/total`.
pub fn class_metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let mut per_class = [ClassMetrics {
        sensitivity: None,
        specificity: None,
        f1: None,
        support: 0,
    }; 4];
    for class in RhythmClass::ALL {
        let k = class.index();
        let tp = cm.counts[k][k];
        let row = cm.row_sum(class);
        let col = cm.col_sum(class);
        let fn_ = row - tp;
        let fp = col - tp;
        let tn = total - row - fp;
        per_class[k] = ClassMetrics {
            sensitivity: ratio(tp, tp + fn_),
            specificity: ratio(tn, tn + fp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            support: row,
        };
    }
    Ok(Metrics {
        per_class,
        accuracy: cm.trace() as f64 / total as f64,
        total,
    })
}

/// The challenge score: the mean of the normal-rhythm, atrial-fibrillation,
/// and other-rhythm F1 scores.
pub fn cinc_score(f1n: f64, f1a: f64, f1o: f64) -> Result<f64, EvalError> {
    for v in [f1n, f1a, f1o] {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(EvalError::OutOfRange(v));
        }
    }
    Ok((f1n + f1a + f1o) / 3.0)
}

/// Challenge score straight from computed metrics; an undefined F1 counts
/// as zero and is warned about.
pub fn cinc_score_from_metrics(metrics: &Metrics) -> Result<f64, EvalError> {
    let mut f1 = [0.0f64; 3];
    for (i, class) in [
        RhythmClass::NormalRhythm,
        RhythmClass::AtrialFibrillation,
        RhythmClass::OtherRhythm,
    ]
    .into_iter()
    .enumerate()
    {
        match metrics.per_class[class.index()].f1 {
            Some(v) => f1[i] = v,
            None => {
                log::warn!(
                    "F1 for {} is undefined (no support or predictions); scoring it as 0",
                    class.name()
                );
            }
        }
    }
    cinc_score(f1[0], f1[1], f1[2])
}

#[derive(Serialize)]
struct ClassReport {
    class: String,
    token: char,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
    f1: Option<f64>,
    support: u64,
}

#[derive(Serialize)]
struct MetricsReport {
    confusion: [[u64; 4]; 4],
    classes: Vec<ClassReport>,
    accuracy: f64,
    total: u64,
    cinc_score: f64,
}

/// JSON metrics report: confusion matrix, per-class metrics, accuracy, and
/// the challenge score.
pub fn metrics_json(cm: &ConfusionMatrix, metrics: &Metrics, score: f64) -> String {
    let report = MetricsReport {
        confusion: cm.counts,
        classes: RhythmClass::ALL
            .iter()
            .map(|&c| {
                let m = metrics.per_class[c.index()];
                ClassReport {
                    class: c.name().to_string(),
                    token: c.token(),
                    sensitivity: m.sensitivity,
                    specificity: m.specificity,
                    f1: m.f1,
                    support: m.support,
                }
            })
            .collect(),
        accuracy: metrics.accuracy,
        total: metrics.total,
        cinc_score: score,
    };
    serde_json::to_string_pretty(&report).expect("report serializes")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "undefined".to_string(),
    }
}

/// Human-readable table of per-class sensitivity/specificity/F1.
pub fn metrics_table(metrics: &Metrics, score: f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<22}{:<14}{}\n", "Class", "Metric", "Value"));
    for class in RhythmClass::ALL {
        let m = metrics.per_class[class.index()];
        out.push_str(&format!(
            "{:<22}{:<14}{}\n",
            class.name(),
            "Sensitivity",
            fmt_opt(m.sensitivity)
        ));
        out.push_str(&format!("{:<22}{:<14}{}\n", "", "Specificity", fmt_opt(m.specificity)));
        out.push_str(&format!("{:<22}{:<14}{}\n", "", "F1 score", fmt_opt(m.f1)));
    }
    out.push_str(&format!("\nAccuracy: {:.4} ({} records)\n", metrics.accuracy, metrics.total));
    out.push_str(&format!("Challenge score (mean F1 of N/A/O): {score:.4}\n"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use RhythmClass::*;

    #[test]
    fn confusion_perfect_predictions() {
        let classes = [NormalRhythm, AtrialFibrillation, OtherRhythm, Noise];
        let cm = confusion(&classes, &classes).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(cm.counts[i][j], u64::from(i == j));
            }
        }
    }

    #[test]
    fn confusion_all_predicted_normal() {
        let truth = [NormalRhythm, AtrialFibrillation];
        let pred = [NormalRhythm, NormalRhythm];
        let cm = confusion(&pred, &truth).unwrap();
        assert_eq!(cm.counts[0], [1, 0, 0, 0]);
        assert_eq!(cm.counts[1], [1, 0, 0, 0]);
    }

    #[test]
    fn confusion_matches_tally_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 1000;
        let pred: Vec<RhythmClass> =
            (0..n).map(|_| RhythmClass::from_index(rng.random_range(0..4)).unwrap()).collect();
        let truth: Vec<RhythmClass> =
            (0..n).map(|_| RhythmClass::from_index(rng.random_range(0..4)).unwrap()).collect();
        let cm = confusion(&pred, &truth).unwrap();

        // Independent counting loop.
        let mut tally = [[0u64; 4]; 4];
        for k in 0..n {
            tally[truth[k].index()][pred[k].index()] += 1;
        }
        assert_eq!(cm.counts, tally);
        assert_eq!(cm.total(), n as u64);
    }

    #[test]
    fn confusion_rejects_bad_input() {
        assert_eq!(
            confusion(&[NormalRhythm], &[]),
            Err(EvalError::LengthMismatch { pred: 1, truth: 0 })
        );
        assert_eq!(confusion(&[], &[]), Err(EvalError::EmptyMatrix));
    }

    #[test]
    fn class_metrics_diagonal_matrix() {
        let mut cm = ConfusionMatrix::default();
        for class in RhythmClass::ALL {
            for _ in 0..3 {
                cm.add(class, class);
            }
        }
        let m = class_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for k in 0..4 {
            assert_eq!(m.per_class[k].sensitivity, Some(1.0));
            assert_eq!(m.per_class[k].specificity, Some(1.0));
            assert_eq!(m.per_class[k].f1, Some(1.0));
        }
    }

    #[test]
    fn class_metrics_hand_arithmetic() {
        // Class A: TP = 8, FN = 2, FP = 1, TN = 89 (total 100).
        let mut cm = ConfusionMatrix::default();
        cm.counts[1][1] = 8;
        cm.counts[1][0] = 2; // truth A predicted N
        cm.counts[0][1] = 1; // truth N predicted A
        cm.counts[0][0] = 89;
        let m = class_metrics(&cm).unwrap();
        let a = m.per_class[1];
        assert!((a.sensitivity.unwrap() - 0.8).abs() < 1e-12);
        assert!((a.specificity.unwrap() - 0.9889).abs() < 1e-4);
        assert!((a.f1.unwrap() - 0.8421).abs() < 1e-4);
    }

    #[test]
    fn class_metrics_zero_support() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 5;
        cm.counts[2][2] = 3;
        let m = class_metrics(&cm).unwrap();
        let a = m.per_class[1];
        assert_eq!(a.sensitivity, None);
        assert_eq!(a.specificity, Some(1.0));
        assert_eq!(a.f1, None);
        assert_eq!(a.support, 0);
    }

    #[test]
    fn class_metrics_row_column_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cm = ConfusionMatrix::default();
        for i in 0..4 {
            for j in 0..4 {
                cm.counts[i][j] = rng.random_range(0..50);
            }
        }
        let total = cm.total();
        for class in RhythmClass::ALL {
            let k = class.index();
            let tp = cm.counts[k][k];
            let fn_ = cm.row_sum(class) - tp;
            let fp = cm.col_sum(class) - tp;
            let tn = total - cm.row_sum(class) - fp;
            assert_eq!(tp + fn_, cm.row_sum(class));
            assert_eq!(tn + fp, total - cm.row_sum(class));
        }
    }

    #[test]
    fn accuracy_equals_mean_correctness() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 500;
        let pred: Vec<RhythmClass> =
            (0..n).map(|_| RhythmClass::from_index(rng.random_range(0..4)).unwrap()).collect();
        let truth: Vec<RhythmClass> =
            (0..n).map(|_| RhythmClass::from_index(rng.random_range(0..4)).unwrap()).collect();
        let cm = confusion(&pred, &truth).unwrap();
        let m = class_metrics(&cm).unwrap();
        let mean_correct =
            pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / n as f64;
        assert!((m.accuracy - mean_correct).abs() < 1e-15);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 200;
        let mut pairs: Vec<(RhythmClass, RhythmClass)> = (0..n)
            .map(|_| {
                (
                    RhythmClass::from_index(rng.random_range(0..4)).unwrap(),
                    RhythmClass::from_index(rng.random_range(0..4)).unwrap(),
                )
            })
            .collect();
        let pred: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let m1 = class_metrics(&confusion(&pred, &truth).unwrap()).unwrap();
        pairs.reverse();
        pairs.swap(3, 100);
        let pred: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<_> = pairs.iter().map(|p| p.1).collect();
        let m2 = class_metrics(&confusion(&pred, &truth).unwrap()).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn cinc_score_published_values() {
        // Test column of the published metrics table.
        let s = cinc_score(0.9243, 0.8143, 0.8099).unwrap();
        assert!((s - 0.8495).abs() < 5e-5, "{s}");
        // Training column.
        let s = cinc_score(0.9509, 0.9232, 0.8728).unwrap();
        assert!((s - 0.9156).abs() < 5e-5, "{s}");
        assert_eq!(cinc_score(1.0, 1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn cinc_score_is_symmetric_and_validated() {
        let a = cinc_score(0.3, 0.5, 0.9).unwrap();
        let b = cinc_score(0.9, 0.3, 0.5).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(matches!(cinc_score(1.2, 0.5, 0.5), Err(EvalError::OutOfRange(_))));
        assert!(matches!(cinc_score(-0.1, 0.5, 0.5), Err(EvalError::OutOfRange(_))));
    }

    #[test]
    fn cinc_score_from_metrics_scores_undefined_as_zero() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 10; // only normal rhythm present and predicted
        let m = class_metrics(&cm).unwrap();
        let s = cinc_score_from_metrics(&m).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_rendering() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 2;
        cm.counts[1][1] = 1;
        let m = class_metrics(&cm).unwrap();
        let s = cinc_score_from_metrics(&m).unwrap();
        let json = metrics_json(&cm, &m, s);
        assert!(json.contains("\"accuracy\": 1.0"));
        assert!(json.contains("\"cinc_score\""));
        let table = metrics_table(&m, s);
        assert!(table.contains("Normal rhythm"));
        assert!(table.contains("undefined"));
    }
}
