//! Confusion matrix, support-weighted scores, one-vs-rest ROC curves and AUC.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {truth} true labels vs {pred} predictions")]
    Length { truth: usize, pred: usize },
    #[error("label {label} at position {index} outside [0, {classes})")]
    Label { index: usize, label: usize, classes: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("class {class}: AUC undefined without both positive and negative samples")]
    SingleClass { class: usize },
    #[error("score matrix has {rows} rows of width {cols}, expected {expected_rows} rows of width {expected_cols}")]
    Scores {
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::Length {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (index, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        for label in [t, p] {
            if label >= classes {
                return Err(MetricsError::Label { index, label, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        Self { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedScores {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub per_class: Vec<ClassScores>,
    /// Set when some precision or recall was undefined and reported as 0.
    pub zero_division: bool,
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1, aggregated by class support.
pub fn weighted_scores(cm: &ConfusionMatrix) -> Result<WeightedScores, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let mut zero_division = false;
    let mut per_class = Vec::with_capacity(cm.classes());
    let (mut p_w, mut r_w, mut f_w) = (0.0, 0.0, 0.0);
    for k in 0..cm.classes() {
        let tp = cm.counts[k][k];
        let support = cm.support(k);
        let precision = ratio(tp, cm.predicted(k), &mut zero_division);
        let recall = ratio(tp, support, &mut zero_division);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let w = support as f64;
        p_w += w * precision;
        r_w += w * recall;
        f_w += w * f1;
        per_class.push(ClassScores {
            class: k,
            precision,
            recall,
            f1,
            support,
        });
    }
    let n = total as f64;
    Ok(WeightedScores {
        accuracy: cm.trace() as f64 / n,
        precision_weighted: p_w / n,
        recall_weighted: r_w / n,
        f1_weighted: f_w / n,
        per_class,
        zero_division,
    })
}

/// One operating point of a ROC curve. `threshold` is `+inf` for the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// One-vs-rest ROC for `class`: predict positive when `score >= threshold`, for every distinct
/// score in descending order, starting from the origin.
pub fn roc_curve(scores: &[Vec<f64>], y_true: &[usize], class: usize) -> Result<Vec<RocPoint>, MetricsError> {
    if scores.len() != y_true.len() {
        return Err(MetricsError::Length {
            truth: y_true.len(),
            pred: scores.len(),
        });
    }
    let width = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != width) || class >= width {
        return Err(MetricsError::Scores {
            rows: scores.len(),
            cols: width,
            expected_rows: y_true.len(),
            expected_cols: class + 1,
        });
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().zip(y_true).map(|(r, &t)| (r[class], t == class)).collect();
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass { class });
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(curve)
}

/// Trapezoidal area under a ROC curve.
pub fn auc(curve: &[RocPoint]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub roc: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    pub f1_weighted: f64,
    pub macro_auc: Option<f64>,
    pub zero_division: bool,
    pub per_class: Vec<ClassReport>,
    pub confusion: Vec<Vec<u64>>,
    #[serde(skip)]
    pub roc_thresholds: Vec<Vec<RocPoint>>,
}

/// Full evaluation from per-class probabilities; predictions are row argmaxes (first wins on ties).
pub fn evaluate(scores: &[Vec<f64>], y_true: &[usize], classes: usize) -> Result<MetricsReport, MetricsError> {
    if scores.iter().any(|r| r.len() != classes) {
        return Err(MetricsError::Scores {
            rows: scores.len(),
            cols: scores.iter().map(Vec::len).find(|&l| l != classes).unwrap_or(classes),
            expected_rows: y_true.len(),
            expected_cols: classes,
        });
    }
    let y_pred: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    let cm = confusion(y_true, &y_pred, classes)?;
    let w = weighted_scores(&cm)?;
    let mut per_class = Vec::with_capacity(classes);
    let mut roc_thresholds = Vec::with_capacity(classes);
    let mut aucs = Vec::new();
    for cs in &w.per_class {
        let (auc_v, curve) = match roc_curve(scores, y_true, cs.class) {
            Ok(c) => (Some(auc(&c)), c),
            Err(MetricsError::SingleClass { .. }) => (None, Vec::new()),
            Err(e) => return Err(e),
        };
        aucs.extend(auc_v);
        per_class.push(ClassReport {
            class: cs.class,
            precision: cs.precision,
            recall: cs.recall,
            f1: cs.f1,
            auc: auc_v,
            roc: curve.iter().map(|p| [p.fpr, p.tpr]).collect(),
        });
        roc_thresholds.push(curve);
    }
    let macro_auc = (aucs.len() == classes && classes > 0).then(|| aucs.iter().sum::<f64>() / classes as f64);
    Ok(MetricsReport {
        accuracy: w.accuracy,
        precision_weighted: w.precision_weighted,
        recall_weighted: w.recall_weighted,
        f1_weighted: w.f1_weighted,
        macro_auc,
        zero_division: w.zero_division,
        per_class,
        confusion: cm.counts,
        roc_thresholds,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl MetricsReport {
    /// ROC points as CSV with header `class,threshold,fpr,tpr`.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("class,threshold,fpr,tpr\n");
        for (class, curve) in self.roc_thresholds.iter().enumerate() {
            for p in curve {
                let t = if p.threshold.is_infinite() {
                    "inf".to_string()
                } else {
                    format!("{}", p.threshold)
                };
                out.push_str(&format!("{class},{t},{},{}\n", p.fpr, p.tpr));
            }
        }
        out
    }
}
