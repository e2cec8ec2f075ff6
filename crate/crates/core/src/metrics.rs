//! Confusion matrix, average per-class accuracy, one-vs-rest macro-F1,
//! ROC curves and AUC.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// `K×K` counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput(
                "confusion matrix must be square and nonempty".into(),
            ));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::InvalidInput(format!(
                    "class id out of range: true {t}, predicted {p}"
                )));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    /// Overall fraction of correct predictions.
    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        diag as f64 / self.total() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["true".to_string()];
        header.extend((0..self.classes).map(|k| format!("pred_{k}")));
        w.write_record(&header)?;
        for (k, row) in self.rows().iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("confusion matrix", e))?;
        Ok(())
    }
}

/// Average classification accuracy: mean over classes of `cm[k,k] / row_k`.
pub fn aca(cm: &ConfusionMatrix) -> Result<f64> {
    let mut acc = 0.0;
    for k in 0..cm.classes() {
        let row = cm.row_sum(k);
        if row == 0 {
            return Err(Error::InvalidInput(format!(
                "class {k} has no samples; its accuracy is undefined"
            )));
        }
        acc += cm.get(k, k) as f64 / row as f64;
    }
    Ok(acc / cm.classes() as f64)
}

/// One-vs-rest F1 of each class; zero where precision + recall is zero.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let (col, row) = (cm.col_sum(k) as f64, cm.row_sum(k) as f64);
            let p = if col > 0.0 { tp / col } else { 0.0 };
            let r = if row > 0.0 { tp / row } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let f1 = per_class_f1(cm);
    f1.iter().sum::<f64>() / f1.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `+inf` for the origin.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub class: usize,
    pub points: Vec<RocPoint>,
}

/// ROC curve of binary scores, one point per distinct threshold (descending),
/// and its trapezoid AUC.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<(RocCurve, f64)> {
    if scores.len() != positive.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {s}")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "ROC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // trapezoid in count units, normalised once at the end
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }
    let auc = area / (n_pos as f64 * n_neg as f64);
    Ok((RocCurve { class: 0, points }, auc))
}

/// Macro one-vs-rest AUC with the per-class detail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MulticlassAuc {
    pub auc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes left out because they were absent from (or the only class in) the labels.
    pub skipped: Vec<usize>,
    #[serde(skip)]
    pub curves: Vec<RocCurve>,
}

/// `probabilities` is row-major `N×K`, rows summing to one.
pub fn multiclass_auc(probabilities: &[f64], classes: usize, labels: &[usize]) -> Result<MulticlassAuc> {
    let n = labels.len();
    if probabilities.len() != n * classes {
        return Err(Error::InvalidInput(format!(
            "{} probabilities for {} samples of {} classes",
            probabilities.len(),
            n,
            classes
        )));
    }
    for (i, row) in probabilities.chunks(classes).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidInput(format!("probability row {i} sums to {s}")));
        }
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    let mut curves = Vec::new();
    for k in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        let present = positive.iter().filter(|&&p| p).count();
        if present == 0 || present == n {
            log::warn!("class {k} skipped in multiclass AUC: one-vs-rest split is single-class");
            skipped.push(k);
            per_class.push(None);
            continue;
        }
        let scores: Vec<f64> = probabilities.iter().skip(k).step_by(classes).copied().collect();
        let (mut curve, auc) = roc_auc(&scores, &positive)?;
        curve.class = k;
        curves.push(curve);
        per_class.push(Some(auc));
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::InvalidInput("no class has both positives and negatives".into()));
    }
    Ok(MulticlassAuc {
        auc: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
        skipped,
        curves,
    })
}

/// Writes `class,threshold,fpr,tpr` rows for every curve.
pub fn write_roc_csv<W: Write>(curves: &[RocCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class", "threshold", "fpr", "tpr"])?;
    for c in curves {
        for p in &c.points {
            w.write_record([
                c.class.to_string(),
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("roc", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_and_uniform_matrices() {
        let mut id = vec![vec![0u64; 5]; 5];
        for (k, row) in id.iter_mut().enumerate() {
            row[k] = 7;
        }
        let id = ConfusionMatrix::from_rows(&id).unwrap();
        assert_eq!(aca(&id).unwrap(), 1.0);
        assert_eq!(macro_f1(&id), 1.0);

        let uni = ConfusionMatrix::from_rows(&vec![vec![3u64; 5]; 5]).unwrap();
        assert!((aca(&uni).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_class_hand_values() {
        let m = cm(&[&[8, 2], &[4, 6]]);
        assert!((aca(&m).unwrap() - 0.7).abs() < 1e-12);
        let f1 = per_class_f1(&m);
        assert!((f1[0] - 0.727_272_727_272_727_3).abs() < 1e-12);
        assert!((f1[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((macro_f1(&m) - 0.696_969_696_969_697).abs() < 1e-12);
    }

    #[test]
    fn never_predicted_class_scores_zero_f1() {
        let m = cm(&[&[5, 0], &[3, 0]]);
        assert_eq!(per_class_f1(&m)[1], 0.0);
    }

    #[test]
    fn empty_row_makes_aca_undefined() {
        assert!(aca(&cm(&[&[5, 0], &[0, 0]])).is_err());
    }

    #[test]
    fn auc_examples() {
        let (_, a) = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_eq!(a, 1.0);
        let (_, a) = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(a, 0.5);
        let (curve, a) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(a, 0.75);
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn multiclass_auc_extremes() {
        let labels = [0, 1, 2, 1, 0, 2];
        let onehot: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..3).map(move |k| if k == y { 1.0 } else { 0.0 }))
            .collect();
        assert_eq!(multiclass_auc(&onehot, 3, &labels).unwrap().auc, 1.0);
        let uniform = vec![1.0 / 3.0; 18];
        let m = multiclass_auc(&uniform, 3, &labels).unwrap();
        assert!(m.per_class.iter().all(|a| *a == Some(0.5)));
    }

    #[test]
    fn absent_class_is_skipped_and_recorded() {
        let labels = [0, 1, 0, 1];
        let probs = vec![0.6, 0.3, 0.1, 0.2, 0.7, 0.1, 0.5, 0.4, 0.1, 0.1, 0.8, 0.1];
        let m = multiclass_auc(&probs, 3, &labels).unwrap();
        assert_eq!(m.skipped, vec![2]);
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.auc, 1.0);
    }
}
