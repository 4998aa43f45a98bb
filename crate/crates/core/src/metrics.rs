//! Ordinal-agreement metrics over a confusion matrix: accuracy and
//! quadratically weighted Cohen's kappa, plus report rendering.

use crate::error::{Error, Result};

/// K x K count matrix; `counts[t][p]` is the number of samples of true class
/// `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Param(format!(
                "confusion matrix needs at least 2 classes, got {num_classes}"
            )));
        }
        Ok(ConfusionMatrix { k: num_classes, counts: vec![0; num_classes * num_classes] })
    }

    /// Build from explicit rows (used heavily in tests).
    pub fn from_counts(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        let mut cm = ConfusionMatrix::new(k)?;
        for (t, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Param(format!(
                    "confusion matrix row {t} has {} entries, expected {k}",
                    row.len()
                )));
            }
            for (p, &n) in row.iter().enumerate() {
                cm.counts[t * k + p] = n;
            }
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, true_label: usize, pred_label: usize) -> u64 {
        self.counts[true_label * self.k + pred_label]
    }

    pub fn record(&mut self, true_label: usize, pred_label: usize) -> Result<()> {
        if true_label >= self.k || pred_label >= self.k {
            return Err(Error::Param(format!(
                "label pair ({true_label}, {pred_label}) out of range for {} classes",
                self.k
            )));
        }
        self.counts[true_label * self.k + pred_label] += 1;
        Ok(())
    }

    /// Elementwise sum, for combining evaluation shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::Param(format!(
                "cannot merge confusion matrices with {} and {} classes",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_total(&self, t: usize) -> u64 {
        (0..self.k).map(|p| self.count(t, p)).sum()
    }

    fn col_total(&self, p: usize) -> u64 {
        (0..self.k).map(|t| self.count(t, p)).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.num_classes()).map(|i| cm.count(i, i)).sum();
    Ok(trace as f64 / total as f64)
}

/// Cohen's kappa with quadratic weights `w(t,p) = (t-p)^2 / (K-1)^2`:
/// `1 - sum(w*O) / sum(w*E)` where `O` is the observed proportion matrix and
/// `E` the outer product of its margins.
///
/// When both raters put all mass on one class, `sum(w*E)` is zero; perfect
/// agreement on that class is reported as 1.0, anything else is undefined.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("kappa of an empty confusion matrix".into()));
    }
    let k = cm.num_classes();
    let total = total as f64;
    let denom_sq = ((k - 1) * (k - 1)) as f64;
    let mut weighted_observed = 0.0;
    let mut weighted_expected = 0.0;
    for t in 0..k {
        for p in 0..k {
            let diff = t as f64 - p as f64;
            let w = diff * diff / denom_sq;
            weighted_observed += w * cm.count(t, p) as f64 / total;
            weighted_expected += w * (cm.row_total(t) as f64 / total) * (cm.col_total(p) as f64 / total);
        }
    }
    if weighted_expected == 0.0 {
        if weighted_observed == 0.0 {
            return Ok(1.0);
        }
        return Err(Error::UndefinedMetric(
            "kappa with zero expected disagreement but nonzero observed disagreement".into(),
        ));
    }
    Ok(1.0 - weighted_observed / weighted_expected)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub acc: f64,
    pub kappa: f64,
    /// Recall per true class; `None` when the class has no samples.
    pub per_class_recall: Vec<Option<f64>>,
    pub total: u64,
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let acc = accuracy(cm)?;
    let kappa = quadratic_weighted_kappa(cm)?;
    let per_class_recall = (0..cm.num_classes())
        .map(|t| {
            let row = cm.row_total(t);
            (row > 0).then(|| cm.count(t, t) as f64 / row as f64)
        })
        .collect();
    Ok(MetricsReport { acc, kappa, per_class_recall, total: cm.total() })
}

impl MetricsReport {
    /// Plain-text table, metrics at 3 decimals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("  Acc    Kappa  n\n");
        out.push_str(&format!("  {:.3}  {:.3}  {}\n", self.acc, self.kappa, self.total));
        let recalls: Vec<String> = self
            .per_class_recall
            .iter()
            .map(|r| match r {
                Some(v) => format!("{v:.3}"),
                None => "-".to_string(),
            })
            .collect();
        out.push_str(&format!("  recall by class: {}\n", recalls.join(" ")));
        out
    }

    pub fn csv_header() -> &'static str {
        "config_name,acc,kappa,n"
    }

    pub fn csv_row(&self, config_name: &str) -> String {
        format!("{config_name},{},{},{}", self.acc, self.kappa, self.total)
    }
}
