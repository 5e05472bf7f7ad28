//! Per-class accuracy and F1, support-weighted averages, and confusion
//! matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C × C` counts, rows gold and columns predicted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn from_pairs(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} predictions but {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let mut counts = vec![vec![0u64; classes]; classes];
        for (&p, &g) in preds.iter().zip(labels) {
            if p >= classes || g >= classes {
                return Err(Error::Argument(format!(
                    "class index {} out of range for {classes} classes",
                    p.max(g)
                )));
            }
            counts[g][p] += 1;
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn support(&self, j: usize) -> u64 {
        self.counts[j].iter().sum()
    }

    pub fn predicted(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|j| self.counts[j][j]).sum()
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("gold\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (j, row) in self.counts.iter().enumerate() {
            out.push_str(class_names.get(j).map_or("?", |s| s.as_str()));
            for c in row {
                out.push(',');
                out.push_str(&c.to_string());
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a rate had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub waa: f64,
    pub wf1: f64,
    pub confusion: Confusion,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn class_metrics(cm: &Confusion, j: usize) -> ClassMetrics {
    let tp = cm.counts[j][j];
    let support = cm.support(j);
    let (recall, r0) = ratio(tp, support);
    let (precision, p0) = ratio(tp, cm.predicted(j));
    let (f1, f0) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    ClassMetrics {
        accuracy: recall,
        precision,
        recall,
        f1,
        support,
        zero_division: r0 || p0 || f0,
    }
}

/// Fraction of class-`j` samples predicted as `j`; 0 for unsupported
/// classes.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let cm = Confusion::from_pairs(preds, labels, classes)?;
    Ok((0..classes).map(|j| class_metrics(&cm, j).accuracy).collect())
}

pub fn per_class_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let cm = Confusion::from_pairs(preds, labels, classes)?;
    Ok((0..classes).map(|j| class_metrics(&cm, j).f1).collect())
}

/// Support-weighted means of per-class accuracy and F1.
pub fn weighted_averages(per_class: &[ClassMetrics]) -> Result<(f64, f64)> {
    let total: u64 = per_class.iter().map(|c| c.support).sum();
    if total == 0 {
        return Err(Error::Argument("weighted average over zero support".into()));
    }
    let t = total as f64;
    let waa = per_class.iter().map(|c| c.support as f64 * c.accuracy).sum::<f64>() / t;
    let wf1 = per_class.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / t;
    Ok((waa, wf1))
}

impl MetricsReport {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let per_class: Vec<ClassMetrics> = (0..confusion.classes()).map(|j| class_metrics(&confusion, j)).collect();
        let (_, wf1) = weighted_averages(&per_class)?;
        // Equal to the support-weighted mean of recalls, without the
        // rounding of multiplying each back by its support.
        let waa = confusion.correct() as f64 / confusion.total() as f64;
        Ok(Self {
            per_class,
            waa,
            wf1,
            confusion,
        })
    }

    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(Confusion::from_pairs(preds, labels, classes)?)
    }
}
