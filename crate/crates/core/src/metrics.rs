//! Example-based precision / recall / F2 and label-based precision /
//! recall for binary multi-label predictions.
//!
//! Empty denominators:
//! - nothing predicted, nothing true: precision = recall = F2 = 1;
//! - nothing predicted, something true: all three are 0;
//! - something predicted, nothing true: precision 0, recall 0, F2 0.
//!
//! Classes with no positive in the ground truth are left out of the
//! label-based means.

use crate::error::{dim_err, Error, Result};

pub const BETA: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_pair(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(dim_err!("prediction has {} labels, truth {}", pred.len(), truth.len()));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// `(1+β²)·p·r / (β²·p + r)`, zero when both are zero.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExampleScores {
    pub precision: f64,
    pub recall: f64,
    pub f2: f64,
}

impl ExampleScores {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let predicted = c.tp + c.fp;
        let actual = c.tp + c.fn_;
        if predicted == 0 && actual == 0 {
            return ExampleScores {
                precision: 1.0,
                recall: 1.0,
                f2: 1.0,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(c.tp, predicted);
        let recall = ratio(c.tp, actual);
        ExampleScores {
            precision,
            recall,
            f2: f_beta(precision, recall, BETA),
        }
    }
}

pub fn example_prf2(pred: &[bool], truth: &[bool]) -> Result<ExampleScores> {
    Ok(ExampleScores::from_counts(ConfusionCounts::from_pair(pred, truth)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanExampleScores {
    pub f2: f64,
    pub precision: f64,
    pub recall: f64,
}

fn check_batch<T: AsRef<[bool]>>(preds: &[T], truths: &[T]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Usage("metrics over an empty set".into()));
    }
    if preds.len() != truths.len() {
        return Err(dim_err!(
            "{} predictions for {} ground truths",
            preds.len(),
            truths.len()
        ));
    }
    Ok(())
}

pub fn mean_example_metrics<T: AsRef<[bool]>>(preds: &[T], truths: &[T]) -> Result<MeanExampleScores> {
    check_batch(preds, truths)?;
    let mut sum = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        let s = example_prf2(p.as_ref(), t.as_ref())?;
        sum.0 += s.f2;
        sum.1 += s.precision;
        sum.2 += s.recall;
    }
    let n = preds.len() as f64;
    Ok(MeanExampleScores {
        f2: sum.0 / n,
        precision: sum.1 / n,
        recall: sum.2 / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScores {
    pub counts: Vec<ConfusionCounts>,
    /// `(p_c, r_c)` per class; `None` for classes absent from the truth.
    pub per_class: Vec<Option<(f64, f64)>>,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

pub fn label_prf<T: AsRef<[bool]>>(preds: &[T], truths: &[T]) -> Result<LabelScores> {
    check_batch(preds, truths)?;
    let n = truths[0].as_ref().len();
    let mut counts = vec![ConfusionCounts::default(); n];
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != n || t.len() != n {
            return Err(dim_err!("inconsistent class count across examples"));
        }
        for c in 0..n {
            counts[c].add(ConfusionCounts::from_pair(&p[c..=c], &t[c..=c])?);
        }
    }
    let per_class: Vec<Option<(f64, f64)>> = counts
        .iter()
        .map(|c| {
            let actual = c.tp + c.fn_;
            if actual == 0 {
                return None;
            }
            let predicted = c.tp + c.fp;
            let p = if predicted == 0 {
                0.0
            } else {
                c.tp as f64 / predicted as f64
            };
            Some((p, c.tp as f64 / actual as f64))
        })
        .collect();
    let present: Vec<(f64, f64)> = per_class.iter().flatten().copied().collect();
    let (mean_precision, mean_recall) = if present.is_empty() {
        (0.0, 0.0)
    } else {
        let k = present.len() as f64;
        (
            present.iter().map(|s| s.0).sum::<f64>() / k,
            present.iter().map(|s| s.1).sum::<f64>() / k,
        )
    };
    Ok(LabelScores {
        counts,
        per_class,
        mean_precision,
        mean_recall,
    })
}

/// Thresholds probabilities: `P_l ≥ threshold` is a positive label.
pub fn binarize(probabilities: &[f64], threshold: f64) -> Vec<bool> {
    probabilities.iter().map(|&p| p >= threshold).collect()
}

/// Everything the `eval` report prints.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub example: MeanExampleScores,
    pub label: LabelScores,
}

impl Report {
    pub fn compute<T: AsRef<[bool]>>(preds: &[T], truths: &[T]) -> Result<Self> {
        Ok(Report {
            example: mean_example_metrics(preds, truths)?,
            label: label_prf(preds, truths)?,
        })
    }

    /// `mean_f2,pe,re,pc,rc`: F2 as a fraction, the rest in percent.
    pub fn summary_csv(&self) -> String {
        format!(
            "mean_f2,pe,re,pc,rc\n{:.4},{:.2},{:.2},{:.2},{:.2}\n",
            self.example.f2,
            100.0 * self.example.precision,
            100.0 * self.example.recall,
            100.0 * self.label.mean_precision,
            100.0 * self.label.mean_recall
        )
    }

    /// `class,precision,recall` in percent; `NA` for classes with no truth.
    pub fn per_class_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,precision,recall\n");
        for (name, s) in class_names.iter().zip(&self.label.per_class) {
            match s {
                Some((p, r)) => out.push_str(&format!("{name},{:.2},{:.2}\n", 100.0 * p, 100.0 * r)),
                None => out.push_str(&format!("{name},NA,NA\n")),
            }
        }
        out
    }
}
