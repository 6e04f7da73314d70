//! Confusion matrix and the OA / AA / kappa summary scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[t][p]`: samples of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        let mut cm = Self::new(classes);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::shape("ConfusionMatrix::from_counts", format!("{classes} classes"), format!("row {t} of length {}", row.len())));
            }
            cm.counts[t * classes..(t + 1) * classes].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    fn row_total(&self, t: usize) -> u64 {
        self.counts[t * self.classes..(t + 1) * self.classes].iter().sum()
    }

    fn col_total(&self, p: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, p)).sum()
    }

    /// Tallies `(truth, prediction)` pairs.
    pub fn accumulate(&mut self, y_true: &[usize], y_pred: &[usize]) -> Result<()> {
        if y_true.len() != y_pred.len() {
            return Err(Error::contract(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&c| c >= self.classes) {
            return Err(Error::contract(format!("class id {bad} outside {} classes", self.classes)));
        }
        for (&t, &p) in y_true.iter().zip(y_pred) {
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn from_pairs(classes: usize, y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        let mut cm = Self::new(classes);
        cm.accumulate(y_true, y_pred)?;
        Ok(cm)
    }

    /// Elementwise sum with another matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::shape("ConfusionMatrix::merge", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Recall of each true class, in percent. `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|t| {
                let n = self.row_total(t);
                (n > 0).then(|| 100.0 * self.get(t, t) as f64 / n as f64)
            })
            .collect()
    }
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("overall accuracy of an empty confusion matrix"));
    }
    Ok(100.0 * cm.trace() as f64 / total as f64)
}

pub fn average_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.classes == 0 {
        return Err(Error::contract("average accuracy over zero classes"));
    }
    let mut sum = 0.0;
    for (c, acc) in cm.per_class_accuracy().into_iter().enumerate() {
        sum += acc.ok_or_else(|| Error::contract(format!("class {c} has no true samples")))?;
    }
    Ok(sum / cm.classes as f64)
}

/// Cohen's kappa, `(p_o − p_e) / (1 − p_e)`.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("kappa of an empty confusion matrix"));
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let p_e: f64 = (0..cm.classes)
        .map(|c| cm.row_total(c) as f64 * cm.col_total(c) as f64)
        .sum::<f64>()
        / (n * n);
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::Numeric("kappa undefined: chance agreement is 1".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Summary scores plus per-class recall.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<Option<f64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

impl MetricsReport {
    /// AA and kappa are NaN when undefined for this matrix.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let oa = overall_accuracy(cm)?;
        let per_class = cm.per_class_accuracy();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let aa = if present.len() == per_class.len() {
            average_accuracy(cm)?
        } else {
            f64::NAN
        };
        Ok(Self {
            per_class,
            oa,
            aa,
            kappa: kappa(cm).unwrap_or(f64::NAN),
        })
    }

    /// `metric,value` rows: one per class (`class_<id>`, ids 1-based) then
    /// `oa`, `aa`, `kappa`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => writeln!(s, "class_{},{a:.4}", c + 1),
                None => writeln!(s, "class_{},", c + 1),
            }
            .expect("string write");
        }
        writeln!(s, "oa,{:.4}\naa,{:.4}\nkappa,{:.6}", self.oa, self.aa, self.kappa).expect("string write");
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("class  accuracy(%)\n");
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => writeln!(s, "{:>5}  {a:>10.2}", c + 1),
                None => writeln!(s, "{:>5}  {:>10}", c + 1, "n/a"),
            }
            .expect("string write");
        }
        writeln!(s, "OA     {:>10.2}\nAA     {:>10.2}\nkappa  {:>10.4}", self.oa, self.aa, self.kappa)
            .expect("string write");
        s
    }
}
