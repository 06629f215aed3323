//! Confusion-matrix metrics: accuracy, Cohen's kappa, macro F1 and macro
//! Jaccard.
//!
//! Per-class scores whose denominator is zero count as 0 in the macro means.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `K×K` counts; rows are true classes, columns predictions.
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
        for (t, r) in rows.iter().enumerate() {
            if r.len() != classes {
                return Err(Error::Mismatch {
                    what: "confusion row length",
                    expected: classes,
                    found: r.len(),
                });
            }
            cm.counts[t * classes..(t + 1) * classes].copy_from_slice(r);
        }
        Ok(cm)
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Mismatch {
                what: "prediction count",
                expected: truth.len(),
                found: predicted.len(),
            });
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for y in [truth, predicted] {
            if y >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    fn nonempty_total(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::EmptyMatrix),
            n => Ok(n as f64),
        }
    }

    pub fn accuracy(&self) -> Result<f64> {
        Ok(self.trace() as f64 / self.nonempty_total()?)
    }

    /// `(p_o − p_e)/(1 − p_e)`; undefined when chance agreement is 1.
    pub fn cohens_kappa(&self) -> Result<f64> {
        let n = self.nonempty_total()?;
        let po = self.trace() as f64 / n;
        let pe = (0..self.classes)
            .map(|k| self.row_sum(k) as f64 * self.col_sum(k) as f64)
            .sum::<f64>()
            / (n * n);
        if pe >= 1.0 {
            return Err(Error::UndefinedKappa);
        }
        Ok((po - pe) / (1.0 - pe))
    }

    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k) as f64;
                let (col, row) = (self.col_sum(k), self.row_sum(k));
                if col == 0 || row == 0 || tp == 0.0 {
                    return 0.0;
                }
                let precision = tp / col as f64;
                let recall = tp / row as f64;
                2.0 * precision * recall / (precision + recall)
            })
            .collect()
    }

    pub fn per_class_jaccard(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.row_sum(k) + self.col_sum(k) - tp;
                if union == 0 {
                    0.0
                } else {
                    tp as f64 / union as f64
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> Result<f64> {
        self.nonempty_total()?;
        Ok(self.per_class_f1().iter().sum::<f64>() / self.classes as f64)
    }

    pub fn macro_jaccard(&self) -> Result<f64> {
        self.nonempty_total()?;
        Ok(self.per_class_jaccard().iter().sum::<f64>() / self.classes as f64)
    }

    /// Flat `key=value` report. An undefined kappa is written as `nan`.
    pub fn report(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "samples={}", self.total());
        let _ = writeln!(out, "classes={}", self.classes);
        let _ = writeln!(out, "accuracy={:.6}", self.accuracy()?);
        let kappa = self.cohens_kappa().unwrap_or(f64::NAN);
        let _ = writeln!(out, "kappa={kappa:.6}");
        let _ = writeln!(out, "macro_f1={:.6}", self.macro_f1()?);
        let _ = writeln!(out, "macro_jaccard={:.6}", self.macro_jaccard()?);
        for t in 0..self.classes {
            let row: Vec<String> = (0..self.classes).map(|p| self.get(t, p).to_string()).collect();
            let _ = writeln!(out, "confusion.{}={}", t + 1, row.join(","));
        }
        Ok(out)
    }
}

/// All four headline metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    pub macro_jaccard: f64,
}

impl MetricSummary {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: cm.accuracy()?,
            kappa: cm.cohens_kappa().unwrap_or(f64::NAN),
            macro_f1: cm.macro_f1()?,
            macro_jaccard: cm.macro_jaccard()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(cm(&[&[4, 0], &[0, 3]]).accuracy().unwrap(), 1.0);
        assert_eq!(cm(&[&[0, 5], &[0, 0]]).accuracy().unwrap(), 0.0);
        assert_eq!(cm(&[&[3, 1], &[2, 4]]).accuracy().unwrap(), 0.7);
        assert!(matches!(ConfusionMatrix::new(3).accuracy(), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cm(&[&[4, 0], &[0, 3]]).cohens_kappa().unwrap(), 1.0);
        assert_eq!(cm(&[&[1, 1], &[1, 1]]).cohens_kappa().unwrap(), 0.0);
        assert_abs_diff_eq!(cm(&[&[8, 0], &[2, 0]]).cohens_kappa().unwrap(), 0.0, epsilon = 1e-15);
        assert!(matches!(
            cm(&[&[5, 0], &[0, 0]]).cohens_kappa(),
            Err(Error::UndefinedKappa)
        ));
    }

    #[test]
    fn f1_and_jaccard_examples() {
        let perfect = cm(&[&[2, 0, 0], &[0, 1, 0], &[0, 0, 5]]);
        assert_eq!(perfect.macro_f1().unwrap(), 1.0);
        assert_eq!(perfect.macro_jaccard().unwrap(), 1.0);

        let m = cm(&[&[3, 1], &[2, 4]]);
        let f1 = m.per_class_f1();
        assert_abs_diff_eq!(f1[0], 0.666667, epsilon = 5e-7);
        assert_abs_diff_eq!(f1[1], 0.727273, epsilon = 5e-7);
        assert_abs_diff_eq!(m.macro_f1().unwrap(), 0.696970, epsilon = 5e-7);
        assert_abs_diff_eq!(m.macro_jaccard().unwrap(), (3.0 / 6.0 + 4.0 / 7.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.macro_jaccard().unwrap(), 0.535714, epsilon = 5e-7);
    }

    #[test]
    fn absent_class_lowers_macro_mean() {
        let m = cm(&[&[2, 0, 0], &[0, 3, 0], &[0, 0, 0]]);
        assert_abs_diff_eq!(m.macro_f1().unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.macro_jaccard().unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn report_is_flat_key_value() {
        let r = cm(&[&[3, 1], &[2, 4]]).report().unwrap();
        assert!(r.contains("accuracy=0.700000\n"));
        assert!(r.contains("macro_f1=0.696970\n"));
        assert!(r.contains("confusion.2=2,4\n"));
        assert!(r.lines().all(|l| l.contains('=')));
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_ranges(
            counts in prop::collection::vec(0u64..20, 16),
            perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let rows: Vec<Vec<u64>> = counts.chunks(4).map(|c| c.to_vec()).collect();
            let a = ConfusionMatrix::from_counts(&rows).unwrap();
            prop_assume!(a.total() > 0);
            let permuted: Vec<Vec<u64>> = (0..4)
                .map(|i| (0..4).map(|j| rows[perm[i]][perm[j]]).collect())
                .collect();
            let b = ConfusionMatrix::from_counts(&permuted).unwrap();
            prop_assert!((a.accuracy().unwrap() - b.accuracy().unwrap()).abs() < 1e-12);
            prop_assert!((a.macro_f1().unwrap() - b.macro_f1().unwrap()).abs() < 1e-12);
            prop_assert!((a.macro_jaccard().unwrap() - b.macro_jaccard().unwrap()).abs() < 1e-12);
            if let (Ok(ka), Ok(kb)) = (a.cohens_kappa(), b.cohens_kappa()) {
                prop_assert!((ka - kb).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ka));
            }
            for v in [a.accuracy().unwrap(), a.macro_f1().unwrap(), a.macro_jaccard().unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
