//! Confusion matrices and per-class classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_pairs(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    /// Builds from a row-major `k x k` count table.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::dim(format!(
                "{} counts for {k} classes",
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.k || predicted >= self.k {
            return Err(Error::config(format!(
                "label pair ({truth}, {predicted}) outside {} classes",
                self.k
            )));
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// `(tp, fn, fp, tn)` of one class against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
        let col: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
        let (fn_, fp) = (row - tp, col - tp);
        (tp, fn_, fp, self.total() - tp - fn_ - fp)
    }
}

/// Which harmonic mean the per-class F1 uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Variant {
    /// Precision and sensitivity.
    #[default]
    PrecisionRecall,
    /// Sensitivity and specificity.
    SensSpec,
}

/// A ratio that may have a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    /// Set when the denominator was zero and `value` was forced to 0.
    pub undefined: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Ratio {
        if den == 0.0 {
            Ratio {
                value: 0.0,
                undefined: true,
            }
        } else {
            Ratio {
                value: num / den,
                undefined: false,
            }
        }
    }

    fn harmonic(a: Ratio, b: Ratio) -> Ratio {
        let r = Ratio::of(2.0 * a.value * b.value, a.value + b.value);
        Ratio {
            undefined: r.undefined || a.undefined || b.undefined,
            ..r
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    pub sensitivity: Ratio,
    pub specificity: Ratio,
    pub precision: Ratio,
    /// Harmonic mean of precision and sensitivity.
    pub f1_pr: Ratio,
    /// Harmonic mean of sensitivity and specificity.
    pub f1_hm: Ratio,
}

impl ClassMetrics {
    pub fn f1(&self, variant: F1Variant) -> f64 {
        match variant {
            F1Variant::PrecisionRecall => self.f1_pr.value,
            F1Variant::SensSpec => self.f1_hm.value,
        }
    }
}

pub fn per_class(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.num_classes())
        .map(|c| {
            let (tp, fn_, fp, tn) = cm.one_vs_rest(c);
            let (tpf, fnf, fpf, tnf) = (tp as f64, fn_ as f64, fp as f64, tn as f64);
            let sensitivity = Ratio::of(tpf, tpf + fnf);
            let specificity = Ratio::of(tnf, tnf + fpf);
            let precision = Ratio::of(tpf, tpf + fpf);
            ClassMetrics {
                class: c,
                tp,
                fn_,
                fp,
                tn,
                sensitivity,
                specificity,
                precision,
                f1_pr: Ratio::harmonic(precision, sensitivity),
                f1_hm: Ratio::harmonic(sensitivity, specificity),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    /// Unweighted mean of the per-class F1.
    pub macro_f1: f64,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub f1_variant: F1Variant,
}

pub fn overall(cm: &ConfusionMatrix, variant: F1Variant) -> Result<Overall> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::config("no instances to score"));
    }
    let classes = per_class(cm);
    let macro_f1 = classes.iter().map(|m| m.f1(variant)).sum::<f64>() / classes.len() as f64;
    Ok(Overall {
        macro_f1,
        accuracy: cm.correct() as f64 / total as f64,
        correct: cm.correct(),
        total,
        f1_variant: variant,
    })
}

/// Rounds half away from zero to three decimals.
pub fn round3(x: f64) -> f64 {
    // The nudge keeps decimal ties such as 0.8125 -> 0.813 despite binary error.
    let scaled = x * 1000.0;
    (scaled + 0.5 * scaled.signum() + 1e-9 * scaled.signum()).trunc() / 1000.0
}

pub fn fmt3(x: f64) -> String {
    format!("{:.3}", round3(x))
}

/// Full evaluation report, serializable to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub overall: Overall,
}

impl Report {
    pub fn new(cm: ConfusionMatrix, class_names: &[String], variant: F1Variant) -> Result<Report> {
        if class_names.len() != cm.num_classes() {
            return Err(Error::config(format!(
                "{} class names for {} classes",
                class_names.len(),
                cm.num_classes()
            )));
        }
        Ok(Report {
            class_names: class_names.to_vec(),
            per_class: per_class(&cm),
            overall: overall(&cm, variant)?,
            confusion: cm,
        })
    }

    /// Aligned text table; undefined ratios are marked with `*`.
    pub fn table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(7);
        let cell = |r: &Ratio| format!("{}{}", fmt3(r.value), if r.undefined { "*" } else { " " });
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            "class", "sens", "spec", "prec", "f1", "f1_hm"
        );
        for (name, m) in self.class_names.iter().zip(&self.per_class) {
            let f1 = match self.overall.f1_variant {
                F1Variant::PrecisionRecall => &m.f1_pr,
                F1Variant::SensSpec => &m.f1_hm,
            };
            let _ = writeln!(
                s,
                "{name:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
                cell(&m.sensitivity),
                cell(&m.specificity),
                cell(&m.precision),
                cell(f1),
                cell(&m.f1_hm)
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  macro F1 {}  accuracy {} ({}/{})",
            "overall",
            fmt3(self.overall.macro_f1),
            fmt3(self.overall.accuracy),
            self.overall.correct,
            self.overall.total
        );
        let undefined = self.per_class.iter().any(|m| {
            [
                &m.sensitivity,
                &m.specificity,
                &m.precision,
                &m.f1_pr,
                &m.f1_hm,
            ]
            .iter()
            .any(|r| r.undefined)
        });
        if undefined {
            let _ = writeln!(s, "* undefined ratio (zero denominator), reported as 0");
        }
        s.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }
}
