//! Binary classification metrics with COVID as the positive class.
//!
//! Rates that would be `0/0` are reported as `0.0` and flagged as degenerate
//! rather than becoming NaN, so every report stays machine-readable.

use serde::{Deserialize, Serialize};

use crate::label::Label;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("confusion matrix is empty")]
    Empty,
    #[error("{predicted} predictions for {truth} true labels")]
    LengthMismatch { predicted: usize, truth: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_Z: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted, truth) {
            (Label::Covid, Label::Covid) => self.tp += 1,
            (Label::Covid, Label::NonCovid) => self.fp += 1,
            (Label::NonCovid, Label::Covid) => self.fn_ += 1,
            (Label::NonCovid, Label::NonCovid) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// The same counts with NonCOVID treated as the positive class.
    pub fn swapped(&self) -> Self {
        Self::new(self.tn, self.fn_, self.fp, self.tp)
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self::new(self.tp * k, self.fp * k, self.fn_ * k, self.tn * k)
    }

    pub fn covid_support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn noncovid_support(&self) -> u64 {
        self.tn + self.fp
    }
}

pub fn confusion_matrix(predicted: &[Label], truth: &[Label]) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            truth: truth.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        cm.record(p, t);
    }
    Ok(cm)
}

/// A rate together with whether it came from a `0/0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub degenerate: bool,
}

impl Score {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Score {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Score {
                value: num / den,
                degenerate: false,
            }
        }
    }

    fn harmonic(p: Score, r: Score) -> Self {
        let s = Score::ratio(2.0 * p.value * r.value, p.value + r.value);
        Score {
            degenerate: s.degenerate || p.degenerate || r.degenerate,
            ..s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: Score,
    pub recall: Score,
    pub f1: Score,
}

fn positive_class_scores(cm: &ConfusionMatrix) -> ClassScores {
    let precision = Score::ratio(cm.tp as f64, (cm.tp + cm.fp) as f64);
    let recall = Score::ratio(cm.tp as f64, (cm.tp + cm.fn_) as f64);
    ClassScores {
        precision,
        recall,
        f1: Score::harmonic(precision, recall),
    }
}

/// Precision, recall and F1 for COVID and for NonCOVID (roles swapped).
pub fn per_class_prf(cm: &ConfusionMatrix) -> (ClassScores, ClassScores) {
    (positive_class_scores(cm), positive_class_scores(&cm.swapped()))
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    Ok((cm.tp + cm.tn) as f64 / cm.total() as f64)
}

/// Harmonic mean of the class-averaged precision and class-averaged recall.
pub fn macro_f1_eq2(cm: &ConfusionMatrix) -> Score {
    let (c, n) = per_class_prf(cm);
    let avg = |a: Score, b: Score| Score {
        value: (a.value + b.value) / 2.0,
        degenerate: a.degenerate || b.degenerate,
    };
    Score::harmonic(avg(c.precision, n.precision), avg(c.recall, n.recall))
}

/// Unweighted mean of the two per-class F1 scores.
pub fn macro_f1_classwise(cm: &ConfusionMatrix) -> Score {
    let (c, n) = per_class_prf(cm);
    Score {
        value: (c.f1.value + n.f1.value) / 2.0,
        degenerate: c.f1.degenerate || n.f1.degenerate,
    }
}

/// Each class's F1 multiplied by its share of the true labels; the two
/// contributions sum to the weighted F1.
pub fn weighted_f1_contributions(cm: &ConfusionMatrix) -> (Score, Score) {
    let (c, n) = per_class_prf(cm);
    let total = cm.total() as f64;
    if total == 0.0 {
        let zero = Score {
            value: 0.0,
            degenerate: true,
        };
        return (zero, zero);
    }
    let part = |s: &ClassScores, support: u64| Score {
        value: s.f1.value * support as f64 / total,
        degenerate: s.f1.degenerate || support == 0,
    };
    (part(&c, cm.covid_support()), part(&n, cm.noncovid_support()))
}

/// Support-weighted mean of the per-class F1 scores.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Score {
    let (c, n) = weighted_f1_contributions(cm);
    Score {
        value: c.value + n.value,
        degenerate: c.degenerate || n.degenerate,
    }
}

/// Normal-approximation half-width `z · √(p(1 − p) / n)`.
pub fn binomial_ci_radius(score: f64, n: u64, z: f64) -> Result<f64> {
    if n == 0 {
        return Err(MetricsError::Invalid("sample count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&score) {
        return Err(MetricsError::Invalid(format!("score {score} outside [0, 1]")));
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(MetricsError::Invalid(format!("z must be positive, got {z}")));
    }
    Ok(z * (score * (1.0 - score) / n as f64).sqrt())
}

/// Full evaluation summary, serialized as the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision_covid: f64,
    pub recall_covid: f64,
    pub f1_covid: f64,
    pub precision_noncovid: f64,
    pub recall_noncovid: f64,
    pub f1_noncovid: f64,
    pub macro_f1_eq2: f64,
    pub macro_f1_classwise: f64,
    pub weighted_f1: f64,
    pub weighted_f1_covid: f64,
    pub weighted_f1_noncovid: f64,
    /// Half-width of the interval around `macro_f1_eq2`.
    pub ci_radius: Option<f64>,
    pub n: Option<u64>,
    pub z: f64,
    /// Names of the fields above that came from a `0/0`.
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    /// Computes every metric for `cm`; when `ci_n` is given, also the
    /// interval radius with that many samples.
    pub fn compute(cm: &ConfusionMatrix, ci_n: Option<u64>, z: f64) -> Result<Self> {
        let acc = accuracy(cm)?;
        let (c, n) = per_class_prf(cm);
        let eq2 = macro_f1_eq2(cm);
        let classwise = macro_f1_classwise(cm);
        let (wc, wn) = weighted_f1_contributions(cm);
        let weighted = weighted_f1(cm);
        let ci_radius = ci_n.map(|n| binomial_ci_radius(eq2.value, n, z)).transpose()?;

        let mut degenerate = Vec::new();
        for (name, s) in [
            ("precision_covid", c.precision),
            ("recall_covid", c.recall),
            ("f1_covid", c.f1),
            ("precision_noncovid", n.precision),
            ("recall_noncovid", n.recall),
            ("f1_noncovid", n.f1),
            ("macro_f1_eq2", eq2),
            ("macro_f1_classwise", classwise),
            ("weighted_f1", weighted),
        ] {
            if s.degenerate {
                degenerate.push(name.to_string());
            }
        }
        Ok(Self {
            confusion: *cm,
            accuracy: acc,
            precision_covid: c.precision.value,
            recall_covid: c.recall.value,
            f1_covid: c.f1.value,
            precision_noncovid: n.precision.value,
            recall_noncovid: n.recall.value,
            f1_noncovid: n.f1.value,
            macro_f1_eq2: eq2.value,
            macro_f1_classwise: classwise.value,
            weighted_f1: weighted.value,
            weighted_f1_covid: wc.value,
            weighted_f1_noncovid: wn.value,
            ci_radius,
            n: ci_n,
            z,
            degenerate,
        })
    }
}
