//! Patient-level diagnosis from slice predictions by threshold voting.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::metrics::{ConfusionMatrix, MetricsError, MetricsReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregationError {
    #[error("no slice predictions")]
    Empty,
    #[error("predictions mix patients `{expected}` and `{found}`")]
    MixedPatients { expected: String, found: String },
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("{0}")]
    InvalidPrediction(String),
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("no labeled patients to evaluate")]
    NoLabeledPatients,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, AggregationError>;

/// One row of the prediction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub patient_id: String,
    pub slice_id: String,
    pub p_covid: f64,
    pub predicted_label: Label,
}

impl SlicePrediction {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_covid) {
            return Err(AggregationError::InvalidPrediction(format!(
                "p_covid {} outside [0, 1]",
                self.p_covid
            )));
        }
        let expected = if self.p_covid >= 0.5 { Label::Covid } else { Label::NonCovid };
        if self.predicted_label != expected {
            return Err(AggregationError::InvalidPrediction(format!(
                "predicted_label {} disagrees with p_covid {}",
                self.predicted_label, self.p_covid
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientTally {
    pub patient_id: String,
    pub covid_slices: u64,
    pub noncovid_slices: u64,
}

impl PatientTally {
    pub fn total(&self) -> u64 {
        self.covid_slices + self.noncovid_slices
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// COVID when strictly more slices are COVID than not.
    Majority,
    /// COVID when the COVID share of all slices exceeds `t`.
    Fraction(f64),
    /// COVID when the COVID count exceeds `t` times the NonCOVID count.
    Ratio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub kind: PolicyKind,
    /// Decision when the comparison is an exact tie.
    pub tie_break: Label,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self::majority()
    }
}

impl ThresholdPolicy {
    pub fn majority() -> Self {
        Self {
            kind: PolicyKind::Majority,
            tie_break: Label::NonCovid,
        }
    }

    pub fn fraction(t: f64) -> Result<Self> {
        check_threshold(t)?;
        Ok(Self {
            kind: PolicyKind::Fraction(t),
            tie_break: Label::NonCovid,
        })
    }

    pub fn ratio(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(AggregationError::InvalidThreshold(t));
        }
        Ok(Self {
            kind: PolicyKind::Ratio(t),
            tie_break: Label::NonCovid,
        })
    }

    pub fn with_tie_break(self, tie_break: Label) -> Self {
        Self { tie_break, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PolicyKind::Majority => Ok(()),
            PolicyKind::Fraction(t) => check_threshold(t),
            PolicyKind::Ratio(t) => Self::ratio(t).map(|_| ()),
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(AggregationError::InvalidThreshold(t))
    }
}

/// Counts COVID and NonCOVID slice labels of a single patient.
pub fn tally_slices(predictions: &[SlicePrediction]) -> Result<PatientTally> {
    let first = predictions.first().ok_or(AggregationError::Empty)?;
    let mut tally = PatientTally {
        patient_id: first.patient_id.clone(),
        covid_slices: 0,
        noncovid_slices: 0,
    };
    for p in predictions {
        if p.patient_id != tally.patient_id {
            return Err(AggregationError::MixedPatients {
                expected: tally.patient_id.clone(),
                found: p.patient_id.clone(),
            });
        }
        match p.predicted_label {
            Label::Covid => tally.covid_slices += 1,
            Label::NonCovid => tally.noncovid_slices += 1,
        }
    }
    Ok(tally)
}

pub fn decide_patient(tally: &PatientTally, policy: &ThresholdPolicy) -> Label {
    let (c, n) = (tally.covid_slices, tally.noncovid_slices);
    let ord = match policy.kind {
        PolicyKind::Majority => c.cmp(&n),
        PolicyKind::Fraction(t) => {
            let frac = c as f64 / (c + n) as f64;
            frac.partial_cmp(&t).expect("finite fraction")
        }
        PolicyKind::Ratio(t) => (c as f64).partial_cmp(&(t * n as f64)).expect("finite ratio"),
    };
    match ord {
        std::cmp::Ordering::Greater => Label::Covid,
        std::cmp::Ordering::Less => Label::NonCovid,
        std::cmp::Ordering::Equal => policy.tie_break,
    }
}

/// Tallies per patient, ordered by patient id.
pub fn tally_by_patient(predictions: &[SlicePrediction]) -> Result<Vec<PatientTally>> {
    if predictions.is_empty() {
        return Err(AggregationError::Empty);
    }
    let mut groups: BTreeMap<&str, PatientTally> = BTreeMap::new();
    for p in predictions {
        let t = groups.entry(&p.patient_id).or_insert_with(|| PatientTally {
            patient_id: p.patient_id.clone(),
            covid_slices: 0,
            noncovid_slices: 0,
        });
        match p.predicted_label {
            Label::Covid => t.covid_slices += 1,
            Label::NonCovid => t.noncovid_slices += 1,
        }
    }
    Ok(groups.into_values().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientDecision {
    pub patient_id: String,
    pub covid_slices: u64,
    pub noncovid_slices: u64,
    pub label: Label,
}

pub fn aggregate(predictions: &[SlicePrediction], policy: &ThresholdPolicy) -> Result<Vec<PatientDecision>> {
    policy.validate()?;
    Ok(tally_by_patient(predictions)?
        .into_iter()
        .map(|t| PatientDecision {
            label: decide_patient(&t, policy),
            patient_id: t.patient_id,
            covid_slices: t.covid_slices,
            noncovid_slices: t.noncovid_slices,
        })
        .collect())
}

/// Confusion matrix of patient decisions against known labels. Patients
/// without a label are returned separately, in id order.
pub fn patient_confusion(
    decisions: &[PatientDecision],
    labels: &HashMap<String, Label>,
) -> (ConfusionMatrix, Vec<String>) {
    let mut cm = ConfusionMatrix::default();
    let mut excluded = Vec::new();
    for d in decisions {
        match labels.get(&d.patient_id) {
            Some(&truth) => cm.record(d.label, truth),
            None => excluded.push(d.patient_id.clone()),
        }
    }
    (cm, excluded)
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SweepRule {
    #[default]
    Fraction,
    Ratio,
}

/// One row of the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub accuracy: f64,
    pub macro_f1_eq2: f64,
    pub macro_f1_classwise: f64,
    pub weighted_f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl SweepRow {
    pub fn covid_patients(&self) -> u64 {
        self.tp + self.fp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestThreshold {
    pub threshold: f64,
    pub value: f64,
}

/// The best-threshold summary written next to the sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rule: SweepRule,
    pub best_accuracy: BestThreshold,
    pub best_weighted_f1: BestThreshold,
    pub patients: u64,
    pub excluded_patients: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub summary: SweepSummary,
    pub reports: Vec<MetricsReport>,
}

fn best_by(rows: &[SweepRow], key: impl Fn(&SweepRow) -> f64) -> BestThreshold {
    // earliest threshold wins ties
    let mut best = &rows[0];
    for r in &rows[1..] {
        if key(r) > key(best) {
            best = r;
        }
    }
    BestThreshold {
        threshold: best.threshold,
        value: key(best),
    }
}

/// Evaluates threshold voting at every threshold of `thresholds`.
pub fn sweep_thresholds(
    predictions: &[SlicePrediction],
    labels: &HashMap<String, Label>,
    thresholds: &[f64],
    rule: SweepRule,
    tie_break: Label,
) -> Result<Sweep> {
    if thresholds.is_empty() {
        return Err(AggregationError::InvalidPrediction("empty threshold grid".into()));
    }
    for &t in thresholds {
        check_threshold(t)?;
    }
    let tallies = tally_by_patient(predictions)?;
    let (labeled, excluded): (Vec<_>, Vec<_>) = tallies.into_iter().partition(|t| labels.contains_key(&t.patient_id));
    if labeled.is_empty() {
        return Err(AggregationError::NoLabeledPatients);
    }
    let mut rows = Vec::with_capacity(thresholds.len());
    let mut reports = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let policy = ThresholdPolicy {
            kind: match rule {
                SweepRule::Fraction => PolicyKind::Fraction(t),
                SweepRule::Ratio => PolicyKind::Ratio(t),
            },
            tie_break,
        };
        let mut cm = ConfusionMatrix::default();
        for tally in &labeled {
            cm.record(decide_patient(tally, &policy), labels[&tally.patient_id]);
        }
        let report = MetricsReport::compute(&cm, None, crate::metrics::DEFAULT_Z)?;
        rows.push(SweepRow {
            threshold: t,
            accuracy: report.accuracy,
            macro_f1_eq2: report.macro_f1_eq2,
            macro_f1_classwise: report.macro_f1_classwise,
            weighted_f1: report.weighted_f1,
            tp: cm.tp,
            fp: cm.fp,
            fn_: cm.fn_,
            tn: cm.tn,
        });
        reports.push(report);
    }
    let summary = SweepSummary {
        rule,
        best_accuracy: best_by(&rows, |r| r.accuracy),
        best_weighted_f1: best_by(&rows, |r| r.weighted_f1),
        patients: labeled.len() as u64,
        excluded_patients: excluded.into_iter().map(|t| t.patient_id).collect(),
    };
    Ok(Sweep { rows, summary, reports })
}

fn csv_error(e: csv::Error) -> AggregationError {
    AggregationError::Csv {
        line: e.position().map(|p| p.line()).unwrap_or(0),
        message: e.to_string(),
    }
}

fn write_rows<S: Serialize>(rows: &[S], header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn read_rows<S: serde::de::DeserializeOwned>(bytes: &[u8], header: &[&str]) -> Result<Vec<(u64, S)>> {
    let mut reader = csv::Reader::from_reader(bytes);
    let found: Vec<String> = reader.headers().map_err(csv_error)?.iter().map(|h| h.trim().to_string()).collect();
    if found != header {
        return Err(AggregationError::Csv {
            line: 1,
            message: format!("expected header `{}`, found `{}`", header.join(","), found.join(",")),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: S = record.deserialize(None).map_err(|e| AggregationError::Csv {
            line,
            message: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

pub const PREDICTION_HEADER: [&str; 4] = ["patient_id", "slice_id", "p_covid", "predicted_label"];
pub const SWEEP_HEADER: [&str; 9] = [
    "threshold",
    "accuracy",
    "macro_f1_eq2",
    "macro_f1_classwise",
    "weighted_f1",
    "tp",
    "fp",
    "fn",
    "tn",
];

pub fn write_predictions_csv(predictions: &[SlicePrediction]) -> Vec<u8> {
    write_rows(predictions, &PREDICTION_HEADER)
}

/// Parses a prediction CSV; malformed rows are reported with their line.
pub fn read_predictions_csv(bytes: &[u8]) -> Result<Vec<SlicePrediction>> {
    read_rows::<SlicePrediction>(bytes, &PREDICTION_HEADER)?
        .into_iter()
        .map(|(line, p)| {
            p.validate().map_err(|e| AggregationError::Csv {
                line,
                message: e.to_string(),
            })?;
            Ok(p)
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow]) -> Vec<u8> {
    write_rows(rows, &SWEEP_HEADER)
}

pub fn read_sweep_csv(bytes: &[u8]) -> Result<Vec<SweepRow>> {
    Ok(read_rows(bytes, &SWEEP_HEADER)?.into_iter().map(|(_, r)| r).collect())
}
