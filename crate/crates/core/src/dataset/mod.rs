//! Dataset trees laid out as `<root>/<partition>/<covid|non-covid>/<patient>/<slices>`.
//!
//! The test partition may also hold patient folders directly, in which case
//! those patients are unlabeled.

mod batches;
mod synth;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use batches::{iterate_batches, labeled_slices, Batch, BatchIter, LabeledSlice};
pub use synth::{generate_synthetic, synthetic_slice, SynthPartition, SynthSpec};

use crate::imaging::{is_supported_image, ImagingError};
use crate::label::Label;

/// Typical slice-count range of a CT scan; scans outside it are reported.
pub const EXPECTED_SLICES: (usize, usize) = (50, 700);

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unrecognized folder name; expected one of: {}", accepted.join(", "))]
    UnknownFolder {
        path: PathBuf,
        accepted: Vec<&'static str>,
    },
    #[error("{0}: directory exists and is not empty (use force to overwrite)")]
    NotEmpty(PathBuf),
    #[error("invalid synthetic dataset spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

impl Partition {
    pub const ACCEPTED: [&'static str; 6] = ["train", "training", "validation", "val", "valid", "test"];

    pub fn from_folder(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "train" | "training" => Some(Partition::Train),
            "validation" | "val" | "valid" => Some(Partition::Validation),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Validation => "validation",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const CLASS_FOLDERS: [&str; 4] = ["covid", "non-covid", "noncovid", "non_covid"];

fn label_from_folder(name: &str) -> Option<Label> {
    match name.to_ascii_lowercase().as_str() {
        "covid" => Some(Label::Covid),
        "non-covid" | "noncovid" | "non_covid" => Some(Label::NonCovid),
        _ => None,
    }
}

/// One patient's CT scan: the slice files of a patient folder in natural order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientScan {
    pub patient_id: String,
    pub partition: Partition,
    /// `None` for unlabeled (test) patients.
    pub label: Option<Label>,
    pub slice_paths: Vec<PathBuf>,
}

impl PatientScan {
    pub fn num_slices(&self) -> usize {
        self.slice_paths.len()
    }

    pub fn label_str(&self) -> &'static str {
        self.label.map(Label::as_str).unwrap_or("Unknown")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub partition: Partition,
    pub covid_patients: usize,
    pub noncovid_patients: usize,
    pub unknown_patients: usize,
    pub total_slices: usize,
    pub skipped_patients: usize,
}

impl PartitionSummary {
    fn empty(partition: Partition) -> Self {
        Self {
            partition,
            covid_patients: 0,
            noncovid_patients: 0,
            unknown_patients: 0,
            total_slices: 0,
            skipped_patients: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanWarning {
    NonImageFile(PathBuf),
    EmptyPatient(PathBuf),
    SliceCount { patient_id: String, count: usize },
}

impl fmt::Display for ScanWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanWarning::NonImageFile(p) => write!(f, "{}: not a supported image, skipped", p.display()),
            ScanWarning::EmptyPatient(p) => write!(f, "{}: patient folder has no slices, skipped", p.display()),
            ScanWarning::SliceCount { patient_id, count } => write!(
                f,
                "patient {patient_id}: {count} slices, outside the usual {}-{} range",
                EXPECTED_SLICES.0, EXPECTED_SLICES.1
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanReport {
    pub patients: Vec<PatientScan>,
    pub summaries: Vec<PartitionSummary>,
    pub warnings: Vec<ScanWarning>,
}

impl ScanReport {
    pub fn summary(&self, partition: Partition) -> Option<&PartitionSummary> {
        self.summaries.iter().find(|s| s.partition == partition)
    }

    pub fn partition(&self, partition: Partition) -> Vec<PatientScan> {
        self.patients
            .iter()
            .filter(|p| p.partition == partition)
            .cloned()
            .collect()
    }
}

/// Compares strings treating runs of ASCII digits as numbers, so `2.png`
/// sorts before `10.png`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let (mut a, mut b) = (a.as_bytes(), b.as_bytes());
    loop {
        match (a.first(), b.first()) {
            (None, None) => return Ordering::Equal,
            (None, _) => return Ordering::Less,
            (_, None) => return Ordering::Greater,
            (Some(x), Some(y)) if x.is_ascii_digit() && y.is_ascii_digit() => {
                let da = a.iter().take_while(|c| c.is_ascii_digit()).count();
                let db = b.iter().take_while(|c| c.is_ascii_digit()).count();
                let na = trim_zeros(&a[..da]);
                let nb = trim_zeros(&b[..db]);
                let ord = na.len().cmp(&nb.len()).then_with(|| na.cmp(nb)).then(da.cmp(&db));
                if ord != Ordering::Equal {
                    return ord;
                }
                a = &a[da..];
                b = &b[db..];
            }
            (Some(x), Some(y)) => {
                if x != y {
                    return x.cmp(y);
                }
                a = &a[1..];
                b = &b[1..];
            }
        }
    }
}

fn trim_zeros(digits: &[u8]) -> &[u8] {
    let start = digits.iter().position(|&c| c != b'0').unwrap_or(digits.len());
    &digits[start..]
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let is_dir = entry.file_type().map_err(io_err(&path))?.is_dir();
        out.push((entry.file_name().to_string_lossy().into_owned(), path, is_dir));
    }
    out.sort_by(|a, b| natural_cmp(&a.0, &b.0));
    Ok(out)
}

fn scan_patient(
    dir: &Path,
    patient_id: String,
    partition: Partition,
    label: Option<Label>,
    warnings: &mut Vec<ScanWarning>,
) -> Result<Option<PatientScan>> {
    let mut slices = Vec::new();
    for (_, path, is_dir) in sorted_entries(dir)? {
        if !is_dir && is_supported_image(&path) {
            slices.push(path);
        } else {
            warnings.push(ScanWarning::NonImageFile(path));
        }
    }
    if slices.is_empty() {
        warnings.push(ScanWarning::EmptyPatient(dir.to_path_buf()));
        return Ok(None);
    }
    if !(EXPECTED_SLICES.0..=EXPECTED_SLICES.1).contains(&slices.len()) {
        warnings.push(ScanWarning::SliceCount {
            patient_id: patient_id.clone(),
            count: slices.len(),
        });
    }
    Ok(Some(PatientScan {
        patient_id,
        partition,
        label,
        slice_paths: slices,
    }))
}

/// Walks a dataset tree. Every patient folder becomes one [`PatientScan`];
/// ordering is deterministic (natural sort at every level).
pub fn scan_tree(root: &Path) -> Result<ScanReport> {
    let mut patients = Vec::new();
    let mut warnings = Vec::new();
    let mut summaries: Vec<PartitionSummary> = Vec::new();

    for (name, path, is_dir) in sorted_entries(root)? {
        if !is_dir {
            warnings.push(ScanWarning::NonImageFile(path));
            continue;
        }
        let partition = Partition::from_folder(&name).ok_or_else(|| DatasetError::UnknownFolder {
            path: path.clone(),
            accepted: Partition::ACCEPTED.to_vec(),
        })?;
        let mut summary = PartitionSummary::empty(partition);
        let mut found = Vec::new();
        for (child, child_path, child_dir) in sorted_entries(&path)? {
            if !child_dir {
                warnings.push(ScanWarning::NonImageFile(child_path));
                continue;
            }
            match label_from_folder(&child) {
                Some(label) => {
                    for (pid, ppath, pdir) in sorted_entries(&child_path)? {
                        if !pdir {
                            warnings.push(ScanWarning::NonImageFile(ppath));
                            continue;
                        }
                        match scan_patient(&ppath, pid, partition, Some(label), &mut warnings)? {
                            Some(scan) => found.push(scan),
                            None => summary.skipped_patients += 1,
                        }
                    }
                }
                None if partition == Partition::Test => {
                    match scan_patient(&child_path, child, partition, None, &mut warnings)? {
                        Some(scan) => found.push(scan),
                        None => summary.skipped_patients += 1,
                    }
                }
                None => {
                    return Err(DatasetError::UnknownFolder {
                        path: child_path,
                        accepted: CLASS_FOLDERS.to_vec(),
                    })
                }
            }
        }
        for scan in &found {
            match scan.label {
                Some(Label::Covid) => summary.covid_patients += 1,
                Some(Label::NonCovid) => summary.noncovid_patients += 1,
                None => summary.unknown_patients += 1,
            }
            summary.total_slices += scan.num_slices();
        }
        patients.extend(found);
        match summaries.iter_mut().find(|s| s.partition == partition) {
            Some(existing) => {
                existing.covid_patients += summary.covid_patients;
                existing.noncovid_patients += summary.noncovid_patients;
                existing.unknown_patients += summary.unknown_patients;
                existing.total_slices += summary.total_slices;
                existing.skipped_patients += summary.skipped_patients;
            }
            None => summaries.push(summary),
        }
    }
    summaries.sort_by_key(|s| s.partition);
    for w in &warnings {
        match w {
            ScanWarning::SliceCount { .. } => log::info!("{w}"),
            _ => log::warn!("{w}"),
        }
    }
    Ok(ScanReport {
        patients,
        summaries,
        warnings,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    patient_id: String,
    partition: Partition,
    label: String,
    num_slices: usize,
}

/// Manifest CSV: `patient_id,partition,label,num_slices`.
pub fn manifest_csv(scans: &[PatientScan]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in scans {
        w.serialize(ManifestRow {
            patient_id: s.patient_id.clone(),
            partition: s.partition,
            label: s.label_str().to_string(),
            num_slices: s.num_slices(),
        })
        .map_err(|e| DatasetError::Csv {
            path: PathBuf::from("<manifest>"),
            message: e.to_string(),
        })?;
    }
    w.into_inner().map_err(|e| DatasetError::Csv {
        path: PathBuf::from("<manifest>"),
        message: e.to_string(),
    })
}

/// Reads `patient_id → label` from any CSV with `patient_id` and `label`
/// columns (including the manifest format). `Unknown` labels are skipped.
pub fn read_labels_csv(path: &Path) -> Result<HashMap<String, Label>> {
    let csv_err = |line: Option<u64>, message: String| DatasetError::Csv {
        path: path.to_path_buf(),
        message: match line {
            Some(l) => format!("line {l}: {message}"),
            None => message,
        },
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(None, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(None, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| csv_err(Some(1), format!("missing `{name}` column")))
    };
    let (id_col, label_col) = (col("patient_id")?, col("label")?);
    let mut out = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map(|p| p.line()), e.to_string()))?;
        let line = record.position().map(|p| p.line());
        let id = record.get(id_col).unwrap_or("").trim();
        let raw = record.get(label_col).unwrap_or("").trim();
        if id.is_empty() {
            return Err(csv_err(line, "empty patient_id".into()));
        }
        if raw.eq_ignore_ascii_case("unknown") {
            continue;
        }
        let label = raw.parse::<Label>().map_err(|e| csv_err(line, e.to_string()))?;
        out.insert(id.to_string(), label);
    }
    Ok(out)
}
