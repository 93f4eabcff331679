//! Slice-level prediction over patient scans.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::aggregation::SlicePrediction;
use crate::dataset::PatientScan;
use crate::imaging::{preprocess_slice, ImagingError, PreprocessConfig};
use crate::label::Label;
use crate::tensor::{Tensor, TensorError};
use crate::vit::VitModel;

/// Probability of COVID for one preprocessed image.
pub fn p_covid(model: &VitModel<f32>, image: &Tensor<f32>) -> Result<f64, TensorError> {
    let probs = model.probabilities(image)?;
    Ok(probs.data()[Label::Covid.class_index()] as f64)
}

/// Slice label from its COVID probability: the argmax of the two-class
/// softmax, with an exact 0.5 counted as COVID.
pub fn label_from_probability(p_covid: f64) -> Label {
    if p_covid >= 0.5 {
        Label::Covid
    } else {
        Label::NonCovid
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSlice {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRun {
    pub predictions: Vec<SlicePrediction>,
    pub skipped: Vec<SkippedSlice>,
}

pub fn slice_id(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Predicts every slice of every scan. Unreadable slices are reported in
/// [`PredictionRun::skipped`]; output order follows the scan order.
pub fn predict_scans(
    model: &VitModel<f32>,
    scans: &[PatientScan],
    preprocess: &PreprocessConfig,
) -> Result<PredictionRun, TensorError> {
    let jobs: Vec<(&str, &PathBuf)> = scans
        .iter()
        .flat_map(|s| s.slice_paths.iter().map(move |p| (s.patient_id.as_str(), p)))
        .collect();
    let results: Vec<Result<std::result::Result<SlicePrediction, ImagingError>, TensorError>> = jobs
        .par_iter()
        .map(|&(patient, path)| {
            let image = match preprocess_slice(path, preprocess) {
                Ok(t) => t,
                Err(e) => return Ok(Err(e)),
            };
            let p = p_covid(model, &image)?.clamp(0.0, 1.0);
            Ok(Ok(SlicePrediction {
                patient_id: patient.to_string(),
                slice_id: slice_id(path),
                p_covid: p,
                predicted_label: label_from_probability(p),
            }))
        })
        .collect();
    let mut run = PredictionRun {
        predictions: Vec::with_capacity(jobs.len()),
        skipped: Vec::new(),
    };
    for ((_, path), r) in jobs.iter().zip(results) {
        match r? {
            Ok(pred) => run.predictions.push(pred),
            Err(e) => {
                log::warn!("skipping slice: {e}");
                run.skipped.push(SkippedSlice {
                    path: (*path).clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(run)
}
