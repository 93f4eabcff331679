//! Synthetic CT-like dataset with the same directory layout as the real one.
//!
//! Each slice is a dark background with a body ellipse and two darker lung
//! fields. COVID slices add bright diffuse opacities inside the lungs, which
//! is enough signal for a small transformer to separate the classes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, scan_tree, DatasetError, Partition, Result, ScanReport};
use crate::imaging::save_gray_png;
use crate::label::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthPartition {
    pub partition: Partition,
    pub covid: usize,
    pub noncovid: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub partitions: Vec<SynthPartition>,
    pub slices_per_patient: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slices_per_patient == 0 {
            return Err(DatasetError::Spec("slices_per_patient must be at least 1".into()));
        }
        if self.image_size < 8 {
            return Err(DatasetError::Spec("image_size must be at least 8".into()));
        }
        if self.partitions.is_empty() {
            return Err(DatasetError::Spec("no partitions requested".into()));
        }
        Ok(())
    }
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

/// Renders one grayscale slice. Deterministic in `seed`.
pub fn synthetic_slice(size: usize, label: Label, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let c = s / 2.0;
    let lungs = [(c - s * 0.18, c), (c + s * 0.18, c)];
    let (lrx, lry) = (s * 0.14, s * 0.26);
    let blobs: Vec<(f64, f64, f64)> = if label.is_covid() {
        (0..rng.gen_range(3..6))
            .map(|_| {
                let (lx, ly) = lungs[rng.gen_range(0..2)];
                (
                    lx + rng.gen_range(-0.6..0.6) * lrx,
                    ly + rng.gen_range(-0.7..0.7) * lry,
                    s * rng.gen_range(0.07..0.12),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = 12.0;
            if in_ellipse(px, py, c, c, s * 0.45, s * 0.36) {
                v = 110.0;
                if lungs.iter().any(|&(lx, ly)| in_ellipse(px, py, lx, ly, lrx, lry)) {
                    v = 35.0;
                    for &(bx, by, r) in &blobs {
                        let d2 = ((px - bx).powi(2) + (py - by).powi(2)) / (r * r);
                        v += 150.0 * (-d2).exp();
                    }
                }
            }
            v += rng.gen_range(-10.0..10.0);
            out.push(v.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Writes a synthetic tree under `root` and returns its scan. Refuses to
/// write into a non-empty directory unless `force` is set, in which case the
/// generated partitions are replaced.
pub fn generate_synthetic(root: &Path, spec: &SynthSpec, force: bool) -> Result<ScanReport> {
    spec.validate()?;
    if root.exists() {
        let non_empty = std::fs::read_dir(root).map_err(io_err(root))?.next().is_some();
        if non_empty && !force {
            return Err(DatasetError::NotEmpty(root.to_path_buf()));
        }
        if force {
            for p in &spec.partitions {
                let dir = root.join(p.partition.as_str());
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
                }
            }
        }
    }
    let mut patient_seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for p in &spec.partitions {
        for (label, count) in [(Label::Covid, p.covid), (Label::NonCovid, p.noncovid)] {
            for i in 0..count {
                let id = format!(
                    "{}_{}_{i:03}",
                    p.partition.as_str(),
                    label.folder_name().replace('-', "")
                );
                let dir = root.join(p.partition.as_str()).join(label.folder_name()).join(&id);
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                patient_seed = patient_seed.wrapping_add(1);
                for s in 0..spec.slices_per_patient {
                    let seed = patient_seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
                    let pixels = synthetic_slice(spec.image_size, label, seed);
                    let path = dir.join(format!("{}.png", s + 1));
                    save_gray_png(&path, spec.image_size, spec.image_size, &pixels)?;
                }
            }
        }
    }
    scan_tree(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            partitions: vec![SynthPartition {
                partition: Partition::Train,
                covid: 2,
                noncovid: 2,
            }],
            slices_per_patient: 5,
            image_size: 16,
            seed: 1,
        }
    }

    #[test]
    fn generated_tree_scans_back() {
        let dir = tempfile::tempdir().unwrap();
        let report = generate_synthetic(dir.path(), &small_spec(), false).unwrap();
        let s = report.summary(Partition::Train).unwrap();
        assert_eq!((s.covid_patients, s.noncovid_patients, s.total_slices), (2, 2, 20));
        assert_eq!(report.patients.len(), 4);
    }

    #[test]
    fn refuses_non_empty_root_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("keep.txt"), "x").unwrap();
        assert!(matches!(
            generate_synthetic(dir.path(), &small_spec(), false),
            Err(DatasetError::NotEmpty(_))
        ));
        generate_synthetic(dir.path(), &small_spec(), true).unwrap();
        let again = generate_synthetic(dir.path(), &small_spec(), true).unwrap();
        assert_eq!(again.patients.len(), 4);
    }

    #[test]
    fn classes_differ_in_lung_brightness() {
        let mean = |label| {
            (0..20u64)
                .map(|seed| {
                    let px = synthetic_slice(32, label, seed);
                    px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64
                })
                .sum::<f64>()
                / 20.0
        };
        assert!(mean(Label::Covid) > mean(Label::NonCovid) + 5.0);
        assert_eq!(synthetic_slice(16, Label::Covid, 3), synthetic_slice(16, Label::Covid, 3));
    }
}
