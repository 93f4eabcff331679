//! `key = value` run configuration. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::{PolicyKind, ThresholdPolicy};
use crate::imaging::PreprocessConfig;
use crate::label::Label;
use crate::metrics::DEFAULT_Z;
use crate::tensor::GeluKind;
use crate::training::TrainConfig;
use crate::vit::VitConfig;

use super::CliError;

pub const KEYS: [&str; 28] = [
    "seed",
    "output.dir",
    "preprocess.size",
    "preprocess.mean",
    "preprocess.std",
    "train.learning_rate",
    "train.epochs",
    "train.batch_size",
    "train.num_classes",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "train.freeze_backbone",
    "train.max_steps",
    "model.preset",
    "model.image_size",
    "model.patch_size",
    "model.embed_dim",
    "model.depth",
    "model.num_heads",
    "model.mlp_ratio",
    "model.gelu",
    "policy.kind",
    "policy.threshold",
    "policy.tie_break",
    "eval.z",
    "eval.ci_n",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum CiSamples {
    /// One sample per evaluated patient.
    #[default]
    Patients,
    /// One sample per slice of the evaluated patients.
    Slices,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ModelPreset {
    /// ViT-B/16 at 224×224.
    #[default]
    Base,
    /// 16×16 images, 4×4 patches, width 32, depth 2.
    Toy,
}

impl ModelPreset {
    pub fn config(self) -> VitConfig {
        match self {
            ModelPreset::Base => VitConfig::base(),
            ModelPreset::Toy => VitConfig::toy(),
        }
    }
}

impl FromStr for ModelPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "base" => Ok(ModelPreset::Base),
            "toy" => Ok(ModelPreset::Toy),
            _ => Err(format!("unknown model preset `{s}` (expected base or toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub preprocess_size: Option<usize>,
    pub mean: Option<[f32; 3]>,
    pub std: Option<[f32; 3]>,
    pub train: TrainConfig,
    pub model: VitConfig,
    pub policy: ThresholdPolicy,
    pub z: f64,
    pub ci_samples: CiSamples,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            preprocess_size: None,
            mean: None,
            std: None,
            train: TrainConfig::default(),
            model: VitConfig::base(),
            policy: ThresholdPolicy::majority(),
            z: DEFAULT_Z,
            ci_samples: CiSamples::Patients,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("config key `{key}`: cannot parse `{value}`: {e}")))
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3], CliError> {
    let parts: Vec<f32> = value
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| CliError::Usage(format!("config key `{key}` needs three comma-separated values")))
}

pub fn parse_policy(kind: &str, threshold: Option<f64>) -> Result<PolicyKind, CliError> {
    let need = |t: Option<f64>| t.ok_or_else(|| CliError::Usage(format!("policy `{kind}` needs a threshold")));
    match kind.to_ascii_lowercase().as_str() {
        "majority" => Ok(PolicyKind::Majority),
        "fraction" => Ok(PolicyKind::Fraction(need(threshold)?)),
        "ratio" => Ok(PolicyKind::Ratio(need(threshold)?)),
        other => Err(CliError::Usage(format!(
            "unknown policy `{other}` (expected majority, fraction or ratio)"
        ))),
    }
}

/// Parses `majority`, `fraction:T` or `ratio:T`.
pub fn parse_policy_flag(s: &str) -> Result<PolicyKind, CliError> {
    match s.split_once(':') {
        Some((kind, t)) => parse_policy(kind, Some(parse("--policy", t)?)),
        None => parse_policy(s, None),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::Usage(format!("config line {}: unknown key `{key}`", i + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key `{key}`", i + 1)));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(p) = entries.get("model.preset") {
            cfg.model = parse::<ModelPreset>("model.preset", p)?.config();
        }
        let mut policy_kind = None;
        let mut threshold = None;
        for (key, value) in &entries {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "seed" | "train.seed" => cfg.train.seed = parse(k, v)?,
                "output.dir" => cfg.output_dir = Some(PathBuf::from(v)),
                "preprocess.size" => cfg.preprocess_size = Some(parse(k, v)?),
                "preprocess.mean" => cfg.mean = Some(parse_triple(k, v)?),
                "preprocess.std" => cfg.std = Some(parse_triple(k, v)?),
                "train.learning_rate" => cfg.train.learning_rate = parse(k, v)?,
                "train.epochs" => cfg.train.epochs = parse(k, v)?,
                "train.batch_size" => cfg.train.batch_size = parse(k, v)?,
                "train.num_classes" => cfg.train.num_classes = parse(k, v)?,
                "train.beta1" => cfg.train.beta1 = parse(k, v)?,
                "train.beta2" => cfg.train.beta2 = parse(k, v)?,
                "train.eps" => cfg.train.eps = parse(k, v)?,
                "train.freeze_backbone" => cfg.train.freeze_backbone = parse(k, v)?,
                "train.max_steps" => cfg.train.max_steps = Some(parse(k, v)?),
                "model.preset" => {}
                "model.image_size" => cfg.model.image_size = parse(k, v)?,
                "model.patch_size" => cfg.model.patch_size = parse(k, v)?,
                "model.embed_dim" => cfg.model.embed_dim = parse(k, v)?,
                "model.depth" => cfg.model.depth = parse(k, v)?,
                "model.num_heads" => cfg.model.num_heads = parse(k, v)?,
                "model.mlp_ratio" => cfg.model.mlp_ratio = parse(k, v)?,
                "model.gelu" => {
                    cfg.model.gelu = match v {
                        "tanh" => GeluKind::Tanh,
                        "erf" => GeluKind::Erf,
                        _ => return Err(CliError::Usage(format!("config key `{k}`: expected tanh or erf"))),
                    }
                }
                "policy.kind" => policy_kind = Some(v.to_string()),
                "policy.threshold" => threshold = Some(parse::<f64>(k, v)?),
                "policy.tie_break" => cfg.policy.tie_break = parse::<Label>(k, v)?,
                "eval.z" => cfg.z = parse(k, v)?,
                "eval.ci_n" => {
                    cfg.ci_samples = match v {
                        "patients" => CiSamples::Patients,
                        "slices" => CiSamples::Slices,
                        _ => return Err(CliError::Usage(format!("config key `{k}`: expected patients or slices"))),
                    }
                }
                _ => unreachable!("keys are checked above"),
            }
        }
        if let Some(kind) = policy_kind {
            cfg.policy.kind = parse_policy(&kind, threshold)?;
        } else if threshold.is_some() {
            return Err(CliError::Usage("policy.threshold given without policy.kind".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Preprocessing for a model with input side `image_size`.
    pub fn preprocess_for(&self, image_size: usize) -> Result<PreprocessConfig, CliError> {
        if let Some(size) = self.preprocess_size {
            if size != image_size {
                return Err(CliError::Usage(format!(
                    "preprocess.size {size} does not match the model input size {image_size}"
                )));
            }
        }
        let mut p = PreprocessConfig::with_size(image_size);
        if let Some(m) = self.mean {
            p.mean = m;
        }
        if let Some(s) = self.std {
            p.std = s;
        }
        p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(p)
    }
}
