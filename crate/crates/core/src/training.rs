//! Cross-entropy fine-tuning with Adam.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::dataset::{iterate_batches, LabeledSlice};
use crate::imaging::PreprocessConfig;
use crate::label::Label;
use crate::metrics::{per_class_prf, ConfusionMatrix, MetricsError};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::vit::{forward_logits, is_head_param, save_weights, VitConfig, VitModel, VitParams, VitWeights, WeightsError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss ({loss}) at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("no training slice could be loaded")]
    EmptyDataset,
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_classes: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Train only the classification head.
    pub freeze_backbone: bool,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 32,
            num_classes: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            freeze_backbone: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.num_classes != 2 {
            return bad("num_classes must be 2");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.freeze_backbone || is_head_param(name)
    }
}

/// Mean cross-entropy of `logits [B × C]` against class indices.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> std::result::Result<T, TensorError> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = tape.cross_entropy(x, labels)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One parameter as seen by the optimizer.
pub struct ParamSlot<'a, T> {
    pub name: &'a str,
    pub value: &'a mut Tensor<T>,
    pub grad: Option<&'a Tensor<T>>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Tensor<T>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()).expect("parameter shapes are valid"))
            .collect();
        Self {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn for_params(params: &VitParams<T>) -> Self {
        Self::zeros_like(params.named().into_iter().map(|(_, t)| t))
    }

    /// Bias-corrected Adam update of every trainable slot. Nothing is
    /// modified unless every trainable slot has a gradient of the right shape.
    pub fn update(&mut self, adam: &Adam, slots: Vec<ParamSlot<'_, T>>) -> Result<()> {
        if slots.len() != self.first.len() {
            return Err(TensorError::Contract(format!(
                "optimizer holds {} moments but {} parameters were given",
                self.first.len(),
                slots.len()
            ))
            .into());
        }
        for (slot, m) in slots.iter().zip(&self.first) {
            if slot.value.shape() != m.shape() {
                return Err(TensorError::Contract(format!("{}: parameter shape changed", slot.name)).into());
            }
            if !slot.trainable {
                continue;
            }
            match slot.grad {
                None => {
                    return Err(TensorError::Contract(format!("missing gradient for trainable parameter {}", slot.name)).into())
                }
                Some(g) if g.shape() != slot.value.shape() => {
                    return Err(TensorError::Contract(format!(
                        "{}: gradient shape {:?} does not match parameter {:?}",
                        slot.name,
                        g.shape(),
                        slot.value.shape()
                    ))
                    .into())
                }
                Some(_) => {}
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of_f64(adam.beta1);
        let b2 = T::of_f64(adam.beta2);
        let one = T::one();
        let bc1 = T::of_f64(1.0 - adam.beta1.powi(t));
        let bc2 = T::of_f64(1.0 - adam.beta2.powi(t));
        let lr = T::of_f64(adam.learning_rate);
        let eps = T::of_f64(adam.eps);
        for ((slot, m), v) in slots.into_iter().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = slot.grad.filter(|_| slot.trainable) else {
                continue;
            };
            let (p, m, v) = (slot.value.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub type Gradients<T> = VitWeights<Option<Tensor<T>>>;

/// One Adam step over the transformer parameters. Parameters rejected by
/// `trainable` are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut VitParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    adam: &Adam,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let grads = grads.named();
    let slots = params
        .named_mut()
        .into_iter()
        .zip(grads)
        .map(|((name, value), (_, grad))| (name, value, grad.as_ref()))
        .collect::<Vec<_>>();
    let names: Vec<String> = slots.iter().map(|(n, _, _)| n.clone()).collect();
    let slots = slots
        .into_iter()
        .zip(&names)
        .map(|((_, value, grad), name)| ParamSlot {
            name,
            trainable: trainable(name),
            value,
            grad,
        })
        .collect();
    state.update(adam, slots)
}

#[derive(Debug, Clone)]
pub struct BatchOutcome<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the mean loss; `None` for untrained parameters.
    pub grads: Gradients<T>,
    /// Predicted class index per image, computed before the update.
    pub predictions: Vec<usize>,
}

fn argmax_class<T: Scalar>(logits: &Tensor<T>) -> usize {
    let d = logits.data();
    let covid = Label::Covid.class_index();
    let other = Label::NonCovid.class_index();
    if d[covid] >= d[other] {
        covid
    } else {
        other
    }
}

/// Loss and gradients of the batch-mean cross-entropy. Each image runs on
/// its own tape in parallel; gradients are summed in image order so the
/// result does not depend on the thread count.
pub fn batch_gradients<T: Scalar>(
    config: &VitConfig,
    params: &VitParams<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    trainable: impl Fn(&str) -> bool + Sync,
) -> Result<BatchOutcome<T>> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(TensorError::Contract(format!("{} images with {} labels", images.len(), labels.len())).into());
    }
    let per_image: Vec<(T, Gradients<T>, usize)> = images
        .par_iter()
        .zip(labels)
        .map(|(image, &label)| {
            let mut tape = Tape::new();
            let w = params.register(&mut tape, &trainable);
            let logits = forward_logits(&mut tape, &w, config, image)?;
            let prediction = argmax_class(tape.value(logits));
            let loss = tape.cross_entropy(logits, &[label])?;
            tape.backward(loss)?;
            let grads = w.map(|_, v| tape.grad(*v).cloned());
            Ok((tape.value(loss).item(), grads, prediction))
        })
        .collect::<std::result::Result<_, TensorError>>()?;

    let scale = T::of_f64(1.0 / images.len() as f64);
    let mut iter = per_image.into_iter();
    let (first_loss, mut total, first_pred) = iter.next().expect("batch is non-empty");
    let mut loss = first_loss.as_f64();
    let mut predictions = vec![first_pred];
    for (l, g, p) in iter {
        loss += l.as_f64();
        predictions.push(p);
        let g = g.named();
        for ((_, acc), (_, add)) in total.named_mut().into_iter().zip(g) {
            if let (Some(acc), Some(add)) = (acc.as_mut(), add) {
                *acc = acc.add(add)?;
            }
        }
    }
    for (_, g) in total.named_mut() {
        if let Some(g) = g.as_mut() {
            *g = g.scale(scale);
        }
    }
    Ok(BatchOutcome {
        loss: loss / images.len() as f64,
        grads: total,
        predictions,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean of the per-class precisions.
    pub precision: f64,
    /// Mean of the per-class recalls.
    pub recall: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
    /// Epoch (1-based) whose parameters the model holds on return.
    pub best_epoch: usize,
    pub skipped_slices: usize,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.vitw";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.vitw")
}

fn confusion_from_indices(predicted: &[usize], truth: &[usize]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in predicted.iter().zip(truth) {
        let p = Label::from_class_index(p).expect("binary class index");
        let t = Label::from_class_index(t).expect("binary class index");
        cm.record(p, t);
    }
    cm
}

/// Slice-level confusion matrix of `model` on labeled slices. Returns the
/// matrix and the number of slices that could not be loaded.
pub fn evaluate_slices(
    model: &VitModel<f32>,
    slices: &[LabeledSlice],
    preprocess: &PreprocessConfig,
) -> Result<(ConfusionMatrix, usize)> {
    let mut cm = ConfusionMatrix::default();
    let mut batches = iterate_batches(slices, 64, None, *preprocess);
    for batch in &mut batches {
        let preds = batch
            .images
            .par_iter()
            .map(|img| model.logits(img).map(|l| argmax_class(&l)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let part = confusion_from_indices(&preds, &batch.labels);
        cm.tp += part.tp;
        cm.fp += part.fp;
        cm.fn_ += part.fn_;
        cm.tn += part.tn;
    }
    Ok((cm, batches.skipped()))
}

fn write_log(dir: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    let path = dir.join(LOG_FILE);
    crate::fsutil::write_atomic(&path, text.as_bytes()).map_err(|source| TrainError::Io { path, source })
}

/// Trains `model` in place. Every epoch appends a record to the log and,
/// with `out_dir`, rewrites the log file and saves a checkpoint. On return
/// the model holds the parameters of the best epoch: highest validation
/// class-wise macro F1 when `validation` is given, otherwise the last.
pub fn fit(
    model: &mut VitModel<f32>,
    train: &[LabeledSlice],
    validation: Option<&[LabeledSlice]>,
    preprocess: &PreprocessConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    config.validate()?;
    preprocess.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if preprocess.size != model.config.image_size {
        return Err(TrainError::Config(format!(
            "preprocess size {} does not match model image size {}",
            preprocess.size, model.config.image_size
        )));
    }
    if config.num_classes != model.config.num_classes {
        return Err(TrainError::Config("num_classes differs from the model head".into()));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let adam = config.adam();
    let mut state = AdamState::for_params(&model.params);
    let mut records = Vec::new();
    let mut steps = 0usize;
    let mut skipped = 0usize;
    let mut best: Option<(f64, usize, VitParams<f32>)> = None;

    'epochs: for epoch in 1..=config.epochs {
        let seed = config.seed.wrapping_add(epoch as u64);
        let mut batches = iterate_batches(train, config.batch_size, Some(seed), *preprocess);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        let (mut predicted, mut truth) = (Vec::new(), Vec::new());
        let mut stop = false;
        for batch in &mut batches {
            if batch.is_empty() {
                continue;
            }
            let out = batch_gradients(&model.config, &model.params, &batch.images, &batch.labels, |n| {
                config.is_trainable(n)
            })?;
            steps += 1;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite { step: steps, loss: out.loss });
            }
            adam_step(&mut model.params, &out.grads, &mut state, &adam, |n| config.is_trainable(n))?;
            loss_sum += out.loss * batch.len() as f64;
            seen += batch.len();
            predicted.extend(out.predictions);
            truth.extend(batch.labels);
            if config.max_steps.is_some_and(|m| steps >= m) {
                stop = true;
                break;
            }
        }
        skipped += batches.skipped();
        if seen == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let cm = confusion_from_indices(&predicted, &truth);
        let (c, n) = per_class_prf(&cm);
        let val_macro_f1 = match validation {
            Some(v) if !v.is_empty() => {
                let (vcm, _) = evaluate_slices(model, v, preprocess)?;
                Some(crate::metrics::macro_f1_classwise(&vcm).value)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: crate::metrics::accuracy(&cm)?,
            precision: (c.precision.value + n.precision.value) / 2.0,
            recall: (c.recall.value + n.recall.value) / 2.0,
            val_macro_f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} accuracy {:.4} precision {:.4} recall {:.4}{}",
            record.loss,
            record.accuracy,
            record.precision,
            record.recall,
            val_macro_f1.map(|f| format!(" val macro F1 {f:.4}")).unwrap_or_default()
        );
        records.push(record);

        let score = val_macro_f1.unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((s, _, _)) => val_macro_f1.is_none() || score > *s,
        };
        if improves {
            best = Some((score, epoch, model.params.clone()));
        }
        if let Some(dir) = out_dir {
            write_log(dir, &records)?;
            save_weights(&model.config, &model.params, &dir.join(epoch_checkpoint_name(epoch)))?;
            if improves {
                save_weights(&model.config, &model.params, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        if stop {
            break 'epochs;
        }
    }

    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(FitReport {
        records,
        steps,
        best_epoch,
        skipped_slices: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_reference_values() {
        let uniform = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        assert!((cross_entropy(&uniform, &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let saturated = Tensor::new(vec![1, 2], vec![30.0f64, -30.0]).unwrap();
        assert!(cross_entropy(&saturated, &[0]).unwrap() < 1e-12);
        assert!(cross_entropy(&uniform, &[2]).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let labels: Vec<usize> = (0..8).map(|_| rng.gen_range(0..2)).collect();
        let mut oracle = 0.0;
        for (row, &l) in logits.chunks(2).zip(&labels) {
            let m = row[0].max(row[1]);
            let lse = m + ((row[0] - m).exp() + (row[1] - m).exp()).ln();
            oracle += lse - row[l];
        }
        oracle /= 8.0;
        let got = cross_entropy(&Tensor::new(vec![8, 2], logits.clone()).unwrap(), &labels).unwrap();
        assert!((got - oracle).abs() < 1e-6);
        let got32 = cross_entropy(&Tensor::new(vec![8, 2], logits.iter().map(|&v| v as f32).collect()).unwrap(), &labels).unwrap();
        assert!((got32 as f64 - oracle).abs() < 1e-5);
    }

    fn adam() -> Adam {
        TrainConfig::default().adam()
    }

    fn step_one(state: &mut AdamState<f64>, p: &mut Tensor<f64>, g: &Tensor<f64>) {
        state
            .update(
                &adam(),
                vec![ParamSlot {
                    name: "x",
                    value: p,
                    grad: Some(g),
                    trainable: true,
                }],
            )
            .unwrap();
    }

    #[test]
    fn adam_matches_hand_stepped_quadratic() {
        // f(x) = (x - 3)^2, x0 = 0.5
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3f64, 1e-8f64);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let mut p = Tensor::new(vec![1], vec![0.5f64]).unwrap();
        let mut state = AdamState::zeros_like([&p]);
        for t in 1..=3 {
            let g = 2.0 * (x - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);

            let grad = Tensor::new(vec![1], vec![2.0 * (p.data()[0] - 3.0)]).unwrap();
            step_one(&mut state, &mut p, &grad);
            assert!((p.data()[0] - x).abs() < 1e-9);
        }
        assert_eq!(state.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.0]).unwrap();
        let before = p.clone();
        let g = Tensor::new(vec![3], vec![0.7f64, -4.0, 123.0]).unwrap();
        let mut state = AdamState::zeros_like([&p]);
        step_one(&mut state, &mut p, &g);
        for i in 0..3 {
            let delta = before.data()[i] - p.data()[i];
            assert!((delta.abs() - 1e-3).abs() < 1e-6, "{delta}");
            assert_eq!(delta.signum(), g.data()[i].signum());
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters_and_is_deterministic() {
        let mut p = Tensor::new(vec![2], vec![0.25f64, -1.0]).unwrap();
        let mut state = AdamState::zeros_like([&p]);
        step_one(&mut state, &mut p, &Tensor::zeros(vec![2]).unwrap());
        assert_eq!(p.data(), &[0.25, -1.0]);

        let g = Tensor::new(vec![2], vec![0.3f64, 0.1]).unwrap();
        let (mut a, mut b) = (p.clone(), p.clone());
        let (mut sa, mut sb) = (state.clone(), state.clone());
        step_one(&mut sa, &mut a, &g);
        step_one(&mut sb, &mut b, &g);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut state = AdamState::zeros_like([&p]);
        let err = state.update(
            &adam(),
            vec![ParamSlot {
                name: "w",
                value: &mut p,
                grad: None,
                trainable: true,
            }],
        );
        assert!(matches!(err, Err(TrainError::Tensor(TensorError::Contract(_)))));
        assert_eq!(state.step, 0);
        let frozen = state.update(
            &adam(),
            vec![ParamSlot {
                name: "w",
                value: &mut p,
                grad: None,
                trainable: false,
            }],
        );
        assert!(frozen.is_ok());
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { num_classes: 3, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        }
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size, c.num_classes), (1e-3, 20, 32, 2));
    }

    fn toy_batch(cfg: &VitConfig, n: usize, seed: u64) -> (Vec<Tensor<f32>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.image_size;
        (0..n)
            .map(|i| {
                let label = i % 2;
                let shift = if label == 1 { 0.8 } else { -0.8 };
                let img = Tensor::from_fn(vec![3, s, s], |_| shift + rng.gen_range(-0.5f32..0.5)).unwrap();
                (img, label)
            })
            .unzip()
    }

    #[test]
    fn loss_decreases_over_first_steps() {
        let cfg = VitConfig::toy();
        let mut params = VitParams::<f32>::init(&cfg, 3).unwrap();
        let (images, labels) = toy_batch(&cfg, 8, 4);
        let mut state = AdamState::for_params(&params);
        let mut last = f64::INFINITY;
        for _ in 0..5 {
            let out = batch_gradients(&cfg, &params, &images, &labels, |_| true).unwrap();
            assert!(out.loss < last, "{} !< {last}", out.loss);
            last = out.loss;
            adam_step(&mut params, &out.grads, &mut state, &adam(), |_| true).unwrap();
        }
    }

    #[test]
    fn frozen_backbone_changes_only_head() {
        let cfg = VitConfig::toy();
        let train = TrainConfig {
            freeze_backbone: true,
            ..Default::default()
        };
        let before = VitParams::<f32>::init(&cfg, 8).unwrap();
        let mut params = before.clone();
        let (images, labels) = toy_batch(&cfg, 4, 9);
        let mut state = AdamState::for_params(&params);
        for _ in 0..2 {
            let out = batch_gradients(&cfg, &params, &images, &labels, |n| train.is_trainable(n)).unwrap();
            adam_step(&mut params, &out.grads, &mut state, &train.adam(), |n| train.is_trainable(n)).unwrap();
        }
        for ((name, a), (_, b)) in before.named().into_iter().zip(params.named()) {
            if is_head_param(&name) {
                assert_ne!(a, b, "{name} should change");
            } else {
                assert_eq!(a, b, "{name} should be frozen");
            }
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_single_gradients() {
        let cfg = VitConfig::toy();
        let params = VitParams::<f64>::init(&cfg, 1).unwrap();
        let (images, labels) = toy_batch(&cfg, 3, 2);
        let images: Vec<Tensor<f64>> = images.iter().map(|t| t.cast()).collect();
        let all = batch_gradients(&cfg, &params, &images, &labels, |_| true).unwrap();
        let mut tape = Tape::new();
        let w = params.register(&mut tape, |_| true);
        let logits = crate::vit::forward_batch(&mut tape, &w, &cfg, &images).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        assert!((all.loss - tape.value(loss).item()).abs() < 1e-12);
        let expect = w.map(|_, v| tape.grad(*v).cloned().unwrap());
        for ((name, a), (_, b)) in all.grads.named().into_iter().zip(expect.named()) {
            assert!(a.as_ref().unwrap().max_abs_diff(b) < 1e-12, "{name}");
        }
    }
}
