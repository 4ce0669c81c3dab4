//! Fine-tuning a classifier per cross-validation fold.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, replace_head, BackboneSpec, ClassifierModel, FreezePolicy};
use crate::dataset::{Fold, FoldPlan, ImageTensor, LabelledImages};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Inverse-frequency class weights in the loss.
    pub weighted_loss: bool,
    pub freeze: FreezePolicy,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 1e-5,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 100,
            patience: 10,
            weighted_loss: false,
            freeze: FreezePolicy::FineTuneAll,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHyperparams(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return bad("Adam moments need beta in [0, 1) and epsilon > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurves {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

impl LearningCurves {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Mean cross-entropy of `logits` (N, C) against class indices `targets` (N).
///
/// With `class_weights` (C) the mean is weighted by the weight of each sample's class.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor, class_weights: Option<&Tensor>) -> candle_core::Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let nll = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?;
    match class_weights {
        None => nll.mean_all(),
        Some(w) => {
            let w = w.gather(targets, 0)?;
            (nll * &w)?.sum_all()?.broadcast_div(&w.sum_all()?)
        }
    }
}

/// Selected checkpoint together with its training record.
pub struct TrainedModel {
    pub model: ClassifierModel,
    pub fold: usize,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    pub curves: LearningCurves,
    /// Zero-based epoch whose weights were kept.
    pub selected_epoch: usize,
    pub classes: Vec<String>,
}

impl std::fmt::Debug for TrainedModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedModel")
            .field("fold", &self.fold)
            .field("selected_epoch", &self.selected_epoch)
            .field("classes", &self.classes)
            .finish()
    }
}

/// JSON sidecar written next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: BackboneSpec,
    pub hyperparams: Hyperparams,
    pub fold: usize,
    pub seed: u64,
    pub selected_epoch: usize,
    pub classes: Vec<String>,
    pub curves: LearningCurves,
}

fn class_weights(data: &LabelledImages, ids: &[String]) -> Result<Tensor> {
    let c = data.classes().len();
    let mut counts = vec![0f32; c];
    for id in ids {
        counts[data.get(id)?.1] += 1.0;
    }
    let n = ids.len() as f32;
    let w: Vec<f32> = counts.iter().map(|&k| if k > 0.0 { n / (c as f32 * k) } else { 0.0 }).collect();
    Ok(Tensor::from_vec(w, c, &Device::Cpu)?)
}

fn targets(classes: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(classes.iter().map(|&c| c as u32).collect::<Vec<_>>(), classes.len(), &Device::Cpu)?)
}

fn all_finite<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<bool> {
    for t in tensors {
        let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn correct(logits: &Tensor, classes: &[usize]) -> Result<usize> {
    let pred: Vec<u32> = logits.argmax(D::Minus1)?.to_vec1()?;
    Ok(pred.iter().zip(classes).filter(|(p, c)| **p as usize == **c).count())
}

/// Loss and accuracy over `ids` without updating weights.
fn evaluate(
    model: &ClassifierModel,
    data: &LabelledImages,
    ids: &[String],
    batch_size: usize,
    weights: Option<&Tensor>,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut hits = 0;
    for chunk in ids.chunks(batch_size) {
        let (images, classes) = data.batch(chunk)?;
        let logits = model.logits(&model.preprocess(&images)?, false)?;
        let loss: f32 = cross_entropy(&logits, &targets(&classes)?, weights)?.to_scalar()?;
        loss_sum += f64::from(loss) * chunk.len() as f64;
        hits += correct(&logits, &classes)?;
    }
    Ok((loss_sum / ids.len() as f64, hits as f64 / ids.len() as f64))
}

/// Trains on `fold.train`, keeping the weights of the epoch with the lowest validation loss.
pub fn train_fold(
    model: ClassifierModel,
    fold: &Fold,
    data: &LabelledImages,
    hp: &Hyperparams,
    seed: u64,
) -> Result<TrainedModel> {
    hp.validate()?;
    if fold.train.is_empty() {
        return Err(Error::EmptyFold("training"));
    }
    if fold.validation.is_empty() {
        return Err(Error::EmptyFold("validation"));
    }
    if data.classes().len() < 2 {
        return Err(Error::InvalidClassCount(data.classes().len()));
    }
    if model.n_classes() != data.classes().len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}-way head", data.classes().len()),
            got: format!("{}-way head", model.n_classes()),
        });
    }
    let weights = if hp.weighted_loss { Some(class_weights(data, &fold.train)?) } else { None };
    let params = ParamsAdamW {
        lr: hp.learning_rate,
        beta1: hp.beta1,
        beta2: hp.beta2,
        eps: hp.epsilon,
        weight_decay: 0.0,
    };
    let mut opt = AdamW::new(model.trainable_vars(hp.freeze), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.reseed_dropout(seed.wrapping_mul(31).wrapping_add(7));

    let mut curves = LearningCurves::default();
    let mut order = fold.train.clone();
    let mut best: Option<(f64, usize, _)> = None;
    let mut since_best = 0;
    for epoch in 0..hp.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for chunk in order.chunks(hp.batch_size) {
            let (images, classes) = data.batch(chunk)?;
            let logits = model.logits(&model.preprocess(&images)?, true)?;
            let loss = cross_entropy(&logits, &targets(&classes)?, weights.as_ref())?;
            let value = f64::from(loss.to_scalar::<f32>()?);
            if !value.is_finite() {
                return Err(Error::DivergenceDetected { epoch });
            }
            opt.backward_step(&loss)?;
            loss_sum += value * chunk.len() as f64;
            hits += correct(&logits, &classes)?;
        }
        // NaN can vanish through ReLU and pooling yet still poison BN statistics
        let state = model.snapshot()?;
        if !all_finite(state.values())? {
            return Err(Error::DivergenceDetected { epoch });
        }
        curves.train_loss.push(loss_sum / order.len() as f64);
        curves.train_accuracy.push(hits as f64 / order.len() as f64);
        let (val_loss, val_acc) = evaluate(&model, data, &fold.validation, hp.batch_size, weights.as_ref())?;
        curves.val_loss.push(val_loss);
        curves.val_accuracy.push(val_acc);
        log::debug!("fold {} epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_acc:.3}", fold.index, curves.train_loss[epoch]);

        if val_loss.is_finite() && best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, state));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hp.patience {
                break;
            }
        }
    }
    let (_, selected_epoch, snapshot) = best.ok_or(Error::DivergenceDetected { epoch: curves.epochs() - 1 })?;
    model.restore(&snapshot)?;
    Ok(TrainedModel {
        model,
        fold: fold.index,
        seed,
        hyperparams: hp.clone(),
        curves,
        selected_epoch,
        classes: data.classes().to_vec(),
    })
}

impl TrainedModel {
    /// Softmax probabilities, one row per image.
    pub fn predict_proba(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.hyperparams.batch_size.max(1)) {
            let p = self.model.probabilities(&self.model.preprocess(chunk)?)?.to_dtype(DType::F64)?;
            out.extend(p.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Arg-max class label per image.
    pub fn predict(&self, images: &[&ImageTensor]) -> Result<Vec<String>> {
        Ok(self.predict_proba(images)?.iter().map(|row| self.classes[argmax(row)].clone()).collect())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            spec: self.model.spec().clone(),
            hyperparams: self.hyperparams.clone(),
            fold: self.fold,
            seed: self.seed,
            selected_epoch: self.selected_epoch,
            classes: self.classes.clone(),
            curves: self.curves.clone(),
        }
    }

    /// Writes `fold_<i>.safetensors` and its `fold_<i>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save_weights(&dir.join(format!("fold_{}.safetensors", self.fold)))?;
        std::fs::write(dir.join(format!("fold_{}.json", self.fold)), serde_json::to_string_pretty(&self.meta())?)?;
        Ok(())
    }

    pub fn load(dir: &Path, fold: usize) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("fold_{fold}.json")))?)?;
        let mut spec = meta.spec.clone();
        spec.weight_init = crate::backbone::WeightInit::Random;
        let model = replace_head(build_backbone(&spec)?, meta.classes.len())?;
        model.load_weights(&dir.join(format!("fold_{fold}.safetensors")))?;
        let mut model = model;
        model.set_spec(meta.spec.clone());
        Ok(TrainedModel {
            model,
            fold: meta.fold,
            seed: meta.seed,
            hyperparams: meta.hyperparams,
            curves: meta.curves,
            selected_epoch: meta.selected_epoch,
            classes: meta.classes,
        })
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Builds, re-heads and trains one model per fold; fold `i` uses seed `seed + i`.
pub fn run_repetitions(
    spec: &BackboneSpec,
    plan: &FoldPlan,
    data: &LabelledImages,
    hp: &Hyperparams,
    seed: u64,
) -> Result<Vec<TrainedModel>> {
    plan.folds
        .iter()
        .map(|fold| {
            let fold_seed = seed.wrapping_add(fold.index as u64);
            let mut fold_spec = spec.clone();
            fold_spec.seed = fold_seed;
            let model = replace_head(build_backbone(&fold_spec)?, data.classes().len())?;
            train_fold(model, fold, data, hp, fold_seed)
        })
        .collect()
}
