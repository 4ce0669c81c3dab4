//! The five convolutional backbones, classification-head surgery and
//! frozen-base feature extraction.

mod alexnet;
mod efficientnet;
mod inception;
pub mod layers;
mod resnet;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ImageTensor;
use crate::error::{Error, Result};
use layers::{is_buffer, Dense, DropoutRng, ParamStore};

/// Environment variable naming the directory that holds pretrained weights.
pub const WEIGHTS_DIR_ENV: &str = "SPOIL_WEIGHTS_DIR";

/// Network body shared by the classifier and the feature extractor.
pub(crate) trait Network: Send + Sync {
    /// Final convolutional feature map, (N, C, h, w).
    fn features(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor>;
    /// Input of the classification head, (N, embed_dim).
    fn embed(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor>;
    /// Globally average-pooled convolutional features, (N, feature_dim).
    fn pooled(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        layers::global_avg_pool(&self.features(x, false)?)
    }
    fn feature_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn head_name(&self) -> &'static str;
    fn min_input(&self) -> usize {
        64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    AlexNet,
    ResNet18,
    ResNet50,
    InceptionV3,
    EfficientNetB0,
}

/// Published model statistics: learnable parameters (millions), layers, learnable layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub learnable_params_m: f64,
    pub layers: usize,
    pub learnable_layers: usize,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::AlexNet,
        Architecture::ResNet18,
        Architecture::ResNet50,
        Architecture::InceptionV3,
        Architecture::EfficientNetB0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::AlexNet => "alexnet",
            Architecture::ResNet18 => "resnet18",
            Architecture::ResNet50 => "resnet50",
            Architecture::InceptionV3 => "inception_v3",
            Architecture::EfficientNetB0 => "efficientnet_b0",
        }
    }

    pub fn expected_stats(self) -> TableStats {
        let (p, l, ll) = match self {
            Architecture::AlexNet => (58.5, 25, 8),
            Architecture::ResNet18 => (11.1, 71, 18),
            Architecture::ResNet50 => (23.5, 177, 50),
            Architecture::InceptionV3 => (21.8, 315, 48),
            Architecture::EfficientNetB0 => (4.0, 290, 82),
        };
        TableStats { learnable_params_m: p, layers: l, learnable_layers: ll }
    }

    /// Per-channel (mean, std) the pretrained weights were trained with.
    pub fn normalisation(self) -> ([f32; 3], [f32; 3]) {
        match self {
            Architecture::InceptionV3 => ([0.5; 3], [0.5; 3]),
            _ => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        }
    }

    /// Width of the globally pooled convolutional features.
    pub fn feature_dim(self) -> usize {
        match self {
            Architecture::AlexNet => 256,
            Architecture::ResNet18 => 512,
            Architecture::ResNet50 | Architecture::InceptionV3 => 2048,
            Architecture::EfficientNetB0 => 1280,
        }
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.name().to_string()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        Architecture::ALL
            .into_iter()
            .find(|a| a.name().replace('_', "") == key)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    #[default]
    Pretrained,
    /// Trained from scratch ("w0").
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub arch: Architecture,
    pub weight_init: WeightInit,
    /// Seeds random initialisation, the replacement head and dropout masks.
    pub seed: u64,
    /// Overrides the weights directory otherwise read from `SPOIL_WEIGHTS_DIR`.
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
}

impl BackboneSpec {
    pub fn new(arch: Architecture, weight_init: WeightInit, seed: u64) -> Self {
        BackboneSpec { arch, weight_init, seed, weights_dir: None }
    }

    pub fn expected_stats(&self) -> TableStats {
        self.arch.expected_stats()
    }

    pub fn label(&self) -> String {
        match self.weight_init {
            WeightInit::Pretrained => self.arch.name().to_string(),
            WeightInit::Random => format!("{}_w0", self.arch.name()),
        }
    }

    /// Where pretrained weights for this architecture are expected.
    pub fn weights_path(&self) -> Option<PathBuf> {
        let dir = self.weights_dir.clone().or_else(|| std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from))?;
        Some(dir.join(format!("{}.safetensors", self.arch.name())))
    }
}

/// Which variables the optimiser updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode", content = "fraction")]
pub enum FreezePolicy {
    /// Base and head are both trained.
    #[default]
    FineTuneAll,
    /// The first fraction (by parameter tensor, in network order) of the base stays frozen.
    FreezeFirst(f64),
    HeadOnly,
}

/// Convolutional base, pooling and a fully connected softmax head.
pub struct ClassifierModel {
    spec: BackboneSpec,
    store: Arc<ParamStore>,
    net: Box<dyn Network>,
    head: Dense,
    dropout_rng: DropoutRng,
}

impl fmt::Debug for ClassifierModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassifierModel")
            .field("spec", &self.spec)
            .field("n_classes", &self.n_classes())
            .finish()
    }
}

fn build_network(arch: Architecture, store: &Arc<ParamStore>, dropout: DropoutRng) -> candle_core::Result<Box<dyn Network>> {
    let vb = store.builder();
    Ok(match arch {
        Architecture::AlexNet => Box::new(alexnet::AlexNet::new(vb, dropout)?),
        Architecture::ResNet18 => Box::new(resnet::ResNet::new(resnet::Depth::R18, vb)?),
        Architecture::ResNet50 => Box::new(resnet::ResNet::new(resnet::Depth::R50, vb)?),
        Architecture::InceptionV3 => Box::new(inception::InceptionV3::new(vb, dropout)?),
        Architecture::EfficientNetB0 => Box::new(efficientnet::EfficientNetB0::new(vb, dropout)?),
    })
}

fn load_pretrained(spec: &BackboneSpec, store: &ParamStore) -> Result<()> {
    let unavailable = |reason: String| Error::WeightsUnavailable { arch: spec.arch.name().into(), reason };
    let path = spec
        .weights_path()
        .ok_or_else(|| unavailable(format!("no weights directory configured (set {WEIGHTS_DIR_ENV})")))?;
    if !path.is_file() {
        return Err(unavailable(format!("{} not found", path.display())));
    }
    let tensors = candle_core::safetensors::load(&path, &Device::Cpu).map_err(|e| unavailable(e.to_string()))?;
    for name in store.names() {
        let var = store.var(&name).expect("registered variable");
        let t = tensors.get(&name).ok_or_else(|| unavailable(format!("{} lacks tensor `{name}`", path.display())))?;
        if t.dims() != var.dims() {
            return Err(unavailable(format!("tensor `{name}` has shape {:?}, expected {:?}", t.dims(), var.dims())));
        }
        var.set(&t.to_dtype(DType::F32)?)?;
    }
    Ok(())
}

/// Builds an architecture with its original 1000-way ImageNet head.
pub fn build_backbone(spec: &BackboneSpec) -> Result<ClassifierModel> {
    let store = ParamStore::new(spec.seed);
    let dropout_rng: DropoutRng = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(spec.seed ^ 0xD20F)));
    let net = build_network(spec.arch, &store, Arc::clone(&dropout_rng))?;
    let head = Dense::new(net.embed_dim(), 1000, store.builder().pp(net.head_name()))?;
    if spec.weight_init == WeightInit::Pretrained {
        load_pretrained(spec, &store)?;
    }
    Ok(ClassifierModel { spec: spec.clone(), store, net, head, dropout_rng })
}

/// Swaps the final fully connected layer for a freshly initialised `n_classes`-way one.
pub fn replace_head(model: ClassifierModel, n_classes: usize) -> Result<ClassifierModel> {
    if n_classes < 2 {
        return Err(Error::InvalidClassCount(n_classes));
    }
    let ClassifierModel { spec, store, net, dropout_rng, .. } = model;
    let name = net.head_name();
    store.remove_prefix(name);
    store.reseed(spec.seed.wrapping_add(n_classes as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let head = Dense::new(net.embed_dim(), n_classes, store.builder().pp(name))?;
    Ok(ClassifierModel { spec, store, net, head, dropout_rng })
}

impl ClassifierModel {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub(crate) fn set_spec(&mut self, spec: BackboneSpec) {
        self.spec = spec;
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn min_input(&self) -> usize {
        self.net.min_input()
    }

    fn head_prefix(&self) -> String {
        format!("{}.", self.net.head_name())
    }

    /// Learnable variable names in network order (running statistics excluded).
    pub fn learnable_names(&self) -> Vec<String> {
        self.store.names().into_iter().filter(|n| !is_buffer(n)).collect()
    }

    fn count(&self, include_head: bool) -> usize {
        let head = self.head_prefix();
        self.learnable_names()
            .iter()
            .filter(|n| include_head || !n.starts_with(&head))
            .map(|n| self.store.var(n).map(|v| v.elem_count()).unwrap_or(0))
            .sum()
    }

    pub fn learnable_params(&self) -> usize {
        self.count(true)
    }

    /// Learnable parameters without the final classification layer.
    pub fn base_learnable_params(&self) -> usize {
        self.count(false)
    }

    pub fn trainable_vars(&self, policy: FreezePolicy) -> Vec<Var> {
        let head = self.head_prefix();
        let names = self.learnable_names();
        let base: Vec<&String> = names.iter().filter(|n| !n.starts_with(&head)).collect();
        let frozen = match policy {
            FreezePolicy::FineTuneAll => 0,
            FreezePolicy::HeadOnly => base.len(),
            FreezePolicy::FreezeFirst(f) => ((base.len() as f64) * f.clamp(0.0, 1.0)).round() as usize,
        };
        let frozen: std::collections::HashSet<&String> = base.into_iter().take(frozen).collect();
        names
            .iter()
            .filter(|n| !frozen.contains(n))
            .filter_map(|n| self.store.var(n))
            .collect()
    }

    /// Stacks standardised images into a normalised (N, 3, H, W) batch.
    pub fn preprocess(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        preprocess(self.spec.arch, self.net.min_input(), images)
    }

    pub fn logits(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.head.forward(&self.net.embed(x, train)?)?)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax_last_dim(&self.logits(x, false)?)?)
    }

    pub(crate) fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.pooled(x)?)
    }

    pub fn reseed_dropout(&self, seed: u64) {
        *self.dropout_rng.lock().unwrap() = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Deep copy of every variable, running statistics included.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        let mut out = HashMap::new();
        for name in self.store.names() {
            let var = self.store.var(&name).expect("registered variable");
            out.insert(name, var.as_tensor().copy()?);
        }
        Ok(out)
    }

    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        for (name, t) in snapshot {
            if let Some(var) = self.store.var(name) {
                var.set(t)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the base (non-head) variables in network order.
    pub fn base_fingerprint(&self) -> String {
        let head = self.head_prefix();
        let mut hasher = Sha256::new();
        for name in self.store.names().iter().filter(|n| !n.starts_with(&head)) {
            let var = self.store.var(name).expect("registered variable");
            hasher.update(name.as_bytes());
            let values: Vec<f32> = var.as_tensor().flatten_all().and_then(|t| t.to_vec1()).unwrap_or_default();
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        Ok(self.store.varmap().save(path)?)
    }

    pub fn load_weights(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        for name in self.store.names() {
            let t = tensors.get(&name).ok_or_else(|| Error::WeightsUnavailable {
                arch: self.spec.arch.name().into(),
                reason: format!("checkpoint lacks `{name}`"),
            })?;
            self.store.var(&name).expect("registered variable").set(t)?;
        }
        Ok(())
    }
}

pub(crate) fn preprocess(arch: Architecture, min_input: usize, images: &[&ImageTensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::ShapeMismatch { expected: "at least one image".into(), got: "empty batch".into() });
    };
    let size = first.size;
    if size < min_input {
        return Err(Error::ShapeMismatch {
            expected: format!("side >= {min_input} for {arch}"),
            got: format!("{size}"),
        });
    }
    let (mean, std) = arch.normalisation();
    let plane = size * size;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.size != size || img.data.len() != 3 * plane {
            return Err(Error::ShapeMismatch {
                expected: format!("3x{size}x{size}"),
                got: format!("3x{}x{}", img.size, img.size),
            });
        }
        for c in 0..3 {
            data.extend(img.plane(c).iter().map(|v| (v - mean[c]) / std[c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), &Device::Cpu)?)
}

/// Row-major N × D feature vectors with aligned ids and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub dim: usize,
    /// Fingerprint of the extractor that produced the rows, when known.
    #[serde(default)]
    pub extractor: Option<String>,
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        FeatureMatrix { dim, extractor: None, ids: Vec::new(), labels: Vec::new(), data: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<String>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        if labels.len() != rows.len() {
            return Err(Error::LengthMismatch(rows.len(), labels.len()));
        }
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        Ok(FeatureMatrix { dim, extractor: None, ids, labels, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim.max(1)).take(self.len())
    }

    /// Rows whose ids appear in `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> FeatureMatrix {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut out = FeatureMatrix::new(self.dim);
        out.extractor = self.extractor.clone();
        for id in ids {
            if let Some(&i) = index.get(id.as_str()) {
                out.ids.push(id.clone());
                out.labels.push(self.labels[i].clone());
                out.data.extend_from_slice(self.row(i));
            }
        }
        out
    }
}

/// Frozen convolutional base followed by global average pooling.
pub struct FeatureExtractor {
    model: ClassifierModel,
    fingerprint: String,
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureExtractor").field("spec", self.spec()).field("dim", &self.dim()).finish()
    }
}

pub fn make_feature_extractor(spec: &BackboneSpec) -> Result<FeatureExtractor> {
    let model = build_backbone(spec)?;
    let fingerprint = model.base_fingerprint();
    Ok(FeatureExtractor { model, fingerprint })
}

impl FeatureExtractor {
    pub fn spec(&self) -> &BackboneSpec {
        self.model.spec()
    }

    pub fn dim(&self) -> usize {
        self.model.feature_dim()
    }

    /// Hash of the frozen weights, recorded with every trained head.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Pooled features for a batch of standardised images.
    pub fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.model.preprocess(images)?;
        let pooled = self.model.pooled(&x)?;
        let rows: Vec<Vec<f32>> = pooled.to_vec2()?;
        Ok(rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect())
    }
}

/// Runs the extractor over `images` in batches of `batch_size`.
pub fn extract_features(
    extractor: &FeatureExtractor,
    ids: &[String],
    labels: &[String],
    images: &[&ImageTensor],
    batch_size: usize,
) -> Result<FeatureMatrix> {
    if ids.len() != images.len() || labels.len() != images.len() {
        return Err(Error::LengthMismatch(images.len(), ids.len().min(labels.len())));
    }
    let mut out = FeatureMatrix::new(extractor.dim());
    out.extractor = Some(extractor.fingerprint().to_string());
    if let Some(first) = images.first() {
        if let Some(bad) = images.iter().find(|i| i.size != first.size) {
            return Err(Error::ShapeMismatch {
                expected: format!("3x{0}x{0}", first.size),
                got: format!("3x{0}x{0}", bad.size),
            });
        }
    }
    for (chunk_idx, chunk) in images.chunks(batch_size.max(1)).enumerate() {
        for (offset, row) in extractor.embed(chunk)?.into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Candle(candle_core::Error::Msg("non-finite feature value".into())));
            }
            let i = chunk_idx * batch_size.max(1) + offset;
            out.ids.push(ids[i].clone());
            out.labels.push(labels[i].clone());
            out.data.extend(row);
        }
    }
    Ok(out)
}
