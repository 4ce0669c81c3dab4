//! Deep hybrid models: classical heads trained on frozen-backbone features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureExtractor, FeatureMatrix};
use crate::classical::{BaggedTrees, DecisionTree, Knn, Standardizer, SvmConfig, Svm, TreeConfig};
use crate::dataset::{FoldPlan, ImageTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HybridHeadKind {
    Knn,
    DecisionTree,
    Svm,
    Ensemble,
}

impl HybridHeadKind {
    pub const ALL: [HybridHeadKind; 4] =
        [HybridHeadKind::Knn, HybridHeadKind::DecisionTree, HybridHeadKind::Svm, HybridHeadKind::Ensemble];

    pub fn as_str(self) -> &'static str {
        match self {
            HybridHeadKind::Knn => "knn",
            HybridHeadKind::DecisionTree => "decision_tree",
            HybridHeadKind::Svm => "svm",
            HybridHeadKind::Ensemble => "ensemble",
        }
    }

    /// Heads that compare raw distances and need z-scored inputs.
    fn scale_sensitive(self) -> bool {
        matches!(self, HybridHeadKind::Knn | HybridHeadKind::Svm)
    }
}

impl fmt::Display for HybridHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HybridHeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_lowercase().replace(['-', ' '], "_");
        match key.as_str() {
            "dt" | "tree" => return Ok(HybridHeadKind::DecisionTree),
            "bagging" | "bagged_trees" => return Ok(HybridHeadKind::Ensemble),
            _ => {}
        }
        HybridHeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == key)
            .ok_or_else(|| Error::config("head", format!("unknown hybrid head `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub knn_k: usize,
    pub tree: TreeConfig,
    pub svm: SvmConfig,
    pub ensemble_trees: usize,
    /// Z-score features before kNN and SVM heads.
    pub standardise: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { knn_k: 5, tree: TreeConfig::default(), svm: SvmConfig::default(), ensemble_trees: 100, standardise: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainedHead {
    Knn(Knn),
    DecisionTree(DecisionTree),
    Svm(Svm),
    Ensemble(BaggedTrees),
}

impl TrainedHead {
    fn predict_one(&self, q: &[f64]) -> usize {
        match self {
            TrainedHead::Knn(m) => m.predict_one(q),
            TrainedHead::DecisionTree(m) => m.predict_one(q),
            TrainedHead::Svm(m) => m.predict_one(q),
            TrainedHead::Ensemble(m) => m.predict_one(q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub kind: HybridHeadKind,
    /// Fingerprint of the frozen extractor the head was trained on.
    pub extractor: Option<String>,
    pub dim: usize,
    pub classes: Vec<String>,
    pub fold: usize,
    pub seed: u64,
    pub config: HeadConfig,
    scaler: Option<Standardizer>,
    head: TrainedHead,
}

/// Fits a head on `features`, whose labels must belong to `classes`.
pub fn train_hybrid(
    features: &FeatureMatrix,
    classes: &[String],
    kind: HybridHeadKind,
    config: &HeadConfig,
    seed: u64,
) -> Result<HybridModel> {
    let n = features.len();
    if n < classes.len() || n == 0 {
        return Err(Error::InsufficientSamples { samples: n, classes: classes.len() });
    }
    let y = features
        .labels
        .iter()
        .map(|l| {
            classes.iter().position(|c| c == l).ok_or_else(|| Error::UnknownLabel {
                target: "class vocabulary".into(),
                value: l.clone(),
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut distinct = y.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::SingleClassInput);
    }
    let dim = features.dim;
    let scaler = if kind.scale_sensitive() {
        let s = Standardizer::fit(&features.data, dim)?;
        config.standardise.then_some(s)
    } else {
        None
    };
    let x = match &scaler {
        Some(s) => s.transform(&features.data),
        None => features.data.clone(),
    };
    let c = classes.len();
    let head = match kind {
        HybridHeadKind::Knn => TrainedHead::Knn(Knn::fit(&x, dim, &y, c, config.knn_k)?),
        HybridHeadKind::DecisionTree => TrainedHead::DecisionTree(DecisionTree::fit(&x, dim, &y, c, &config.tree, seed)?),
        HybridHeadKind::Svm => TrainedHead::Svm(Svm::fit(&x, dim, &y, c, &config.svm, seed)?),
        HybridHeadKind::Ensemble => {
            TrainedHead::Ensemble(BaggedTrees::fit(&x, dim, &y, c, config.ensemble_trees, &config.tree, seed)?)
        }
    };
    Ok(HybridModel {
        kind,
        extractor: features.extractor.clone(),
        dim,
        classes: classes.to_vec(),
        fold: 0,
        seed,
        config: config.clone(),
        scaler,
        head,
    })
}

impl HybridModel {
    pub fn predict_row(&self, q: &[f64]) -> Result<String> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: q.len() });
        }
        let c = match &self.scaler {
            Some(s) => self.head.predict_one(&s.transform_row(q)),
            None => self.head.predict_one(q),
        };
        Ok(self.classes[c].clone())
    }

    fn check_extractor(&self, got: Option<&str>) -> Result<()> {
        match (&self.extractor, got) {
            (Some(expected), Some(got)) if expected != got => {
                Err(Error::StaleHead { expected: expected.clone(), got: got.to_string() })
            }
            _ => Ok(()),
        }
    }

    /// Labels for pre-extracted features.
    pub fn predict_features(&self, features: &FeatureMatrix) -> Result<Vec<String>> {
        if features.dim != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: features.dim });
        }
        self.check_extractor(features.extractor.as_deref())?;
        features.rows().map(|r| self.predict_row(r)).collect()
    }

    /// Extracts features in-line, then classifies.
    pub fn predict_images(&self, extractor: &FeatureExtractor, images: &[&ImageTensor]) -> Result<Vec<String>> {
        self.check_extractor(Some(extractor.fingerprint()))?;
        extractor.embed(images)?.iter().map(|r| self.predict_row(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    /// Loads a head, refusing it if `extractor` does not match the one it was trained on.
    pub fn load(path: &Path, extractor: Option<&str>) -> Result<Self> {
        let model: HybridModel = serde_json::from_slice(&std::fs::read(path)?)?;
        model.check_extractor(extractor)?;
        Ok(model)
    }
}

/// One head per fold, trained on that fold's training ids; fold `i` uses seed `seed + i`.
pub fn run_hybrid_repetitions(
    features: &FeatureMatrix,
    classes: &[String],
    plan: &FoldPlan,
    kind: HybridHeadKind,
    config: &HeadConfig,
    seed: u64,
) -> Result<Vec<HybridModel>> {
    plan.folds
        .iter()
        .map(|fold| {
            let fold_seed = seed.wrapping_add(fold.index as u64);
            let mut model = train_hybrid(&features.select(&fold.train), classes, kind, config, fold_seed)?;
            model.fold = fold.index;
            Ok(model)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n_per: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, centre) in [("a", -4.0), ("b", 4.0)] {
            for _ in 0..n_per {
                rows.push((0..8).map(|_| centre + noise.sample(&mut rng)).collect());
                labels.push(c.to_string());
            }
        }
        FeatureMatrix::from_rows(rows, labels).unwrap()
    }

    fn classes() -> Vec<String> {
        vec!["a".into(), "b".into()]
    }

    #[test]
    fn every_head_separates_blobs() {
        let train = blobs(20, 1);
        let test = blobs(15, 2);
        for kind in HybridHeadKind::ALL {
            let m = train_hybrid(&train, &classes(), kind, &HeadConfig::default(), 0).unwrap();
            assert_eq!(m.predict_features(&test).unwrap(), test.labels, "{kind}");
        }
    }

    #[test]
    fn insufficient_samples_and_dimension_checks() {
        let few = FeatureMatrix::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]], vec!["a".into(), "b".into(), "c".into()])
            .unwrap();
        let four: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(
            train_hybrid(&few, &four, HybridHeadKind::Knn, &HeadConfig::default(), 0),
            Err(Error::InsufficientSamples { samples: 3, classes: 4 })
        ));
        let m = train_hybrid(&blobs(5, 0), &classes(), HybridHeadKind::Knn, &HeadConfig::default(), 0).unwrap();
        assert!(matches!(m.predict_row(&[0.0; 3]), Err(Error::DimensionMismatch { expected: 8, got: 3 })));
    }

    #[test]
    fn constant_features_are_degenerate_for_distance_heads() {
        let flat = FeatureMatrix::from_rows(vec![vec![1.0; 4]; 4], vec!["a".into(), "b".into(), "a".into(), "b".into()]).unwrap();
        for kind in [HybridHeadKind::Knn, HybridHeadKind::Svm] {
            assert!(matches!(train_hybrid(&flat, &classes(), kind, &HeadConfig::default(), 0), Err(Error::DegenerateFeatures)));
        }
        assert!(train_hybrid(&flat, &classes(), HybridHeadKind::DecisionTree, &HeadConfig::default(), 0).is_ok());
    }

    #[test]
    fn stale_extractor_is_detected() {
        let mut train = blobs(5, 3);
        train.extractor = Some("abc".into());
        let m = train_hybrid(&train, &classes(), HybridHeadKind::Svm, &HeadConfig::default(), 0).unwrap();
        let mut other = blobs(2, 4);
        other.extractor = Some("def".into());
        assert!(matches!(m.predict_features(&other), Err(Error::StaleHead { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.json");
        m.save(&path).unwrap();
        assert_eq!(HybridModel::load(&path, Some("abc")).unwrap(), m);
        assert!(HybridModel::load(&path, Some("zzz")).is_err());
    }

    #[test]
    fn knn_is_scale_invariant() {
        let train = blobs(10, 5);
        let test = blobs(10, 6);
        let cfg = HeadConfig { standardise: false, ..Default::default() };
        let m = train_hybrid(&train, &classes(), HybridHeadKind::Knn, &cfg, 0).unwrap();
        let scale = |f: &FeatureMatrix| FeatureMatrix { data: f.data.iter().map(|v| v * 7.5).collect(), ..f.clone() };
        let ms = train_hybrid(&scale(&train), &classes(), HybridHeadKind::Knn, &cfg, 0).unwrap();
        assert_eq!(m.predict_features(&test).unwrap(), ms.predict_features(&scale(&test)).unwrap());
    }

    #[test]
    fn head_names_parse() {
        for k in HybridHeadKind::ALL {
            assert_eq!(k.as_str().parse::<HybridHeadKind>().unwrap(), k);
        }
        assert_eq!("DT".parse::<HybridHeadKind>().unwrap(), HybridHeadKind::DecisionTree);
    }
}
