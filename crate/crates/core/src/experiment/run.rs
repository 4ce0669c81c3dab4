use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, extract_features, make_feature_extractor, replace_head, BackboneSpec, WEIGHTS_DIR_ENV};
use crate::bof::{extract_descriptors, run_bof_repetitions, DescriptorSet, DESCRIPTOR_TAG};
use crate::cnn::{train_fold, LearningCurves};
use crate::dataset::{load_manifest, make_folds, split_manifest, FoldPlan, LabelledImages, SplitPlan, Target};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, AggregateReport, MetricsReport};
use crate::experiment::config::{ExperimentConfig, Family, ModelConfig, Overrides};
use crate::hybrid::run_hybrid_repetitions;

pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: String,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    /// Test-set predictions of this fold's model.
    pub predictions: Vec<Prediction>,
    pub report: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<LearningCurves>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_epoch: Option<usize>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<String>,
}

impl Environment {
    fn capture(family: Family) -> Self {
        Environment {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            weights_dir: std::env::var(WEIGHTS_DIR_ENV).ok(),
            descriptor: (family == Family::Bof).then(|| DESCRIPTOR_TAG.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    /// Loading, standardisation, splitting and feature extraction.
    pub prepare_seconds: f64,
    pub total_seconds: f64,
}

/// Everything one run produced; written as `bundle.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub model_name: String,
    pub family: Family,
    pub target: Target,
    pub classes: Vec<String>,
    pub run_id: String,
    pub seed: u64,
    /// The config file exactly as read.
    pub config_echo: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Overrides::is_empty")]
    pub overrides: Overrides,
    pub environment: Environment,
    pub split: SplitPlan,
    pub folds: Vec<FoldResult>,
    pub aggregate: AggregateReport,
    pub timings: Timings,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ResultsBundle {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(BUNDLE_FILE) } else { path.to_path_buf() };
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Recomputes the aggregate from the stored per-fold reports.
    pub fn recompute_aggregate(&self) -> Result<AggregateReport> {
        aggregate(&self.folds.iter().map(|f| f.report.clone()).collect::<Vec<_>>())
    }

    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.report.overall_accuracy).collect()
    }

    /// Majority vote of the fold models per test sample; ties go to the class listed first.
    pub fn consensus(&self) -> BTreeMap<String, String> {
        let mut votes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for fold in &self.folds {
            for p in &fold.predictions {
                let counts = votes.entry(&p.id).or_insert_with(|| vec![0; self.classes.len()]);
                if let Some(c) = self.classes.iter().position(|c| *c == p.predicted) {
                    counts[c] += 1;
                }
            }
        }
        votes
            .into_iter()
            .map(|(id, counts)| {
                let best = (0..counts.len()).fold(0, |b, i| if counts[i] > counts[b] { i } else { b });
                (id.to_string(), self.classes[best].clone())
            })
            .collect()
    }
}

/// Location of a finished run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub bundle: ResultsBundle,
    pub dir: PathBuf,
}

fn run_id(hash: &str) -> String {
    format!("{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"), &hash[..12])
}

fn predictions(ids: &[String], truth: &[String], predicted: Vec<String>) -> Vec<Prediction> {
    ids.iter()
        .zip(truth)
        .zip(predicted)
        .map(|((id, t), p)| Prediction { id: id.clone(), truth: t.clone(), predicted: p })
        .collect()
}

struct Prepared {
    split: SplitPlan,
    plan: FoldPlan,
    data: LabelledImages,
    test_truth: Vec<String>,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let s = &config.settings;
    let manifest = load_manifest(&s.manifest)?;
    let split = split_manifest(&manifest, s.train_ratio, s.target, s.seed)?;
    let plan = make_folds(&split, s.folds, s.seed)?;
    let data = LabelledImages::from_manifest(&manifest, s.target, s.image_size)?;
    let test_truth = split.test.iter().map(|id| split.labels[id].clone()).collect();
    Ok(Prepared { split, plan, data, test_truth })
}

fn fold_result(
    fold: usize,
    seed: u64,
    p: &Prepared,
    predicted: Vec<String>,
    seconds: f64,
) -> Result<FoldResult> {
    let report = evaluate(&predicted, &p.test_truth, p.data.classes())?;
    Ok(FoldResult {
        fold,
        seed,
        predictions: predictions(&p.split.test, &p.test_truth, predicted),
        report,
        curves: None,
        selected_epoch: None,
        train_seconds: seconds,
    })
}

fn run_cnn(
    config: &ExperimentConfig,
    p: &Prepared,
    spec: &BackboneSpec,
    work: &Path,
    save_checkpoints: bool,
    hp: &crate::cnn::Hyperparams,
) -> Result<Vec<FoldResult>> {
    let (test_images, _) = p.data.batch(&p.split.test)?;
    let mut out = Vec::with_capacity(p.plan.folds.len());
    for fold in &p.plan.folds {
        let start = Instant::now();
        let fold_seed = config.settings.seed.wrapping_add(fold.index as u64);
        let fold_spec = BackboneSpec { seed: fold_seed, ..spec.clone() };
        let model = replace_head(build_backbone(&fold_spec)?, p.data.classes().len())?;
        let trained = train_fold(model, fold, &p.data, hp, fold_seed)?;
        let mut predicted = Vec::with_capacity(test_images.len());
        for chunk in test_images.chunks(hp.batch_size) {
            predicted.extend(trained.predict(chunk)?);
        }
        if save_checkpoints {
            trained.save(&work.join("checkpoints"))?;
        }
        let mut r = fold_result(fold.index, fold_seed, p, predicted, start.elapsed().as_secs_f64())?;
        r.curves = Some(trained.curves.clone());
        r.selected_epoch = Some(trained.selected_epoch);
        log::info!("fold {}: test accuracy {:.4}", fold.index, r.report.overall_accuracy);
        out.push(r);
    }
    Ok(out)
}

/// Runs one experiment and writes its bundle under
/// `output_dir/<target>/<model>/<run-id>/`. The directory appears only once complete.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    let s = &config.settings;
    let family = s.model.family();
    let model_name = config.model_name();
    let hash = config.hash();
    let parent = s.output_dir.join(s.target.as_str()).join(&model_name);
    std::fs::create_dir_all(&parent)?;
    let id = run_id(&hash);
    let work = parent.join(format!(".tmp-{id}-{}", std::process::id()));
    std::fs::create_dir_all(&work)?;

    let result = execute(config, family, &model_name, &hash, &id, &work, started);
    let bundle = match result {
        Ok(b) => b,
        Err(e) => {
            let _ = std::fs::remove_dir_all(&work);
            return Err(e);
        }
    };
    let mut dir = parent.join(&bundle.run_id);
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{}.{n}", bundle.run_id));
        n += 1;
    }
    std::fs::rename(&work, &dir)?;
    Ok(RunOutcome { bundle, dir })
}

fn execute(
    config: &ExperimentConfig,
    family: Family,
    model_name: &str,
    hash: &str,
    id: &str,
    work: &Path,
    started: Instant,
) -> Result<ResultsBundle> {
    let s = &config.settings;
    let p = prepare(config)?;
    let mut notes = Vec::new();
    let (folds, prepare_seconds) = match &s.model {
        ModelConfig::Cnn { backbone, hyperparams, save_checkpoints } => {
            let prep = started.elapsed().as_secs_f64();
            (run_cnn(config, &p, &backbone.spec(s.seed), work, *save_checkpoints, hyperparams)?, prep)
        }
        ModelConfig::Hybrid { backbone, head, head_config, batch_size } => {
            let extractor = make_feature_extractor(&backbone.spec(s.seed))?;
            let ids: Vec<String> = p.split.train.iter().chain(&p.split.test).cloned().collect();
            let labels: Vec<String> = ids.iter().map(|id| p.split.labels[id].clone()).collect();
            let (images, _) = p.data.batch(&ids)?;
            let features = extract_features(&extractor, &ids, &labels, &images, *batch_size)?;
            let prep = started.elapsed().as_secs_f64();
            let test = features.select(&p.split.test);
            let classes = p.data.classes();
            let mut out = Vec::new();
            for fold in &p.plan.folds {
                let start = Instant::now();
                let single = FoldPlan { folds: vec![fold.clone()], ..p.plan.clone() };
                let model = run_hybrid_repetitions(&features, classes, &single, *head, head_config, s.seed)?
                    .pop()
                    .expect("one fold");
                let predicted = model.predict_features(&test)?;
                model.save(&work.join(format!("head_fold_{}.json", fold.index)))?;
                out.push(fold_result(fold.index, model.seed, &p, predicted, start.elapsed().as_secs_f64())?);
            }
            (out, prep)
        }
        ModelConfig::Bof { bof } => {
            let ids: Vec<&String> = p.split.train.iter().chain(&p.split.test).collect();
            let mut descriptors: HashMap<String, DescriptorSet> = HashMap::with_capacity(ids.len());
            let mut empty = 0;
            for id in ids {
                let d = extract_descriptors(p.data.get(id)?.0, &bof.detector);
                empty += usize::from(d.is_empty());
                descriptors.insert(id.clone(), d);
            }
            if empty > 0 {
                notes.push(format!("{empty} images produced no keypoints and were encoded as zero histograms"));
            }
            let prep = started.elapsed().as_secs_f64();
            let test_sets: Vec<&DescriptorSet> = p.split.test.iter().map(|id| &descriptors[id]).collect();
            let labels: HashMap<String, String> =
                p.split.labels.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            let mut out = Vec::new();
            for fold in &p.plan.folds {
                let start = Instant::now();
                let single = FoldPlan { folds: vec![fold.clone()], ..p.plan.clone() };
                let model = run_bof_repetitions(&descriptors, &labels, p.data.classes(), &single, bof, s.seed)?
                    .pop()
                    .expect("one fold");
                let predicted = model.predict(&test_sets)?;
                std::fs::write(
                    work.join(format!("bof_fold_{}.json", fold.index)),
                    serde_json::to_string(&model)?,
                )?;
                out.push(fold_result(fold.index, model.seed, &p, predicted, start.elapsed().as_secs_f64())?);
            }
            (out, prep)
        }
    };
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let bundle = ResultsBundle {
        model_name: model_name.to_string(),
        family,
        target: s.target,
        classes: p.data.classes().to_vec(),
        run_id: id.to_string(),
        seed: s.seed,
        config_echo: config.source.clone(),
        config_hash: hash.to_string(),
        overrides: config.overrides.clone(),
        environment: Environment::capture(family),
        split: p.split.clone(),
        folds,
        aggregate: aggregate(&reports)?,
        timings: Timings { prepare_seconds, total_seconds: started.elapsed().as_secs_f64() },
        notes,
    };
    std::fs::write(work.join("config.toml"), &config.source)?;
    p.split.save(&work.join("split.json"))?;
    p.plan.save(&work.join("folds.json"))?;
    bundle.save(&work.join(BUNDLE_FILE))?;
    Ok(bundle)
}

/// Every `bundle.json` below `root`, skipping hidden (in-progress) directories.
pub fn find_bundles(root: &Path) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name();
            if name.to_string_lossy().starts_with('.') {
                continue;
            }
            let path = entry.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else if name == BUNDLE_FILE {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    if root.is_dir() {
        walk(root, &mut out)?;
    }
    Ok(out)
}

pub fn load_bundles(root: &Path) -> Result<Vec<ResultsBundle>> {
    let paths = find_bundles(root)?;
    if paths.is_empty() {
        return Err(Error::NoBundles(root.to_path_buf()));
    }
    paths.iter().map(|p| ResultsBundle::load(p)).collect()
}

/// The most recent run of each model name.
pub fn latest_per_model(bundles: Vec<ResultsBundle>) -> Vec<ResultsBundle> {
    let mut latest: BTreeMap<String, ResultsBundle> = BTreeMap::new();
    for b in bundles {
        match latest.get(&b.model_name) {
            Some(existing) if existing.run_id >= b.run_id => {}
            _ => {
                latest.insert(b.model_name.clone(), b);
            }
        }
    }
    latest.into_values().collect()
}
