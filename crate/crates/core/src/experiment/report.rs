use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Target;
use crate::error::Result;
use crate::experiment::plot::{self, BarSeries};
use crate::experiment::run::{latest_per_model, load_bundles, ResultsBundle};

/// Files emitted for one target. Every figure has a CSV with the plotted numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: Target,
    pub models: Vec<String>,
    /// (figure, table) per cnn model.
    pub learning_curves: Vec<(PathBuf, PathBuf)>,
    pub accuracy: (PathBuf, PathBuf),
    pub precision_recall: (PathBuf, PathBuf),
    pub mpca: (PathBuf, PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub targets: Vec<TargetReport>,
}

impl ReportIndex {
    pub fn figure_count(&self) -> usize {
        self.targets.iter().map(|t| t.learning_curves.len() + 3).sum()
    }
}

fn write_curves(path: &Path, bundle: &ResultsBundle) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "run_id", "fold", "epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy", "selected"])?;
    for fold in &bundle.folds {
        let Some(c) = &fold.curves else { continue };
        for e in 0..c.epochs() {
            w.write_record([
                bundle.model_name.clone(),
                bundle.run_id.clone(),
                fold.fold.to_string(),
                e.to_string(),
                c.train_loss[e].to_string(),
                c.train_accuracy[e].to_string(),
                c.val_loss[e].to_string(),
                c.val_accuracy[e].to_string(),
                (fold.selected_epoch == Some(e)).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per fold value plus `mean` and `std` rows.
fn write_metric(path: &Path, bundles: &[ResultsBundle], metric: impl Fn(&ResultsBundle) -> (Vec<f64>, f64, f64)) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "run_id", "row", "fold", "value"])?;
    for b in bundles {
        let (folds, mean, std) = metric(b);
        for (f, v) in b.folds.iter().zip(&folds) {
            w.write_record([&b.model_name, &b.run_id, "fold", &f.fold.to_string(), &v.to_string()])?;
        }
        w.write_record([&b.model_name, &b.run_id, "mean", "", &mean.to_string()])?;
        w.write_record([&b.model_name, &b.run_id, "std", "", &std.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_precision_recall(path: &Path, bundles: &[ResultsBundle]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "run_id", "class", "metric", "mean", "std", "undefined_folds"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for b in bundles {
        for c in &b.aggregate.per_class {
            w.write_record([
                b.model_name.clone(),
                b.run_id.clone(),
                c.class.clone(),
                "precision".into(),
                opt(c.precision.map(|s| s.mean)),
                opt(c.precision.map(|s| s.std)),
                c.precision_undefined.to_string(),
            ])?;
            w.write_record([
                b.model_name.clone(),
                b.run_id.clone(),
                c.class.clone(),
                "recall".into(),
                opt(c.recall.map(|s| s.mean)),
                opt(c.recall.map(|s| s.std)),
                String::new(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn file_stem(model: &str) -> String {
    model.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

fn report_target(target: Target, bundles: Vec<ResultsBundle>, dir: &Path) -> Result<TargetReport> {
    std::fs::create_dir_all(dir)?;
    let bundles = latest_per_model(bundles);
    let models: Vec<String> = bundles.iter().map(|b| b.model_name.clone()).collect();

    let mut learning_curves = Vec::new();
    for b in bundles.iter().filter(|b| b.folds.iter().any(|f| f.curves.is_some())) {
        let svg = dir.join(format!("curves_{}.svg", file_stem(&b.model_name)));
        let csv = dir.join(format!("curves_{}.csv", file_stem(&b.model_name)));
        let folds: Vec<_> = b.folds.iter().filter_map(|f| f.curves.as_ref().map(|c| (f.fold, c))).collect();
        plot::learning_curves(&svg, &format!("{} / {}: training and validation", target, b.model_name), &folds)?;
        write_curves(&csv, b)?;
        learning_curves.push((svg, csv));
    }

    let acc_svg = dir.join("accuracy.svg");
    let acc_csv = dir.join("accuracy.csv");
    let series = [BarSeries {
        label: "overall accuracy".into(),
        values: bundles.iter().map(|b| Some((b.aggregate.overall_accuracy.mean, b.aggregate.overall_accuracy.std))).collect(),
    }];
    plot::bar_chart(&acc_svg, &format!("{target}: overall accuracy"), &models, &series, "accuracy")?;
    write_metric(&acc_csv, &bundles, |b| {
        (b.fold_accuracies(), b.aggregate.overall_accuracy.mean, b.aggregate.overall_accuracy.std)
    })?;

    let mpca_svg = dir.join("mpca.svg");
    let mpca_csv = dir.join("mpca.csv");
    let series = [BarSeries {
        label: "mean per-class accuracy".into(),
        values: bundles.iter().map(|b| Some((b.aggregate.mpca.mean, b.aggregate.mpca.std))).collect(),
    }];
    plot::bar_chart(&mpca_svg, &format!("{target}: mean per-class accuracy"), &models, &series, "MPCA")?;
    write_metric(&mpca_csv, &bundles, |b| {
        (b.folds.iter().map(|f| f.report.mpca).collect(), b.aggregate.mpca.mean, b.aggregate.mpca.std)
    })?;

    let pr_svg = dir.join("precision_recall.svg");
    let pr_csv = dir.join("precision_recall.csv");
    let mut classes: Vec<String> = Vec::new();
    for b in &bundles {
        for c in &b.classes {
            if !classes.contains(c) {
                classes.push(c.clone());
            }
        }
    }
    let per_model = |pick: &dyn Fn(&crate::eval::ClassAggregate) -> Option<crate::eval::Summary>| -> Vec<BarSeries> {
        bundles
            .iter()
            .map(|b| {
                let by_class: BTreeMap<&str, _> = b.aggregate.per_class.iter().map(|c| (c.class.as_str(), c)).collect();
                BarSeries {
                    label: b.model_name.clone(),
                    values: classes
                        .iter()
                        .map(|c| by_class.get(c.as_str()).and_then(|a| pick(a)).map(|s| (s.mean, s.std)))
                        .collect(),
                }
            })
            .collect()
    };
    let precision = per_model(&|a| a.precision);
    let recall = per_model(&|a| a.recall);
    plot::precision_recall_panel(&pr_svg, &format!("{target}: per-class precision and recall"), &classes, &precision, &recall)?;
    write_precision_recall(&pr_csv, &bundles)?;

    Ok(TargetReport {
        target,
        models,
        learning_curves,
        accuracy: (acc_svg, acc_csv),
        precision_recall: (pr_svg, pr_csv),
        mpca: (mpca_svg, mpca_csv),
    })
}

/// Figures and tables for every target found under `results_dir`, written to
/// `out_dir/<target>/`, plus `out_dir/report.json` listing them.
pub fn report(results_dir: &Path, out_dir: &Path) -> Result<ReportIndex> {
    let mut by_target: BTreeMap<Target, Vec<ResultsBundle>> = BTreeMap::new();
    for b in load_bundles(results_dir)? {
        by_target.entry(b.target).or_default().push(b);
    }
    let targets = by_target
        .into_iter()
        .map(|(t, bundles)| report_target(t, bundles, &out_dir.join(t.as_str())))
        .collect::<Result<Vec<_>>>()?;
    let index = ReportIndex { targets };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}
