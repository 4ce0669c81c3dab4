use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Target;
use crate::error::{Error, Result};
use crate::eval::{format_mean_std, mean_std, significance_vs_best, t_test_with, Summary, TTestKind, TTestResult};
use crate::experiment::config::Family;
use crate::experiment::plot;
use crate::experiment::run::{latest_per_model, load_bundles, ResultsBundle};

/// Reference model for the significance tests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Baseline {
    #[default]
    Best,
    Model(String),
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(if s == "best" { Baseline::Best } else { Baseline::Model(s.to_string()) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub family: Family,
    pub run_id: String,
    pub fold_accuracies: Vec<f64>,
    pub accuracy: Summary,
    pub mpca: Summary,
    /// e.g. `99.28 (± 0.35)%`.
    pub accuracy_text: String,
    pub mpca_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub model: String,
    pub result: TTestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub target: Target,
    pub kind: TTestKind,
    /// Highest mean overall accuracy.
    pub best: String,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
    /// Every other model against the baseline.
    pub tests: Vec<PairTest>,
    /// Model order of `p_values`.
    pub models: Vec<String>,
    /// Two-tailed p-value of every model pair; the diagonal is 1.
    pub p_values: Vec<Vec<f64>>,
}

/// Compares the latest run of each model found in `bundles`.
pub fn compare_bundles(bundles: Vec<ResultsBundle>, baseline: &Baseline, kind: TTestKind) -> Result<Comparison> {
    let mut targets: Vec<String> = bundles.iter().map(|b| b.target.as_str().to_string()).collect();
    targets.sort();
    targets.dedup();
    if targets.len() > 1 {
        return Err(Error::MixedTargets(targets));
    }
    let bundles = latest_per_model(bundles);
    if bundles.len() < 2 {
        return Err(Error::TooFewRuns(bundles.len()));
    }
    let target = bundles[0].target;
    let samples: Vec<(String, Vec<f64>)> =
        bundles.iter().map(|b| (b.model_name.clone(), b.fold_accuracies())).collect();
    let best = significance_vs_best(&samples, kind)?.best;
    let baseline = match baseline {
        Baseline::Best => best.clone(),
        Baseline::Model(m) => {
            if !samples.iter().any(|(n, _)| n == m) {
                return Err(Error::config("baseline", format!("no bundle for model `{m}`")));
            }
            m.clone()
        }
    };
    let base_values = &samples.iter().find(|(n, _)| *n == baseline).expect("checked").1;
    let mut tests = Vec::new();
    for (name, values) in &samples {
        if *name != baseline {
            tests.push(PairTest { model: name.clone(), result: t_test_with(base_values, values, kind)? });
        }
    }
    let n = samples.len();
    let mut p_values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let p = t_test_with(&samples[i].1, &samples[j].1, kind)?.p;
            p_values[i][j] = p;
            p_values[j][i] = p;
        }
    }
    let rows = bundles
        .iter()
        .map(|b| {
            let accuracy = mean_std(&b.fold_accuracies());
            let mpca = mean_std(&b.folds.iter().map(|f| f.report.mpca).collect::<Vec<_>>());
            ComparisonRow {
                model: b.model_name.clone(),
                family: b.family,
                run_id: b.run_id.clone(),
                fold_accuracies: b.fold_accuracies(),
                accuracy,
                mpca,
                accuracy_text: format_mean_std(&accuracy),
                mpca_text: format_mean_std(&mpca),
            }
        })
        .collect();
    Ok(Comparison {
        target,
        kind,
        best,
        baseline,
        rows,
        tests,
        models: samples.into_iter().map(|(n, _)| n).collect(),
        p_values,
    })
}

pub fn compare(results_dir: &Path, baseline: &Baseline, kind: TTestKind) -> Result<Comparison> {
    compare_bundles(load_bundles(results_dir)?, baseline, kind)
}

impl Comparison {
    /// Plain-text table, one row per model.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:<20}  {:<20}  {}\n", "model", "accuracy", "mpca", "p vs baseline");
        for r in &self.rows {
            let p = if r.model == self.baseline {
                "baseline".to_string()
            } else {
                let t = &self.tests.iter().find(|t| t.model == r.model).expect("tested").result;
                format!("{:.4}{}", t.p, if t.significant { " *" } else { "" })
            };
            out.push_str(&format!("{:<width$}  {:<20}  {:<20}  {}\n", r.model, r.accuracy_text, r.mpca_text, p));
        }
        out
    }

    /// Writes `comparison.json`, `comparison.csv`, `pvalues.csv` and `pvalues.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join("comparison.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?)?;

        let csv_path = dir.join("comparison.csv");
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "model", "family", "run_id", "accuracy_mean", "accuracy_std", "mpca_mean", "mpca_std", "accuracy", "t", "df", "p",
            "significant",
        ])?;
        for r in &self.rows {
            let test = self.tests.iter().find(|t| t.model == r.model).map(|t| t.result);
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                r.model.clone(),
                r.family.as_str().to_string(),
                r.run_id.clone(),
                r.accuracy.mean.to_string(),
                r.accuracy.std.to_string(),
                r.mpca.mean.to_string(),
                r.mpca.std.to_string(),
                r.accuracy_text.clone(),
                opt(test.map(|t| t.t)),
                opt(test.map(|t| t.df)),
                opt(test.map(|t| t.p)),
                test.map(|t| t.significant.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;

        let p_csv = dir.join("pvalues.csv");
        let mut w = csv::Writer::from_path(&p_csv)?;
        let mut header = vec!["model".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.models.iter().zip(&self.p_values) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;

        let svg = dir.join("pvalues.svg");
        plot::heatmap(&svg, &format!("{}: p-values (t-test)", self.target), &self.models, &self.p_values)?;
        Ok(vec![json, csv_path, p_csv, svg])
    }
}
