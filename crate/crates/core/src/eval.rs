//! Confusion-matrix metrics, fold aggregation and two-sample t-tests.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Counts indexed `[true][predicted]` over a fixed class vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

/// One-vs-rest reduction of a confusion matrix for one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(predicted: &[String], truth: &[String], vocabulary: &[String]) -> Result<ConfusionMatrix> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch(predicted.len(), truth.len()));
    }
    let index: HashMap<&str, usize> = vocabulary.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let lookup = |label: &String, role: &str| {
        index.get(label.as_str()).copied().ok_or_else(|| Error::UnknownLabel {
            target: role.to_string(),
            value: label.clone(),
        })
    };
    let c = vocabulary.len();
    let mut counts = vec![vec![0u64; c]; c];
    for (p, t) in predicted.iter().zip(truth) {
        counts[lookup(t, "true label")?][lookup(p, "prediction")?] += 1;
    }
    Ok(ConfusionMatrix { classes: vocabulary.to_vec(), counts })
}

impl ConfusionMatrix {
    pub fn from_counts(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = classes.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::ShapeMismatch { expected: format!("{c}x{c}"), got: format!("{} rows", counts.len()) });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn class_index(&self, class: &str) -> Result<usize> {
        self.classes.iter().position(|c| c == class).ok_or_else(|| Error::UnknownLabel {
            target: "vocabulary".into(),
            value: class.to_string(),
        })
    }

    /// Number of samples whose true class is `i`.
    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn predicted_count(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    pub fn one_vs_rest(&self, i: usize) -> BinaryCounts {
        let tp = self.counts[i][i];
        let fn_ = self.support(i) - tp;
        let fp = self.predicted_count(i) - tp;
        let tn = self.total() - tp - fn_ - fp;
        BinaryCounts { tp, fp, fn_, tn }
    }
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// How "per-class accuracy" is read inside MPCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerClassAccuracy {
    /// Diagonal over true-class total.
    #[default]
    Recall,
    /// (TP + TN) / total of the one-vs-rest reduction.
    OneVsRest,
}

/// Mean per-class accuracy, using per-class recall.
pub fn mpca(cm: &ConfusionMatrix) -> Result<f64> {
    mpca_with(cm, PerClassAccuracy::Recall)
}

pub fn mpca_with(cm: &ConfusionMatrix, mode: PerClassAccuracy) -> Result<f64> {
    if cm.classes.is_empty() || cm.total() == 0 {
        return Err(Error::EmptyMatrix);
    }
    let mut sum = 0.0;
    for i in 0..cm.classes.len() {
        let support = cm.support(i);
        if support == 0 {
            return Err(Error::AbsentClass(cm.classes[i].clone()));
        }
        sum += match mode {
            PerClassAccuracy::Recall => cm.counts[i][i] as f64 / support as f64,
            PerClassAccuracy::OneVsRest => {
                let b = cm.one_vs_rest(i);
                (b.tp + b.tn) as f64 / cm.total() as f64
            }
        };
    }
    Ok(sum / cm.classes.len() as f64)
}

/// `None` marks an undefined ratio (zero denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn precision_recall(cm: &ConfusionMatrix, class: &str) -> Result<PrecisionRecall> {
    let b = cm.one_vs_rest(cm.class_index(class)?);
    Ok(PrecisionRecall { precision: ratio(b.tp, b.tp + b.fp), recall: ratio(b.tp, b.tp + b.fn_) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    /// Mean recall over classes present in the evaluated set.
    pub mpca: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

pub fn metrics_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let overall_accuracy = overall_accuracy(cm)?;
    let per_class: Vec<ClassMetrics> = cm
        .classes
        .iter()
        .enumerate()
        .map(|(i, class)| {
            let b = cm.one_vs_rest(i);
            ClassMetrics {
                class: class.clone(),
                support: cm.support(i),
                precision: ratio(b.tp, b.tp + b.fp),
                recall: ratio(b.tp, b.tp + b.fn_),
            }
        })
        .collect();
    let recalls: Vec<f64> = per_class.iter().filter_map(|c| c.recall).collect();
    let mpca = recalls.iter().sum::<f64>() / recalls.len() as f64;
    Ok(MetricsReport { overall_accuracy, mpca, per_class, confusion: cm.clone() })
}

/// Convenience: confusion matrix then report.
pub fn evaluate(predicted: &[String], truth: &[String], vocabulary: &[String]) -> Result<MetricsReport> {
    metrics_report(&confusion(predicted, truth, vocabulary)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Summary { mean, std }
}

/// Renders a rate summary as `"99.28 (± 0.35)%"`.
pub fn format_mean_std(s: &Summary) -> String {
    format!("{:.2} (± {:.2})%", s.mean * 100.0, s.std * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class: String,
    /// Over the reports where precision is defined.
    pub precision: Option<Summary>,
    /// Reports in which the class was never predicted.
    pub precision_undefined: usize,
    pub recall: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_reports: usize,
    pub overall_accuracy: Summary,
    pub mpca: Summary,
    pub per_class: Vec<ClassAggregate>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(Error::TooFewReports(reports.len()));
    }
    let acc: Vec<f64> = reports.iter().map(|r| r.overall_accuracy).collect();
    let mp: Vec<f64> = reports.iter().map(|r| r.mpca).collect();
    let mut by_class: BTreeMap<&str, (Vec<f64>, usize, Vec<f64>)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in reports {
        for c in &r.per_class {
            let entry = by_class.entry(c.class.as_str()).or_insert_with(|| {
                order.push(c.class.clone());
                Default::default()
            });
            match c.precision {
                Some(p) => entry.0.push(p),
                None => entry.1 += 1,
            }
            entry.2.extend(c.recall);
        }
    }
    let per_class = order
        .into_iter()
        .map(|class| {
            let (p, undefined, r) = &by_class[class.as_str()];
            ClassAggregate {
                precision: (!p.is_empty()).then(|| mean_std(p)),
                precision_undefined: *undefined,
                recall: (!r.is_empty()).then(|| mean_std(r)),
                class,
            }
        })
        .collect();
    Ok(AggregateReport { n_reports: reports.len(), overall_accuracy: mean_std(&acc), mpca: mean_std(&mp), per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal variances, Welch–Satterthwaite degrees of freedom.
    #[default]
    Welch,
    /// Pooled variance, n₁ + n₂ − 2 degrees of freedom.
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p: f64,
    pub significant: bool,
}

pub fn t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    t_test_with(a, b, TTestKind::Welch)
}

pub fn t_test_with(a: &[f64], b: &[f64], kind: TTestKind) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::SampleTooSmall);
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (mean_std(a), mean_std(b));
    let (v1, v2) = (sa.std * sa.std, sb.std * sb.std);
    let diff = sa.mean - sb.mean;
    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (q1, q2) = (v1 / n1, v2 / n2);
            let se2 = q1 + q2;
            let df = se2 * se2 / (q1 * q1 / (n1 - 1.0) + q2 * q2 / (n2 - 1.0));
            (se2, df)
        }
        TTestKind::Student => {
            let df = n1 + n2 - 2.0;
            let pooled = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
            (pooled * (1.0 / n1 + 1.0 / n2), df)
        }
    };
    if se2 == 0.0 {
        // both samples constant
        let df = n1 + n2 - 2.0;
        return Ok(if diff == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0, significant: false }
        } else {
            TTestResult { t: f64::INFINITY.copysign(diff), df, p: 0.0, significant: true }
        });
    }
    let t = diff / se2.sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidHyperparams(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTestResult { t, df, p, significant: p < SIGNIFICANCE_LEVEL })
}

/// Each model's per-fold accuracies tested against the model with the highest mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub best: String,
    pub results: Vec<(String, TTestResult)>,
}

pub fn significance_vs_best(models: &[(String, Vec<f64>)], kind: TTestKind) -> Result<Significance> {
    if models.len() < 2 {
        return Err(Error::TooFewRuns(models.len()));
    }
    let means: Vec<f64> = models.iter().map(|(_, v)| mean_std(v).mean).collect();
    // highest mean; ties resolved by name so the choice does not depend on input order
    let best = (0..models.len())
        .max_by(|&i, &j| means[i].total_cmp(&means[j]).then_with(|| models[j].0.cmp(&models[i].0)))
        .expect("non-empty");
    let mut results = Vec::with_capacity(models.len() - 1);
    for (i, (name, values)) in models.iter().enumerate() {
        if i != best {
            results.push((name.clone(), t_test_with(&models[best].1, values, kind)?));
        }
    }
    Ok(Significance { best: models[best].0.clone(), results })
}
