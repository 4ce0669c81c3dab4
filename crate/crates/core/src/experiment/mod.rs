//! Config-driven runs, persisted result bundles, comparisons, reports and BMAC composition.

pub mod compare;
pub mod compose;
pub mod config;
pub mod plot;
pub mod report;
pub mod run;

pub use compare::{compare, compare_bundles, Baseline, Comparison};
pub use compose::{bmac_compose, compose_results, CompositionReport};
pub use config::{ExperimentConfig, ExperimentSettings, Family, ModelConfig, Overrides};
pub use report::{report, ReportIndex};
pub use run::{find_bundles, load_bundles, run, FoldResult, Prediction, ResultsBundle, RunOutcome, BUNDLE_FILE};
