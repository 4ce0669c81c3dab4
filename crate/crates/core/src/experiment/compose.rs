use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bmac::{score_ordered, AttributeWeights, BmacAssessment, Category, SpoilAttribute};
use crate::dataset::Target;
use crate::error::{Error, Result};
use crate::experiment::run::{latest_per_model, load_bundles, ResultsBundle};

pub const COMPOSITION_NOTE: &str =
    "BMAC categories composed from per-attribute predictions; an extension beyond direct category classification";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedSample {
    pub id: String,
    /// Predicted labels in `SpoilAttribute::ALL` order.
    pub labels: [String; 4],
    /// `None` when any label is not a single category.
    pub assessment: Option<BmacAssessment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agrees: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub compared: usize,
    pub matches: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub note: String,
    pub samples: Vec<ComposedSample>,
    pub composed: usize,
    /// Samples skipped because a label such as `Cat-2 or 3` has no single category.
    pub excluded: usize,
    pub unmappable_labels: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement: Option<Agreement>,
}

/// Scores each sample from its four attribute predictions (`id -> label` per attribute).
pub fn bmac_compose(
    attributes: &BTreeMap<SpoilAttribute, BTreeMap<String, String>>,
    direct: Option<&BTreeMap<String, String>>,
    weights: &AttributeWeights,
) -> Result<CompositionReport> {
    let mut maps = Vec::with_capacity(4);
    for a in SpoilAttribute::ALL {
        maps.push(attributes.get(&a).ok_or(Error::MissingAttribute(a))?);
    }
    let ids: Vec<&String> = maps[0].keys().collect();
    for (a, m) in SpoilAttribute::ALL.iter().zip(&maps) {
        if m.len() != ids.len() || !ids.iter().all(|id| m.contains_key(*id)) {
            return Err(Error::Manifest(format!("{a} predictions cover different sample ids")));
        }
    }

    let mut samples = Vec::with_capacity(ids.len());
    let mut unmappable_labels: BTreeMap<String, usize> = BTreeMap::new();
    let (mut composed, mut excluded, mut compared, mut matches) = (0, 0, 0, 0);
    for id in ids {
        let labels: [String; 4] = std::array::from_fn(|i| maps[i][id].clone());
        let parsed: Vec<Option<Category>> = labels.iter().map(|l| l.parse().ok()).collect();
        let assessment = if parsed.iter().all(Option::is_some) {
            composed += 1;
            Some(score_ordered(std::array::from_fn(|i| parsed[i].expect("checked")), weights))
        } else {
            excluded += 1;
            for (l, p) in labels.iter().zip(&parsed) {
                if p.is_none() {
                    *unmappable_labels.entry(l.clone()).or_default() += 1;
                }
            }
            None
        };
        let direct_label = direct.and_then(|d| d.get(id)).cloned();
        let agrees = match (&assessment, direct_label.as_deref().map(str::parse::<Category>)) {
            (Some(a), Some(Ok(c))) => {
                compared += 1;
                matches += usize::from(a.assigned == c);
                Some(a.assigned == c)
            }
            _ => None,
        };
        samples.push(ComposedSample { id: id.clone(), labels, assessment, direct: direct_label, agrees });
    }
    let agreement = direct.map(|_| Agreement {
        compared,
        matches,
        rate: if compared == 0 { 0.0 } else { matches as f64 / compared as f64 },
    });
    Ok(CompositionReport {
        note: COMPOSITION_NOTE.to_string(),
        samples,
        composed,
        excluded,
        unmappable_labels,
        agreement,
    })
}

fn pick(bundles: &[ResultsBundle], target: Target, model: Option<&str>) -> Option<ResultsBundle> {
    let candidates = latest_per_model(bundles.iter().filter(|b| b.target == target).cloned().collect());
    match model {
        Some(m) => candidates.into_iter().find(|b| b.model_name == m),
        None => candidates
            .into_iter()
            .max_by(|a, b| {
                a.aggregate
                    .overall_accuracy
                    .mean
                    .total_cmp(&b.aggregate.overall_accuracy.mean)
                    .then_with(|| b.model_name.cmp(&a.model_name))
            }),
    }
}

/// Composes from the fold-consensus test predictions of one bundle per attribute target:
/// the named model, or the most accurate one when `model` is `None`. A `bmac_category`
/// bundle, if present, supplies the direct predictions.
pub fn compose_results(results_dir: &Path, model: Option<&str>, weights: &AttributeWeights) -> Result<CompositionReport> {
    let bundles = load_bundles(results_dir)?;
    let mut attributes = BTreeMap::new();
    for target in Target::ALL {
        let Some(attribute) = target.attribute() else { continue };
        let bundle = pick(&bundles, target, model)
            .ok_or_else(|| Error::Manifest(format!("no bundle for target `{target}`")))?;
        attributes.insert(attribute, bundle.consensus());
    }
    let direct = pick(&bundles, Target::BmacCategory, model).map(|b| b.consensus());
    bmac_compose(&attributes, direct.as_ref(), weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preds(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn uniform(label: &str) -> BTreeMap<SpoilAttribute, BTreeMap<String, String>> {
        SpoilAttribute::ALL.iter().map(|a| (*a, preds(&[("s1", label), ("s2", label)]))).collect()
    }

    #[test]
    fn uniform_predictions_compose_to_that_category() {
        let r = bmac_compose(&uniform("Cat-2"), None, &AttributeWeights::default()).unwrap();
        assert_eq!(r.composed, 2);
        assert!(r.samples.iter().all(|s| s.assessment.as_ref().unwrap().assigned == Category::new(2).unwrap()));
        assert!(r.agreement.is_none());
    }

    #[test]
    fn combined_label_is_tallied() {
        let mut a = uniform("Cat-2");
        a.get_mut(&SpoilAttribute::Plasticity).unwrap().insert("s2".into(), "Cat-2 or 3".into());
        let r = bmac_compose(&a, None, &AttributeWeights::default()).unwrap();
        assert_eq!((r.composed, r.excluded), (1, 1));
        assert_eq!(r.unmappable_labels["Cat-2 or 3"], 1);
    }

    #[test]
    fn agreement_is_a_fraction_of_compared_samples() {
        let direct = preds(&[("s1", "Cat-2"), ("s2", "Cat-4")]);
        let r = bmac_compose(&uniform("Cat-2"), Some(&direct), &AttributeWeights::default()).unwrap();
        let a = r.agreement.unwrap();
        assert_eq!((a.compared, a.matches), (2, 1));
        assert_eq!(a.rate, 0.5);
    }

    #[test]
    fn mismatched_ids_are_rejected() {
        let mut a = uniform("Cat-1");
        a.get_mut(&SpoilAttribute::FabricStructure).unwrap().remove("s1");
        assert!(bmac_compose(&a, None, &AttributeWeights::default()).is_err());
        a.remove(&SpoilAttribute::FabricStructure);
        assert!(matches!(bmac_compose(&a, None, &AttributeWeights::default()), Err(Error::MissingAttribute(_))));
    }
}
