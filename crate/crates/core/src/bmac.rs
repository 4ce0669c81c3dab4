//! BMAC spoil characterisation: weighted attribute vote and shear-strength lookup.
//!
//! Each of the four weighted attributes votes for a category with its relative
//! weight; the category with the highest cumulative weight wins. The strength
//! table holds peak parameters per category for three mobilisation modes.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when comparing cumulative weights for ties.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpoilAttribute {
    ParticleSize,
    /// Consistency (cohesive) or relative density (cohesionless); one weight slot.
    ConsistencyOrDensity,
    FabricStructure,
    /// Liquid-limit row.
    Plasticity,
}

impl SpoilAttribute {
    pub const ALL: [SpoilAttribute; 4] = [
        SpoilAttribute::ParticleSize,
        SpoilAttribute::ConsistencyOrDensity,
        SpoilAttribute::FabricStructure,
        SpoilAttribute::Plasticity,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SpoilAttribute::ParticleSize => "particle_size",
            SpoilAttribute::ConsistencyOrDensity => "consistency_or_density",
            SpoilAttribute::FabricStructure => "fabric_structure",
            SpoilAttribute::Plasticity => "plasticity",
        }
    }
}

impl fmt::Display for SpoilAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A pure BMAC category, Cat-1 through Cat-4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Category(u8);

impl Category {
    pub const ALL: [Category; 4] = [Category(1), Category(2), Category(3), Category(4)];

    pub fn new(value: i64) -> Result<Self> {
        if (1..=4).contains(&value) {
            Ok(Category(value as u8))
        } else {
            Err(Error::InvalidCategory(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    fn slot(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<i64> for Category {
    type Error = Error;
    fn try_from(value: i64) -> Result<Self> {
        Category::new(value)
    }
}

impl From<Category> for i64 {
    fn from(c: Category) -> i64 {
        c.0 as i64
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Cat-{}", self.0)
    }
}

/// Accepts `3`, `Cat-3` and `cat3`. Combined labels such as `Cat-2 or 3` are rejected.
impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let digits = t
            .strip_prefix("Cat-")
            .or_else(|| t.strip_prefix("cat-"))
            .or_else(|| t.strip_prefix("Cat"))
            .or_else(|| t.strip_prefix("cat"))
            .unwrap_or(t);
        let value: i64 = digits.trim().parse().map_err(|_| Error::UnknownLabel {
            target: "bmac_category".into(),
            value: s.to_string(),
        })?;
        Category::new(value)
    }
}

/// Relative attribute weights. The default is the published BMAC weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeWeights {
    weights: [f64; 4],
}

impl Default for AttributeWeights {
    fn default() -> Self {
        AttributeWeights { weights: [11.6, 26.9, 26.9, 34.6] }
    }
}

impl AttributeWeights {
    pub fn new(
        particle_size: f64,
        consistency_or_density: f64,
        fabric_structure: f64,
        plasticity: f64,
    ) -> Result<Self> {
        let weights = [particle_size, consistency_or_density, fabric_structure, plasticity];
        for (attribute, &weight) in SpoilAttribute::ALL.iter().zip(&weights) {
            if !(weight.is_finite() && weight > 0.0) {
                return Err(Error::InvalidWeight { attribute: *attribute, weight });
            }
        }
        Ok(AttributeWeights { weights })
    }

    pub fn get(&self, attribute: SpoilAttribute) -> f64 {
        self.weights[attribute.index()]
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let w = self.weights.map(|w| w * factor);
        AttributeWeights::new(w[0], w[1], w[2], w[3])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmacAssessment {
    /// Cumulative weight per category, index 0 = Cat-1.
    pub cumulative: [f64; 4],
    pub assigned: Category,
    pub tie: bool,
    pub labels: [Category; 4],
}

impl BmacAssessment {
    pub fn weight_for(&self, category: Category) -> f64 {
        self.cumulative[category.slot()]
    }
}

/// Weighted vote over the four attribute labels.
///
/// Ties (possible only with custom weights) resolve to the lowest tied category
/// and set `tie`.
pub fn score_bmac(
    labels: &HashMap<SpoilAttribute, Category>,
    weights: &AttributeWeights,
) -> Result<BmacAssessment> {
    let mut ordered = [Category(1); 4];
    for attribute in SpoilAttribute::ALL {
        ordered[attribute.index()] =
            *labels.get(&attribute).ok_or(Error::MissingAttribute(attribute))?;
    }
    Ok(score_ordered(ordered, weights))
}

/// Same as [`score_bmac`] with labels in `SpoilAttribute::ALL` order.
pub fn score_ordered(labels: [Category; 4], weights: &AttributeWeights) -> BmacAssessment {
    let mut cumulative = [0.0; 4];
    // fixed attribute order keeps the float sums identical for any input ordering
    for attribute in SpoilAttribute::ALL {
        cumulative[labels[attribute.index()].slot()] += weights.get(attribute);
    }
    let max = cumulative.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let winners: Vec<usize> =
        (0..4).filter(|&i| (max - cumulative[i]).abs() <= TIE_TOLERANCE).collect();
    BmacAssessment {
        cumulative,
        assigned: Category(winners[0] as u8 + 1),
        tie: winners.len() > 1,
        labels,
    }
}

/// Parses raw integer labels and scores them; out-of-range values raise `InvalidCategory`.
pub fn score_raw(labels: &HashMap<SpoilAttribute, i64>, weights: &AttributeWeights) -> Result<BmacAssessment> {
    let mut typed = HashMap::with_capacity(4);
    for (&attribute, &value) in labels {
        typed.insert(attribute, Category::new(value)?);
    }
    score_bmac(&typed, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilisationMode {
    Unsaturated,
    Saturated,
    Remoulded,
}

impl MobilisationMode {
    pub const ALL: [MobilisationMode; 3] =
        [MobilisationMode::Unsaturated, MobilisationMode::Saturated, MobilisationMode::Remoulded];

    pub fn as_str(self) -> &'static str {
        match self {
            MobilisationMode::Unsaturated => "unsaturated",
            MobilisationMode::Saturated => "saturated",
            MobilisationMode::Remoulded => "remoulded",
        }
    }
}

/// A tabulated value with its parenthesised companion. The companion's meaning
/// (standard deviation or tolerance) is not asserted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tabulated {
    pub value: f64,
    pub spread: f64,
}

const fn tab(value: f64, spread: f64) -> Tabulated {
    Tabulated { value, spread }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShearStrengthParams {
    /// kN/m³; not tabulated for remoulded conditions.
    pub unit_weight: Option<Tabulated>,
    /// kPa
    pub cohesion: Tabulated,
    /// degrees
    pub friction_angle: Tabulated,
}

const fn row(gamma: Option<Tabulated>, c: Tabulated, phi: Tabulated) -> ShearStrengthParams {
    ShearStrengthParams { unit_weight: gamma, cohesion: c, friction_angle: phi }
}

// [mode][category]
const STRENGTH_TABLE: [[ShearStrengthParams; 4]; 3] = [
    [
        row(Some(tab(18.0, 1.0)), tab(20.0, 10.0), tab(25.0, 2.5)),
        row(Some(tab(18.0, 1.0)), tab(30.0, 15.0), tab(28.0, 3.0)),
        row(Some(tab(18.0, 1.0)), tab(50.0, 15.0), tab(30.0, 2.0)),
        row(Some(tab(18.0, 1.0)), tab(50.0, 15.0), tab(35.0, 2.5)),
    ],
    [
        row(Some(tab(20.0, 1.0)), tab(0.0, 0.0), tab(18.0, 3.0)),
        row(Some(tab(20.0, 1.0)), tab(15.0, 7.5), tab(23.0, 2.5)),
        row(Some(tab(20.0, 1.0)), tab(20.0, 10.0), tab(25.0, 2.5)),
        row(Some(tab(20.0, 1.0)), tab(0.0, 0.0), tab(30.0, 1.5)),
    ],
    [
        row(None, tab(0.0, 0.0), tab(18.0, 1.5)),
        row(None, tab(0.0, 0.0), tab(18.0, 1.5)),
        row(None, tab(0.0, 0.0), tab(18.0, 1.5)),
        row(None, tab(0.0, 0.0), tab(28.0, 2.0)),
    ],
];

pub fn lookup_strength(category: Category, mode: MobilisationMode) -> ShearStrengthParams {
    STRENGTH_TABLE[mode as usize][category.slot()]
}

/// One row of a batch scoring file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct BatchRow {
    sample_id: String,
    particle_size: String,
    consistency_or_density: String,
    fabric_structure: String,
    plasticity: String,
}

/// Scores a CSV of `sample_id` plus four attribute categories and writes the rows
/// back with the cumulative weights, assigned category and tie flag appended.
/// With `with_strength`, each mobilisation mode's parameters are appended too.
/// Returns the number of rows scored.
pub fn score_batch<R: Read, W: Write>(
    input: R,
    output: W,
    weights: &AttributeWeights,
    with_strength: bool,
) -> Result<usize> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut writer = csv::Writer::from_writer(output);

    let mut header = vec![
        "sample_id".to_string(),
        "particle_size".into(),
        "consistency_or_density".into(),
        "fabric_structure".into(),
        "plasticity".into(),
        "weight_cat1".into(),
        "weight_cat2".into(),
        "weight_cat3".into(),
        "weight_cat4".into(),
        "assigned_category".into(),
        "tie".into(),
    ];
    if with_strength {
        for mode in MobilisationMode::ALL {
            for field in ["unit_weight", "unit_weight_spread", "cohesion", "cohesion_spread", "friction_angle", "friction_angle_spread"] {
                header.push(format!("{}_{}", mode.as_str(), field));
            }
        }
    }
    writer.write_record(&header)?;

    let mut count = 0;
    for record in reader.deserialize() {
        let row: BatchRow = record?;
        let labels = [
            row.particle_size.parse::<Category>()?,
            row.consistency_or_density.parse::<Category>()?,
            row.fabric_structure.parse::<Category>()?,
            row.plasticity.parse::<Category>()?,
        ];
        let assessment = score_ordered(labels, weights);
        let mut out = vec![
            row.sample_id,
            labels[0].get().to_string(),
            labels[1].get().to_string(),
            labels[2].get().to_string(),
            labels[3].get().to_string(),
        ];
        out.extend(assessment.cumulative.iter().map(|w| format!("{w}")));
        out.push(assessment.assigned.get().to_string());
        out.push(assessment.tie.to_string());
        if with_strength {
            for mode in MobilisationMode::ALL {
                let p = lookup_strength(assessment.assigned, mode);
                match p.unit_weight {
                    Some(g) => {
                        out.push(g.value.to_string());
                        out.push(g.spread.to_string());
                    }
                    None => {
                        out.push(String::new());
                        out.push(String::new());
                    }
                }
                for t in [p.cohesion, p.friction_angle] {
                    out.push(t.value.to_string());
                    out.push(t.spread.to_string());
                }
            }
        }
        writer.write_record(&out)?;
        count += 1;
    }
    writer.flush()?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: [i64; 4]) -> HashMap<SpoilAttribute, Category> {
        SpoilAttribute::ALL
            .iter()
            .zip(v)
            .map(|(&a, c)| (a, Category::new(c).unwrap()))
            .collect()
    }

    #[test]
    fn default_weights_sum_to_hundred() {
        assert!((AttributeWeights::default().total() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn unanimous_vote() {
        let a = score_bmac(&labels([1, 1, 1, 1]), &AttributeWeights::default()).unwrap();
        assert_eq!(a.assigned, Category::new(1).unwrap());
        assert!((a.cumulative[0] - 100.0).abs() < 1e-9);
        assert_eq!(&a.cumulative[1..], &[0.0, 0.0, 0.0]);
        assert!(!a.tie);
    }

    #[test]
    fn split_vote_goes_to_plasticity_side() {
        let a = score_bmac(&labels([2, 2, 3, 3]), &AttributeWeights::default()).unwrap();
        assert_eq!(a.assigned.get(), 3);
        assert!((a.cumulative[1] - 38.5).abs() < 1e-9);
        assert!((a.cumulative[2] - 61.5).abs() < 1e-9);
        assert!(!a.tie);
    }

    #[test]
    fn all_different_categories() {
        let a = score_bmac(&labels([1, 2, 3, 4]), &AttributeWeights::default()).unwrap();
        assert_eq!(a.assigned.get(), 4);
        assert!(!a.tie);
        assert!((a.cumulative[1] - a.cumulative[2]).abs() < 1e-12);
    }

    #[test]
    fn missing_attribute() {
        let mut l = labels([1, 1, 1, 1]);
        l.remove(&SpoilAttribute::FabricStructure);
        let err = score_bmac(&l, &AttributeWeights::default()).unwrap_err();
        assert!(matches!(err, Error::MissingAttribute(SpoilAttribute::FabricStructure)));
    }

    #[test]
    fn invalid_category() {
        let raw: HashMap<_, _> = SpoilAttribute::ALL.iter().map(|&a| (a, 5)).collect();
        assert!(matches!(score_raw(&raw, &AttributeWeights::default()), Err(Error::InvalidCategory(5))));
        assert!(Category::new(0).is_err());
    }

    #[test]
    fn custom_weights_tie_goes_low() {
        let w = AttributeWeights::new(25.0, 25.0, 25.0, 25.0).unwrap();
        let a = score_bmac(&labels([2, 2, 4, 4]), &w).unwrap();
        assert!(a.tie);
        assert_eq!(a.assigned.get(), 2);
    }

    #[test]
    fn weights_must_be_positive() {
        assert!(AttributeWeights::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(AttributeWeights::new(1.0, 1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn strength_examples() {
        let p = lookup_strength(Category::new(1).unwrap(), MobilisationMode::Unsaturated);
        assert_eq!(p.unit_weight, Some(tab(18.0, 1.0)));
        assert_eq!(p.cohesion, tab(20.0, 10.0));
        assert_eq!(p.friction_angle, tab(25.0, 2.5));

        let p = lookup_strength(Category::new(4).unwrap(), MobilisationMode::Saturated);
        assert_eq!(p.unit_weight, Some(tab(20.0, 1.0)));
        assert_eq!(p.cohesion, tab(0.0, 0.0));
        assert_eq!(p.friction_angle, tab(30.0, 1.5));

        let p = lookup_strength(Category::new(2).unwrap(), MobilisationMode::Remoulded);
        assert_eq!(p.unit_weight, None);
        assert_eq!(p.cohesion.value, 0.0);
        assert_eq!(p.friction_angle, tab(18.0, 1.5));
    }

    #[test]
    fn strength_table_invariants() {
        for c in Category::ALL {
            for m in MobilisationMode::ALL {
                let p = lookup_strength(c, m);
                assert!(p.friction_angle.value > 0.0 && p.friction_angle.value < 90.0);
                assert!(p.cohesion.value >= 0.0 && p.cohesion.spread >= 0.0);
                if m == MobilisationMode::Remoulded {
                    assert_eq!(p.cohesion.value, 0.0);
                    assert!(p.unit_weight.is_none());
                }
            }
        }
    }

    #[test]
    fn parses_category_spellings() {
        assert_eq!("Cat-3".parse::<Category>().unwrap().get(), 3);
        assert_eq!(" 2 ".parse::<Category>().unwrap().get(), 2);
        assert!("Cat-2 or 3".parse::<Category>().is_err());
        assert!(matches!("Cat-7".parse::<Category>(), Err(Error::InvalidCategory(7))));
    }

    #[test]
    fn batch_scoring() {
        let input = "sample_id,particle_size,consistency_or_density,fabric_structure,plasticity\n\
                     s1,2,2,3,3\ns2,Cat-1,Cat-1,Cat-1,Cat-1\n";
        let mut out = Vec::new();
        let n = score_batch(input.as_bytes(), &mut out, &AttributeWeights::default(), true).unwrap();
        assert_eq!(n, 2);
        let text = String::from_utf8(out).unwrap();
        let mut rows = csv::Reader::from_reader(text.as_bytes());
        let headers = rows.headers().unwrap().clone();
        let records: Vec<_> = rows.records().map(|r| r.unwrap()).collect();
        let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
        assert_eq!(&records[0][col("assigned_category")], "3");
        assert_eq!(&records[1][col("assigned_category")], "1");
        assert_eq!(&records[1][col("unsaturated_cohesion")], "20");
        assert_eq!(&records[0][col("remoulded_unit_weight")], "");
        assert_eq!(headers.len(), 11 + 18);
    }
}
