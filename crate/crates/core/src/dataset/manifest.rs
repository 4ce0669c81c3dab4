use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bmac::SpoilAttribute;
use crate::error::{Error, Result};

/// The five classification targets carried by every image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    ParticleSize,
    RelativeDensity,
    FabricStructure,
    Plasticity,
    BmacCategory,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::ParticleSize,
        Target::RelativeDensity,
        Target::FabricStructure,
        Target::Plasticity,
        Target::BmacCategory,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::ParticleSize => "particle_size",
            Target::RelativeDensity => "relative_density",
            Target::FabricStructure => "fabric_structure",
            Target::Plasticity => "plasticity",
            Target::BmacCategory => "bmac_category",
        }
    }

    /// The weighted BMAC attribute this target measures, if any.
    pub fn attribute(self) -> Option<SpoilAttribute> {
        match self {
            Target::ParticleSize => Some(SpoilAttribute::ParticleSize),
            Target::RelativeDensity => Some(SpoilAttribute::ConsistencyOrDensity),
            Target::FabricStructure => Some(SpoilAttribute::FabricStructure),
            Target::Plasticity => Some(SpoilAttribute::Plasticity),
            Target::BmacCategory => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::UnknownTarget(s.to_string()))
    }
}

/// One label string per target, indexed by `Target::index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLabels(pub [String; 5]);

impl AttributeLabels {
    pub fn get(&self, target: Target) -> &str {
        &self.0[target.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Resolved against the manifest directory.
    pub path: PathBuf,
    pub labels: AttributeLabels,
    /// Native (width, height) read from the image header.
    pub dimensions: (u32, u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub root: PathBuf,
    /// Declared label vocabulary per target, in declaration order.
    pub vocabularies: [Vec<String>; 5],
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn vocabulary(&self, target: Target) -> &[String] {
        &self.vocabularies[target.index()]
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn label_map(&self, target: Target) -> BTreeMap<String, String> {
        self.records.iter().map(|r| (r.id.clone(), r.labels.get(target).to_string())).collect()
    }

    pub fn class_counts(&self, target: Target) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.labels.get(target).to_string()).or_insert(0) += 1;
        }
        counts
    }
}

/// Splits a header cell such as `plasticity{Cat-1|Cat-2 or 3|Cat-4}` into the
/// column name and its declared vocabulary.
fn parse_header_cell(cell: &str) -> Result<(String, Option<Vec<String>>)> {
    let cell = cell.trim();
    match cell.find('{') {
        None => Ok((cell.to_string(), None)),
        Some(open) => {
            let close = cell
                .rfind('}')
                .filter(|&c| c > open)
                .ok_or_else(|| Error::Manifest(format!("unterminated vocabulary in header `{cell}`")))?;
            let vocab: Vec<String> = cell[open + 1..close]
                .split('|')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            if vocab.is_empty() {
                return Err(Error::Manifest(format!("empty vocabulary in header `{cell}`")));
            }
            Ok((cell[..open].trim().to_string(), Some(vocab)))
        }
    }
}

/// Writes the header row for a manifest with declared vocabularies.
pub fn header_row(vocabularies: &[Vec<String>; 5]) -> Vec<String> {
    let mut row = vec!["id".to_string(), "path".to_string()];
    for t in Target::ALL {
        row.push(format!("{}{{{}}}", t.as_str(), vocabularies[t.index()].join("|")));
    }
    row
}

/// Loads and validates a manifest CSV.
///
/// Columns: `id`, `path`, then one column per target. A target column may
/// declare its vocabulary inline (`plasticity{Cat-1|Cat-2}`); undeclared
/// vocabularies are taken from the observed labels in first-seen order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;

    let headers = reader.headers()?.clone();
    let mut id_col = None;
    let mut path_col = None;
    let mut target_cols: [Option<usize>; 5] = [None; 5];
    let mut declared: [Option<Vec<String>>; 5] = Default::default();
    for (i, cell) in headers.iter().enumerate() {
        let (name, vocab) = parse_header_cell(cell)?;
        match name.as_str() {
            "id" => id_col = Some(i),
            "path" => path_col = Some(i),
            other => {
                let t: Target = other.parse()?;
                target_cols[t.index()] = Some(i);
                declared[t.index()] = vocab;
            }
        }
    }
    let id_col = id_col.ok_or_else(|| Error::Manifest("missing `id` column".into()))?;
    let path_col = path_col.ok_or_else(|| Error::Manifest("missing `path` column".into()))?;
    for t in Target::ALL {
        if target_cols[t.index()].is_none() {
            return Err(Error::Manifest(format!("missing `{t}` column")));
        }
    }

    let mut vocabularies: [Vec<String>; 5] = Default::default();
    for t in Target::ALL {
        if let Some(v) = &declared[t.index()] {
            vocabularies[t.index()] = v.clone();
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("").to_string();
        let id = field(id_col);
        if id.is_empty() {
            return Err(Error::Manifest("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let mut labels: [String; 5] = Default::default();
        for t in Target::ALL {
            let value = field(target_cols[t.index()].unwrap());
            let vocab = &mut vocabularies[t.index()];
            if !vocab.contains(&value) {
                if declared[t.index()].is_some() || value.is_empty() {
                    return Err(Error::UnknownLabel { target: t.as_str().into(), value });
                }
                vocab.push(value.clone());
            }
            labels[t.index()] = value;
        }
        let image_path = root.join(field(path_col));
        if !image_path.is_file() {
            return Err(Error::MissingFile(image_path));
        }
        let dimensions = image::image_dimensions(&image_path).map_err(|e| Error::Decode {
            path: image_path.clone(),
            message: e.to_string(),
        })?;
        records.push(ImageRecord { id, path: image_path, labels: AttributeLabels(labels), dimensions });
    }
    Ok(Manifest { root, vocabularies, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_png(dir: &Path, name: &str) {
        image::RgbImage::from_pixel(8, 6, image::Rgb([10, 20, 30])).save(dir.join(name)).unwrap();
    }

    const HEADER: &str = "id,path,particle_size{Cat-1|Cat-2},relative_density{Cat-1|Cat-2},\
fabric_structure{Cat-1|Cat-2},plasticity{Cat-1|Cat-2|Cat-2 or 3},bmac_category{Cat-1|Cat-2}\n";

    fn manifest(dir: &Path, rows: &[&str]) -> PathBuf {
        for i in 0..3 {
            write_png(dir, &format!("img_{i}.png"));
        }
        let mut text = HEADER.to_string();
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let p = dir.join("manifest.csv");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(
            dir.path(),
            &[
                "a,img_0.png,Cat-1,Cat-1,Cat-1,Cat-1,Cat-1",
                "b,img_1.png,Cat-2,Cat-1,Cat-2,Cat-2 or 3,Cat-2",
                "c,img_2.png,Cat-2,Cat-2,Cat-2,Cat-2,Cat-2",
            ],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[1].labels.get(Target::Plasticity), "Cat-2 or 3");
        assert_eq!(m.records[0].dimensions, (8, 6));
        assert_eq!(m.vocabulary(Target::Plasticity).len(), 3);
    }

    #[test]
    fn out_of_vocabulary_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(dir.path(), &["a,img_0.png,Cat-1,Cat-1,Cat-1,Cat-7,Cat-1"]);
        match load_manifest(&p).unwrap_err() {
            Error::UnknownLabel { target, value } => {
                assert_eq!(target, "plasticity");
                assert_eq!(value, "Cat-7");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(
            dir.path(),
            &["img_001,img_0.png,Cat-1,Cat-1,Cat-1,Cat-1,Cat-1", "img_001,img_1.png,Cat-1,Cat-1,Cat-1,Cat-1,Cat-1"],
        );
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateId(id)) if id == "img_001"));
    }

    #[test]
    fn missing_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = manifest(dir.path(), &["a,nope.png,Cat-1,Cat-1,Cat-1,Cat-1,Cat-1"]);
        assert!(matches!(load_manifest(&p), Err(Error::MissingFile(_))));
        assert!(matches!(load_manifest(dir.path().join("absent.csv")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn undeclared_vocabulary_is_inferred() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "x.png");
        let p = dir.path().join("m.csv");
        fs::write(
            &p,
            "id,path,particle_size,relative_density,fabric_structure,plasticity,bmac_category\n\
             x,x.png,Sand,Loose,Matrix,High,Cat-1\n",
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.vocabulary(Target::ParticleSize), &["Sand".to_string()]);
    }
}
