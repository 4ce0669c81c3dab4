//! Standardised images held in memory with their class indices.

use std::collections::HashMap;
use std::sync::Arc;

use crate::dataset::image::{standardise, ImageTensor};
use crate::dataset::manifest::{Manifest, Target};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct LabelledImages {
    classes: Vec<String>,
    entries: HashMap<String, (Arc<ImageTensor>, usize)>,
}

impl LabelledImages {
    pub fn new(classes: Vec<String>) -> Self {
        LabelledImages { classes, entries: HashMap::new() }
    }

    /// Standardises every manifest image; classes are the declared vocabulary
    /// entries that actually occur, in declaration order.
    pub fn from_manifest(manifest: &Manifest, target: Target, size: u32) -> Result<Self> {
        let counts = manifest.class_counts(target);
        let classes = manifest.vocabulary(target).iter().filter(|c| counts.contains_key(*c)).cloned().collect();
        let mut out = LabelledImages::new(classes);
        for record in &manifest.records {
            out.insert(&record.id, standardise(record, size)?, record.labels.get(target))?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, id: &str, image: ImageTensor, label: &str) -> Result<()> {
        let class = self.class_index(label)?;
        if self.entries.insert(id.to_string(), (Arc::new(image), class)).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
        Ok(())
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes.iter().position(|c| c == label).ok_or_else(|| Error::UnknownLabel {
            target: "class vocabulary".into(),
            value: label.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<(&ImageTensor, usize)> {
        self.entries
            .get(id)
            .map(|(img, c)| (img.as_ref(), *c))
            .ok_or_else(|| Error::Manifest(format!("no image loaded for id `{id}`")))
    }

    pub fn label(&self, id: &str) -> Result<&str> {
        Ok(&self.classes[self.get(id)?.1])
    }

    /// Images and class indices for `ids`, in order.
    pub fn batch(&self, ids: &[String]) -> Result<(Vec<&ImageTensor>, Vec<usize>)> {
        let mut images = Vec::with_capacity(ids.len());
        let mut classes = Vec::with_capacity(ids.len());
        for id in ids {
            let (img, c) = self.get(id)?;
            images.push(img);
            classes.push(c);
        }
        Ok((images, classes))
    }
}
