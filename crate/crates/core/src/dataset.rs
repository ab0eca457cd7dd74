//! Labelled image sets: `image_id,category,split` tables joined with image
//! embeddings and the concept side needed to evaluate bottlenecks.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_pool::AssociationMatrix;
use crate::embeddings::{EmbeddingError, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("labels row {row}: unknown split {split:?}")]
    Split { row: usize, split: String },
    #[error("labels row {row}: duplicate image id {id:?}")]
    DuplicateImage { row: usize, id: String },
    #[error("image {0:?} has a label but no embedding")]
    MissingImage(String),
    #[error("category {0:?} not in the association matrix")]
    UnknownCategory(String),
    #[error("axis mismatch: {0}")]
    Axis(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_id: String,
    pub category: String,
    /// Missing means train.
    #[serde(default)]
    pub split: Option<String>,
}

/// Reads an `image_id,category[,split]` table.
pub fn read_labels<R: Read>(r: R) -> Result<Vec<LabelRow>, DatasetError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows: Vec<LabelRow> = Vec::new();
    let mut seen = BTreeMap::new();
    for (n, rec) in rdr.deserialize().enumerate() {
        let row: LabelRow = rec?;
        if let Some(s) = &row.split {
            if !s.is_empty() && Split::parse(s).is_none() {
                return Err(DatasetError::Split {
                    row: n + 1,
                    split: s.clone(),
                });
            }
        }
        if seen.insert(row.image_id.clone(), n).is_some() {
            return Err(DatasetError::DuplicateImage {
                row: n + 1,
                id: row.image_id,
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_labels<W: Write>(rows: &[LabelRow], w: W) -> Result<(), DatasetError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn categories_in_order(rows: &[LabelRow]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.category) {
            out.push(r.category.clone());
        }
    }
    out
}

/// Everything needed to train and score bottlenecks on one dataset.
/// `concepts` rows align with `w_llm` rows and `name_prompts` rows with its
/// categories.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub images: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub concepts: EmbeddingMatrix,
    pub w_llm: AssociationMatrix,
    pub name_prompts: EmbeddingMatrix,
}

impl Dataset {
    /// Joins label rows with embeddings; images are reordered to label order.
    pub fn assemble(
        name: &str,
        images: &EmbeddingMatrix,
        labels: &[LabelRow],
        concepts: EmbeddingMatrix,
        w_llm: AssociationMatrix,
        name_prompts: EmbeddingMatrix,
    ) -> Result<Self, DatasetError> {
        let index: BTreeMap<&str, usize> = w_llm
            .categories
            .iter()
            .enumerate()
            .map(|(j, c)| (c.as_str(), j))
            .collect();
        let mut rows = Vec::with_capacity(labels.len());
        let mut y = Vec::with_capacity(labels.len());
        let mut splits = Vec::with_capacity(labels.len());
        for l in labels {
            rows.push(
                images
                    .position(&l.image_id)
                    .ok_or_else(|| DatasetError::MissingImage(l.image_id.clone()))?,
            );
            y.push(
                *index
                    .get(l.category.as_str())
                    .ok_or_else(|| DatasetError::UnknownCategory(l.category.clone()))?,
            );
            splits.push(
                l.split
                    .as_deref()
                    .filter(|s| !s.is_empty())
                    .and_then(Split::parse)
                    .unwrap_or(Split::Train),
            );
        }
        if concepts.rows() != w_llm.n_concepts() {
            return Err(DatasetError::Axis(format!(
                "{} concept embeddings for {} concepts",
                concepts.rows(),
                w_llm.n_concepts()
            )));
        }
        if name_prompts.rows() != w_llm.n_categories() {
            return Err(DatasetError::Axis(format!(
                "{} name prompts for {} categories",
                name_prompts.rows(),
                w_llm.n_categories()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            images: images.subset(&rows)?,
            labels: y,
            splits,
            concepts,
            w_llm,
            name_prompts,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.w_llm.categories
    }

    /// Row indices in `split` whose label is in `categories` (all if `None`).
    pub fn rows(&self, split: Split, categories: Option<&[usize]>) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.splits[i] == split)
            .filter(|&i| categories.map_or(true, |c| c.contains(&self.labels[i])))
            .collect()
    }
}
