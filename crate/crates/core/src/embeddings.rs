//! Embedding matrices, concept activations and prompt construction.
//!
//! # CDLE container
//!
//! ```text
//! magic    b"CDLE"
//! version  u32 LE (= 1)
//! rows     u64 LE
//! dim      u64 LE
//! ids      rows × (u32 LE byte length, UTF-8 bytes)
//! payload  rows × dim f32 LE, row-major
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CDLE_MAGIC: &[u8; 4] = b"CDLE";
pub const CDLE_VERSION: u32 = 1;

/// Norms at or below this are treated as zero vectors.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("not a CDLE file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported CDLE version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated CDLE payload: {0}")]
    Truncated(String),
    #[error("non-finite value at row {row} ({id}), column {col}")]
    NonFinite { row: usize, id: String, col: usize },
    #[error("duplicate row id {0:?}")]
    DuplicateId(String),
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("row {0:?} has zero norm")]
    ZeroNorm(String),
    #[error("z-scoring needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("prompt construction: {0}")]
    Prompt(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix of embeddings with stable row ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self, EmbeddingError> {
        if dim == 0 || ids.is_empty() {
            return Err(EmbeddingError::Shape(format!(
                "need rows ≥ 1 and dim ≥ 1, got {} × {}",
                ids.len(),
                dim
            )));
        }
        if data.len() != ids.len() * dim {
            return Err(EmbeddingError::Shape(format!(
                "{} ids × dim {} needs {} values, got {}",
                ids.len(),
                dim,
                ids.len() * dim,
                data.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbeddingError::DuplicateId(id.clone()));
            }
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                row: pos / dim,
                id: ids[pos / dim].clone(),
                col: pos % dim,
            });
        }
        Ok(Self { ids, dim, data })
    }

    /// Builds from f64 rows, rounding to f32 storage.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EmbeddingError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(ids, dim, data)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Rows selected (and reordered) by id.
    pub fn select(&self, ids: &[String]) -> Result<Self, EmbeddingError> {
        let index: std::collections::HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let i = *index
                .get(id.as_str())
                .ok_or_else(|| EmbeddingError::Shape(format!("row id {id:?} not present")))?;
            data.extend_from_slice(self.row(i));
        }
        Self::new(ids.to_vec(), self.dim, data)
    }

    /// Rows selected by position.
    pub fn subset(&self, rows: &[usize]) -> Result<Self, EmbeddingError> {
        let ids = rows.iter().map(|&r| self.ids[r].clone()).collect();
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self::new(ids, self.dim, data)
    }
}

/// Writes the CDLE container.
pub fn write_embeddings<W: Write>(m: &EmbeddingMatrix, w: W) -> Result<(), EmbeddingError> {
    let mut w = BufWriter::new(w);
    w.write_all(CDLE_MAGIC)?;
    w.write_all(&CDLE_VERSION.to_le_bytes())?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.dim as u64).to_le_bytes())?;
    for id in &m.ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embeddings_file(m: &EmbeddingMatrix, path: &Path) -> Result<(), EmbeddingError> {
    write_embeddings(m, File::create(path)?)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), EmbeddingError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => EmbeddingError::Truncated(what.to_string()),
        _ => EmbeddingError::Io(e),
    })
}

/// Reads a CDLE container.
pub fn read_embeddings<R: Read>(r: R) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != CDLE_MAGIC {
        return Err(EmbeddingError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != CDLE_VERSION {
        return Err(EmbeddingError::UnsupportedVersion(version));
    }
    read_exact_or(&mut r, &mut b8, "rows")?;
    let rows = u64::from_le_bytes(b8) as usize;
    read_exact_or(&mut r, &mut b8, "dim")?;
    let dim = u64::from_le_bytes(b8) as usize;

    let mut ids = Vec::with_capacity(rows.min(1 << 20));
    for i in 0..rows {
        read_exact_or(&mut r, &mut b4, &format!("id length of row {i}"))?;
        let len = u32::from_le_bytes(b4) as usize;
        let mut buf = vec![0u8; len];
        read_exact_or(&mut r, &mut buf, &format!("id of row {i}"))?;
        let id = String::from_utf8(buf)
            .map_err(|_| EmbeddingError::Shape(format!("row {i} id is not UTF-8")))?;
        ids.push(id);
    }
    let total = rows
        .checked_mul(dim)
        .ok_or_else(|| EmbeddingError::Shape("rows × dim overflows".into()))?;
    let mut data = Vec::with_capacity(total.min(1 << 26));
    for k in 0..total {
        read_exact_or(
            &mut r,
            &mut b4,
            &format!(
                "expected {rows} rows × {dim}, payload ended in row {}",
                k / dim.max(1)
            ),
        )?;
        data.push(f32::from_le_bytes(b4));
    }
    EmbeddingMatrix::new(ids, dim, data)
}

pub fn read_embeddings_file(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    read_embeddings(File::open(path)?)
}

/// Reads the `id,v0,...,v{dim-1}` CSV fallback.
pub fn read_embeddings_csv<R: Read>(r: R) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr
        .headers()
        .map_err(|e| EmbeddingError::Csv(e.to_string()))?;
    let dim = headers.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| EmbeddingError::Csv(e.to_string()))?;
        if rec.len() != dim + 1 {
            return Err(EmbeddingError::Csv(format!(
                "record {} has {} fields, header has {}",
                line + 1,
                rec.len(),
                dim + 1
            )));
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            let v: f32 = f.trim().parse().map_err(|_| {
                EmbeddingError::Csv(format!("record {}: bad value {f:?}", line + 1))
            })?;
            data.push(v);
        }
    }
    EmbeddingMatrix::new(ids, dim, data)
}

pub fn write_embeddings_csv<W: Write>(m: &EmbeddingMatrix, w: W) -> Result<(), EmbeddingError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["id".to_string()];
    header.extend((0..m.dim).map(|i| format!("v{i}")));
    wtr.write_record(&header)
        .map_err(|e| EmbeddingError::Csv(e.to_string()))?;
    for i in 0..m.rows() {
        let mut rec = vec![m.ids[i].clone()];
        rec.extend(m.row(i).iter().map(|v| v.to_string()));
        wtr.write_record(&rec)
            .map_err(|e| EmbeddingError::Csv(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Picks CSV for `.csv` paths and CDLE otherwise.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        read_embeddings_csv(File::open(path)?)
    } else {
        read_embeddings_file(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    Zscored,
}

/// Which axis z-scoring standardizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZscoreAxis {
    /// Each concept column across the image set.
    #[default]
    PerConcept,
    /// Each image row across the concepts.
    PerImage,
}

/// Images × concepts similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub image_ids: Vec<String>,
    pub concept_ids: Vec<String>,
    /// Row-major, images × concepts.
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl ActivationMatrix {
    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows()).map(|i| self.get(i, j)).collect()
    }

    /// Keeps the given image rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.cols());
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self {
            image_ids: rows.iter().map(|&r| self.image_ids[r].clone()).collect(),
            concept_ids: self.concept_ids.clone(),
            values,
            normalization: self.normalization,
        }
    }

    /// Keeps the given concept columns, in order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.rows() * cols.len());
        for i in 0..self.rows() {
            let row = self.row(i);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        Self {
            image_ids: self.image_ids.clone(),
            concept_ids: cols.iter().map(|&c| self.concept_ids[c].clone()).collect(),
            values,
            normalization: self.normalization,
        }
    }

    /// Stores the activations as a CDLE matrix (row ids = image ids,
    /// columns in concept order).
    pub fn to_embedding_matrix(&self) -> Result<EmbeddingMatrix, EmbeddingError> {
        EmbeddingMatrix::new(
            self.image_ids.clone(),
            self.cols(),
            self.values.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_embedding_matrix(
        m: &EmbeddingMatrix,
        concept_ids: Vec<String>,
        normalization: Normalization,
    ) -> Result<Self, EmbeddingError> {
        if concept_ids.len() != m.dim() {
            return Err(EmbeddingError::Shape(format!(
                "{} concept ids for a {}-column activation matrix",
                concept_ids.len(),
                m.dim()
            )));
        }
        Ok(Self {
            image_ids: m.ids().to_vec(),
            concept_ids,
            values: m.data().iter().map(|&v| v as f64).collect(),
            normalization,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ActivationSidecar {
    concept_ids: Vec<String>,
    normalization: Normalization,
}

fn activation_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Writes activations as a CDLE container (rows = images) plus a `.json`
/// sidecar holding the concept ids and normalization.
pub fn save_activations(act: &ActivationMatrix, path: &Path) -> Result<(), EmbeddingError> {
    write_embeddings_file(&act.to_embedding_matrix()?, path)?;
    let sidecar = ActivationSidecar {
        concept_ids: act.concept_ids.clone(),
        normalization: act.normalization,
    };
    let mut bytes =
        serde_json::to_vec_pretty(&sidecar).map_err(|e| EmbeddingError::Shape(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(activation_sidecar(path), bytes)?;
    Ok(())
}

/// Reads [`save_activations`] output. Without a sidecar, concept ids are
/// column positions and the values are taken as raw.
pub fn load_activations(path: &Path) -> Result<ActivationMatrix, EmbeddingError> {
    let m = read_embeddings_file(path)?;
    let side = activation_sidecar(path);
    let sidecar = if side.is_file() {
        serde_json::from_slice(&std::fs::read(side)?)
            .map_err(|e| EmbeddingError::Shape(e.to_string()))?
    } else {
        ActivationSidecar {
            concept_ids: (0..m.dim()).map(|j| j.to_string()).collect(),
            normalization: Normalization::Raw,
        }
    };
    ActivationMatrix::from_embedding_matrix(&m, sidecar.concept_ids, sidecar.normalization)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Row-normalized f64 copies; errors on a zero-norm row.
fn unit_rows(m: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>, EmbeddingError> {
    (0..m.rows())
        .map(|i| {
            let r = m.row_f64(i);
            let n = norm(&r);
            if n <= NORM_EPS {
                Err(EmbeddingError::ZeroNorm(m.ids[i].clone()))
            } else {
                Ok(r.into_iter().map(|x| x / n).collect())
            }
        })
        .collect()
}

/// Cosine similarity of every image row against every concept row.
pub fn activations(
    images: &EmbeddingMatrix,
    concepts: &EmbeddingMatrix,
) -> Result<ActivationMatrix, EmbeddingError> {
    if images.dim() != concepts.dim() {
        return Err(EmbeddingError::Shape(format!(
            "image dim {} != concept dim {}",
            images.dim(),
            concepts.dim()
        )));
    }
    let img = unit_rows(images)?;
    let con = unit_rows(concepts)?;
    let values: Vec<f64> = img
        .par_iter()
        .flat_map_iter(|u| {
            con.iter().map(move |v| {
                u.iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .clamp(-1.0, 1.0)
            })
        })
        .collect();
    Ok(ActivationMatrix {
        image_ids: images.ids().to_vec(),
        concept_ids: concepts.ids().to_vec(),
        values,
        normalization: Normalization::Raw,
    })
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn standardize(xs: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(xs);
    if std <= NORM_EPS {
        vec![0.0; xs.len()]
    } else {
        xs.iter().map(|x| (x - mean) / std).collect()
    }
}

/// Per-concept z-scoring over the image set.
pub fn zscore(act: &ActivationMatrix) -> Result<ActivationMatrix, EmbeddingError> {
    zscore_along(act, ZscoreAxis::PerConcept)
}

/// Z-scoring with population statistics; constant lines become zeros.
pub fn zscore_along(
    act: &ActivationMatrix,
    axis: ZscoreAxis,
) -> Result<ActivationMatrix, EmbeddingError> {
    let (rows, cols) = (act.rows(), act.cols());
    let mut values = vec![0.0; rows * cols];
    match axis {
        ZscoreAxis::PerConcept => {
            if rows < 2 {
                return Err(EmbeddingError::TooFewRows(rows));
            }
            for j in 0..cols {
                for (i, z) in standardize(&act.column(j)).into_iter().enumerate() {
                    values[i * cols + j] = z;
                }
            }
        }
        ZscoreAxis::PerImage => {
            if cols < 2 {
                return Err(EmbeddingError::TooFewRows(cols));
            }
            for i in 0..rows {
                values[i * cols..(i + 1) * cols].copy_from_slice(&standardize(act.row(i)));
            }
        }
    }
    Ok(ActivationMatrix {
        image_ids: act.image_ids.clone(),
        concept_ids: act.concept_ids.clone(),
        values,
        normalization: Normalization::Zscored,
    })
}

/// The four prompt designs of the category-name shortcut ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    NameOnly,
    NameWithConcept,
    NameWithRandomConcept,
    ConceptOnly,
}

impl PromptKind {
    pub const ALL: [PromptKind; 4] = [
        PromptKind::NameOnly,
        PromptKind::NameWithConcept,
        PromptKind::NameWithRandomConcept,
        PromptKind::ConceptOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::NameOnly => "name_only",
            PromptKind::NameWithConcept => "name_with_concept",
            PromptKind::NameWithRandomConcept => "name_with_random_concept",
            PromptKind::ConceptOnly => "concept_only",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PromptKind::NameOnly => "Category Name",
            PromptKind::NameWithConcept => "Name w/ LLM Concepts",
            PromptKind::NameWithRandomConcept => "Name w/ Random Concepts",
            PromptKind::ConceptOnly => "LLM Concepts only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn default_template(self) -> &'static str {
        match self {
            PromptKind::NameOnly => "a photo of a {category}.",
            PromptKind::NameWithConcept | PromptKind::NameWithRandomConcept => {
                "{category}, which has {concept}"
            }
            PromptKind::ConceptOnly => "{concept}",
        }
    }

    pub fn mentions_concept(self) -> bool {
        !matches!(self, PromptKind::NameOnly)
    }

    pub fn mentions_category(self) -> bool {
        !matches!(self, PromptKind::ConceptOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub kind: PromptKind,
    pub template: String,
    pub rng_seed: Option<u64>,
}

impl PromptVariant {
    pub fn new(kind: PromptKind, seed: Option<u64>) -> Self {
        Self {
            kind,
            template: kind.default_template().to_string(),
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        let has_cat = self.template.contains("{category}");
        let has_con = self.template.contains("{concept}");
        match self.kind {
            PromptKind::ConceptOnly if has_cat => {
                return Err(EmbeddingError::Prompt(
                    "concept_only template must not contain {category}".into(),
                ))
            }
            PromptKind::NameWithRandomConcept if self.rng_seed.is_none() => {
                return Err(EmbeddingError::Prompt(
                    "name_with_random_concept requires a seed".into(),
                ))
            }
            _ => {}
        }
        if self.kind.mentions_category() && !has_cat {
            return Err(EmbeddingError::Prompt(format!(
                "{} template lacks a {{category}} slot",
                self.kind.as_str()
            )));
        }
        if self.kind.mentions_concept() && !has_con {
            return Err(EmbeddingError::Prompt(format!(
                "{} template lacks a {{concept}} slot",
                self.kind.as_str()
            )));
        }
        Ok(())
    }
}

/// A rendered prompt and what it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub category: usize,
    pub concept: Option<usize>,
    pub kind: PromptKind,
}

fn render(template: &str, category: &str, concept: Option<&str>) -> String {
    let s = template.replace("{category}", category);
    match concept {
        Some(c) => s.replace("{concept}", c),
        None => s,
    }
}

/// Renders prompts for one design.
///
/// `per_category[j]` lists the concept ids associated with category `j`
/// (e.g. the nonzero rows of its association column); `concepts` holds the
/// concept texts indexed by id. The random design draws, for every
/// category, as many concepts as it owns, uniformly with replacement from the
/// concepts it does not own.
pub fn build_prompts(
    variant: &PromptVariant,
    categories: &[String],
    concepts: &[String],
    per_category: &[Vec<usize>],
) -> Result<Vec<Prompt>, EmbeddingError> {
    variant.validate()?;
    if categories.is_empty() {
        return Err(EmbeddingError::Prompt("empty category list".into()));
    }
    if variant.kind.mentions_concept() && per_category.len() != categories.len() {
        return Err(EmbeddingError::Prompt(format!(
            "{} categories but {} concept lists",
            categories.len(),
            per_category.len()
        )));
    }
    let mut prompts = Vec::new();
    match variant.kind {
        PromptKind::NameOnly => {
            for (j, name) in categories.iter().enumerate() {
                prompts.push(Prompt {
                    text: render(&variant.template, name, None),
                    category: j,
                    concept: None,
                    kind: variant.kind,
                });
            }
        }
        PromptKind::NameWithConcept | PromptKind::ConceptOnly => {
            for (j, name) in categories.iter().enumerate() {
                if per_category[j].is_empty() {
                    return Err(EmbeddingError::Prompt(format!(
                        "category {name:?} has no concepts"
                    )));
                }
                for &c in &per_category[j] {
                    let text = concepts.get(c).ok_or_else(|| {
                        EmbeddingError::Prompt(format!("concept id {c} out of range"))
                    })?;
                    prompts.push(Prompt {
                        text: render(&variant.template, name, Some(text)),
                        category: j,
                        concept: Some(c),
                        kind: variant.kind,
                    });
                }
            }
        }
        PromptKind::NameWithRandomConcept => {
            let mut rng = ChaCha8Rng::seed_from_u64(variant.rng_seed.unwrap_or_default());
            for (j, name) in categories.iter().enumerate() {
                let own: HashSet<usize> = per_category[j].iter().copied().collect();
                if own.is_empty() {
                    return Err(EmbeddingError::Prompt(format!(
                        "category {name:?} has no concepts"
                    )));
                }
                let others: Vec<usize> = (0..concepts.len()).filter(|c| !own.contains(c)).collect();
                if others.is_empty() {
                    return Err(EmbeddingError::Prompt(format!(
                        "category {name:?} owns every concept; nothing to draw from"
                    )));
                }
                for _ in 0..per_category[j].len() {
                    let c = others[rng.random_range(0..others.len())];
                    prompts.push(Prompt {
                        text: render(&variant.template, name, Some(&concepts[c])),
                        category: j,
                        concept: Some(c),
                        kind: variant.kind,
                    });
                }
            }
        }
    }
    Ok(prompts)
}
