//! Candidate concepts proposed per object, the concept–category association
//! matrix, and per-caption concept relevance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Read, Write};

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::corpus::CorpusRecord;

pub const DEFAULT_PROMPT_ID: &str = "visual-features-v1";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("object {object:?}: empty concept string at position {position}")]
    EmptyConcept { object: String, position: usize },
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unknown record id {0:?}")]
    UnknownRecord(String),
    #[error("record {record:?}: concept id {concept_id} out of range for a pool of {pool_size}")]
    ConceptOutOfRange {
        record: String,
        concept_id: usize,
        pool_size: usize,
    },
    #[error("conflicting answers for ({concept:?}, {category:?})")]
    ConflictingAnswer { concept: String, category: String },
    #[error("association file: {0}")]
    Format(String),
    #[error("line {line}: {source}")]
    JsonLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases, trims, collapses whitespace and drops one leading article.
pub fn normalize_concept(text: &str) -> String {
    let collapsed = crate::corpus::normalize_phrase(text);
    for article in ["a ", "an ", "the "] {
        if let Some(rest) = collapsed.strip_prefix(article) {
            return rest.to_string();
        }
    }
    collapsed
}

/// Deduplicated union of proposed concepts.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConceptPool {
    /// Concept texts; the position is the concept id.
    pub concepts: Vec<String>,
    /// Object phrase → ids of the concepts proposed for it.
    pub proposals: BTreeMap<String, BTreeSet<usize>>,
    /// Concept id → identifier of the prompt that first proposed it.
    pub provenance: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ConceptPool {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn id_of(&self, text: &str) -> Option<usize> {
        if self.index.len() != self.concepts.len() {
            return self
                .concepts
                .iter()
                .position(|c| c == &normalize_concept(text));
        }
        self.index.get(&normalize_concept(text)).copied()
    }

    /// Adds a concept if new and returns its id.
    pub fn intern(&mut self, text: &str, prompt_id: &str) -> usize {
        let norm = normalize_concept(text);
        if let Some(&id) = self.index.get(&norm) {
            return id;
        }
        let id = self.concepts.len();
        self.index.insert(norm.clone(), id);
        self.concepts.push(norm);
        self.provenance.push(prompt_id.to_string());
        id
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }

    pub fn from_json<R: Read>(r: R) -> Result<Self, PoolError> {
        let mut pool: ConceptPool = serde_json::from_reader(r)?;
        pool.reindex();
        Ok(pool)
    }
}

/// Object → concept lists in file order, with repeated keys preserved.
struct ProposalEntries(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for ProposalEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ProposalEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object mapping object phrases to concept lists")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<String>>()? {
                    out.push((k, v));
                }
                Ok(ProposalEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// Reads `{object: [concept, ...]}` and assigns ids in first-seen order.
pub fn ingest_proposals<R: Read>(r: R, prompt_id: &str) -> Result<ConceptPool, PoolError> {
    let entries: ProposalEntries = serde_json::from_reader(r)?;
    let mut pool = ConceptPool::default();
    for (object, concepts) in entries.0 {
        let object = crate::corpus::normalize_phrase(&object);
        for (position, c) in concepts.iter().enumerate() {
            if normalize_concept(c).is_empty() {
                return Err(PoolError::EmptyConcept { object, position });
            }
            let id = pool.intern(c, prompt_id);
            pool.proposals.entry(object.clone()).or_default().insert(id);
        }
        pool.proposals.entry(object).or_default();
    }
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationKind {
    Binary,
    Real,
}

/// Concepts × categories weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatrix {
    pub concept_ids: Vec<usize>,
    /// Concept texts aligned with `concept_ids`.
    pub concepts: Vec<String>,
    pub categories: Vec<String>,
    /// Row-major, concepts × categories.
    pub weights: Vec<f64>,
    pub kind: AssociationKind,
}

impl AssociationMatrix {
    pub fn new(
        concept_ids: Vec<usize>,
        concepts: Vec<String>,
        categories: Vec<String>,
        weights: Vec<f64>,
        kind: AssociationKind,
    ) -> Result<Self, PoolError> {
        if concept_ids.len() != concepts.len() {
            return Err(PoolError::Format(
                "concept ids and texts differ in length".into(),
            ));
        }
        if weights.len() != concept_ids.len() * categories.len() {
            return Err(PoolError::Format(format!(
                "{} weights for a {}×{} matrix",
                weights.len(),
                concept_ids.len(),
                categories.len()
            )));
        }
        if kind == AssociationKind::Binary && weights.iter().any(|&w| w != 0.0 && w != 1.0) {
            return Err(PoolError::Format(
                "binary matrix holds a non-0/1 entry".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(PoolError::Format("non-finite weight".into()));
        }
        Ok(Self {
            concept_ids,
            concepts,
            categories,
            weights,
            kind,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.concept_ids.len()
    }

    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn get(&self, concept: usize, category: usize) -> f64 {
        self.weights[concept * self.n_categories() + category]
    }

    pub fn column(&self, category: usize) -> Vec<f64> {
        (0..self.n_concepts())
            .map(|i| self.get(i, category))
            .collect()
    }

    /// Concept rows whose entry in `category` is nonzero.
    pub fn concepts_of(&self, category: usize) -> Vec<usize> {
        (0..self.n_concepts())
            .filter(|&i| self.get(i, category) != 0.0)
            .collect()
    }

    /// Categories whose column is all zeros.
    pub fn zero_columns(&self) -> Vec<usize> {
        (0..self.n_categories())
            .filter(|&j| self.column(j).iter().all(|&w| w == 0.0))
            .collect()
    }

    /// Keeps the given concept rows, in order.
    pub fn select_concepts(&self, rows: &[usize]) -> Self {
        let m = self.n_categories();
        let mut weights = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            weights.extend_from_slice(&self.weights[r * m..(r + 1) * m]);
        }
        Self {
            concept_ids: rows.iter().map(|&r| self.concept_ids[r]).collect(),
            concepts: rows.iter().map(|&r| self.concepts[r].clone()).collect(),
            categories: self.categories.clone(),
            weights,
            kind: self.kind,
        }
    }

    /// Keeps the given category columns, in order.
    pub fn select_categories(&self, cols: &[usize]) -> Self {
        let mut weights = Vec::with_capacity(self.n_concepts() * cols.len());
        for i in 0..self.n_concepts() {
            weights.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self {
            concept_ids: self.concept_ids.clone(),
            concepts: self.concepts.clone(),
            categories: cols.iter().map(|&j| self.categories[j].clone()).collect(),
            weights,
            kind: self.kind,
        }
    }

    /// Writes a one-line JSON header followed by one line of `0`/`1`
    /// characters per concept.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), PoolError> {
        if self.kind != AssociationKind::Binary {
            return Err(PoolError::Format(
                "only binary matrices use the grid format".into(),
            ));
        }
        let header = AssocHeader {
            format: "cdl-assoc".into(),
            version: 1,
            kind: self.kind,
            rows: self.n_concepts(),
            cols: self.n_categories(),
            concept_ids: self.concept_ids.clone(),
            concepts: self.concepts.clone(),
            categories: self.categories.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let m = self.n_categories();
        let mut line = Vec::with_capacity(m + 1);
        for i in 0..self.n_concepts() {
            line.clear();
            line.extend((0..m).map(|j| if self.get(i, j) != 0.0 { b'1' } else { b'0' }));
            line.push(b'\n');
            w.write_all(&line)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self, PoolError> {
        let mut first = String::new();
        r.read_line(&mut first)?;
        let header: AssocHeader = serde_json::from_str(first.trim_end())
            .map_err(|e| PoolError::Format(format!("header: {e}")))?;
        if header.format != "cdl-assoc" || header.version != 1 {
            return Err(PoolError::Format(format!(
                "unsupported header {:?} v{}",
                header.format, header.version
            )));
        }
        let mut weights = Vec::with_capacity(header.rows * header.cols);
        let mut lines = r.lines();
        for i in 0..header.rows {
            let line = lines
                .next()
                .ok_or_else(|| PoolError::Format(format!("grid ends before row {i}")))??;
            let bytes = line.trim_end().as_bytes();
            if bytes.len() != header.cols {
                return Err(PoolError::Format(format!(
                    "row {i} has {} cells, expected {}",
                    bytes.len(),
                    header.cols
                )));
            }
            for &b in bytes {
                weights.push(match b {
                    b'0' => 0.0,
                    b'1' => 1.0,
                    other => {
                        return Err(PoolError::Format(format!(
                            "row {i}: cell byte {:?} is not 0/1",
                            other as char
                        )))
                    }
                });
            }
        }
        Self::new(
            header.concept_ids,
            header.concepts,
            header.categories,
            weights,
            header.kind,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct AssocHeader {
    format: String,
    version: u32,
    kind: AssociationKind,
    rows: usize,
    cols: usize,
    concept_ids: Vec<usize>,
    concepts: Vec<String>,
    categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Answer {
    pub concept: String,
    pub category: String,
    pub answer: bool,
}

/// Side information from building the association matrix.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AssociationReport {
    /// (concept, category) pairs with no answer, defaulted to 0.
    pub missing_pairs: usize,
    /// Categories no concept is associated with.
    pub zero_columns: Vec<String>,
}

/// Builds the binary concept–category matrix from yes/no answers.
pub fn build_association_matrix(
    pool: &ConceptPool,
    categories: &[String],
    answers: &[Answer],
) -> Result<(AssociationMatrix, AssociationReport), PoolError> {
    let cat_index: HashMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(j, c)| (c.as_str(), j))
        .collect();
    let m = categories.len();
    let mut cells: Vec<Option<bool>> = vec![None; pool.len() * m];
    for a in answers {
        let i = pool
            .id_of(&a.concept)
            .ok_or_else(|| PoolError::UnknownConcept(a.concept.clone()))?;
        let j = *cat_index
            .get(a.category.as_str())
            .ok_or_else(|| PoolError::UnknownCategory(a.category.clone()))?;
        match cells[i * m + j] {
            Some(prev) if prev != a.answer => {
                return Err(PoolError::ConflictingAnswer {
                    concept: a.concept.clone(),
                    category: a.category.clone(),
                })
            }
            _ => cells[i * m + j] = Some(a.answer),
        }
    }
    let missing_pairs = cells.iter().filter(|c| c.is_none()).count();
    if missing_pairs > 0 {
        log::warn!("{missing_pairs} (concept, category) pairs have no answer; treated as 0");
    }
    let weights = cells
        .iter()
        .map(|c| if c.unwrap_or(false) { 1.0 } else { 0.0 })
        .collect();
    let matrix = AssociationMatrix::new(
        (0..pool.len()).collect(),
        pool.concepts.clone(),
        categories.to_vec(),
        weights,
        AssociationKind::Binary,
    )?;
    let zero_columns: Vec<String> = matrix
        .zero_columns()
        .into_iter()
        .map(|j| categories[j].clone())
        .collect();
    if !zero_columns.is_empty() {
        log::warn!(
            "categories with no associated concept cannot be recovered by intervention: {}",
            zero_columns.join(", ")
        );
    }
    Ok((
        matrix,
        AssociationReport {
            missing_pairs,
            zero_columns,
        },
    ))
}

pub fn read_answers<R: Read>(r: R) -> Result<Vec<Answer>, PoolError> {
    Ok(serde_json::from_reader(r)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceLine {
    pub record_id: String,
    pub relevant_concept_ids: Vec<usize>,
}

pub fn read_relevance_jsonl<R: BufRead>(r: R) -> Result<Vec<RelevanceLine>, PoolError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| PoolError::JsonLine {
                line: n + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Fills every record's relevance map over the whole pool (absent ⇒ 0).
pub fn caption_relevance(
    pool: &ConceptPool,
    records: &mut [CorpusRecord],
    relevance: &[RelevanceLine],
) -> Result<(), PoolError> {
    let index: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.record_id.as_str(), i))
        .collect();
    let mut marks: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); records.len()];
    for line in relevance {
        let i = *index
            .get(line.record_id.as_str())
            .ok_or_else(|| PoolError::UnknownRecord(line.record_id.clone()))?;
        for &c in &line.relevant_concept_ids {
            if c >= pool.len() {
                return Err(PoolError::ConceptOutOfRange {
                    record: line.record_id.clone(),
                    concept_id: c,
                    pool_size: pool.len(),
                });
            }
            marks[i].insert(c);
        }
    }
    for (record, marked) in records.iter_mut().zip(marks) {
        record.concept_relevance = (0..pool.len())
            .map(|c| (c, u8::from(marked.contains(&c))))
            .collect();
    }
    Ok(())
}
