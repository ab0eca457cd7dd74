//! Mutual information between a concept's image similarity (continuous) and
//! its relevance indicator (binary).
//!
//! Two estimators are provided. [`mi_exact_binned`] discretizes the
//! similarities into equal-frequency bins and sums the plug-in formula over
//! the joint table; it is exact for the empirical joint and serves as the
//! oracle. [`mi_knn`] is the nearest-neighbour estimator for a discrete and
//! a continuous variable. All values are in nats.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::concept_pool::AssociationMatrix;
use crate::corpus::CorpusRecord;
use crate::embeddings::ActivationMatrix;

#[derive(Debug, Error)]
pub enum MiError {
    #[error("concept {concept_id}: {reason}")]
    Evidence { concept_id: usize, reason: String },
    #[error("{bins} bins for {samples} samples")]
    TooManyBins { bins: usize, samples: usize },
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("k = {k} must satisfy 1 ≤ k < smallest class count ({min_class})")]
    BadNeighbors { k: usize, min_class: usize },
    #[error("image {image}: label {label} not among {categories} categories")]
    LabelOutOfRange {
        image: usize,
        label: usize,
        categories: usize,
    },
    #[error("axis mismatch: {0}")]
    Axis(String),
    #[error("joint table: {0}")]
    Joint(String),
}

/// Paired observations for one concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEvidence {
    pub concept_id: usize,
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

impl ConceptEvidence {
    pub fn new(concept_id: usize, x: Vec<f64>, y: Vec<u8>) -> Result<Self, MiError> {
        let ev = Self { concept_id, x, y };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<(), MiError> {
        let err = |reason: String| MiError::Evidence {
            concept_id: self.concept_id,
            reason,
        };
        if self.x.len() != self.y.len() {
            return Err(err(format!(
                "|x| = {} but |y| = {}",
                self.x.len(),
                self.y.len()
            )));
        }
        if self.x.len() < 2 {
            return Err(err("fewer than 2 samples".into()));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite similarity".into()));
        }
        if self.y.iter().any(|&v| v > 1) {
            return Err(err("relevance outside {0,1}".into()));
        }
        Ok(())
    }

    fn class_counts(&self) -> [usize; 2] {
        let ones = self.y.iter().filter(|&&v| v == 1).count();
        [self.y.len() - ones, ones]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum Estimator {
    ExactBinned { bins: usize },
    Knn { k: usize },
}

impl Default for Estimator {
    fn default() -> Self {
        Estimator::Knn { k: 3 }
    }
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::ExactBinned { .. } => "exact_binned",
            Estimator::Knn { .. } => "knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiScore {
    pub concept_id: usize,
    /// Clipped at zero.
    pub value: f64,
    /// Before clipping.
    pub raw_value: f64,
    pub estimator: Estimator,
}

impl MiScore {
    fn clipped(concept_id: usize, raw_value: f64, estimator: Estimator) -> Self {
        Self {
            concept_id,
            value: raw_value.max(0.0),
            raw_value,
            estimator,
        }
    }
}

/// Plug-in mutual information of a joint probability table. Zero cells
/// contribute nothing.
pub fn mi_from_joint(joint: &[Vec<f64>]) -> Result<f64, MiError> {
    let rows = joint.len();
    let cols = joint.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 || joint.iter().any(|r| r.len() != cols) {
        return Err(MiError::Joint("empty or ragged table".into()));
    }
    if joint
        .iter()
        .flatten()
        .any(|&p| !(p >= 0.0) || !p.is_finite())
    {
        return Err(MiError::Joint("negative or non-finite cell".into()));
    }
    let total: f64 = joint.iter().flatten().sum();
    if total <= 0.0 {
        return Err(MiError::Joint("table sums to zero".into()));
    }
    let px: Vec<f64> = joint
        .iter()
        .map(|r| r.iter().sum::<f64>() / total)
        .collect();
    let py: Vec<f64> = (0..cols)
        .map(|j| joint.iter().map(|r| r[j]).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                let p = c / total;
                mi += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    Ok(mi)
}

/// Equal-frequency bin index per sample. Samples are ranked by value, ties
/// by index, and rank `r` falls in bin `⌊r·bins/n⌋`.
pub fn equal_frequency_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / n;
    }
    out
}

/// Plug-in estimate over equal-frequency bins of `x`.
pub fn mi_exact_binned(ev: &ConceptEvidence, bins: usize) -> Result<MiScore, MiError> {
    ev.validate()?;
    if bins < 2 {
        return Err(MiError::TooFewBins(bins));
    }
    let n = ev.x.len();
    if bins > n {
        return Err(MiError::TooManyBins { bins, samples: n });
    }
    let estimator = Estimator::ExactBinned { bins };
    let [n0, n1] = ev.class_counts();
    if n0 == 0 || n1 == 0 {
        return Ok(MiScore::clipped(ev.concept_id, 0.0, estimator));
    }
    let assign = equal_frequency_bins(&ev.x, bins);
    let mut joint = vec![vec![0.0; 2]; bins];
    for (b, &y) in assign.iter().zip(&ev.y) {
        joint[*b][y as usize] += 1.0;
    }
    let mi = mi_from_joint(&joint)?;
    Ok(MiScore::clipped(ev.concept_id, mi, estimator))
}

/// Distance from `sorted[p]` to its k-th nearest neighbour within `sorted`.
fn kth_neighbor_distance(sorted: &[f64], p: usize, k: usize) -> f64 {
    let v = sorted[p];
    let (mut lo, mut hi) = (p, p + 1);
    let mut d = 0.0;
    for _ in 0..k {
        let left = if lo > 0 {
            Some(v - sorted[lo - 1])
        } else {
            None
        };
        let right = sorted.get(hi).map(|&r| r - v);
        match (left, right) {
            (Some(l), Some(r)) if l <= r => {
                d = l;
                lo -= 1;
            }
            (Some(l), None) => {
                d = l;
                lo -= 1;
            }
            (_, Some(r)) => {
                d = r;
                hi += 1;
            }
            (None, None) => break,
        }
    }
    d
}

/// Nearest-neighbour estimate for a discrete `y` and continuous `x`.
///
/// For each sample, the distance `r` to its k-th neighbour among samples of
/// the same class is found; `m` counts all samples (itself included) strictly
/// closer than `r`. The estimate is `ψ(n) − ⟨ψ(n_y)⟩ + ψ(k) − ⟨ψ(m)⟩`.
pub fn mi_knn(ev: &ConceptEvidence, k: usize) -> Result<MiScore, MiError> {
    ev.validate()?;
    let estimator = Estimator::Knn { k };
    let counts = ev.class_counts();
    if counts[0] == 0 || counts[1] == 0 {
        return Ok(MiScore::clipped(ev.concept_id, 0.0, estimator));
    }
    let min_class = counts[0].min(counts[1]);
    if k < 1 || k >= min_class {
        return Err(MiError::BadNeighbors { k, min_class });
    }
    let first = ev.x[0];
    if ev.x.iter().all(|&v| v == first) {
        return Ok(MiScore::clipped(ev.concept_id, 0.0, estimator));
    }

    let n = ev.x.len();
    let mut all_sorted = ev.x.clone();
    all_sorted.sort_by(f64::total_cmp);

    let mut sum_m = 0.0;
    let mut sum_ny = 0.0;
    for class in 0..2u8 {
        let mut xs: Vec<f64> =
            ev.x.iter()
                .zip(&ev.y)
                .filter(|(_, &y)| y == class)
                .map(|(&x, _)| x)
                .collect();
        xs.sort_by(f64::total_cmp);
        let ny = xs.len();
        let psi_ny = digamma(ny as f64);
        for p in 0..ny {
            let r = kth_neighbor_distance(&xs, p, k);
            let v = xs[p];
            // distances, not shifted bounds: v + r may round onto the neighbour
            let lo = all_sorted.partition_point(|&a| a < v && v - a >= r);
            let hi = all_sorted.partition_point(|&a| a <= v || a - v < r);
            let m = (hi - lo).max(1);
            sum_m += digamma(m as f64);
            sum_ny += psi_ny;
        }
    }
    let nf = n as f64;
    let raw = digamma(nf) - sum_ny / nf + digamma(k as f64) - sum_m / nf;
    Ok(MiScore::clipped(ev.concept_id, raw, estimator))
}

pub fn estimate(ev: &ConceptEvidence, estimator: Estimator) -> Result<MiScore, MiError> {
    match estimator {
        Estimator::ExactBinned { bins } => mi_exact_binned(ev, bins),
        Estimator::Knn { k } => mi_knn(ev, k),
    }
}

/// Sorts scores descending by value, ties by ascending concept id.
pub fn sort_scores(scores: &mut [MiScore]) {
    scores.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.concept_id.cmp(&b.concept_id))
    });
}

/// Scores every concept (in parallel) and ranks them.
pub fn rank_concepts(
    evidence: &[ConceptEvidence],
    estimator: Estimator,
) -> Result<Vec<MiScore>, MiError> {
    if let Some(first) = evidence.first() {
        let n = first.x.len();
        if let Some(bad) = evidence.iter().find(|e| e.x.len() != n) {
            return Err(MiError::Evidence {
                concept_id: bad.concept_id,
                reason: format!("{} samples, other concepts have {n}", bad.x.len()),
            });
        }
    }
    let mut scores = evidence
        .par_iter()
        .map(|ev| estimate(ev, estimator))
        .collect::<Result<Vec<_>, _>>()?;
    sort_scores(&mut scores);
    Ok(scores)
}

/// Evidence from a labelled dataset: `y` is looked up in the association
/// matrix at the image's category. Concept ids are the matrix's.
pub fn dataset_evidence(
    act: &ActivationMatrix,
    labels: &[usize],
    assoc: &AssociationMatrix,
) -> Result<Vec<ConceptEvidence>, MiError> {
    if labels.len() != act.rows() {
        return Err(MiError::Axis(format!(
            "{} labels for {} images",
            labels.len(),
            act.rows()
        )));
    }
    if act.cols() != assoc.n_concepts() {
        return Err(MiError::Axis(format!(
            "{} activation columns for {} associated concepts",
            act.cols(),
            assoc.n_concepts()
        )));
    }
    let m = assoc.n_categories();
    if let Some((image, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= m) {
        return Err(MiError::LabelOutOfRange {
            image,
            label,
            categories: m,
        });
    }
    (0..act.cols())
        .map(|c| {
            let x = act.column(c);
            let y = labels
                .iter()
                .map(|&l| u8::from(assoc.get(c, l) != 0.0))
                .collect();
            ConceptEvidence::new(assoc.concept_ids[c], x, y)
        })
        .collect()
}

/// Evidence from a caption corpus: activation rows are matched to records by
/// id and `y` is the record's relevance for the concept. Column `c` of the
/// activations is concept id `c`.
pub fn corpus_evidence(
    act: &ActivationMatrix,
    records: &[CorpusRecord],
) -> Result<Vec<ConceptEvidence>, MiError> {
    let rows: HashMap<&str, usize> = act
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let matched: Vec<(usize, &CorpusRecord)> = records
        .iter()
        .map(|r| {
            rows.get(r.record_id.as_str())
                .map(|&i| (i, r))
                .ok_or_else(|| {
                    MiError::Axis(format!("no activation row for record {:?}", r.record_id))
                })
        })
        .collect::<Result<_, _>>()?;
    (0..act.cols())
        .map(|c| {
            let x = matched.iter().map(|&(i, _)| act.get(i, c)).collect();
            let y = matched
                .iter()
                .map(|(_, r)| r.concept_relevance.get(&c).copied().unwrap_or(0))
                .collect();
            ConceptEvidence::new(c, x, y)
        })
        .collect()
}
