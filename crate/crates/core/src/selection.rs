//! Budgeted concept selection trading off usefulness (mutual information)
//! against generalizability (share of categories using the concept).
//!
//! MI values are min-max normalized over the pool before mixing, so that the
//! weight `alpha` mixes two quantities on the same [0, 1] scale.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_pool::AssociationMatrix;
use crate::mi::MiScore;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("budget {budget} invalid for a pool of {pool}")]
    Budget { budget: usize, pool: usize },
    #[error("concept {0} has an MI score but no generalizability")]
    MissingG(usize),
    #[error("empty alpha grid")]
    EmptyGrid,
    #[error("validation hook failed at alpha {alpha}: {message}")]
    Hook { alpha: f64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub budget: usize,
}

impl SelectionConfig {
    pub fn validate(&self, pool: usize) -> Result<(), SelectionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SelectionError::Alpha(self.alpha));
        }
        if self.budget == 0 || self.budget > pool {
            return Err(SelectionError::Budget {
                budget: self.budget,
                pool,
            });
        }
        Ok(())
    }
}

/// Per-dataset weights found by validation on the standard benchmarks.
pub fn known_dataset_alpha(dataset: &str) -> Option<f64> {
    match dataset
        .to_ascii_lowercase()
        .replace(['-', '_', ' '], "")
        .as_str()
    {
        "imagenet" => Some(0.7),
        "food101" | "food" | "cifar100" | "cub200" | "cub" | "flowers102" | "flowers" => Some(0.8),
        "cifar10" => Some(0.9),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub concept_id: usize,
    pub i_value: f64,
    pub i_norm: f64,
    pub g_value: f64,
    pub combined: f64,
}

/// Fraction of categories associated with each concept, keyed by concept id.
pub fn generalizability(assoc: &AssociationMatrix) -> BTreeMap<usize, f64> {
    let m = assoc.n_categories() as f64;
    (0..assoc.n_concepts())
        .map(|i| {
            let count = (0..assoc.n_categories())
                .filter(|&j| assoc.get(i, j) != 0.0)
                .count();
            let g = if m > 0.0 { count as f64 / m } else { 0.0 };
            (assoc.concept_ids[i], g)
        })
        .collect()
}

/// `alpha · i_norm + (1 − alpha) · g`, sorted descending (ties by id).
pub fn combined_scores(
    mi_scores: &[MiScore],
    g_map: &BTreeMap<usize, f64>,
    alpha: f64,
) -> Result<Vec<ConceptScore>, SelectionError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SelectionError::Alpha(alpha));
    }
    let lo = mi_scores
        .iter()
        .map(|s| s.value)
        .fold(f64::INFINITY, f64::min);
    let hi = mi_scores
        .iter()
        .map(|s| s.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = mi_scores
        .iter()
        .map(|s| {
            let g = *g_map
                .get(&s.concept_id)
                .ok_or(SelectionError::MissingG(s.concept_id))?;
            let i_norm = if span > 0.0 {
                (s.value - lo) / span
            } else {
                0.5
            };
            Ok(ConceptScore {
                concept_id: s.concept_id,
                i_value: s.value,
                i_norm,
                g_value: g,
                combined: alpha * i_norm + (1.0 - alpha) * g,
            })
        })
        .collect::<Result<Vec<_>, SelectionError>>()?;
    sort_combined(&mut out);
    Ok(out)
}

fn sort_combined(scores: &mut [ConceptScore]) {
    scores.sort_by(|a, b| {
        b.combined
            .total_cmp(&a.combined)
            .then(a.concept_id.cmp(&b.concept_id))
    });
}

/// The `budget` best concept ids, best first.
pub fn select(scores: &[ConceptScore], budget: usize) -> Result<Vec<usize>, SelectionError> {
    if budget == 0 || budget > scores.len() {
        return Err(SelectionError::Budget {
            budget,
            pool: scores.len(),
        });
    }
    let mut sorted = scores.to_vec();
    sort_combined(&mut sorted);
    Ok(sorted[..budget].iter().map(|s| s.concept_id).collect())
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    /// (alpha, validation accuracy in [0, 1]) in grid order.
    pub rows: Vec<(f64, f64)>,
    pub best_accuracy: f64,
    pub recommended_alpha: f64,
}

/// Smallest alpha whose accuracy is within `drop_threshold_points`
/// accuracy points (percent) of the best.
pub fn recommend_alpha(rows: &[(f64, f64)], drop_threshold_points: f64) -> Option<(f64, f64)> {
    let best = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let floor = best - drop_threshold_points / 100.0 - 1e-12;
    rows.iter()
        .filter(|r| r.1 >= floor)
        .map(|r| r.0)
        .min_by(f64::total_cmp)
        .map(|a| (a, best))
}

/// Selects a concept set for every alpha in the grid, scores it with the
/// validation hook and recommends an alpha.
pub fn alpha_sweep<F>(
    mi_scores: &[MiScore],
    g_map: &BTreeMap<usize, f64>,
    budget: usize,
    grid: &[f64],
    drop_threshold_points: f64,
    mut hook: F,
) -> Result<AlphaSweep, SelectionError>
where
    F: FnMut(f64, &[usize]) -> Result<f64, String>,
{
    if grid.is_empty() {
        return Err(SelectionError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in grid {
        let scores = combined_scores(mi_scores, g_map, alpha)?;
        let chosen = select(&scores, budget)?;
        let acc =
            hook(alpha, &chosen).map_err(|message| SelectionError::Hook { alpha, message })?;
        rows.push((alpha, acc));
    }
    let (recommended_alpha, best_accuracy) =
        recommend_alpha(&rows, drop_threshold_points).ok_or(SelectionError::EmptyGrid)?;
    Ok(AlphaSweep {
        rows,
        best_accuracy,
        recommended_alpha,
    })
}
