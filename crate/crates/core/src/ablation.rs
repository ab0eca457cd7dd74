//! Category-name shortcut ablation: zero-shot accuracy of each prompt design
//! against one image set, with prompt embeddings looked up by text.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbm::{zero_shot, CbmError};
use crate::concept_pool::AssociationMatrix;
use crate::embeddings::{
    build_prompts, EmbeddingError, EmbeddingMatrix, Prompt, PromptKind, PromptVariant,
};

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("no embedding for prompt {0:?}")]
    MissingPrompt(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cbm(#[from] CbmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub prompt_design: String,
    pub variant: String,
    /// Percent.
    pub accuracy: f64,
    pub n_images: usize,
    pub n_prompts: usize,
}

/// Rows of `texts` matching each prompt's text, in prompt order. Row ids are
/// prompt positions, since a design may repeat a text.
pub fn lookup_prompts(
    texts: &EmbeddingMatrix,
    prompts: &[Prompt],
) -> Result<EmbeddingMatrix, AblationError> {
    let mut data = Vec::with_capacity(prompts.len() * texts.dim());
    for p in prompts {
        let r = texts
            .position(&p.text)
            .ok_or_else(|| AblationError::MissingPrompt(p.text.clone()))?;
        data.extend_from_slice(texts.row(r));
    }
    let ids = (0..prompts.len()).map(|i| format!("prompt:{i}")).collect();
    Ok(EmbeddingMatrix::new(ids, texts.dim(), data)?)
}

/// Concept positions per category, from the association columns.
pub fn concepts_per_category(w_llm: &AssociationMatrix) -> Vec<Vec<usize>> {
    (0..w_llm.n_categories())
        .map(|j| w_llm.concepts_of(j))
        .collect()
}

pub fn run_variant(
    variant: &PromptVariant,
    images: &EmbeddingMatrix,
    labels: &[usize],
    texts: &EmbeddingMatrix,
    w_llm: &AssociationMatrix,
) -> Result<(f64, usize), AblationError> {
    let prompts = build_prompts(
        variant,
        &w_llm.categories,
        &w_llm.concepts,
        &concepts_per_category(w_llm),
    )?;
    let emb = lookup_prompts(texts, &prompts)?;
    let r = zero_shot(images, &emb, &prompts, &w_llm.categories, Some(labels))?;
    Ok((r.accuracy.unwrap_or(0.0), prompts.len()))
}

/// One row per design in `kinds`, default templates, `seed` for the random
/// design.
pub fn prompt_ablation(
    dataset: &str,
    kinds: &[PromptKind],
    images: &EmbeddingMatrix,
    labels: &[usize],
    texts: &EmbeddingMatrix,
    w_llm: &AssociationMatrix,
    seed: u64,
) -> Result<Vec<AblationRow>, AblationError> {
    kinds
        .iter()
        .map(|&kind| {
            let variant = PromptVariant::new(kind, Some(seed));
            let (acc, n_prompts) = run_variant(&variant, images, labels, texts, w_llm)?;
            Ok(AblationRow {
                dataset: dataset.to_string(),
                prompt_design: kind.label().to_string(),
                variant: kind.as_str().to_string(),
                accuracy: 100.0 * acc,
                n_images: images.rows(),
                n_prompts,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("dataset,prompt_design,variant,accuracy,n_images,n_prompts\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{},{}\n",
            r.dataset, r.prompt_design, r.variant, r.accuracy, r.n_images, r.n_prompts
        ));
    }
    s
}
