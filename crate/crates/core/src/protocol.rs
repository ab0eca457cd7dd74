//! Evaluation protocols: select concepts (and optionally learn projections)
//! on one set of categories, then train and score a fresh bottleneck on
//! another, with and without the learned projections.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbm::{
    accuracy, intervention_accuracy, predict, train_cbm, BottleneckModel, CbmConfig, CbmError,
    InterventionReport,
};
use crate::concept_learning::{
    fit, pseudo_labels, FitResult, LearningConfig, LearningData, LearningError, ProjectionPair,
};
use crate::concept_pool::AssociationMatrix;
use crate::dataset::{Dataset, Split};
use crate::embeddings::{
    activations, zscore, ActivationMatrix, EmbeddingError, EmbeddingMatrix, Prompt, PromptKind,
};
use crate::mi::{dataset_evidence, rank_concepts, Estimator, MiError, MiScore};
use crate::selection::{
    combined_scores, generalizability, select, SelectionConfig, SelectionError,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("seen and unseen categories overlap: {0:?}")]
    Overlap(Vec<String>),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("{0}")]
    Split(String),
    #[error("concept {0} not in the association matrix")]
    UnknownConcept(usize),
    #[error("source and target concept pools differ")]
    PoolMismatch,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Mi(#[from] MiError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Cbm(#[from] CbmError),
    #[error(transparent)]
    Learning(#[from] LearningError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSpec {
    Full,
    FewShot {
        k: usize,
    },
    SeenUnseen {
        seen: Vec<String>,
        unseen: Vec<String>,
    },
    CrossDomain,
}

impl SplitSpec {
    pub fn name(&self) -> String {
        match self {
            SplitSpec::Full => "full".into(),
            SplitSpec::FewShot { k } => format!("few_shot_{k}"),
            SplitSpec::SeenUnseen { .. } => "seen_unseen".into(),
            SplitSpec::CrossDomain => "cross_domain".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub estimator: Estimator,
    pub selection: SelectionConfig,
    pub cbm: CbmConfig,
    pub learning: Option<LearningConfig>,
    pub intervention_bias: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub train_accuracy: f64,
    pub accuracy: f64,
    pub intervention: Option<InterventionReport>,
    pub n_train: usize,
    pub n_test: usize,
    pub cbm_iterations: usize,
    pub cbm_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningSummary {
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub temperature: f64,
    pub pseudo_label_agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub split: String,
    pub selection_categories: Vec<String>,
    pub evaluation_categories: Vec<String>,
    pub selected: Vec<usize>,
    pub baseline: EvalMetrics,
    pub learned: Option<EvalMetrics>,
    pub learning: Option<LearningSummary>,
    /// Learned minus baseline.
    pub delta_accuracy: Option<f64>,
    pub delta_intervention: Option<f64>,
}

/// A trained bottleneck with the test activations it was scored on.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub model: BottleneckModel,
    pub test_activations: ActivationMatrix,
    pub test_labels: Vec<usize>,
    /// Association restricted to the selected concepts and evaluated
    /// categories.
    pub w_llm: AssociationMatrix,
}

fn category_indices(ds: &Dataset, names: &[String]) -> Result<Vec<usize>, ProtocolError> {
    names
        .iter()
        .map(|n| {
            ds.categories()
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| ProtocolError::UnknownCategory(n.clone()))
        })
        .collect()
}

fn remap(labels: &[usize], rows: &[usize], cats: &[usize]) -> Vec<usize> {
    let pos: BTreeMap<usize, usize> = cats.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    rows.iter().map(|&r| pos[&labels[r]]).collect()
}

fn concept_positions(w: &AssociationMatrix, ids: &[usize]) -> Result<Vec<usize>, ProtocolError> {
    ids.iter()
        .map(|&id| {
            w.concept_ids
                .iter()
                .position(|&c| c == id)
                .ok_or(ProtocolError::UnknownConcept(id))
        })
        .collect()
}

/// Raw cosine activations, optionally through learned projections.
pub fn concept_activations(
    images: &EmbeddingMatrix,
    concepts: &EmbeddingMatrix,
    proj: Option<&ProjectionPair>,
) -> Result<ActivationMatrix, ProtocolError> {
    Ok(match proj {
        None => activations(images, concepts)?,
        Some(p) => activations(&p.project_images(images)?, &p.project_texts(concepts)?)?,
    })
}

/// MI of every concept on `rows`, with relevance read from the association
/// columns of `cats`.
pub fn rank_on_rows(
    ds: &Dataset,
    rows: &[usize],
    cats: &[usize],
    estimator: Estimator,
) -> Result<Vec<MiScore>, ProtocolError> {
    let act = concept_activations(&ds.images.subset(rows)?, &ds.concepts, None)?;
    let w = ds.w_llm.select_categories(cats);
    let ev = dataset_evidence(&act, &remap(&ds.labels, rows, cats), &w)?;
    Ok(rank_concepts(&ev, estimator)?)
}

/// Budgeted selection with generalizability measured over `cats`.
pub fn select_on(
    ds: &Dataset,
    mi: &[MiScore],
    cats: &[usize],
    config: &SelectionConfig,
) -> Result<Vec<usize>, ProtocolError> {
    config.validate(mi.len())?;
    let g = generalizability(&ds.w_llm.select_categories(cats));
    let scores = combined_scores(mi, &g, config.alpha)?;
    Ok(select(&scores, config.budget)?)
}

fn name_prompts(cats: &[usize], ds: &Dataset) -> (Vec<Prompt>, Vec<String>) {
    let names: Vec<String> = cats.iter().map(|&j| ds.categories()[j].clone()).collect();
    let prompts = names
        .iter()
        .enumerate()
        .map(|(i, n)| Prompt {
            text: n.clone(),
            category: i,
            concept: None,
            kind: PromptKind::NameOnly,
        })
        .collect();
    (prompts, names)
}

/// Fits projections on `cats` with zero-shot pseudo-labels; validation uses
/// the val split.
pub fn learn_on(
    ds: &Dataset,
    cats: &[usize],
    train_rows: &[usize],
    config: &LearningConfig,
) -> Result<(FitResult, f64), ProtocolError> {
    let val_rows = ds.rows(Split::Val, Some(cats));
    if val_rows.is_empty() {
        return Err(ProtocolError::Split(
            "concept learning needs validation images".into(),
        ));
    }
    let (prompts, names) = name_prompts(cats, ds);
    let prompt_emb = ds.name_prompts.subset(cats)?;
    let train_images = ds.images.subset(train_rows)?;
    let val_images = ds.images.subset(&val_rows)?;
    let train_pl = pseudo_labels(&train_images, &prompt_emb, &prompts, &names)?;
    let val_pl = pseudo_labels(&val_images, &prompt_emb, &prompts, &names)?;
    let agreement = accuracy(&train_pl, &remap(&ds.labels, train_rows, cats));
    let w = ds.w_llm.select_categories(cats);
    let init = ProjectionPair::identity(ds.images.dim(), config.initial_temperature);
    let data = LearningData {
        train_images: &train_images,
        train_labels: &train_pl,
        val_images: &val_images,
        val_labels: &val_pl,
        concepts: &ds.concepts,
        w_llm: &w,
    };
    Ok((fit(&init, &data, config)?, agreement))
}

/// Trains a bottleneck on `train_rows` over the selected concepts and scores
/// it on `test_rows`. Activations are z-scored over both row sets together.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_on(
    ds: &Dataset,
    cats: &[usize],
    train_rows: &[usize],
    test_rows: &[usize],
    selected: &[usize],
    proj: Option<&ProjectionPair>,
    cbm: &CbmConfig,
    intervention_bias: bool,
) -> Result<Evaluation, ProtocolError> {
    let pos = concept_positions(&ds.w_llm, selected)?;
    let rows: Vec<usize> = train_rows.iter().chain(test_rows).copied().collect();
    let raw = concept_activations(&ds.images.subset(&rows)?, &ds.concepts.subset(&pos)?, proj)?;
    let act = zscore(&raw)?;
    let n_train = train_rows.len();
    let train_act = act.select_rows(&(0..n_train).collect::<Vec<_>>());
    let test_act = act.select_rows(&(n_train..rows.len()).collect::<Vec<_>>());
    let y_train = remap(&ds.labels, train_rows, cats);
    let y_test = remap(&ds.labels, test_rows, cats);
    let names: Vec<String> = cats.iter().map(|&j| ds.categories()[j].clone()).collect();
    let model = train_cbm(&train_act, &y_train, &names, cbm)?;
    let train_accuracy = accuracy(&predict(&model, &train_act)?.labels, &y_train);
    let test_pred = predict(&model, &test_act)?;
    let w = ds.w_llm.select_concepts(&pos).select_categories(cats);
    let intervention = match intervention_accuracy(&model, &w, &y_test, intervention_bias) {
        Ok(r) => Some(r),
        Err(CbmError::NothingToEvaluate(why)) => {
            log::warn!("intervention accuracy undefined: {why}");
            None
        }
        Err(e) => return Err(e.into()),
    };
    Ok(Evaluation {
        metrics: EvalMetrics {
            train_accuracy,
            accuracy: accuracy(&test_pred.labels, &y_test),
            intervention,
            n_train,
            n_test: test_rows.len(),
            cbm_iterations: model.meta.iterations,
            cbm_converged: model.meta.converged,
        },
        model,
        test_activations: test_act,
        test_labels: y_test,
        w_llm: w,
    })
}

fn few_shot_rows(
    ds: &Dataset,
    cats: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<usize>, ProtocolError> {
    if k == 0 {
        return Err(ProtocolError::Split("few-shot k must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &j in cats {
        let mut pool = ds.rows(Split::Train, Some(&[j]));
        if pool.len() < k {
            return Err(ProtocolError::Split(format!(
                "category {:?} has {} training images, {k} requested",
                ds.categories()[j],
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(k);
        pool.sort_unstable();
        out.extend(pool);
    }
    out.sort_unstable();
    Ok(out)
}

/// Runs one protocol. `target` is only read for cross-domain splits;
/// `ranking` replaces the MI ranking computed on the selection rows.
pub fn run_protocol(
    split: &SplitSpec,
    source: &Dataset,
    target: Option<&Dataset>,
    config: &ProtocolConfig,
    ranking: Option<&[MiScore]>,
) -> Result<ProtocolReport, ProtocolError> {
    let all: Vec<usize> = (0..source.categories().len()).collect();
    let (sel_cats, eval_ds, eval_cats, sel_rows) = match split {
        SplitSpec::Full => (
            all.clone(),
            source,
            all.clone(),
            source.rows(Split::Train, None),
        ),
        SplitSpec::FewShot { k } => {
            let rows = few_shot_rows(source, &all, *k, config.seed)?;
            (all.clone(), source, all.clone(), rows)
        }
        SplitSpec::SeenUnseen { seen, unseen } => {
            let s = category_indices(source, seen)?;
            let u = category_indices(source, unseen)?;
            let mut s_sorted = s.clone();
            let mut u_sorted = u.clone();
            s_sorted.sort_unstable();
            u_sorted.sort_unstable();
            if s_sorted != u_sorted {
                let overlap: Vec<String> = s
                    .iter()
                    .filter(|j| u.contains(j))
                    .map(|&j| source.categories()[j].clone())
                    .collect();
                if !overlap.is_empty() {
                    return Err(ProtocolError::Overlap(overlap));
                }
            }
            if s.is_empty() || u.len() < 2 {
                return Err(ProtocolError::Split(
                    "need seen categories and at least two unseen categories".into(),
                ));
            }
            let rows = source.rows(Split::Train, Some(&s));
            (s, source, u, rows)
        }
        SplitSpec::CrossDomain => {
            let t = target.ok_or_else(|| {
                ProtocolError::Split("cross-domain needs a target dataset".into())
            })?;
            if t.w_llm.concept_ids != source.w_llm.concept_ids {
                return Err(ProtocolError::PoolMismatch);
            }
            let t_all: Vec<usize> = (0..t.categories().len()).collect();
            (all.clone(), t, t_all, source.rows(Split::Train, None))
        }
    };

    let mi = match ranking {
        Some(r) => r.to_vec(),
        None => rank_on_rows(source, &sel_rows, &sel_cats, config.estimator)?,
    };
    let selected = select_on(source, &mi, &sel_cats, &config.selection)?;

    let (eval_train, eval_test) = match split {
        SplitSpec::FewShot { .. } => (
            sel_rows.clone(),
            eval_ds.rows(Split::Test, Some(&eval_cats)),
        ),
        _ => (
            eval_ds.rows(Split::Train, Some(&eval_cats)),
            eval_ds.rows(Split::Test, Some(&eval_cats)),
        ),
    };
    if eval_train.is_empty() || eval_test.is_empty() {
        return Err(ProtocolError::Split(
            "evaluation needs train and test images".into(),
        ));
    }
    let baseline = evaluate_on(
        eval_ds,
        &eval_cats,
        &eval_train,
        &eval_test,
        &selected,
        None,
        &config.cbm,
        config.intervention_bias,
    )?
    .metrics;

    let (learned, learning) = match &config.learning {
        None => (None, None),
        Some(lc) => {
            let (fit, agreement) = learn_on(source, &sel_cats, &sel_rows, lc)?;
            let m = evaluate_on(
                eval_ds,
                &eval_cats,
                &eval_train,
                &eval_test,
                &selected,
                Some(&fit.projection),
                &config.cbm,
                config.intervention_bias,
            )?
            .metrics;
            let summary = LearningSummary {
                best_epoch: fit.best_epoch,
                initial_val_loss: fit.initial_val_loss,
                best_val_loss: fit.best_val_loss,
                temperature: fit.projection.temperature,
                pseudo_label_agreement: agreement,
            };
            (Some(m), Some(summary))
        }
    };
    let delta_accuracy = learned.as_ref().map(|l| l.accuracy - baseline.accuracy);
    let delta_intervention = learned.as_ref().and_then(|l| {
        Some(l.intervention.as_ref()?.accuracy - baseline.intervention.as_ref()?.accuracy)
    });
    let names =
        |ds: &Dataset, cs: &[usize]| cs.iter().map(|&j| ds.categories()[j].clone()).collect();
    Ok(ProtocolReport {
        split: split.name(),
        selection_categories: names(source, &sel_cats),
        evaluation_categories: names(eval_ds, &eval_cats),
        selected,
        baseline,
        learned,
        learning,
        delta_accuracy,
        delta_intervention,
    })
}
