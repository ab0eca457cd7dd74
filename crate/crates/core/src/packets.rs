//! Human-evaluation packets: per-image top-k concept explanations out, and
//! precision / thoroughness scores from three-way annotations back in.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbm::{predict, BottleneckModel, CbmError};
use crate::concept_pool::AssociationMatrix;
use crate::embeddings::ActivationMatrix;

/// Judgments per annotated item.
pub const JUDGES: usize = 3;

#[derive(Debug, Error)]
pub enum PacketError {
    #[error("k must be ≥ 1")]
    ZeroK,
    #[error("only {available} eligible images, {requested} requested")]
    NotEnoughImages { available: usize, requested: usize },
    #[error("axis mismatch: {0}")]
    Axis(String),
    #[error("line {line}: {source}")]
    JsonLine {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] CbmError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub concept_id: usize,
    pub concept: String,
    pub score: f64,
}

/// Ranks concepts by `a_i · w_ij` for category `j`, best first (ties by
/// concept id). `k` larger than the pool is clipped.
pub fn top_k_contributions(
    model: &BottleneckModel,
    activation_row: &[f64],
    category: usize,
    k: usize,
) -> Result<Vec<Contribution>, PacketError> {
    if k == 0 {
        return Err(PacketError::ZeroK);
    }
    let n = model.n_concepts();
    if activation_row.len() != n {
        return Err(PacketError::Axis(format!(
            "{} activations for {n} concepts",
            activation_row.len()
        )));
    }
    if category >= model.n_categories() {
        return Err(PacketError::Axis(format!(
            "category {category} out of range"
        )));
    }
    let k = if k > n {
        log::warn!("top-k {k} exceeds the {n} concepts, clipping");
        n
    } else {
        k
    };
    let mut all: Vec<Contribution> = (0..n)
        .map(|i| Contribution {
            concept_id: model.weights.concept_ids[i],
            concept: model.weights.concepts[i].clone(),
            score: activation_row[i] * model.weights.get(i, category),
        })
        .collect();
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.concept_id.cmp(&b.concept_id))
    });
    all.truncate(k);
    Ok(all)
}

/// 3 for small pools (CIFAR, Food, Flowers), 5 for large ones (ImageNet,
/// CUB). Unknown datasets go by pool size.
pub fn default_top_k(dataset: &str, n_concepts: usize) -> usize {
    let key = dataset.to_ascii_lowercase().replace(['-', '_', ' '], "");
    if key.starts_with("imagenet") || key.starts_with("cub") {
        5
    } else if key.starts_with("cifar") || key.starts_with("food") || key.starts_with("flowers") {
        3
    } else if n_concepts >= 500 {
        5
    } else {
        3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPacket {
    pub image_id: String,
    pub predicted: String,
    pub correct: bool,
    pub top_k: Vec<Contribution>,
    /// Every concept the association matrix links to the predicted category.
    pub candidate_concepts: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacketConfig {
    pub sample_size: usize,
    pub k: usize,
    pub seed: u64,
    pub include_wrong: bool,
}

/// Samples images without replacement (seeded) and explains each prediction.
/// Rows of `act` must align with `labels`; the model and `w_llm` share the
/// category axis.
pub fn export_eval_packets(
    model: &BottleneckModel,
    act: &ActivationMatrix,
    labels: &[usize],
    w_llm: &AssociationMatrix,
    config: &PacketConfig,
) -> Result<Vec<EvalPacket>, PacketError> {
    if labels.len() != act.rows() {
        return Err(PacketError::Axis(format!(
            "{} labels for {} rows",
            labels.len(),
            act.rows()
        )));
    }
    if w_llm.categories != model.weights.categories {
        return Err(PacketError::Axis(
            "model and association categories differ".into(),
        ));
    }
    let pred = predict(model, act)?;
    let eligible: Vec<usize> = (0..act.rows())
        .filter(|&i| config.include_wrong || pred.labels[i] == labels[i])
        .collect();
    if eligible.len() < config.sample_size {
        return Err(PacketError::NotEnoughImages {
            available: eligible.len(),
            requested: config.sample_size,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), config.sample_size)
        .into_iter()
        .map(|p| eligible[p])
        .collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let j = pred.labels[i];
            Ok(EvalPacket {
                image_id: act.image_ids[i].clone(),
                predicted: model.weights.categories[j].clone(),
                correct: j == labels[i],
                top_k: top_k_contributions(model, act.row(i), j, config.k)?,
                candidate_concepts: w_llm
                    .concepts_of(j)
                    .into_iter()
                    .map(|c| w_llm.concepts[c].clone())
                    .collect(),
            })
        })
        .collect()
}

pub fn write_packets<W: Write>(packets: &[EvalPacket], mut w: W) -> Result<(), PacketError> {
    for p in packets {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedConcept {
    pub concept: String,
    pub judgments: Vec<bool>,
}

/// One annotated image: whether each shown top-k concept describes it, and
/// which candidate concepts are important for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub top_k: Vec<JudgedConcept>,
    #[serde(default)]
    pub important: Vec<JudgedConcept>,
}

pub fn read_annotations<R: BufRead>(r: R) -> Result<Vec<Annotation>, PacketError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| PacketError::JsonLine {
                line: n + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    /// Mean over images of the majority-approved share of top-k concepts.
    pub precision: Option<f64>,
    /// Mean over images of the share of important concepts found in top-k.
    pub thoroughness: Option<f64>,
    pub images_precision: usize,
    pub images_thoroughness: usize,
    /// Items without exactly three judgments.
    pub excluded_items: usize,
    /// Share of agreeing annotator pairs over valid items.
    pub pairwise_agreement: Option<f64>,
}

fn majority(j: &[bool]) -> bool {
    j.iter().filter(|&&b| b).count() * 2 > j.len()
}

pub fn ingest_eval_results(annotations: &[Annotation]) -> EvalScores {
    let mut excluded = 0;
    let mut pairs = 0usize;
    let mut agree = 0usize;
    let mut valid = |items: &[JudgedConcept]| -> Vec<(String, bool)> {
        items
            .iter()
            .filter_map(|it| {
                if it.judgments.len() != JUDGES {
                    excluded += 1;
                    return None;
                }
                for a in 0..JUDGES {
                    for b in a + 1..JUDGES {
                        pairs += 1;
                        if it.judgments[a] == it.judgments[b] {
                            agree += 1;
                        }
                    }
                }
                Some((it.concept.clone(), majority(&it.judgments)))
            })
            .collect()
    };
    let mut prec = Vec::new();
    let mut thor = Vec::new();
    for ann in annotations {
        let top = valid(&ann.top_k);
        let imp = valid(&ann.important);
        if !top.is_empty() {
            prec.push(top.iter().filter(|t| t.1).count() as f64 / top.len() as f64);
        }
        let shown: BTreeSet<&str> = ann.top_k.iter().map(|t| t.concept.as_str()).collect();
        let important: Vec<&str> = imp.iter().filter(|t| t.1).map(|t| t.0.as_str()).collect();
        if !important.is_empty() {
            let covered = important.iter().filter(|c| shown.contains(*c)).count();
            thor.push(covered as f64 / important.len() as f64);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    if excluded > 0 {
        log::warn!("{excluded} annotated items lack exactly {JUDGES} judgments");
    }
    EvalScores {
        precision: mean(&prec),
        thoroughness: mean(&thor),
        images_precision: prec.len(),
        images_thoroughness: thor.len(),
        excluded_items: excluded,
        pairwise_agreement: (pairs > 0).then(|| agree as f64 / pairs as f64),
    }
}

/// Per-category counts of packets, for reporting.
pub fn packets_per_category(packets: &[EvalPacket]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in packets {
        *out.entry(p.predicted.clone()).or_insert(0) += 1;
    }
    out
}
