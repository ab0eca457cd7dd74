//! Concept bottleneck classifiers: a linear map from concept activations to
//! category logits, `a·W + b`.
//!
//! Training minimizes the mean multinomial cross-entropy plus
//! `reg / (2n) · ‖W‖²` (bias unpenalized) with L-BFGS and a backtracking
//! Armijo line search, which makes the objective non-increasing per
//! iteration. Starting from zero weights, the fit is fully deterministic.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concept_pool::{AssociationKind, AssociationMatrix};
use crate::embeddings::{activations, ActivationMatrix, EmbeddingError, EmbeddingMatrix, Prompt};

#[derive(Debug, Error)]
pub enum CbmError {
    #[error("need at least 2 categories with samples, got {0}")]
    SingleClass(usize),
    #[error("sample {index}: label {label} outside {categories} categories")]
    Label {
        index: usize,
        label: usize,
        categories: usize,
    },
    #[error("axis mismatch: {0}")]
    Axis(String),
    #[error("category {0:?} has no prompts")]
    NoPrompts(String),
    #[error("no sample could be evaluated ({0})")]
    NothingToEvaluate(String),
    #[error("non-finite objective at iteration {0}")]
    NonFinite(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbmConfig {
    /// L2 strength on the weights.
    pub reg: f64,
    pub max_iter: usize,
    /// Stop once the gradient's Euclidean norm is at or below this.
    pub tol: f64,
    pub seed: u64,
    pub fit_bias: bool,
}

impl Default for CbmConfig {
    fn default() -> Self {
        Self {
            reg: 1.0,
            max_iter: 500,
            tol: 1e-6,
            seed: 0,
            fit_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub reg: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub grad_norm: f64,
    /// Objective before the first step and after every accepted step.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckModel {
    /// Concepts × categories, real-valued.
    pub weights: AssociationMatrix,
    pub bias: Vec<f64>,
    pub meta: TrainingMeta,
}

impl BottleneckModel {
    pub fn n_concepts(&self) -> usize {
        self.weights.n_concepts()
    }

    pub fn n_categories(&self) -> usize {
        self.weights.n_categories()
    }
}

/// Objective and gradient for a flat parameter vector `[W (n×m row-major), b]`.
struct Objective<'a> {
    x: &'a [f64],
    labels: &'a [usize],
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    reg: f64,
    fit_bias: bool,
}

impl Objective<'_> {
    fn dim(&self) -> usize {
        self.n_features * self.n_classes + self.n_classes
    }

    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (d, m, n) = (self.n_features, self.n_classes, self.n_samples);
        let (w, b) = theta.split_at(d * m);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; m];
        for i in 0..n {
            let a = &self.x[i * d..(i + 1) * d];
            z.copy_from_slice(b);
            for (f, &av) in a.iter().enumerate() {
                if av != 0.0 {
                    let row = &w[f * m..(f + 1) * m];
                    for (zj, wj) in z.iter_mut().zip(row) {
                        *zj += av * wj;
                    }
                }
            }
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            let lse = zmax + sum.ln();
            loss += lse - z[self.labels[i]];
            // residual p − onehot, reusing z
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = (*zj - lse).exp() - if j == self.labels[i] { 1.0 } else { 0.0 };
            }
            for (f, &av) in a.iter().enumerate() {
                if av != 0.0 {
                    let g = &mut grad[f * m..(f + 1) * m];
                    for (gj, rj) in g.iter_mut().zip(&z) {
                        *gj += av * rj;
                    }
                }
            }
            if self.fit_bias {
                let gb = &mut grad[d * m..];
                for (gj, rj) in gb.iter_mut().zip(&z) {
                    *gj += rj;
                }
            }
        }
        let nf = n as f64;
        let mut penalty = 0.0;
        for (g, &wv) in grad[..d * m].iter_mut().zip(w) {
            *g = *g / nf + self.reg / nf * wv;
            penalty += wv * wv;
        }
        for g in grad[d * m..].iter_mut() {
            *g /= nf;
        }
        loss / nf + 0.5 * self.reg / nf * penalty
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const LBFGS_MEMORY: usize = 10;

/// L-BFGS with Armijo backtracking. Returns the final parameters and meta.
fn lbfgs(
    obj: &Objective,
    max_iter: usize,
    tol: f64,
) -> Result<(Vec<f64>, usize, bool, f64, f64, Vec<f64>), CbmError> {
    let dim = obj.dim();
    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut f = obj.eval(&theta, &mut grad);
    if !f.is_finite() {
        return Err(CbmError::NonFinite(0));
    }
    let mut history = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut new_theta = vec![0.0; dim];
    let mut new_grad = vec![0.0; dim];
    let mut iterations = 0;
    let mut gnorm = dot(&grad, &grad).sqrt();
    let mut converged = gnorm <= tol;

    while !converged && iterations < max_iter {
        // two-loop recursion
        let mut q = grad.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alphas[i] = rho * dot(&s_hist[i], &q);
            for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
                *qv -= alphas[i] * yv;
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / gnorm.max(1.0)
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
                *qv += sv * (alphas[i] - beta);
            }
        }
        let mut dir: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir = grad.iter().map(|g| -g / gnorm.max(1.0)).collect();
            slope = dot(&grad, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for ((nt, t), d) in new_theta.iter_mut().zip(&theta).zip(&dir) {
                *nt = t + step * d;
            }
            let nf = obj.eval(&new_theta, &mut new_grad);
            if nf.is_finite() && nf <= f + 1e-4 * step * slope {
                accepted = Some(nf);
                break;
            }
            step *= 0.5;
        }
        let Some(nf) = accepted else {
            // no further decrease representable
            break;
        };
        iterations += 1;
        let s: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&y, &y).max(1e-300) {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        std::mem::swap(&mut theta, &mut new_theta);
        std::mem::swap(&mut grad, &mut new_grad);
        f = nf;
        history.push(f);
        gnorm = dot(&grad, &grad).sqrt();
        converged = gnorm <= tol;
    }
    Ok((theta, iterations, converged, f, gnorm, history))
}

fn check_labels(labels: &[usize], m: usize) -> Result<(), CbmError> {
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= m) {
        return Err(CbmError::Label {
            index,
            label,
            categories: m,
        });
    }
    Ok(())
}

/// Fits a bottleneck model on (typically z-scored) activations.
pub fn train_cbm(
    act: &ActivationMatrix,
    labels: &[usize],
    categories: &[String],
    config: &CbmConfig,
) -> Result<BottleneckModel, CbmError> {
    let m = categories.len();
    if labels.len() != act.rows() {
        return Err(CbmError::Axis(format!(
            "{} labels for {} rows",
            labels.len(),
            act.rows()
        )));
    }
    check_labels(labels, m)?;
    let mut present = vec![false; m];
    for &l in labels {
        present[l] = true;
    }
    let distinct = present.iter().filter(|&&p| p).count();
    if m < 2 || distinct < 2 {
        return Err(CbmError::SingleClass(distinct));
    }
    let obj = Objective {
        x: &act.values,
        labels,
        n_samples: act.rows(),
        n_features: act.cols(),
        n_classes: m,
        reg: config.reg,
        fit_bias: config.fit_bias,
    };
    let (theta, iterations, converged, final_loss, grad_norm, loss_history) =
        lbfgs(&obj, config.max_iter, config.tol)?;
    let n = act.cols();
    let weights = AssociationMatrix::new(
        (0..n).collect(),
        act.concept_ids.clone(),
        categories.to_vec(),
        theta[..n * m].to_vec(),
        AssociationKind::Real,
    )
    .map_err(|e| CbmError::Format(e.to_string()))?;
    Ok(BottleneckModel {
        weights,
        bias: theta[n * m..].to_vec(),
        meta: TrainingMeta {
            seed: config.seed,
            reg: config.reg,
            iterations,
            converged,
            final_loss,
            grad_norm,
            loss_history,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// Rows × categories.
    pub logits: Vec<f64>,
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = j;
        }
    }
    best
}

pub fn predict(model: &BottleneckModel, act: &ActivationMatrix) -> Result<Prediction, CbmError> {
    let (n, m) = (model.n_concepts(), model.n_categories());
    if act.cols() != n {
        return Err(CbmError::Axis(format!(
            "model has {n} concepts, activations have {}",
            act.cols()
        )));
    }
    let mut logits = Vec::with_capacity(act.rows() * m);
    let mut labels = Vec::with_capacity(act.rows());
    for i in 0..act.rows() {
        let a = act.row(i);
        let mut z = model.bias.clone();
        for (f, &av) in a.iter().enumerate() {
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += av * model.weights.get(f, j);
            }
        }
        labels.push(argmax(&z));
        logits.extend(z);
    }
    Ok(Prediction { labels, logits })
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / predicted.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    pub predictions: Vec<usize>,
    /// Images × categories mean prompt similarity.
    pub scores: Vec<f64>,
    pub accuracy: Option<f64>,
}

/// Scores each category by the mean cosine similarity between the image and
/// that category's prompts. `prompt_embeddings` row `p` embeds `prompts[p]`.
pub fn zero_shot(
    images: &EmbeddingMatrix,
    prompt_embeddings: &EmbeddingMatrix,
    prompts: &[Prompt],
    categories: &[String],
    labels: Option<&[usize]>,
) -> Result<ZeroShotResult, CbmError> {
    if prompt_embeddings.rows() != prompts.len() {
        return Err(CbmError::Axis(format!(
            "{} prompt embeddings for {} prompts",
            prompt_embeddings.rows(),
            prompts.len()
        )));
    }
    let m = categories.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (p, prompt) in prompts.iter().enumerate() {
        if prompt.category >= m {
            return Err(CbmError::Axis(format!(
                "prompt {p} names category {} of {m}",
                prompt.category
            )));
        }
        members[prompt.category].push(p);
    }
    if let Some(j) = members.iter().position(|v| v.is_empty()) {
        return Err(CbmError::NoPrompts(categories[j].clone()));
    }
    let sims = activations(images, prompt_embeddings)?;
    let mut scores = Vec::with_capacity(images.rows() * m);
    let mut predictions = Vec::with_capacity(images.rows());
    for i in 0..images.rows() {
        let row = sims.row(i);
        let s: Vec<f64> = members
            .iter()
            .map(|ps| ps.iter().map(|&p| row[p]).sum::<f64>() / ps.len() as f64)
            .collect();
        predictions.push(argmax(&s));
        scores.extend(s);
    }
    let accuracy = match labels {
        Some(l) => {
            if l.len() != predictions.len() {
                return Err(CbmError::Axis(format!(
                    "{} labels for {} images",
                    l.len(),
                    predictions.len()
                )));
            }
            Some(accuracy(&predictions, l))
        }
        None => None,
    };
    Ok(ZeroShotResult {
        predictions,
        scores,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Samples whose category has no associated concept.
    pub excluded_zero_signature: usize,
    /// Samples whose category shares its signature with another category.
    pub excluded_ambiguous: usize,
    /// Category index pairs with identical signatures.
    pub ambiguous_pairs: Vec<(usize, usize)>,
}

/// Accuracy of `g·W_trained (+ b)` where `g` is the binary signature of the
/// sample's true category.
pub fn intervention_accuracy(
    model: &BottleneckModel,
    w_llm: &AssociationMatrix,
    labels: &[usize],
    use_bias: bool,
) -> Result<InterventionReport, CbmError> {
    let (n, m) = (model.n_concepts(), model.n_categories());
    if w_llm.n_concepts() != n || w_llm.n_categories() != m {
        return Err(CbmError::Axis(format!(
            "model is {n}×{m}, association matrix is {}×{}",
            w_llm.n_concepts(),
            w_llm.n_categories()
        )));
    }
    check_labels(labels, m)?;
    let columns: Vec<Vec<f64>> = (0..m).map(|j| w_llm.column(j)).collect();
    let zero: Vec<bool> = columns
        .iter()
        .map(|c| c.iter().all(|&v| v == 0.0))
        .collect();
    let mut ambiguous = vec![false; m];
    let mut ambiguous_pairs = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if !zero[a] && !zero[b] && columns[a] == columns[b] {
                ambiguous[a] = true;
                ambiguous[b] = true;
                ambiguous_pairs.push((a, b));
            }
        }
    }
    if !ambiguous_pairs.is_empty() {
        log::info!(
            "{} category pairs share a concept signature",
            ambiguous_pairs.len()
        );
    }
    // predicted category per true category
    let predicted: Vec<usize> = columns
        .iter()
        .map(|g| {
            let z: Vec<f64> = (0..m)
                .map(|j| {
                    let b = if use_bias { model.bias[j] } else { 0.0 };
                    b + g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * model.weights.get(i, j))
                        .sum::<f64>()
                })
                .collect();
            argmax(&z)
        })
        .collect();
    let mut report = InterventionReport {
        accuracy: 0.0,
        correct: 0,
        evaluated: 0,
        excluded_zero_signature: 0,
        excluded_ambiguous: 0,
        ambiguous_pairs,
    };
    for &l in labels {
        if zero[l] {
            report.excluded_zero_signature += 1;
        } else if ambiguous[l] {
            report.excluded_ambiguous += 1;
        } else {
            report.evaluated += 1;
            if predicted[l] == l {
                report.correct += 1;
            }
        }
    }
    if report.evaluated == 0 {
        return Err(CbmError::NothingToEvaluate(format!(
            "{} zero-signature, {} ambiguous",
            report.excluded_zero_signature, report.excluded_ambiguous
        )));
    }
    report.accuracy = report.correct as f64 / report.evaluated as f64;
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    concepts: Vec<String>,
    concept_ids: Vec<usize>,
    categories: Vec<String>,
    meta: TrainingMeta,
}

/// JSON header line, then `n×m` weights and `m` biases as f32 LE.
pub fn write_model<W: Write>(model: &BottleneckModel, mut w: W) -> Result<(), CbmError> {
    let header = ModelHeader {
        format: "cdl-cbm".into(),
        version: 1,
        concepts: model.weights.concepts.clone(),
        concept_ids: model.weights.concept_ids.clone(),
        categories: model.weights.categories.clone(),
        meta: model.meta.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in model.weights.weights.iter().chain(&model.bias) {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: BufRead>(mut r: R) -> Result<BottleneckModel, CbmError> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let header: ModelHeader =
        serde_json::from_str(first.trim_end()).map_err(|e| CbmError::Format(e.to_string()))?;
    if header.format != "cdl-cbm" || header.version != 1 {
        return Err(CbmError::Format(format!(
            "unsupported header {:?} v{}",
            header.format, header.version
        )));
    }
    let (n, m) = (header.concepts.len(), header.categories.len());
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != (n * m + m) * 4 {
        return Err(CbmError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            (n * m + m) * 4
        )));
    }
    let vals: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let weights = AssociationMatrix::new(
        header.concept_ids,
        header.concepts,
        header.categories,
        vals[..n * m].to_vec(),
        AssociationKind::Real,
    )
    .map_err(|e| CbmError::Format(e.to_string()))?;
    Ok(BottleneckModel {
        weights,
        bias: vals[n * m..].to_vec(),
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{Normalization, PromptKind};

    fn act(rows: usize, cols: usize, values: Vec<f64>) -> ActivationMatrix {
        ActivationMatrix {
            image_ids: (0..rows).map(|i| format!("i{i}")).collect(),
            concept_ids: (0..cols).map(|j| format!("c{j}")).collect(),
            values,
            normalization: Normalization::Zscored,
        }
    }

    fn cats(m: usize) -> Vec<String> {
        (0..m).map(|j| format!("k{j}")).collect()
    }

    fn model(n: usize, m: usize, w: Vec<f64>, bias: Vec<f64>) -> BottleneckModel {
        BottleneckModel {
            weights: AssociationMatrix::new(
                (0..n).collect(),
                (0..n).map(|i| format!("c{i}")).collect(),
                cats(m),
                w,
                AssociationKind::Real,
            )
            .unwrap(),
            bias,
            meta: TrainingMeta {
                seed: 0,
                reg: 0.0,
                iterations: 0,
                converged: true,
                final_loss: 0.0,
                grad_norm: 0.0,
                loss_history: vec![],
            },
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8, 1.0, 1.0];
        let labels = vec![0, 2, 1, 2];
        let obj = Objective {
            x: &x,
            labels: &labels,
            n_samples: 4,
            n_features: 2,
            n_classes: 3,
            reg: 0.7,
            fit_bias: true,
        };
        let theta: Vec<f64> = (0..obj.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = vec![0.0; obj.dim()];
        obj.eval(&theta, &mut g);
        let mut scratch = vec![0.0; obj.dim()];
        for k in 0..obj.dim() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += 1e-6;
            tm[k] -= 1e-6;
            let fd = (obj.eval(&tp, &mut scratch) - obj.eval(&tm, &mut scratch)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn zero_features_predict_majority() {
        let labels = vec![0, 1, 1, 1, 2, 1];
        let a = act(6, 2, vec![0.0; 12]);
        let mdl = train_cbm(&a, &labels, &cats(3), &CbmConfig::default()).unwrap();
        let p = predict(&mdl, &a).unwrap();
        assert!(p.labels.iter().all(|&l| l == 1));
        assert!((accuracy(&p.labels, &labels) - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_rejected() {
        let a = act(3, 1, vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            train_cbm(&a, &[1, 1, 1], &cats(2), &CbmConfig::default()),
            Err(CbmError::SingleClass(1))
        ));
        assert!(train_cbm(&a, &[0, 1, 5], &cats(2), &CbmConfig::default()).is_err());
    }

    #[test]
    fn identity_weights_pick_the_hot_concept() {
        let mdl = model(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.0; 3]);
        let a = act(1, 3, vec![0.0, 1.0, 0.0]);
        assert_eq!(predict(&mdl, &a).unwrap().labels, vec![1]);
        let shifted = model(3, 3, mdl.weights.weights.clone(), vec![4.2; 3]);
        assert_eq!(predict(&shifted, &a).unwrap().labels, vec![1]);
        let bad = act(1, 2, vec![0.0, 1.0]);
        assert!(matches!(predict(&mdl, &bad), Err(CbmError::Axis(_))));
    }

    #[test]
    fn ties_go_to_lowest_category() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn batch_predictions_keep_order() {
        let mdl = model(2, 2, vec![1., 0., 0., 1.], vec![0.0; 2]);
        let vals: Vec<f64> = (0..100)
            .flat_map(|i| if i % 3 == 0 { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let p = predict(&mdl, &act(100, 2, vals)).unwrap();
        assert_eq!(p.labels.len(), 100);
        for (i, &l) in p.labels.iter().enumerate() {
            assert_eq!(l, usize::from(i % 3 != 0));
        }
    }

    fn binary(n: usize, m: usize, w: Vec<f64>) -> AssociationMatrix {
        AssociationMatrix::new(
            (0..n).collect(),
            (0..n).map(|i| format!("c{i}")).collect(),
            cats(m),
            w,
            AssociationKind::Binary,
        )
        .unwrap()
    }

    #[test]
    fn intervention_with_own_signatures_is_perfect() {
        let w = vec![1., 0., 1., 0., 1., 1., 0., 0., 1.];
        let llm = binary(3, 3, w.clone());
        let mdl = model(3, 3, w, vec![0.0; 3]);
        let r = intervention_accuracy(&mdl, &llm, &[0, 1, 2, 2], true).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.evaluated, 4);
    }

    #[test]
    fn intervention_flags_collisions_and_empty_columns() {
        // categories 0 and 1 share a signature, category 2 has none
        let llm = binary(2, 4, vec![1., 1., 0., 0., 0., 0., 0., 1.]);
        let mdl = model(2, 4, llm.weights.clone(), vec![0.0; 4]);
        let r = intervention_accuracy(&mdl, &llm, &[0, 1, 2, 3], false).unwrap();
        assert_eq!(r.ambiguous_pairs, vec![(0, 1)]);
        assert_eq!(r.excluded_ambiguous, 2);
        assert_eq!(r.excluded_zero_signature, 1);
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.accuracy, 1.0);
        assert!(intervention_accuracy(&mdl, &llm, &[2], false).is_err());
    }

    fn emb(ids: &[&str], dim: usize, data: &[f32]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            ids.iter().map(|s| s.to_string()).collect(),
            dim,
            data.to_vec(),
        )
        .unwrap()
    }

    fn prompt(category: usize) -> Prompt {
        Prompt {
            text: format!("p{category}"),
            category,
            concept: None,
            kind: PromptKind::NameOnly,
        }
    }

    #[test]
    fn zero_shot_on_its_own_prompts_is_perfect() {
        let prompts_emb = emb(&["a", "b", "c"], 3, &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        let imgs = emb(&["x", "y", "z"], 3, &[0., 1., 0., 0., 0., 1., 1., 0., 0.]);
        let prompts = vec![prompt(0), prompt(1), prompt(2)];
        let r = zero_shot(&imgs, &prompts_emb, &prompts, &cats(3), Some(&[1, 2, 0])).unwrap();
        assert_eq!(r.accuracy, Some(1.0));
    }

    #[test]
    fn duplicate_prompt_leaves_scores_unchanged() {
        let imgs = emb(&["x", "y"], 2, &[0.9, 0.2, 0.3, 0.8]);
        let pe = emb(&["a", "b"], 2, &[1., 0., 0.3, 1.]);
        let prompts = vec![prompt(0), prompt(1)];
        let r1 = zero_shot(&imgs, &pe, &prompts, &cats(2), None).unwrap();
        let pe2 = emb(&["a", "b", "b2"], 2, &[1., 0., 0.3, 1., 0.3, 1.]);
        let prompts2 = vec![prompt(0), prompt(1), prompt(1)];
        let r2 = zero_shot(&imgs, &pe2, &prompts2, &cats(2), None).unwrap();
        for (a, b) in r1.scores.iter().zip(&r2.scores) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            zero_shot(&imgs, &pe, &[prompt(0), prompt(0)], &cats(2), None),
            Err(CbmError::NoPrompts(_))
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let mdl = model(2, 2, vec![0.5, -1.0, 2.0, 0.25], vec![0.125, -0.5]);
        let mut buf = Vec::new();
        write_model(&mdl, &mut buf).unwrap();
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, mdl);
    }
}
