//! Self-supervised refinement of image–concept alignment.
//!
//! Two square re-projections are learned on top of exported embeddings, one
//! for images and one for concept texts. Activations are the cosine
//! similarities of the projected vectors; category logits are
//! `temperature · a · W` with `W` the fixed binary association matrix, and
//! the targets are zero-shot pseudo-labels. Decay pulls both projections
//! toward the identity.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cbm::{zero_shot, CbmError};
use crate::concept_pool::AssociationMatrix;
use crate::embeddings::{
    read_embeddings_file, write_embeddings_file, EmbeddingError, EmbeddingMatrix, Prompt, NORM_EPS,
};

pub const TEMPERATURE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("non-finite loss ({loss}) on a batch of {batch} samples, temperature {temperature}, |P_img − I| = {img_dev}, |P_txt − I| = {txt_dev}")]
    NonFinite {
        loss: f64,
        batch: usize,
        temperature: f64,
        img_dev: f64,
        txt_dev: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("axis mismatch: {0}")]
    Axis(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("projected vector for {0:?} has zero norm")]
    ZeroNorm(String),
    #[error(transparent)]
    ZeroShot(#[from] CbmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Image and text re-projections with a logit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPair {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub img: Vec<f64>,
    pub txt: Vec<f64>,
    pub temperature: f64,
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

fn matvec(m: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|r| {
            m[r * d..(r + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn dist_to_identity(m: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..d {
        for c in 0..d {
            let t = m[r * d + c] - if r == c { 1.0 } else { 0.0 };
            s += t * t;
        }
    }
    s
}

impl ProjectionPair {
    pub fn identity(dim: usize, temperature: f64) -> Self {
        Self {
            dim,
            img: identity(dim),
            txt: identity(dim),
            temperature,
        }
    }

    /// Frobenius distances `(‖P_img − I‖, ‖P_txt − I‖)`.
    pub fn distance_from_identity(&self) -> (f64, f64) {
        (
            dist_to_identity(&self.img, self.dim).sqrt(),
            dist_to_identity(&self.txt, self.dim).sqrt(),
        )
    }

    fn project_rows(
        &self,
        m: &EmbeddingMatrix,
        p: &[f64],
    ) -> Result<EmbeddingMatrix, LearningError> {
        if m.dim() != self.dim {
            return Err(LearningError::Axis(format!(
                "embedding dim {} vs projection dim {}",
                m.dim(),
                self.dim
            )));
        }
        let rows: Vec<Vec<f64>> = (0..m.rows())
            .map(|i| matvec(p, self.dim, &m.row_f64(i)))
            .collect();
        Ok(EmbeddingMatrix::from_rows(m.ids().to_vec(), &rows)?)
    }

    pub fn project_images(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, LearningError> {
        self.project_rows(m, &self.img)
    }

    pub fn project_texts(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, LearningError> {
        self.project_rows(m, &self.txt)
    }

    /// Stores both matrices in one CDLE container (`img:r` rows then `txt:r`
    /// rows) with the temperature in a `.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), LearningError> {
        let d = self.dim;
        let ids = (0..d)
            .map(|r| format!("img:{r}"))
            .chain((0..d).map(|r| format!("txt:{r}")))
            .collect();
        let data = self
            .img
            .iter()
            .chain(&self.txt)
            .map(|&v| v as f32)
            .collect();
        write_embeddings_file(&EmbeddingMatrix::new(ids, d, data)?, path)?;
        let sidecar = Sidecar {
            dim: d,
            temperature: self.temperature,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LearningError> {
        let m = read_embeddings_file(path)?;
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let d = sidecar.dim;
        if m.dim() != d || m.rows() != 2 * d {
            return Err(LearningError::Axis(format!(
                "projection container is {}×{}, sidecar says dim {d}",
                m.rows(),
                m.dim()
            )));
        }
        let vals: Vec<f64> = m.data().iter().map(|&v| v as f64).collect();
        Ok(Self {
            dim: d,
            img: vals[..d * d].to_vec(),
            txt: vals[d * d..].to_vec(),
            temperature: sidecar.temperature,
        })
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dim: usize,
    temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub initial_temperature: f64,
    pub train_image_projection: bool,
    pub train_text_projection: bool,
    pub learn_temperature: bool,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            initial_temperature: 50.0,
            train_image_projection: true,
            train_text_projection: true,
            learn_temperature: true,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.lr > 0.0) {
            return Err(LearningError::Config(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(LearningError::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LearningError::Config("batch size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(LearningError::Config("weight decay must be ≥ 0".into()));
        }
        if !(self.initial_temperature > 0.0) {
            return Err(LearningError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Zero-shot argmax labels from category-name prompts. Reads nothing but the
/// images and the prompts.
pub fn pseudo_labels(
    images: &EmbeddingMatrix,
    prompt_embeddings: &EmbeddingMatrix,
    prompts: &[Prompt],
    categories: &[String],
) -> Result<Vec<usize>, LearningError> {
    Ok(zero_shot(images, prompt_embeddings, prompts, categories, None)?.predictions)
}

/// Loss value and gradients for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Mean cross-entropy part only.
    pub cross_entropy: f64,
    pub grad_img: Vec<f64>,
    pub grad_txt: Vec<f64>,
    pub grad_temperature: f64,
}

fn unit(v: Vec<f64>, id: &str) -> Result<(Vec<f64>, f64), LearningError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= NORM_EPS {
        return Err(LearningError::ZeroNorm(id.to_string()));
    }
    Ok((v.into_iter().map(|x| x / n).collect(), n))
}

/// Gradient through `v ↦ v / ‖v‖` given the unit vector and norm.
fn unnormalize_grad(g: &[f64], unit: &[f64], norm: f64) -> Vec<f64> {
    let proj: f64 = g.iter().zip(unit).map(|(a, b)| a * b).sum();
    g.iter()
        .zip(unit)
        .map(|(gi, ui)| (gi - proj * ui) / norm)
        .collect()
}

/// Cross-entropy of `temperature · cos(P_img x, P_txt t) · W` against
/// `labels`, averaged over `images`, plus
/// `weight_decay · (‖P_img − I‖² + ‖P_txt − I‖²)`.
pub fn learning_loss(
    proj: &ProjectionPair,
    images: &[Vec<f64>],
    concepts: &[Vec<f64>],
    w_llm: &AssociationMatrix,
    labels: &[usize],
    weight_decay: f64,
) -> Result<LossGrad, LearningError> {
    let d = proj.dim;
    let (n_c, m) = (w_llm.n_concepts(), w_llm.n_categories());
    if concepts.len() != n_c {
        return Err(LearningError::Axis(format!(
            "{} concept vectors, association has {n_c} concepts",
            concepts.len()
        )));
    }
    if images.len() != labels.len() || images.is_empty() {
        return Err(LearningError::Axis(format!(
            "{} images, {} labels",
            images.len(),
            labels.len()
        )));
    }
    if images.iter().chain(concepts).any(|v| v.len() != d) {
        return Err(LearningError::Axis(format!("vectors must have dim {d}")));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        return Err(LearningError::Axis(format!(
            "label {l} outside {m} categories"
        )));
    }
    let b = images.len() as f64;

    let mut u_hat = Vec::with_capacity(images.len());
    let mut u_norm = Vec::with_capacity(images.len());
    for (i, x) in images.iter().enumerate() {
        let (u, n) = unit(matvec(&proj.img, d, x), &format!("image #{i}"))?;
        u_hat.push(u);
        u_norm.push(n);
    }
    let mut v_hat = Vec::with_capacity(n_c);
    let mut v_norm = Vec::with_capacity(n_c);
    for (c, t) in concepts.iter().enumerate() {
        let (v, n) = unit(matvec(&proj.txt, d, t), &w_llm.concepts[c])?;
        v_hat.push(v);
        v_norm.push(n);
    }

    let mut ce = 0.0;
    let mut grad_t = 0.0;
    let mut gu: Vec<Vec<f64>> = vec![vec![0.0; d]; images.len()];
    let mut gv: Vec<Vec<f64>> = vec![vec![0.0; d]; n_c];
    let mut a = vec![0.0; n_c];
    let mut s = vec![0.0; m];
    for (i, ui) in u_hat.iter().enumerate() {
        for (c, vc) in v_hat.iter().enumerate() {
            a[c] = ui.iter().zip(vc).map(|(p, q)| p * q).sum();
        }
        for (j, sj) in s.iter_mut().enumerate() {
            *sj = (0..n_c).map(|c| a[c] * w_llm.get(c, j)).sum();
        }
        let z: Vec<f64> = s.iter().map(|v| proj.temperature * v).collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        ce += lse - z[labels[i]];
        // dL/dz
        let r: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(j, zj)| ((zj - lse).exp() - if j == labels[i] { 1.0 } else { 0.0 }) / b)
            .collect();
        grad_t += r.iter().zip(&s).map(|(rj, sj)| rj * sj).sum::<f64>();
        for c in 0..n_c {
            let ga: f64 = proj.temperature * (0..m).map(|j| r[j] * w_llm.get(c, j)).sum::<f64>();
            if ga != 0.0 {
                for k in 0..d {
                    gu[i][k] += ga * v_hat[c][k];
                    gv[c][k] += ga * ui[k];
                }
            }
        }
    }
    ce /= b;

    let mut grad_img = vec![0.0; d * d];
    for (i, x) in images.iter().enumerate() {
        let g = unnormalize_grad(&gu[i], &u_hat[i], u_norm[i]);
        for r in 0..d {
            for c in 0..d {
                grad_img[r * d + c] += g[r] * x[c];
            }
        }
    }
    let mut grad_txt = vec![0.0; d * d];
    for (k, t) in concepts.iter().enumerate() {
        let g = unnormalize_grad(&gv[k], &v_hat[k], v_norm[k]);
        for r in 0..d {
            for c in 0..d {
                grad_txt[r * d + c] += g[r] * t[c];
            }
        }
    }
    let eye = identity(d);
    for ((g, p), e) in grad_img.iter_mut().zip(&proj.img).zip(&eye) {
        *g += 2.0 * weight_decay * (p - e);
    }
    for ((g, p), e) in grad_txt.iter_mut().zip(&proj.txt).zip(&eye) {
        *g += 2.0 * weight_decay * (p - e);
    }
    let penalty = weight_decay * (dist_to_identity(&proj.img, d) + dist_to_identity(&proj.txt, d));
    let loss = ce + penalty;
    if !loss.is_finite() {
        let (img_dev, txt_dev) = proj.distance_from_identity();
        return Err(LearningError::NonFinite {
            loss,
            batch: images.len(),
            temperature: proj.temperature,
            img_dev,
            txt_dev,
        });
    }
    Ok(LossGrad {
        loss,
        cross_entropy: ce,
        grad_img,
        grad_txt,
        grad_temperature: grad_t,
    })
}

/// Train and validation inputs for [`fit`].
pub struct LearningData<'a> {
    pub train_images: &'a EmbeddingMatrix,
    pub train_labels: &'a [usize],
    pub val_images: &'a EmbeddingMatrix,
    pub val_labels: &'a [usize],
    pub concepts: &'a EmbeddingMatrix,
    pub w_llm: &'a AssociationMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of the regularized batch loss.
    pub train_loss: f64,
    /// Mean cross-entropy on the validation set.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Parameters at the epoch with the lowest validation loss.
    pub projection: ProjectionPair,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss of the starting projections.
    pub initial_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g;
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g * g;
            *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

fn rows_f64(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row_f64(i)).collect()
}

/// Mean validation cross-entropy of `proj`.
pub fn validation_loss(
    proj: &ProjectionPair,
    images: &EmbeddingMatrix,
    labels: &[usize],
    concepts: &EmbeddingMatrix,
    w_llm: &AssociationMatrix,
) -> Result<f64, LearningError> {
    if images.rows() == 0 {
        return Err(LearningError::EmptyValidation);
    }
    Ok(learning_loss(
        proj,
        &rows_f64(images),
        &rows_f64(concepts),
        w_llm,
        labels,
        0.0,
    )?
    .cross_entropy)
}

/// Mini-batch Adam over the projections; returns the epoch checkpoint with
/// the lowest validation loss.
pub fn fit(
    init: &ProjectionPair,
    data: &LearningData,
    config: &LearningConfig,
) -> Result<FitResult, LearningError> {
    config.validate()?;
    if data.val_images.rows() == 0 || data.val_labels.is_empty() {
        return Err(LearningError::EmptyValidation);
    }
    if data.train_images.rows() != data.train_labels.len() {
        return Err(LearningError::Axis(
            "train labels do not match images".into(),
        ));
    }
    let d = init.dim;
    let train = rows_f64(data.train_images);
    let val = rows_f64(data.val_images);
    let concepts = rows_f64(data.concepts);

    let mut proj = init.clone();
    let initial_val_loss =
        learning_loss(&proj, &val, &concepts, data.w_llm, data.val_labels, 0.0)?.cross_entropy;
    let mut opt_img = Adam::new(d * d);
    let mut opt_txt = Adam::new(d * d);
    let mut opt_t = Adam::new(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ProjectionPair)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let xb: Vec<Vec<f64>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| data.train_labels[i]).collect();
            let lg = learning_loss(&proj, &xb, &concepts, data.w_llm, &yb, config.weight_decay)?;
            total += lg.loss;
            batches += 1;
            if config.train_image_projection {
                opt_img.step(&mut proj.img, &lg.grad_img, config.lr);
            }
            if config.train_text_projection {
                opt_txt.step(&mut proj.txt, &lg.grad_txt, config.lr);
            }
            if config.learn_temperature {
                let mut t = [proj.temperature];
                opt_t.step(&mut t, &[lg.grad_temperature], config.lr);
                proj.temperature = t[0].max(TEMPERATURE_FLOOR);
            }
        }
        let val_loss =
            learning_loss(&proj, &val, &concepts, data.w_llm, data.val_labels, 0.0)?.cross_entropy;
        history.push(EpochRecord {
            epoch,
            train_loss: if batches > 0 {
                total / batches as f64
            } else {
                0.0
            },
            val_loss,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, proj.clone()));
        }
    }
    let (best_val_loss, best_epoch, projection) = best.expect("epochs ≥ 1");
    Ok(FitResult {
        projection,
        best_epoch,
        best_val_loss,
        initial_val_loss,
        history,
    })
}

/// `epoch,train_loss,val_loss` CSV.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept_pool::AssociationKind;

    fn w(n: usize, m: usize, vals: &[f64]) -> AssociationMatrix {
        AssociationMatrix::new(
            (0..n).collect(),
            (0..n).map(|i| format!("c{i}")).collect(),
            (0..m).map(|j| format!("k{j}")).collect(),
            vals.to_vec(),
            AssociationKind::Binary,
        )
        .unwrap()
    }

    #[test]
    fn uniform_activations_give_log_m() {
        // every concept row is associated with every category: logits equal
        let m = 4;
        let assoc = w(2, m, &[1.0; 8]);
        let proj = ProjectionPair::identity(2, 1.0);
        let imgs = vec![vec![1.0, 0.3], vec![-0.2, 1.0]];
        let cons = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let lg = learning_loss(&proj, &imgs, &cons, &assoc, &[0, 3], 0.0).unwrap();
        assert!((lg.loss - (m as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = LearningConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = LearningConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_norm_projection_reported() {
        let assoc = w(1, 2, &[1.0, 0.0]);
        let proj = ProjectionPair::identity(2, 1.0);
        let r = learning_loss(
            &proj,
            &[vec![0.0, 0.0]],
            &[vec![1.0, 0.0]],
            &assoc,
            &[0],
            0.0,
        );
        assert!(matches!(r, Err(LearningError::ZeroNorm(_))));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("proj.cdle");
        let mut pair = ProjectionPair::identity(3, 42.5);
        pair.img[1] = 0.25;
        pair.save(&p).unwrap();
        assert_eq!(ProjectionPair::load(&p).unwrap(), pair);
    }
}
