//! End-to-end runs driven by one TOML config.
//!
//! Stages run in order: extract, ingest, assoc, activations, rank, select,
//! train, evaluate, learn, re-evaluate, report. Each writes its artifacts
//! into the report directory; a failing run moves whatever was written into
//! `failed/` next to an `error.json` naming the stage.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ablation::{ablation_csv, prompt_ablation, AblationError, AblationRow};
use crate::cbm::{
    intervention_accuracy, write_model, BottleneckModel, CbmConfig, CbmError, TrainingMeta,
};
use crate::concept_learning::{history_csv, LearningConfig, LearningError};
use crate::concept_pool::{
    build_association_matrix, caption_relevance, ingest_proposals, read_answers,
    read_relevance_jsonl, AssociationKind, AssociationMatrix, PoolError, DEFAULT_PROMPT_ID,
};
use crate::corpus::{
    corpus_object_vocabulary, extract_all, parse_conllu, write_objects_jsonl, CorpusError,
    ExtractionOptions,
};
use crate::dataset::{categories_in_order, read_labels, Dataset, DatasetError, Split};
use crate::embeddings::{
    activations, load_embeddings, save_activations, zscore_along, ActivationMatrix, EmbeddingError,
    EmbeddingMatrix, PromptKind, ZscoreAxis,
};
use crate::mi::{corpus_evidence, rank_concepts, Estimator, MiError, MiScore};
use crate::packets::{
    default_top_k, export_eval_packets, write_packets, PacketConfig, PacketError,
};
use crate::protocol::{
    evaluate_on, learn_on, rank_on_rows, run_protocol, EvalMetrics, LearningSummary,
    ProtocolConfig, ProtocolError, ProtocolReport, SplitSpec,
};
use crate::selection::{
    alpha_sweep, combined_scores, default_alpha_grid, generalizability, known_dataset_alpha,
    select, AlphaSweep, ConceptScore, SelectionConfig, SelectionError,
};
use crate::synth::{files, synth_fixture, SynthError, SynthSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Failure class, mapped to the CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

pub trait Classify {
    fn kind(&self) -> ErrorKind;
}

impl Classify for CorpusError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for PoolError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for DatasetError {
    fn kind(&self) -> ErrorKind {
        match self {
            DatasetError::Embedding(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for EmbeddingError {
    fn kind(&self) -> ErrorKind {
        match self {
            EmbeddingError::ZeroNorm(_) => ErrorKind::Numeric,
            EmbeddingError::Prompt(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for MiError {
    fn kind(&self) -> ErrorKind {
        match self {
            MiError::TooManyBins { .. } | MiError::TooFewBins(_) | MiError::BadNeighbors { .. } => {
                ErrorKind::Config
            }
            MiError::Evidence { .. } | MiError::LabelOutOfRange { .. } | MiError::Axis(_) => {
                ErrorKind::Data
            }
            MiError::Joint(_) => ErrorKind::Numeric,
        }
    }
}

impl Classify for SelectionError {
    fn kind(&self) -> ErrorKind {
        match self {
            SelectionError::Alpha(_)
            | SelectionError::Budget { .. }
            | SelectionError::EmptyGrid => ErrorKind::Config,
            SelectionError::MissingG(_) => ErrorKind::Data,
            SelectionError::Hook { .. } => ErrorKind::Numeric,
        }
    }
}

impl Classify for CbmError {
    fn kind(&self) -> ErrorKind {
        match self {
            CbmError::NonFinite(_) => ErrorKind::Numeric,
            CbmError::Embedding(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for LearningError {
    fn kind(&self) -> ErrorKind {
        match self {
            LearningError::NonFinite { .. } | LearningError::ZeroNorm(_) => ErrorKind::Numeric,
            LearningError::Config(_) => ErrorKind::Config,
            LearningError::ZeroShot(e) => e.kind(),
            LearningError::Embedding(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for ProtocolError {
    fn kind(&self) -> ErrorKind {
        match self {
            ProtocolError::Embedding(e) => e.kind(),
            ProtocolError::Mi(e) => e.kind(),
            ProtocolError::Selection(e) => e.kind(),
            ProtocolError::Cbm(e) => e.kind(),
            ProtocolError::Learning(e) => e.kind(),
            ProtocolError::Overlap(_)
            | ProtocolError::UnknownCategory(_)
            | ProtocolError::Split(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for AblationError {
    fn kind(&self) -> ErrorKind {
        match self {
            AblationError::Embedding(e) => e.kind(),
            AblationError::Cbm(e) => e.kind(),
            AblationError::MissingPrompt(_) => ErrorKind::Data,
        }
    }
}

impl Classify for PacketError {
    fn kind(&self) -> ErrorKind {
        match self {
            PacketError::ZeroK => ErrorKind::Config,
            PacketError::Model(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for SynthError {
    fn kind(&self) -> ErrorKind {
        match self {
            SynthError::Dim { .. } | SynthError::Spec(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for serde_json::Error {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

#[derive(Debug, Error, Serialize)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            stage: "config".into(),
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }
}

pub trait StageResult<T> {
    fn stage(self, stage: &str) -> Result<T, PipelineError>;
}

impl<T, E: Classify + std::fmt::Display> StageResult<T> for Result<T, E> {
    fn stage(self, stage: &str) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError {
            stage: stage.to_string(),
            kind: e.kind(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub proposals: PathBuf,
    pub answers: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_images: Option<PathBuf>,
    pub images: PathBuf,
    pub texts: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionSection {
    pub amod_both: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsSection {
    pub prompt_id: String,
}

impl Default for ConceptsSection {
    fn default() -> Self {
        Self {
            prompt_id: DEFAULT_PROMPT_ID.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationsSection {
    pub zscore_axis: ZscoreAxis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    /// Caption relevance over the corpus images.
    #[default]
    Corpus,
    /// Association lookup at each training image's label.
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingSection {
    pub evidence: EvidenceSource,
    pub estimator: String,
    pub k: usize,
    pub bins: usize,
}

impl Default for RankingSection {
    fn default() -> Self {
        Self {
            evidence: EvidenceSource::Corpus,
            estimator: "knn".into(),
            k: 3,
            bins: 16,
        }
    }
}

impl RankingSection {
    pub fn estimator(&self) -> Result<Estimator, PipelineError> {
        match self.estimator.as_str() {
            "knn" => Ok(Estimator::Knn { k: self.k }),
            "binned" | "exact_binned" => Ok(Estimator::ExactBinned { bins: self.bins }),
            other => Err(PipelineError::config(format!(
                "unknown estimator {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// Unset: the sweep's recommendation, else the dataset's known value,
    /// else 0.8.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub budget: usize,
    pub sweep: bool,
    pub drop_threshold_points: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<f64>>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        Self {
            alpha: None,
            budget: 0,
            sweep: false,
            drop_threshold_points: 0.5,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbmSection {
    pub reg: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub fit_bias: bool,
    pub intervention_bias: bool,
}

impl Default for CbmSection {
    fn default() -> Self {
        let c = CbmConfig::default();
        Self {
            reg: c.reg,
            max_iter: c.max_iter,
            tol: c.tol,
            fit_bias: c.fit_bias,
            intervention_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningSection {
    pub enabled: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_temperature: f64,
    pub train_image_projection: bool,
    pub train_text_projection: bool,
    pub learn_temperature: bool,
}

impl Default for LearningSection {
    fn default() -> Self {
        let c = LearningConfig::default();
        Self {
            enabled: false,
            lr: c.lr,
            weight_decay: c.weight_decay,
            epochs: c.epochs,
            batch_size: c.batch_size,
            initial_temperature: c.initial_temperature,
            train_image_projection: c.train_image_projection,
            train_text_projection: c.train_text_projection,
            learn_temperature: c.learn_temperature,
        }
    }
}

impl LearningSection {
    pub fn config(&self, seed: u64) -> LearningConfig {
        LearningConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            initial_temperature: self.initial_temperature,
            train_image_projection: self.train_image_projection,
            train_text_projection: self.train_text_projection,
            learn_temperature: self.learn_temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub enabled: bool,
    pub variants: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            variants: PromptKind::ALL
                .iter()
                .map(|k| k.as_str().to_string())
                .collect(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacketsSection {
    pub sample_size: usize,
    /// 0 picks the dataset default.
    pub k: usize,
    pub include_wrong: bool,
}

impl Default for PacketsSection {
    fn default() -> Self {
        Self {
            sample_size: 20,
            k: 0,
            include_wrong: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolsSection {
    pub few_shot: Vec<usize>,
    /// Split the categories in half at random (seeded).
    pub seen_unseen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: String,
    pub seed: u64,
    #[serde(default = "default_report_dir")]
    pub report_dir: PathBuf,
    pub paths: Paths,
    #[serde(default)]
    pub extraction: ExtractionSection,
    #[serde(default)]
    pub concepts: ConceptsSection,
    #[serde(default)]
    pub activations: ActivationsSection,
    #[serde(default)]
    pub ranking: RankingSection,
    pub selection: SelectionSection,
    #[serde(default)]
    pub cbm: CbmSection,
    #[serde(default)]
    pub learning: LearningSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub packets: PacketsSection,
    #[serde(default)]
    pub protocols: ProtocolsSection,
}

fn default_report_dir() -> PathBuf {
    PathBuf::from("report")
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn cbm_config(&self) -> CbmConfig {
        CbmConfig {
            reg: self.cbm.reg,
            max_iter: self.cbm.max_iter,
            tol: self.cbm.tol,
            seed: self.seed,
            fit_bias: self.cbm.fit_bias,
        }
    }

    pub fn ablation_kinds(&self) -> Result<Vec<PromptKind>, PipelineError> {
        self.ablation
            .variants
            .iter()
            .map(|v| {
                if v == "all" {
                    return Err(PipelineError::config("list the variants explicitly"));
                }
                PromptKind::parse(v)
                    .ok_or_else(|| PipelineError::config(format!("unknown prompt variant {v:?}")))
            })
            .collect()
    }

    /// Checks everything that can be checked without reading the inputs.
    /// `base` resolves relative paths.
    pub fn validate(&self, base: &Path) -> Result<(), PipelineError> {
        let p = &self.paths;
        let mut required: Vec<(&str, &PathBuf)> = vec![
            ("proposals", &p.proposals),
            ("answers", &p.answers),
            ("images", &p.images),
            ("texts", &p.texts),
            ("labels", &p.labels),
        ];
        if self.ranking.evidence == EvidenceSource::Corpus {
            for (name, opt) in [
                ("corpus", &p.corpus),
                ("relevance", &p.relevance),
                ("corpus_images", &p.corpus_images),
            ] {
                match opt {
                    Some(path) => required.push((name, path)),
                    None => {
                        return Err(PipelineError::config(format!(
                            "corpus evidence needs paths.{name}"
                        )))
                    }
                }
            }
        } else if let Some(c) = &p.corpus {
            required.push(("corpus", c));
        }
        for (name, path) in required {
            let full = base.join(path);
            if !full.is_file() {
                return Err(PipelineError::config(format!(
                    "paths.{name}: {} does not exist",
                    full.display()
                )));
            }
        }
        if let Some(a) = self.selection.alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(PipelineError::config(format!(
                    "selection.alpha {a} outside [0, 1]"
                )));
            }
        }
        if self.selection.budget == 0 {
            return Err(PipelineError::config("selection.budget must be ≥ 1"));
        }
        if let Some(g) = &self.selection.grid {
            if g.is_empty() || g.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(PipelineError::config(
                    "selection.grid must be nonempty within [0, 1]",
                ));
            }
        }
        match self.ranking.estimator()? {
            Estimator::Knn { k } if k == 0 => {
                return Err(PipelineError::config("ranking.k must be ≥ 1"))
            }
            Estimator::ExactBinned { bins } if bins < 2 => {
                return Err(PipelineError::config("ranking.bins must be ≥ 2"))
            }
            _ => {}
        }
        if !(self.cbm.reg >= 0.0) || self.cbm.max_iter == 0 || !(self.cbm.tol > 0.0) {
            return Err(PipelineError::config(
                "cbm needs reg ≥ 0, max_iter ≥ 1, tol > 0",
            ));
        }
        if self.learning.enabled {
            self.learning.config(self.seed).validate().stage("config")?;
        }
        if self.packets.sample_size > 0 && self.packets.k == 0 && self.dataset.is_empty() {
            return Err(PipelineError::config("dataset name required"));
        }
        self.ablation_kinds()?;
        if self.protocols.few_shot.contains(&0) {
            return Err(PipelineError::config(
                "protocols.few_shot entries must be ≥ 1",
            ));
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
    PipelineConfig::from_toml(&text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub records: usize,
    pub object_mentions: usize,
    pub vocabulary_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub concepts: usize,
    pub proposing_objects: usize,
    pub proposing_objects_in_corpus: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationSummary {
    pub concepts: usize,
    pub categories: usize,
    pub ones: usize,
    pub missing_pairs: usize,
    pub zero_columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub evidence: EvidenceSource,
    pub estimator: Estimator,
    pub samples: usize,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub alpha: f64,
    pub alpha_source: String,
    pub budget: usize,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketSummary {
    pub exported: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tool_version: String,
    pub dataset: String,
    pub seed: u64,
    pub corpus: Option<CorpusSummary>,
    pub pool: PoolSummary,
    pub association: AssociationSummary,
    pub ranking: RankingSummary,
    pub selection: SelectionSummary,
    pub alpha_sweep: Option<AlphaSweep>,
    pub baseline: EvalMetrics,
    pub learning: Option<LearningSummary>,
    pub learned: Option<EvalMetrics>,
    pub delta_accuracy: Option<f64>,
    pub delta_intervention: Option<f64>,
    pub ablation: Vec<AblationRow>,
    pub packets: Option<PacketSummary>,
    pub protocols: BTreeMap<String, ProtocolReport>,
    pub invariants: BTreeMap<String, bool>,
    pub all_invariants_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, InputRecord>,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: BTreeMap<String, String>,
}

/// Names of everything a run writes under the report directory.
pub mod outputs {
    pub const OBJECTS: &str = "objects.jsonl";
    pub const POOL: &str = "concepts.json";
    pub const ASSOC: &str = "w_llm.assoc";
    pub const ACTIVATIONS: &str = "activations.cdle";
    pub const SCORES: &str = "scores.json";
    pub const SELECTED: &str = "selected.json";
    pub const MODEL: &str = "model.cbm";
    pub const PROJECTION: &str = "projection.cdle";
    pub const LEARNED_MODEL: &str = "model_learned.cbm";
    pub const PACKETS: &str = "eval_packets.jsonl";
    pub const METRICS: &str = "metrics.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const TABLES: &str = "tables";
    pub const FAILED: &str = "failed";
    pub const ERROR: &str = "error.json";
}

/// Serialized MI score with its concept text, as written to `scores.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub concept_id: usize,
    pub concept: String,
    pub value: f64,
    pub raw_value: f64,
    pub estimator: String,
    pub params: BTreeMap<String, usize>,
}

pub fn score_lines(scores: &[MiScore], concepts: &[String]) -> Vec<ScoreLine> {
    scores
        .iter()
        .map(|s| {
            let params = match s.estimator {
                Estimator::Knn { k } => [("k".to_string(), k)].into(),
                Estimator::ExactBinned { bins } => [("bins".to_string(), bins)].into(),
            };
            ScoreLine {
                concept_id: s.concept_id,
                concept: concepts.get(s.concept_id).cloned().unwrap_or_default(),
                value: s.value,
                raw_value: s.raw_value,
                estimator: s.estimator.name().to_string(),
                params,
            }
        })
        .collect()
}

pub fn scores_from_lines(lines: &[ScoreLine]) -> Result<Vec<MiScore>, String> {
    lines
        .iter()
        .map(|l| {
            let estimator = match l.estimator.as_str() {
                "knn" => Estimator::Knn {
                    k: *l.params.get("k").ok_or("knn score without k")?,
                },
                "exact_binned" => Estimator::ExactBinned {
                    bins: *l.params.get("bins").ok_or("binned score without bins")?,
                },
                other => return Err(format!("unknown estimator {other:?}")),
            };
            Ok(MiScore {
                concept_id: l.concept_id,
                value: l.value,
                raw_value: l.raw_value,
                estimator,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFile {
    pub alpha: f64,
    pub budget: usize,
    pub concept_ids: Vec<usize>,
    pub concepts: Vec<String>,
}

pub fn selection_csv(scores: &[ConceptScore], concepts: &[String], selected: &[usize]) -> String {
    let mut s = String::from("rank,concept_id,concept,i_value,i_norm,g_value,combined,selected\n");
    for (r, c) in scores.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r + 1,
            c.concept_id,
            csv_field(concepts.get(c.concept_id).map(String::as_str).unwrap_or("")),
            c.i_value,
            c.i_norm,
            c.g_value,
            c.combined,
            selected.contains(&c.concept_id)
        ));
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
    bytes.push(b'\n');
    fs::write(path, bytes)
}

struct Report {
    dir: PathBuf,
    written: Vec<String>,
}

impl Report {
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let p = self.path(name);
        write_json(&p, value)
    }
}

fn check_zscored(act: &ActivationMatrix, axis: ZscoreAxis) -> bool {
    let lines: Vec<Vec<f64>> = match axis {
        ZscoreAxis::PerConcept => (0..act.cols()).map(|j| act.column(j)).collect(),
        ZscoreAxis::PerImage => (0..act.rows()).map(|i| act.row(i).to_vec()).collect(),
    };
    lines.iter().all(|v| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        v.iter().all(|&x| x == 0.0) || (mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9)
    })
}

fn sorted_scores(scores: &[MiScore]) -> bool {
    scores.windows(2).all(|w| {
        w[0].value > w[1].value || (w[0].value == w[1].value && w[0].concept_id < w[1].concept_id)
    })
}

fn loss_nonincreasing(meta: &TrainingMeta) -> bool {
    meta.loss_history
        .windows(2)
        .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0))
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn metrics_in_unit(m: &EvalMetrics) -> bool {
    in_unit(m.accuracy)
        && in_unit(m.train_accuracy)
        && m.intervention
            .as_ref()
            .map_or(true, |r| in_unit(r.accuracy))
}

/// `W_trained := W_LLM` scored by intervention; 1.0 by construction unless
/// the evaluation code is wrong.
/// `None` when some signature sits inside another: the smaller one then ties
/// with its superset and the check says nothing.
fn intervention_self_check(w: &AssociationMatrix, labels: &[usize]) -> Option<bool> {
    let cols: Vec<Vec<f64>> = (0..w.n_categories()).map(|j| w.column(j)).collect();
    let nested = cols.iter().enumerate().any(|(a, ca)| {
        cols.iter().enumerate().any(|(b, cb)| {
            a != b
                && ca != cb
                && ca.iter().any(|&v| v != 0.0)
                && ca.iter().zip(cb).all(|(&x, &y)| x == 0.0 || y != 0.0)
        })
    });
    if nested {
        return None;
    }
    let model = BottleneckModel {
        weights: AssociationMatrix::new(
            w.concept_ids.clone(),
            w.concepts.clone(),
            w.categories.clone(),
            w.weights.clone(),
            AssociationKind::Real,
        )
        .ok()?,
        bias: vec![0.0; w.n_categories()],
        meta: TrainingMeta {
            seed: 0,
            reg: 0.0,
            iterations: 0,
            converged: true,
            final_loss: 0.0,
            grad_norm: 0.0,
            loss_history: vec![],
        },
    };
    intervention_accuracy(&model, w, labels, false)
        .ok()
        .map(|r| r.accuracy == 1.0)
}

/// Executes every stage; on failure, partial outputs move to `failed/`.
pub fn run(config: &PipelineConfig, base: &Path) -> Result<Metrics, PipelineError> {
    config.validate(base)?;
    let dir = base.join(&config.report_dir);
    prepare_report_dir(&dir).stage("report")?;
    let mut report = Report {
        dir: dir.clone(),
        written: Vec::new(),
    };
    match run_stages(config, base, &mut report) {
        Ok(m) => Ok(m),
        Err(e) => {
            if let Err(io) = quarantine(&report, &e) {
                log::error!("could not move partial outputs: {io}");
            }
            Err(e)
        }
    }
}

fn prepare_report_dir(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for name in [
        outputs::OBJECTS,
        outputs::POOL,
        outputs::ASSOC,
        outputs::ACTIVATIONS,
        "activations.cdle.json",
        outputs::SCORES,
        outputs::SELECTED,
        outputs::MODEL,
        outputs::PROJECTION,
        "projection.cdle.json",
        outputs::LEARNED_MODEL,
        outputs::PACKETS,
        outputs::METRICS,
        outputs::MANIFEST,
    ] {
        let p = dir.join(name);
        if p.is_file() {
            fs::remove_file(p)?;
        }
    }
    for sub in [outputs::TABLES, outputs::FAILED] {
        let p = dir.join(sub);
        if p.is_dir() {
            fs::remove_dir_all(p)?;
        }
    }
    Ok(())
}

fn quarantine(report: &Report, err: &PipelineError) -> std::io::Result<()> {
    let failed = report.dir.join(outputs::FAILED);
    fs::create_dir_all(&failed)?;
    for name in &report.written {
        let src = report.dir.join(name);
        if src.exists() {
            let dst = failed.join(name);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&src, &dst)?;
        }
    }
    let tables = report.dir.join(outputs::TABLES);
    if tables.is_dir() && fs::read_dir(&tables)?.next().is_none() {
        fs::remove_dir(tables)?;
    }
    write_json(&failed.join(outputs::ERROR), err)
}

fn open(base: &Path, p: &Path) -> Result<BufReader<fs::File>, PipelineError> {
    fs::File::open(base.join(p))
        .map(BufReader::new)
        .map_err(|e| PipelineError {
            stage: "input".into(),
            kind: ErrorKind::Data,
            message: format!("{}: {e}", p.display()),
        })
}

fn load(base: &Path, p: &Path, stage: &str) -> Result<EmbeddingMatrix, PipelineError> {
    load_embeddings(&base.join(p)).map_err(|e| PipelineError {
        stage: stage.into(),
        kind: e.kind(),
        message: format!("{}: {e}", p.display()),
    })
}

fn run_stages(
    config: &PipelineConfig,
    base: &Path,
    report: &mut Report,
) -> Result<Metrics, PipelineError> {
    let paths = &config.paths;
    let mut inv: BTreeMap<String, bool> = BTreeMap::new();

    // extract
    let mut records = Vec::new();
    let corpus = match &paths.corpus {
        Some(p) => {
            records = parse_conllu(open(base, p)?).stage("extract")?;
            extract_all(
                &mut records,
                ExtractionOptions {
                    amod_both: config.extraction.amod_both,
                },
            );
            let mut buf = Vec::new();
            write_objects_jsonl(&records, &mut buf).stage("extract")?;
            report
                .write_bytes(outputs::OBJECTS, &buf)
                .stage("extract")?;
            let vocab = corpus_object_vocabulary(&records);
            let mut t = String::from("object,frequency\n");
            for (o, f) in &vocab {
                t.push_str(&format!("{},{f}\n", csv_field(o)));
            }
            report
                .write_bytes("tables/objects.csv", t.as_bytes())
                .stage("extract")?;
            Some((
                CorpusSummary {
                    records: records.len(),
                    object_mentions: records.iter().map(|r| r.objects.len()).sum(),
                    vocabulary_size: vocab.len(),
                },
                vocab,
            ))
        }
        None => None,
    };

    // ingest
    let pool = ingest_proposals(open(base, &paths.proposals)?, &config.concepts.prompt_id)
        .stage("ingest")?;
    report.write_json(outputs::POOL, &pool).stage("ingest")?;
    let pool_summary = PoolSummary {
        concepts: pool.len(),
        proposing_objects: pool.proposals.len(),
        proposing_objects_in_corpus: corpus.as_ref().map(|(_, vocab)| {
            pool.proposals
                .keys()
                .filter(|o| vocab.iter().any(|(v, _)| v == *o))
                .count()
        }),
    };

    // assoc
    let label_rows = read_labels(open(base, &paths.labels)?).stage("assoc")?;
    let categories = categories_in_order(&label_rows);
    let answers = read_answers(open(base, &paths.answers)?).stage("assoc")?;
    let (w_llm, assoc_report) =
        build_association_matrix(&pool, &categories, &answers).stage("assoc")?;
    let mut buf = Vec::new();
    w_llm.write_to(&mut buf).stage("assoc")?;
    report.write_bytes(outputs::ASSOC, &buf).stage("assoc")?;
    inv.insert(
        "w_llm_binary".into(),
        w_llm.weights.iter().all(|&v| v == 0.0 || v == 1.0),
    );
    let association = AssociationSummary {
        concepts: w_llm.n_concepts(),
        categories: w_llm.n_categories(),
        ones: w_llm.weights.iter().filter(|&&v| v == 1.0).count(),
        missing_pairs: assoc_report.missing_pairs,
        zero_columns: assoc_report.zero_columns.clone(),
    };

    // activations
    let texts = load(base, &paths.texts, "activations")?;
    let images = load(base, &paths.images, "activations")?;
    let concept_texts: Vec<String> = pool.concepts.clone();
    let concept_emb = texts.select(&concept_texts).stage("activations")?;
    let name_texts: Vec<String> = categories
        .iter()
        .map(|c| {
            PromptKind::NameOnly
                .default_template()
                .replace("{category}", c)
        })
        .collect();
    let name_emb = texts.select(&name_texts).stage("activations")?;
    let ds = Dataset::assemble(
        &config.dataset,
        &images,
        &label_rows,
        concept_emb,
        w_llm.clone(),
        name_emb,
    )
    .stage("activations")?;
    let raw = activations(&ds.images, &ds.concepts).stage("activations")?;
    inv.insert(
        "activations_in_range".into(),
        raw.values.iter().all(|v| (-1.0..=1.0).contains(v)),
    );
    let axis = config.activations.zscore_axis;
    let z = zscore_along(&raw, axis).stage("activations")?;
    inv.insert("zscore_moments".into(), check_zscored(&z, axis));
    let p = report.path(outputs::ACTIVATIONS);
    report
        .written
        .push(format!("{}.json", outputs::ACTIVATIONS));
    save_activations(&z, &p).stage("activations")?;

    // rank
    let estimator = config.ranking.estimator()?;
    let train_rows = ds.rows(Split::Train, None);
    let all_cats: Vec<usize> = (0..categories.len()).collect();
    let (scores, samples) = match config.ranking.evidence {
        EvidenceSource::Corpus => {
            let cimg = load(
                base,
                paths.corpus_images.as_ref().expect("validated"),
                "rank",
            )?;
            let relevance =
                read_relevance_jsonl(open(base, paths.relevance.as_ref().expect("validated"))?)
                    .stage("rank")?;
            caption_relevance(&pool, &mut records, &relevance).stage("rank")?;
            let cact = activations(&cimg, &ds.concepts).stage("rank")?;
            let ev = corpus_evidence(&cact, &records).stage("rank")?;
            (rank_concepts(&ev, estimator).stage("rank")?, records.len())
        }
        EvidenceSource::Dataset => (
            rank_on_rows(&ds, &train_rows, &all_cats, estimator).stage("rank")?,
            train_rows.len(),
        ),
    };
    report
        .write_json(outputs::SCORES, &score_lines(&scores, &pool.concepts))
        .stage("rank")?;
    inv.insert(
        "mi_nonnegative".into(),
        scores.iter().all(|s| s.value >= 0.0),
    );
    inv.insert("ranking_sorted".into(), sorted_scores(&scores));
    let ranking = RankingSummary {
        evidence: config.ranking.evidence,
        estimator,
        samples,
        top: scores
            .iter()
            .take(10)
            .map(|s| pool.concepts[s.concept_id].clone())
            .collect(),
    };

    // select
    let budget = config.selection.budget;
    SelectionConfig { alpha: 0.5, budget }
        .validate(scores.len())
        .stage("select")?;
    let g = generalizability(&w_llm);
    let m = categories.len() as f64;
    inv.insert(
        "generalizability_exact".into(),
        g.values()
            .all(|&v| in_unit(v) && ((v * m).round() - v * m).abs() < 1e-9),
    );
    let cbm_cfg = config.cbm_config();
    let val_rows = ds.rows(Split::Val, None);
    let test_rows = ds.rows(Split::Test, None);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(PipelineError {
            stage: "select".into(),
            kind: ErrorKind::Data,
            message: "labels need train and test rows".into(),
        });
    }
    let sweep = if config.selection.sweep {
        if val_rows.is_empty() {
            return Err(PipelineError {
                stage: "select".into(),
                kind: ErrorKind::Data,
                message: "the alpha sweep needs val rows".into(),
            });
        }
        let grid = config
            .selection
            .grid
            .clone()
            .unwrap_or_else(default_alpha_grid);
        let s = alpha_sweep(
            &scores,
            &g,
            budget,
            &grid,
            config.selection.drop_threshold_points,
            |_, chosen| {
                evaluate_on(
                    &ds,
                    &all_cats,
                    &train_rows,
                    &val_rows,
                    chosen,
                    None,
                    &cbm_cfg,
                    config.cbm.intervention_bias,
                )
                .map(|e| e.metrics.accuracy)
                .map_err(|e| e.to_string())
            },
        )
        .stage("select")?;
        let mut t = String::from("alpha,val_accuracy\n");
        for (a, acc) in &s.rows {
            t.push_str(&format!("{a},{acc}\n"));
        }
        report
            .write_bytes("tables/alpha_sweep.csv", t.as_bytes())
            .stage("select")?;
        Some(s)
    } else {
        None
    };
    let (alpha, alpha_source) = match (
        config.selection.alpha,
        &sweep,
        known_dataset_alpha(&config.dataset),
    ) {
        (Some(a), _, _) => (a, "config"),
        (None, Some(s), _) => (s.recommended_alpha, "sweep"),
        (None, None, Some(a)) => (a, "dataset_default"),
        (None, None, None) => (0.8, "fallback"),
    };
    let combined = combined_scores(&scores, &g, alpha).stage("select")?;
    let selected = select(&combined, budget).stage("select")?;
    let shorter = if budget > 1 {
        select(&combined, budget - 1).stage("select")?
    } else {
        vec![]
    };
    let mut uniq = selected.clone();
    uniq.sort_unstable();
    uniq.dedup();
    inv.insert(
        "selection_budget".into(),
        selected.len() == budget && uniq.len() == budget,
    );
    inv.insert("selection_prefix".into(), selected.starts_with(&shorter));
    let selected_names: Vec<String> = selected.iter().map(|&c| pool.concepts[c].clone()).collect();
    report
        .write_json(
            outputs::SELECTED,
            &SelectedFile {
                alpha,
                budget,
                concept_ids: selected.clone(),
                concepts: selected_names.clone(),
            },
        )
        .stage("select")?;
    report
        .write_bytes(
            "tables/selection.csv",
            selection_csv(&combined, &pool.concepts, &selected).as_bytes(),
        )
        .stage("select")?;

    // train + evaluate
    let base_eval = evaluate_on(
        &ds,
        &all_cats,
        &train_rows,
        &test_rows,
        &selected,
        None,
        &cbm_cfg,
        config.cbm.intervention_bias,
    )
    .stage("train")?;
    let mut buf = Vec::new();
    write_model(&base_eval.model, &mut buf).stage("train")?;
    report.write_bytes(outputs::MODEL, &buf).stage("train")?;
    inv.insert(
        "cbm_loss_nonincreasing".into(),
        loss_nonincreasing(&base_eval.model.meta),
    );
    inv.insert(
        "intervention_self_consistency".into(),
        intervention_self_check(&base_eval.w_llm, &base_eval.test_labels).unwrap_or(true),
    );

    let ablation = if config.ablation.enabled {
        let kinds = config.ablation_kinds()?;
        let test_images = ds.images.subset(&test_rows).stage("evaluate")?;
        let y: Vec<usize> = test_rows.iter().map(|&i| ds.labels[i]).collect();
        let rows = prompt_ablation(
            &config.dataset,
            &kinds,
            &test_images,
            &y,
            &texts,
            &w_llm,
            config.ablation.seed.unwrap_or(config.seed),
        )
        .stage("evaluate")?;
        report
            .write_bytes("tables/ablation.csv", ablation_csv(&rows).as_bytes())
            .stage("evaluate")?;
        rows
    } else {
        Vec::new()
    };
    inv.insert(
        "ablation_accuracy_in_range".into(),
        ablation.iter().all(|r| (0.0..=100.0).contains(&r.accuracy)),
    );

    let packets = if config.packets.sample_size > 0 {
        let k = if config.packets.k == 0 {
            default_top_k(&config.dataset, selected.len())
        } else {
            config.packets.k
        };
        let pk = export_eval_packets(
            &base_eval.model,
            &base_eval.test_activations,
            &base_eval.test_labels,
            &base_eval.w_llm,
            &PacketConfig {
                sample_size: config.packets.sample_size,
                k,
                seed: config.seed,
                include_wrong: config.packets.include_wrong,
            },
        )
        .stage("evaluate")?;
        let mut buf = Vec::new();
        write_packets(&pk, &mut buf).stage("evaluate")?;
        report
            .write_bytes(outputs::PACKETS, &buf)
            .stage("evaluate")?;
        inv.insert(
            "packets_well_formed".into(),
            pk.iter().all(|p| {
                (config.packets.include_wrong || p.correct)
                    && !p.top_k.is_empty()
                    && p.top_k.windows(2).all(|w| w[0].score >= w[1].score)
            }),
        );
        Some(PacketSummary {
            exported: pk.len(),
            k,
        })
    } else {
        None
    };

    // learn + re-evaluate
    let (learning, learned) = if config.learning.enabled {
        let lc = config.learning.config(config.seed);
        let before = ds
            .w_llm
            .weights
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>();
        let (fit, agreement) = learn_on(&ds, &all_cats, &train_rows, &lc).stage("learn")?;
        let after = ds
            .w_llm
            .weights
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>();
        inv.insert("learning_w_llm_unchanged".into(), before == after);
        inv.insert(
            "learning_checkpoint_best".into(),
            fit.history.iter().all(|h| fit.best_val_loss <= h.val_loss)
                && fit.history.get(fit.best_epoch - 1).map(|h| h.val_loss)
                    == Some(fit.best_val_loss),
        );
        inv.insert(
            "learning_history_finite".into(),
            fit.history
                .iter()
                .all(|h| h.train_loss.is_finite() && h.val_loss.is_finite()),
        );
        let p = report.path(outputs::PROJECTION);
        report.written.push("projection.cdle.json".into());
        fit.projection.save(&p).stage("learn")?;
        report
            .write_bytes(
                "tables/learning_history.csv",
                history_csv(&fit.history).as_bytes(),
            )
            .stage("learn")?;
        let ev = evaluate_on(
            &ds,
            &all_cats,
            &train_rows,
            &test_rows,
            &selected,
            Some(&fit.projection),
            &cbm_cfg,
            config.cbm.intervention_bias,
        )
        .stage("re-evaluate")?;
        let mut buf = Vec::new();
        write_model(&ev.model, &mut buf).stage("re-evaluate")?;
        report
            .write_bytes(outputs::LEARNED_MODEL, &buf)
            .stage("re-evaluate")?;
        inv.insert(
            "learned_cbm_loss_nonincreasing".into(),
            loss_nonincreasing(&ev.model.meta),
        );
        (
            Some(LearningSummary {
                best_epoch: fit.best_epoch,
                initial_val_loss: fit.initial_val_loss,
                best_val_loss: fit.best_val_loss,
                temperature: fit.projection.temperature,
                pseudo_label_agreement: agreement,
            }),
            Some(ev.metrics),
        )
    } else {
        (None, None)
    };

    // protocols
    let mut protocols = BTreeMap::new();
    let pc = ProtocolConfig {
        estimator,
        selection: SelectionConfig { alpha, budget },
        cbm: cbm_cfg,
        learning: config
            .learning
            .enabled
            .then(|| config.learning.config(config.seed)),
        intervention_bias: config.cbm.intervention_bias,
        seed: config.seed,
    };
    let mut specs: Vec<SplitSpec> = config
        .protocols
        .few_shot
        .iter()
        .map(|&k| SplitSpec::FewShot { k })
        .collect();
    if config.protocols.seen_unseen {
        specs.push(seen_unseen_split(&categories, config.seed));
    }
    for spec in specs {
        // Few-shot reuses the corpus ranking; seen/unseen ranks on seen rows only.
        let ranking = match spec {
            SplitSpec::FewShot { .. } => Some(scores.as_slice()),
            _ => None,
        };
        let r = run_protocol(&spec, &ds, None, &pc, ranking).stage("protocols")?;
        protocols.insert(spec.name(), r);
    }

    let mut all_metrics = vec![&base_eval.metrics];
    all_metrics.extend(learned.as_ref());
    for r in protocols.values() {
        all_metrics.push(&r.baseline);
        all_metrics.extend(r.learned.as_ref());
    }
    inv.insert(
        "accuracies_in_unit_interval".into(),
        all_metrics.iter().all(|m| metrics_in_unit(m)),
    );

    let delta_accuracy = learned
        .as_ref()
        .map(|l| l.accuracy - base_eval.metrics.accuracy);
    let delta_intervention = learned.as_ref().and_then(|l| {
        Some(l.intervention.as_ref()?.accuracy - base_eval.metrics.intervention.as_ref()?.accuracy)
    });
    let all_invariants_hold = inv.values().all(|&b| b);
    let metrics = Metrics {
        tool_version: VERSION.into(),
        dataset: config.dataset.clone(),
        seed: config.seed,
        corpus: corpus.map(|c| c.0),
        pool: pool_summary,
        association,
        ranking,
        selection: SelectionSummary {
            alpha,
            alpha_source: alpha_source.into(),
            budget,
            selected: selected_names,
        },
        alpha_sweep: sweep,
        baseline: base_eval.metrics,
        learning,
        learned,
        delta_accuracy,
        delta_intervention,
        ablation,
        packets,
        protocols,
        invariants: inv,
        all_invariants_hold,
    };
    report
        .write_json(outputs::METRICS, &metrics)
        .stage("report")?;
    write_manifest(config, base, report).stage("report")?;
    Ok(metrics)
}

/// Seeded half/half partition of the categories.
pub fn seen_unseen_split(categories: &[String], seed: u64) -> SplitSpec {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..categories.len()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let half = categories.len() / 2;
    let mut seen: Vec<usize> = order[..half].to_vec();
    let mut unseen: Vec<usize> = order[half..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    SplitSpec::SeenUnseen {
        seen: seen.iter().map(|&j| categories[j].clone()).collect(),
        unseen: unseen.iter().map(|&j| categories[j].clone()).collect(),
    }
}

fn write_manifest(
    config: &PipelineConfig,
    base: &Path,
    report: &mut Report,
) -> std::io::Result<()> {
    let p = &config.paths;
    let mut inputs = BTreeMap::new();
    let mut add = |name: &str, path: &Path| -> std::io::Result<()> {
        let bytes = fs::read(base.join(path))?;
        inputs.insert(
            name.to_string(),
            InputRecord {
                path: path.to_string_lossy().into_owned(),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    };
    add("proposals", &p.proposals)?;
    add("answers", &p.answers)?;
    add("images", &p.images)?;
    add("texts", &p.texts)?;
    add("labels", &p.labels)?;
    for (name, opt) in [
        ("corpus", &p.corpus),
        ("relevance", &p.relevance),
        ("corpus_images", &p.corpus_images),
    ] {
        if let Some(path) = opt {
            add(name, path)?;
        }
    }
    let mut outputs_map = BTreeMap::new();
    let mut names = report.written.clone();
    names.sort();
    names.dedup();
    for name in names {
        outputs_map.insert(name.clone(), sha256_file(&report.dir.join(&name))?);
    }
    let seeds: BTreeMap<String, u64> = [
        ("global".to_string(), config.seed),
        (
            "ablation".to_string(),
            config.ablation.seed.unwrap_or(config.seed),
        ),
        ("learning".to_string(), config.seed),
        ("packets".to_string(), config.seed),
        ("cbm".to_string(), config.seed),
    ]
    .into();
    let manifest = Manifest {
        tool: "cdl".into(),
        version: VERSION.into(),
        config_sha256: sha256_hex(config.to_toml().as_bytes()),
        inputs,
        seeds,
        outputs: outputs_map,
    };
    report.write_json(outputs::MANIFEST, &manifest)
}

/// Config for a fixture written by [`write_fixture_bundle`].
pub fn fixture_config(spec: &SynthSpec) -> PipelineConfig {
    PipelineConfig {
        dataset: "synthetic".into(),
        seed: spec.seed,
        report_dir: default_report_dir(),
        paths: Paths {
            corpus: Some(files::CORPUS.into()),
            proposals: files::PROPOSALS.into(),
            answers: files::ANSWERS.into(),
            relevance: Some(files::RELEVANCE.into()),
            corpus_images: Some(files::CORPUS_IMAGES.into()),
            images: files::IMAGES.into(),
            texts: files::TEXTS.into(),
            labels: files::LABELS.into(),
        },
        extraction: ExtractionSection::default(),
        concepts: ConceptsSection::default(),
        activations: ActivationsSection::default(),
        ranking: RankingSection::default(),
        selection: SelectionSection {
            alpha: None,
            budget: spec.categories * spec.concepts_per_category,
            sweep: true,
            ..SelectionSection::default()
        },
        cbm: CbmSection::default(),
        learning: LearningSection {
            enabled: true,
            epochs: 10,
            ..LearningSection::default()
        },
        ablation: AblationSection::default(),
        packets: PacketsSection::default(),
        protocols: ProtocolsSection {
            few_shot: vec![1],
            seen_unseen: true,
        },
    }
}

pub const CONFIG_FILE: &str = "config.toml";

/// Generates a fixture into `dir` together with a runnable `config.toml`.
pub fn write_fixture_bundle(spec: &SynthSpec, dir: &Path) -> Result<(), PipelineError> {
    let f = synth_fixture(spec).stage("synth-fixture")?;
    f.write(dir).stage("synth-fixture")?;
    fs::write(dir.join(CONFIG_FILE), fixture_config(spec).to_toml()).stage("synth-fixture")?;
    Ok(())
}
