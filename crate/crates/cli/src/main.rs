//! `cdl`: command-line driver for concept discovery, selection, bottleneck
//! training and concept learning.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cdl_core::ablation::{ablation_csv, lookup_prompts, prompt_ablation};
use cdl_core::cbm::{
    accuracy, intervention_accuracy, predict, read_model, train_cbm, write_model, CbmError,
};
use cdl_core::concept_learning::{fit, history_csv, pseudo_labels, LearningData, ProjectionPair};
use cdl_core::concept_pool::{
    build_association_matrix, ingest_proposals, read_answers, read_relevance_jsonl,
    AssociationMatrix, ConceptPool, DEFAULT_PROMPT_ID,
};
use cdl_core::corpus::{
    extract_all, parse_conllu, write_objects_jsonl, CorpusRecord, ExtractionOptions,
};
use cdl_core::dataset::{categories_in_order, read_labels, LabelRow, Split};
use cdl_core::embeddings::{
    activations, load_activations, load_embeddings, save_activations, zscore_along,
    ActivationMatrix, EmbeddingMatrix, Prompt, PromptKind, ZscoreAxis,
};
use cdl_core::mi::{corpus_evidence, dataset_evidence, rank_concepts, Estimator};
use cdl_core::packets::{
    default_top_k, export_eval_packets, ingest_eval_results, read_annotations, write_packets,
    PacketConfig,
};
use cdl_core::pipeline::{
    self, load_config, score_lines, scores_from_lines, selection_csv, sha256_file,
    write_fixture_bundle, write_json, ErrorKind, Manifest, Metrics, PipelineError, ScoreLine,
    SelectedFile, StageResult,
};
use cdl_core::selection::{
    combined_scores, generalizability, known_dataset_alpha, select, SelectionConfig,
};
use cdl_core::stats::{t_test, TTestKind};
use cdl_core::synth::SynthSpec;

#[derive(Parser)]
#[command(
    name = "cdl",
    version,
    about = "Concept discovery and learning for concept bottleneck models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from one TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a synthetic fixture bundle with a runnable config.toml.
    SynthFixture(SynthArgs),
    /// Extract object phrases from CoNLL-U captions into JSONL.
    ExtractObjects {
        #[arg(long)]
        conllu: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Emit both the bare noun and the amod phrase.
        #[arg(long)]
        amod_both: bool,
    },
    /// Build the concept pool and the binary association matrix.
    IngestConcepts {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        /// Category order comes from first appearance in this table.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = DEFAULT_PROMPT_ID)]
        prompt_id: String,
        #[arg(long)]
        out_pool: PathBuf,
        #[arg(long)]
        out_assoc: PathBuf,
    },
    /// Cosine activations of images against pool concept texts.
    ComputeActivations {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        texts: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum, default_value_t = ZscoreArg::None)]
        zscore: ZscoreArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every concept by mutual information with its relevance.
    RankConcepts(RankArgs),
    /// Combine MI with generalizability and keep a budget of concepts.
    SelectConcepts {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        assoc: PathBuf,
        /// Defaults to the dataset's known value, else 0.8.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        budget: usize,
        #[arg(long, default_value = "")]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the full scored table as CSV.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Fit a bottleneck classifier on the selected concepts.
    TrainCbm(TrainArgs),
    /// Accuracy and intervention accuracy of a trained model.
    Evaluate(EvalArgs),
    /// Zero-shot accuracy of each prompt design.
    AblatePrompts {
        #[arg(long)]
        config: PathBuf,
        /// `all` or a comma-separated list.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn image and text re-projections from zero-shot pseudo-labels.
    LearnConcepts(LearnArgs),
    /// Sample correctly classified images with their top contributions.
    ExportEvalPackets(PacketArgs),
    /// Majority-vote precision and thoroughness from annotations.
    IngestEvalResults {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-sample t-test over two score lists.
    Significance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Pooled-variance test instead of Welch's.
        #[arg(long)]
        student: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a report directory against its manifest and invariants.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    shortcut_strength: Option<f64>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    activations: PathBuf,
    /// Caption relevance JSONL; rows of the activations are record ids.
    #[arg(long, conflicts_with_all = ["labels", "assoc"])]
    relevance: Option<PathBuf>,
    /// With --assoc: relevance looked up at each image's label.
    #[arg(long, requires = "assoc")]
    labels: Option<PathBuf>,
    #[arg(long)]
    assoc: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Knn)]
    estimator: EstimatorArg,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 16)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    assoc: PathBuf,
    #[arg(long)]
    selected: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long, default_value_t = 1.0)]
    reg: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    assoc: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Leave the bias out of intervention scoring.
    #[arg(long)]
    intervention_no_bias: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    images: PathBuf,
    /// Concept text embeddings; ids are concept texts.
    #[arg(long)]
    concepts: PathBuf,
    #[arg(long)]
    assoc: PathBuf,
    /// JSON list of `{category, text}` prompts for pseudo-labels.
    #[arg(long)]
    pseudo_from: PathBuf,
    /// Embeddings of the prompt texts; ids are the texts.
    #[arg(long)]
    texts: PathBuf,
    /// Train and val splits; categories are only used to report agreement.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 50.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    freeze_images: bool,
    #[arg(long)]
    freeze_texts: bool,
    #[arg(long)]
    fixed_temperature: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: PathBuf,
}

#[derive(Args)]
struct PacketArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    assoc: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 20)]
    sample_size: usize,
    /// Defaults by dataset name and concept count.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "")]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    include_wrong: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ZscoreArg {
    None,
    PerConcept,
    PerImage,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Knn,
    Binned,
}

type CmdResult = Result<(), PipelineError>;

fn data_err(stage: &str, message: impl Into<String>) -> PipelineError {
    PipelineError {
        stage: stage.into(),
        kind: ErrorKind::Data,
        message: message.into(),
    }
}

fn config_err(stage: &str, message: impl Into<String>) -> PipelineError {
    PipelineError {
        stage: stage.into(),
        kind: ErrorKind::Config,
        message: message.into(),
    }
}

fn open(path: &Path, stage: &str) -> Result<BufReader<fs::File>, PipelineError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| data_err(stage, format!("{}: {e}", path.display())))
}

fn write_out(path: &Path, bytes: &[u8], stage: &str) -> CmdResult {
    fs::write(path, bytes).map_err(|e| data_err(stage, format!("{}: {e}", path.display())))
}

fn json_out<T: Serialize>(path: &Path, value: &T, stage: &str) -> CmdResult {
    write_json(path, value).map_err(|e| data_err(stage, format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T, PipelineError> {
    serde_json::from_reader(open(path, stage)?)
        .map_err(|e| data_err(stage, format!("{}: {e}", path.display())))
}

fn read_assoc(path: &Path, stage: &str) -> Result<AssociationMatrix, PipelineError> {
    AssociationMatrix::read_from(open(path, stage)?).stage(stage)
}

/// Labels of `split` rows of `act`, in the activation row order.
fn split_labels(
    act: &ActivationMatrix,
    rows: &[LabelRow],
    categories: &[String],
    split: Split,
    stage: &str,
) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    let index: BTreeMap<&str, &LabelRow> = rows.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for (i, id) in act.image_ids.iter().enumerate() {
        let Some(r) = index.get(id.as_str()) else {
            continue;
        };
        let s = r
            .split
            .as_deref()
            .filter(|s| !s.is_empty())
            .and_then(Split::parse)
            .unwrap_or(Split::Train);
        if s != split {
            continue;
        }
        let j = categories
            .iter()
            .position(|c| c == &r.category)
            .ok_or_else(|| {
                data_err(
                    stage,
                    format!("category {:?} not in the association matrix", r.category),
                )
            })?;
        keep.push(i);
        labels.push(j);
    }
    if keep.is_empty() {
        return Err(data_err(
            stage,
            format!("no {} rows matched the activations", split.as_str()),
        ));
    }
    Ok((keep, labels))
}

fn cmd_run(config: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let m = pipeline::run(&cfg, base)?;
    println!(
        "accuracy {:.4}  intervention {}  learned {}  invariants {}",
        m.baseline.accuracy,
        m.baseline
            .intervention
            .as_ref()
            .map_or("n/a".into(), |r| format!("{:.4}", r.accuracy)),
        m.learned
            .as_ref()
            .map_or("n/a".into(), |l| format!("{:.4}", l.accuracy)),
        if m.all_invariants_hold {
            "hold"
        } else {
            "VIOLATED"
        }
    );
    if !m.all_invariants_hold {
        return Err(PipelineError {
            stage: "report".into(),
            kind: ErrorKind::Numeric,
            message: violated(&m),
        });
    }
    Ok(())
}

fn violated(m: &Metrics) -> String {
    let names: Vec<&str> = m
        .invariants
        .iter()
        .filter(|(_, &ok)| !ok)
        .map(|(k, _)| k.as_str())
        .collect();
    format!("invariants violated: {}", names.join(", "))
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let mut spec = SynthSpec {
        seed: a.seed,
        ..SynthSpec::default()
    };
    if let Some(s) = a.shortcut_strength {
        spec.shortcut_strength = s;
    }
    if let Some(c) = a.categories {
        spec.categories = c;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    fs::create_dir_all(&a.out).stage("synth-fixture")?;
    write_fixture_bundle(&spec, &a.out)
}

fn cmd_extract(conllu: &Path, out: &Path, amod_both: bool) -> CmdResult {
    let mut records = parse_conllu(open(conllu, "extract")?).stage("extract")?;
    extract_all(&mut records, ExtractionOptions { amod_both });
    let mut buf = Vec::new();
    write_objects_jsonl(&records, &mut buf).stage("extract")?;
    write_out(out, &buf, "extract")
}

fn cmd_ingest(
    proposals: &Path,
    answers: &Path,
    labels: &Path,
    prompt_id: &str,
    out_pool: &Path,
    out_assoc: &Path,
) -> CmdResult {
    let pool = ingest_proposals(open(proposals, "ingest")?, prompt_id).stage("ingest")?;
    let rows = read_labels(open(labels, "ingest")?).stage("ingest")?;
    let categories = categories_in_order(&rows);
    let answers = read_answers(open(answers, "ingest")?).stage("ingest")?;
    let (w, report) = build_association_matrix(&pool, &categories, &answers).stage("ingest")?;
    if report.missing_pairs > 0 {
        log::warn!(
            "{} concept/category pairs had no answer",
            report.missing_pairs
        );
    }
    for c in &report.zero_columns {
        log::warn!("category {c:?} has no associated concept");
    }
    json_out(out_pool, &pool, "ingest")?;
    let mut buf = Vec::new();
    w.write_to(&mut buf).stage("ingest")?;
    write_out(out_assoc, &buf, "ingest")
}

fn cmd_activations(
    images: &Path,
    texts: &Path,
    pool: &Path,
    z: ZscoreArg,
    out: &Path,
) -> CmdResult {
    let pool = ConceptPool::from_json(open(pool, "activations")?).stage("activations")?;
    let texts = load_embeddings(texts).stage("activations")?;
    let images = load_embeddings(images).stage("activations")?;
    let concepts = texts.select(&pool.concepts).stage("activations")?;
    let mut act = activations(&images, &concepts).stage("activations")?;
    act = match z {
        ZscoreArg::None => act,
        ZscoreArg::PerConcept => zscore_along(&act, ZscoreAxis::PerConcept).stage("activations")?,
        ZscoreArg::PerImage => zscore_along(&act, ZscoreAxis::PerImage).stage("activations")?,
    };
    save_activations(&act, out).stage("activations")
}

fn cmd_rank(a: &RankArgs) -> CmdResult {
    let act = load_activations(&a.activations).stage("rank")?;
    let estimator = match a.estimator {
        EstimatorArg::Knn => Estimator::Knn { k: a.k },
        EstimatorArg::Binned => Estimator::ExactBinned { bins: a.bins },
    };
    let (evidence, names) = match (&a.relevance, &a.labels, &a.assoc) {
        (Some(rel), _, _) => {
            let lines = read_relevance_jsonl(open(rel, "rank")?).stage("rank")?;
            let records: Vec<CorpusRecord> = lines
                .iter()
                .map(|l| {
                    let mut concept_relevance = BTreeMap::new();
                    for &c in &l.relevant_concept_ids {
                        if c >= act.cols() {
                            return Err(data_err(
                                "rank",
                                format!(
                                    "record {:?}: concept {c} outside {} columns",
                                    l.record_id,
                                    act.cols()
                                ),
                            ));
                        }
                        concept_relevance.insert(c, 1);
                    }
                    Ok(CorpusRecord {
                        record_id: l.record_id.clone(),
                        caption: String::new(),
                        tokens: vec![],
                        objects: vec![],
                        concept_relevance,
                    })
                })
                .collect::<Result<_, _>>()?;
            (
                corpus_evidence(&act, &records).stage("rank")?,
                act.concept_ids.clone(),
            )
        }
        (None, Some(labels), Some(assoc)) => {
            let w = read_assoc(assoc, "rank")?;
            let rows = read_labels(open(labels, "rank")?).stage("rank")?;
            let (keep, y) = split_labels(&act, &rows, &w.categories, a.split.into(), "rank")?;
            let sub = act.select_rows(&keep);
            (
                dataset_evidence(&sub, &y, &w).stage("rank")?,
                w.concepts.clone(),
            )
        }
        _ => {
            return Err(config_err(
                "rank",
                "pass --relevance, or --labels with --assoc",
            ))
        }
    };
    let scores = rank_concepts(&evidence, estimator).stage("rank")?;
    json_out(&a.out, &score_lines(&scores, &names), "rank")
}

#[allow(clippy::too_many_arguments)]
fn cmd_select(
    scores: &Path,
    assoc: &Path,
    alpha: Option<f64>,
    budget: usize,
    dataset: &str,
    out: &Path,
    table: Option<&Path>,
) -> CmdResult {
    let lines: Vec<ScoreLine> = read_json(scores, "select")?;
    let mi = scores_from_lines(&lines).map_err(|e| data_err("select", e))?;
    let w = read_assoc(assoc, "select")?;
    let alpha = alpha
        .or_else(|| known_dataset_alpha(dataset))
        .unwrap_or(0.8);
    SelectionConfig { alpha, budget }
        .validate(mi.len())
        .stage("select")?;
    let combined = combined_scores(&mi, &generalizability(&w), alpha).stage("select")?;
    let chosen = select(&combined, budget).stage("select")?;
    let text_of = |id: usize| -> String {
        w.concept_ids
            .iter()
            .position(|&c| c == id)
            .map(|p| w.concepts[p].clone())
            .unwrap_or_default()
    };
    let file = SelectedFile {
        alpha,
        budget,
        concept_ids: chosen.clone(),
        concepts: chosen.iter().map(|&c| text_of(c)).collect(),
    };
    if let Some(t) = table {
        let mut names = vec![String::new(); w.concept_ids.iter().max().map_or(0, |m| m + 1)];
        for (p, &id) in w.concept_ids.iter().enumerate() {
            names[id] = w.concepts[p].clone();
        }
        write_out(
            t,
            selection_csv(&combined, &names, &chosen).as_bytes(),
            "select",
        )?;
    }
    json_out(out, &file, "select")
}

/// Activation columns and association rows of the selected concept ids.
fn selected_columns(
    w: &AssociationMatrix,
    act: &ActivationMatrix,
    ids: &[usize],
    stage: &str,
) -> Result<Vec<usize>, PipelineError> {
    if act.cols() != w.n_concepts() {
        return Err(data_err(
            stage,
            format!(
                "{} activation columns for {} concepts",
                act.cols(),
                w.n_concepts()
            ),
        ));
    }
    ids.iter()
        .map(|&id| {
            w.concept_ids.iter().position(|&c| c == id).ok_or_else(|| {
                data_err(
                    stage,
                    format!("selected concept {id} not in the association matrix"),
                )
            })
        })
        .collect()
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let act = load_activations(&a.activations).stage("train")?;
    let w = read_assoc(&a.assoc, "train")?;
    let sel: SelectedFile = read_json(&a.selected, "train")?;
    let cols = selected_columns(&w, &act, &sel.concept_ids, "train")?;
    let rows = read_labels(open(&a.labels, "train")?).stage("train")?;
    let (keep, y) = split_labels(&act, &rows, &w.categories, a.split.into(), "train")?;
    let x = act.select_rows(&keep).select_columns(&cols);
    let cfg = cdl_core::cbm::CbmConfig {
        reg: a.reg,
        max_iter: a.max_iter,
        tol: a.tol,
        seed: a.seed,
        fit_bias: !a.no_bias,
    };
    let mut model = train_cbm(&x, &y, &w.categories, &cfg).stage("train")?;
    model.weights.concept_ids = sel.concept_ids.clone();
    let mut buf = Vec::new();
    write_model(&model, &mut buf).stage("train")?;
    write_out(&a.out, &buf, "train")
}

#[derive(Serialize)]
struct EvalOutput {
    split: String,
    n: usize,
    accuracy: f64,
    intervention: Option<cdl_core::cbm::InterventionReport>,
}

fn load_model_inputs(
    model: &Path,
    activations: &Path,
    assoc: &Path,
    labels: &Path,
    split: Split,
    stage: &str,
) -> Result<
    (
        cdl_core::cbm::BottleneckModel,
        ActivationMatrix,
        Vec<usize>,
        AssociationMatrix,
    ),
    PipelineError,
> {
    let model = read_model(open(model, stage)?).stage(stage)?;
    let act = load_activations(activations).stage(stage)?;
    let w = read_assoc(assoc, stage)?;
    let cols = selected_columns(&w, &act, &model.weights.concept_ids, stage)?;
    let rows = read_labels(open(labels, stage)?).stage(stage)?;
    let (keep, y) = split_labels(&act, &rows, &w.categories, split, stage)?;
    let x = act.select_rows(&keep).select_columns(&cols);
    Ok((model, x, y, w.select_concepts(&cols)))
}

fn cmd_evaluate(a: &EvalArgs) -> CmdResult {
    let (model, x, y, w) = load_model_inputs(
        &a.model,
        &a.activations,
        &a.assoc,
        &a.labels,
        a.split.into(),
        "evaluate",
    )?;
    let pred = predict(&model, &x).stage("evaluate")?;
    let intervention = match intervention_accuracy(&model, &w, &y, !a.intervention_no_bias) {
        Ok(r) => Some(r),
        Err(CbmError::NothingToEvaluate(why)) => {
            log::warn!("intervention accuracy undefined: {why}");
            None
        }
        Err(e) => return Err(e).stage("evaluate"),
    };
    let out = EvalOutput {
        split: Split::from(a.split).as_str().into(),
        n: y.len(),
        accuracy: accuracy(&pred.labels, &y),
        intervention,
    };
    json_out(&a.out, &out, "evaluate")
}

fn cmd_ablate(config: &Path, variants: &str, seed: u64, split: Split, out: &Path) -> CmdResult {
    let cfg = load_config(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let p = &cfg.paths;
    let kinds: Vec<PromptKind> = if variants == "all" {
        PromptKind::ALL.to_vec()
    } else {
        variants
            .split(',')
            .map(|v| {
                PromptKind::parse(v.trim())
                    .ok_or_else(|| config_err("ablate", format!("unknown variant {v:?}")))
            })
            .collect::<Result<_, _>>()?
    };
    let pool = ingest_proposals(
        open(&base.join(&p.proposals), "ablate")?,
        &cfg.concepts.prompt_id,
    )
    .stage("ablate")?;
    let rows = read_labels(open(&base.join(&p.labels), "ablate")?).stage("ablate")?;
    let categories = categories_in_order(&rows);
    let answers = read_answers(open(&base.join(&p.answers), "ablate")?).stage("ablate")?;
    let (w, _) = build_association_matrix(&pool, &categories, &answers).stage("ablate")?;
    let images = load_embeddings(&base.join(&p.images)).stage("ablate")?;
    let texts = load_embeddings(&base.join(&p.texts)).stage("ablate")?;
    let mut ids = Vec::new();
    let mut y = Vec::new();
    for r in &rows {
        let s = r
            .split
            .as_deref()
            .and_then(Split::parse)
            .unwrap_or(Split::Train);
        if s == split {
            ids.push(r.image_id.clone());
            y.push(
                categories
                    .iter()
                    .position(|c| c == &r.category)
                    .expect("category from labels"),
            );
        }
    }
    if ids.is_empty() {
        return Err(data_err("ablate", format!("no {} images", split.as_str())));
    }
    let images = images.select(&ids).stage("ablate")?;
    let table =
        prompt_ablation(&cfg.dataset, &kinds, &images, &y, &texts, &w, seed).stage("ablate")?;
    write_out(out, ablation_csv(&table).as_bytes(), "ablate")
}

#[derive(serde::Deserialize)]
struct PromptLine {
    category: String,
    text: String,
}

#[derive(Serialize)]
struct LearnOutput {
    best_epoch: usize,
    initial_val_loss: f64,
    best_val_loss: f64,
    temperature: f64,
    pseudo_label_agreement: f64,
}

fn cmd_learn(a: &LearnArgs) -> CmdResult {
    let w = read_assoc(&a.assoc, "learn")?;
    let concepts = load_embeddings(&a.concepts)
        .stage("learn")?
        .select(&w.concepts)
        .stage("learn")?;
    let images = load_embeddings(&a.images).stage("learn")?;
    let texts = load_embeddings(&a.texts).stage("learn")?;
    let lines: Vec<PromptLine> = read_json(&a.pseudo_from, "learn")?;
    let prompts: Vec<Prompt> = lines
        .iter()
        .map(|l| {
            let category = w
                .categories
                .iter()
                .position(|c| c == &l.category)
                .ok_or_else(|| {
                    data_err(
                        "learn",
                        format!(
                            "prompt category {:?} not in the association matrix",
                            l.category
                        ),
                    )
                })?;
            Ok(Prompt {
                text: l.text.clone(),
                category,
                concept: None,
                kind: PromptKind::NameOnly,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    let prompt_emb = lookup_prompts(&texts, &prompts).stage("learn")?;
    let rows = read_labels(open(&a.labels, "learn")?).stage("learn")?;
    let pick = |split: Split| -> Result<(EmbeddingMatrix, Vec<usize>), PipelineError> {
        let mut ids = Vec::new();
        let mut truth = Vec::new();
        for r in &rows {
            if r.split
                .as_deref()
                .and_then(Split::parse)
                .unwrap_or(Split::Train)
                == split
            {
                ids.push(r.image_id.clone());
                truth.push(
                    w.categories
                        .iter()
                        .position(|c| c == &r.category)
                        .unwrap_or(usize::MAX),
                );
            }
        }
        if ids.is_empty() {
            return Err(data_err("learn", format!("no {} images", split.as_str())));
        }
        Ok((images.select(&ids).stage("learn")?, truth))
    };
    let (train_images, train_truth) = pick(Split::Train)?;
    let (val_images, _) = pick(Split::Val)?;
    let train_pl =
        pseudo_labels(&train_images, &prompt_emb, &prompts, &w.categories).stage("learn")?;
    let val_pl = pseudo_labels(&val_images, &prompt_emb, &prompts, &w.categories).stage("learn")?;
    let cfg = cdl_core::concept_learning::LearningConfig {
        lr: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        initial_temperature: a.temperature,
        train_image_projection: !a.freeze_images,
        train_text_projection: !a.freeze_texts,
        learn_temperature: !a.fixed_temperature,
    };
    cfg.validate().stage("config")?;
    let data = LearningData {
        train_images: &train_images,
        train_labels: &train_pl,
        val_images: &val_images,
        val_labels: &val_pl,
        concepts: &concepts,
        w_llm: &w,
    };
    let init = ProjectionPair::identity(images.dim(), a.temperature);
    let result = fit(&init, &data, &cfg).stage("learn")?;
    result.projection.save(&a.out).stage("learn")?;
    write_out(&a.history, history_csv(&result.history).as_bytes(), "learn")?;
    let summary = LearnOutput {
        best_epoch: result.best_epoch,
        initial_val_loss: result.initial_val_loss,
        best_val_loss: result.best_val_loss,
        temperature: result.projection.temperature,
        pseudo_label_agreement: accuracy(&train_pl, &train_truth),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn cmd_packets(a: &PacketArgs) -> CmdResult {
    let (model, x, y, w) = load_model_inputs(
        &a.model,
        &a.activations,
        &a.assoc,
        &a.labels,
        a.split.into(),
        "packets",
    )?;
    let k =
        a.k.unwrap_or_else(|| default_top_k(&a.dataset, model.n_concepts()));
    let packets = export_eval_packets(
        &model,
        &x,
        &y,
        &w,
        &PacketConfig {
            sample_size: a.sample_size,
            k,
            seed: a.seed,
            include_wrong: a.include_wrong,
        },
    )
    .stage("packets")?;
    let mut buf = Vec::new();
    write_packets(&packets, &mut buf).stage("packets")?;
    write_out(&a.out, &buf, "packets")
}

fn cmd_ingest_results(annotations: &Path, out: &Path) -> CmdResult {
    let ann = read_annotations(open(annotations, "ingest-eval")?).stage("ingest-eval")?;
    json_out(out, &ingest_eval_results(&ann), "ingest-eval")
}

/// Numbers separated by commas, whitespace or newlines; `#` starts a comment.
fn read_numbers(path: &Path) -> Result<Vec<f64>, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| data_err("significance", format!("{}: {e}", path.display())))?;
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(|l| {
            l.split([',', ' ', '\t'])
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| {
                data_err(
                    "significance",
                    format!("{}: not a number: {t:?}", path.display()),
                )
            })
        })
        .collect()
}

fn cmd_significance(a: &Path, b: &Path, student: bool, out: Option<&Path>) -> CmdResult {
    let (xa, xb) = (read_numbers(a)?, read_numbers(b)?);
    let kind = if student {
        TTestKind::Student
    } else {
        TTestKind::Welch
    };
    let r = t_test(&xa, &xb, kind).map_err(|e| PipelineError {
        stage: "significance".into(),
        kind: ErrorKind::Data,
        message: e.to_string(),
    })?;
    match out {
        Some(p) => json_out(p, &r, "significance"),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&r).expect("result serializes")
            );
            Ok(())
        }
    }
}

fn cmd_report(dir: &Path) -> CmdResult {
    let manifest: Manifest = read_json(&dir.join(pipeline::outputs::MANIFEST), "report")?;
    for (name, hash) in &manifest.outputs {
        let actual =
            sha256_file(&dir.join(name)).map_err(|e| data_err("report", format!("{name}: {e}")))?;
        if &actual != hash {
            return Err(data_err(
                "report",
                format!("{name} does not match its manifest hash"),
            ));
        }
    }
    let m: Metrics = read_json(&dir.join(pipeline::outputs::METRICS), "report")?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "dataset {}  seed {}  version {}",
        m.dataset, m.seed, manifest.version
    );
    let _ = writeln!(
        out,
        "selection alpha {} ({})  budget {}",
        m.selection.alpha, m.selection.alpha_source, m.selection.budget
    );
    let _ = writeln!(out, "baseline accuracy {:.4}", m.baseline.accuracy);
    if let Some(l) = &m.learned {
        let _ = writeln!(out, "learned accuracy {:.4}", l.accuracy);
    }
    for r in &m.ablation {
        let _ = writeln!(out, "{:<32} {:>7.2}", r.prompt_design, r.accuracy);
    }
    for (name, ok) in &m.invariants {
        let _ = writeln!(out, "{} {name}", if *ok { "ok  " } else { "FAIL" });
    }
    if !m.all_invariants_hold {
        return Err(PipelineError {
            stage: "report".into(),
            kind: ErrorKind::Numeric,
            message: violated(&m),
        });
    }
    Ok(())
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Run { config } => cmd_run(&config),
        Command::SynthFixture(a) => cmd_synth(&a),
        Command::ExtractObjects {
            conllu,
            out,
            amod_both,
        } => cmd_extract(&conllu, &out, amod_both),
        Command::IngestConcepts {
            proposals,
            answers,
            labels,
            prompt_id,
            out_pool,
            out_assoc,
        } => cmd_ingest(
            &proposals, &answers, &labels, &prompt_id, &out_pool, &out_assoc,
        ),
        Command::ComputeActivations {
            images,
            texts,
            pool,
            zscore,
            out,
        } => cmd_activations(&images, &texts, &pool, zscore, &out),
        Command::RankConcepts(a) => cmd_rank(&a),
        Command::SelectConcepts {
            scores,
            assoc,
            alpha,
            budget,
            dataset,
            out,
            table,
        } => cmd_select(
            &scores,
            &assoc,
            alpha,
            budget,
            &dataset,
            &out,
            table.as_deref(),
        ),
        Command::TrainCbm(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::AblatePrompts {
            config,
            variants,
            seed,
            split,
            out,
        } => cmd_ablate(&config, &variants, seed, split.into(), &out),
        Command::LearnConcepts(a) => cmd_learn(&a),
        Command::ExportEvalPackets(a) => cmd_packets(&a),
        Command::IngestEvalResults { annotations, out } => cmd_ingest_results(&annotations, &out),
        Command::Significance { a, b, student, out } => {
            cmd_significance(&a, &b, student, out.as_deref())
        }
        Command::Report { dir } => cmd_report(&dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
