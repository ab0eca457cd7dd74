//! Synthetic test bed with a controllable category-name shortcut.
//!
//! Every category and concept owns one axis of an orthonormal basis. An image
//! of category `j` is `s·e_j + β·Σ e_c` over the visual concepts of `j`, plus
//! Gaussian noise. A category-name prompt embeds as `s·e_j + β·Σ e_c` over
//! all concepts of `j` (visual or not); a concept mention adds `e_c`. The
//! shortcut strength `s` is the part of the image/name agreement that no
//! concept explains.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concept_pool::{Answer, AssociationKind, AssociationMatrix, RelevanceLine};
use crate::dataset::{write_labels, LabelRow, Split};
use crate::embeddings::{write_embeddings_file, EmbeddingError, EmbeddingMatrix, PromptKind};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dim {dim} cannot hold {categories} categories and {concepts} concepts")]
    Dim {
        dim: usize,
        categories: usize,
        concepts: usize,
    },
    #[error("invalid fixture spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Pool(#[from] crate::concept_pool::PoolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub categories: usize,
    /// Visual concepts owned by each category.
    pub concepts_per_category: usize,
    /// Concepts associated with a category but absent from its images.
    pub nonvisual_per_category: usize,
    /// Visual concepts associated with every category.
    pub shared_concepts: usize,
    /// Embedding width; 0 picks the smallest feasible width plus 8.
    pub dim: usize,
    pub noise: f64,
    pub text_noise: f64,
    pub shortcut_strength: f64,
    pub concept_strength: f64,
    pub train_per_category: usize,
    pub val_per_category: usize,
    pub test_per_category: usize,
    pub captions_per_category: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            categories: 10,
            concepts_per_category: 3,
            nonvisual_per_category: 1,
            shared_concepts: 1,
            dim: 0,
            noise: 1.0,
            text_noise: 0.02,
            shortcut_strength: 4.0,
            concept_strength: 1.0,
            train_per_category: 40,
            val_per_category: 10,
            test_per_category: 30,
            captions_per_category: 20,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn n_concepts(&self) -> usize {
        self.categories * (self.concepts_per_category + self.nonvisual_per_category)
            + self.shared_concepts
    }

    pub fn effective_dim(&self) -> usize {
        if self.dim == 0 {
            self.categories + self.n_concepts() + 8
        } else {
            self.dim
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.categories < 2 {
            return Err(SynthError::Spec("need at least 2 categories".into()));
        }
        if self.concepts_per_category + self.nonvisual_per_category == 0 {
            return Err(SynthError::Spec(
                "categories need at least one concept".into(),
            ));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("text_noise", self.text_noise),
            ("shortcut_strength", self.shortcut_strength),
            ("concept_strength", self.concept_strength),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SynthError::Spec(format!("{name} must be finite and ≥ 0")));
            }
        }
        let need = self.categories + self.n_concepts();
        if self.effective_dim() < need {
            return Err(SynthError::Dim {
                dim: self.effective_dim(),
                categories: self.categories,
                concepts: self.n_concepts(),
            });
        }
        Ok(())
    }
}

const ANIMALS: [&str; 16] = [
    "penguin", "seagull", "panda", "heron", "otter", "falcon", "lynx", "beetle", "orchid",
    "durian", "tulip", "salmon", "badger", "gecko", "walrus", "magpie",
];
const COLORS: [&str; 10] = [
    "red", "blue", "green", "yellow", "white", "black", "gray", "brown", "orange", "purple",
];
const PARTS: [&str; 10] = [
    "beak", "wing", "tail", "belly", "legs", "head", "fin", "petal", "stripes", "spots",
];
const TRAITS: [&str; 10] = [
    "fish-eating",
    "nocturnal",
    "migratory",
    "territorial",
    "solitary",
    "herbivorous",
    "venomous",
    "aquatic",
    "burrowing",
    "social",
];
const SHARED: [&str; 4] = [
    "visible outline",
    "natural texture",
    "clear silhouette",
    "soft shading",
];
const PLACES: [&str; 5] = ["snow", "grass", "water", "sand", "forest"];
const FOODS: [&str; 5] = ["fish", "seeds", "leaves", "insects", "berries"];

fn suffixed(base: &str, n: usize) -> String {
    if n == 0 {
        base.to_string()
    } else {
        format!("{base}{n}")
    }
}

/// A generated fixture held in memory.
#[derive(Debug, Clone)]
pub struct SynthFixture {
    pub spec: SynthSpec,
    pub categories: Vec<String>,
    pub concepts: Vec<String>,
    pub visual: Vec<bool>,
    pub w_llm: AssociationMatrix,
    pub images: EmbeddingMatrix,
    pub labels: Vec<LabelRow>,
    /// Every name, concept and name+concept prompt under the default
    /// templates.
    pub texts: EmbeddingMatrix,
    pub corpus_conllu: String,
    pub corpus_images: EmbeddingMatrix,
    /// Object → proposed concepts, in file order.
    pub proposals: Vec<(String, Vec<String>)>,
    pub answers: Vec<Answer>,
    pub relevance: Vec<RelevanceLine>,
}

struct Basis {
    dim: usize,
    m: usize,
}

impl Basis {
    fn category(&self, j: usize) -> usize {
        j
    }
    fn concept(&self, c: usize) -> usize {
        self.m + c
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn text_rng(seed: u64, text: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

pub fn synth_fixture(spec: &SynthSpec) -> Result<SynthFixture, SynthError> {
    spec.validate()?;
    let m = spec.categories;
    let basis = Basis {
        dim: spec.effective_dim(),
        m,
    };
    let categories: Vec<String> = (0..m)
        .map(|j| suffixed(ANIMALS[j % ANIMALS.len()], j / ANIMALS.len()))
        .collect();

    // concepts in first-proposed order, so pool ids match positions
    let mut concepts: Vec<String> = Vec::new();
    let mut visual: Vec<bool> = Vec::new();
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut shared_ids: Vec<usize> = Vec::new();
    for j in 0..m {
        for k in 0..spec.concepts_per_category {
            let color = suffixed(COLORS[j % 10], j / 10);
            let part = suffixed(PARTS[k % 10], k / 10);
            owned[j].push(concepts.len());
            concepts.push(format!("{color} {part}"));
            visual.push(true);
        }
        for l in 0..spec.nonvisual_per_category {
            let t = j * spec.nonvisual_per_category + l;
            owned[j].push(concepts.len());
            concepts.push(suffixed(TRAITS[t % 10], t / 10));
            visual.push(false);
        }
        if j == 0 {
            for s in 0..spec.shared_concepts {
                shared_ids.push(concepts.len());
                concepts.push(suffixed(SHARED[s % SHARED.len()], s / SHARED.len()));
                visual.push(true);
            }
        }
    }
    let n = concepts.len();
    let members: Vec<Vec<usize>> = (0..m)
        .map(|j| {
            let mut v: Vec<usize> = owned[j].iter().chain(&shared_ids).copied().collect();
            v.sort_unstable();
            v
        })
        .collect();

    let mut weights = vec![0.0; n * m];
    for (j, cs) in members.iter().enumerate() {
        for &c in cs {
            weights[c * m + j] = 1.0;
        }
    }
    let w_llm = AssociationMatrix::new(
        (0..n).collect(),
        concepts.clone(),
        categories.clone(),
        weights,
        AssociationKind::Binary,
    )?;

    let image_mean = |j: usize| -> Vec<f64> {
        let mut v = vec![0.0; basis.dim];
        v[basis.category(j)] = spec.shortcut_strength;
        for &c in &members[j] {
            if visual[c] {
                v[basis.concept(c)] += spec.concept_strength;
            }
        }
        v
    };
    let draw = |rng: &mut ChaCha8Rng, j: usize| -> Vec<f64> {
        let mut v = image_mean(j);
        for x in v.iter_mut() {
            *x += spec.noise * gaussian(rng);
        }
        v
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut image_ids = Vec::new();
    let mut image_rows = Vec::new();
    let mut labels = Vec::new();
    for (split, per) in [
        (Split::Train, spec.train_per_category),
        (Split::Val, spec.val_per_category),
        (Split::Test, spec.test_per_category),
    ] {
        for (j, name) in categories.iter().enumerate() {
            for i in 0..per {
                let id = format!("{}-{name}-{i:03}", split.as_str());
                image_rows.push(draw(&mut rng, j));
                image_ids.push(id.clone());
                labels.push(LabelRow {
                    image_id: id,
                    category: name.clone(),
                    split: Some(split.as_str().to_string()),
                });
            }
        }
    }
    let images = EmbeddingMatrix::from_rows(image_ids, &image_rows)?;

    // text encoder
    let name_vec = |j: usize| -> Vec<f64> {
        let mut v = vec![0.0; basis.dim];
        v[basis.category(j)] = spec.shortcut_strength;
        for &c in &members[j] {
            v[basis.concept(c)] += spec.concept_strength;
        }
        v
    };
    let mut text_ids: Vec<String> = Vec::new();
    let mut text_rows: Vec<Vec<f64>> = Vec::new();
    let mut push_text = |text: String, mut v: Vec<f64>| {
        let mut trng = text_rng(spec.seed, &text);
        for x in v.iter_mut() {
            *x += spec.text_noise * gaussian(&mut trng);
        }
        text_ids.push(text);
        text_rows.push(v);
    };
    let render = |kind: PromptKind, j: usize, c: usize| {
        kind.default_template()
            .replace("{category}", &categories[j])
            .replace("{concept}", &concepts[c])
    };
    for j in 0..m {
        push_text(render(PromptKind::NameOnly, j, 0), name_vec(j));
    }
    for (c, text) in concepts.iter().enumerate() {
        let mut v = vec![0.0; basis.dim];
        v[basis.concept(c)] = 1.0;
        push_text(text.clone(), v);
    }
    for j in 0..m {
        for c in 0..n {
            let mut v = name_vec(j);
            v[basis.concept(c)] += 1.0;
            push_text(render(PromptKind::NameWithConcept, j, c), v);
        }
    }
    let texts = EmbeddingMatrix::from_rows(text_ids, &text_rows)?;

    // caption corpus
    let mut crng = ChaCha8Rng::seed_from_u64(spec.seed);
    crng.set_stream(1);
    let mut conllu = String::new();
    let mut corpus_ids = Vec::new();
    let mut corpus_rows = Vec::new();
    let mut relevance = Vec::new();
    let mut r = 0usize;
    for (j, name) in categories.iter().enumerate() {
        for i in 0..spec.captions_per_category {
            let id = format!("cap-{r:05}");
            caption_sentence(&mut conllu, &id, name, i);
            corpus_rows.push(draw(&mut crng, j));
            corpus_ids.push(id.clone());
            relevance.push(RelevanceLine {
                record_id: id,
                relevant_concept_ids: members[j].clone(),
            });
            r += 1;
        }
    }
    let corpus_images = EmbeddingMatrix::from_rows(corpus_ids, &corpus_rows)?;

    let proposals = (0..m)
        .map(|j| {
            let mut cs: Vec<usize> = owned[j].clone();
            if j == 0 {
                cs.extend(&shared_ids);
            } else {
                cs.splice(0..0, shared_ids.iter().copied());
            }
            (
                categories[j].clone(),
                cs.iter().map(|&c| concepts[c].clone()).collect(),
            )
        })
        .collect();
    let mut answers = Vec::with_capacity(n * m);
    for (c, concept) in concepts.iter().enumerate() {
        for (j, category) in categories.iter().enumerate() {
            answers.push(Answer {
                concept: concept.clone(),
                category: category.clone(),
                answer: w_llm.get(c, j) == 1.0,
            });
        }
    }

    Ok(SynthFixture {
        spec: *spec,
        categories,
        concepts,
        visual,
        w_llm,
        images,
        labels,
        texts,
        corpus_conllu: conllu,
        corpus_images,
        proposals,
        answers,
        relevance,
    })
}

fn caption_sentence(out: &mut String, id: &str, name: &str, i: usize) {
    let row = |out: &mut String,
               idx: usize,
               form: &str,
               lemma: &str,
               upos: &str,
               head: usize,
               rel: &str| {
        let _ = writeln!(
            out,
            "{idx}\t{form}\t{lemma}\t{upos}\t_\t_\t{head}\t{rel}\t_\t_"
        );
    };
    if i % 2 == 0 {
        let place = PLACES[(i / 2) % PLACES.len()];
        let _ = writeln!(out, "# sent_id = {id}");
        let _ = writeln!(out, "# text = a {name} is standing in the {place}");
        row(out, 1, "a", "a", "DET", 2, "det");
        row(out, 2, name, name, "NOUN", 4, "nsubj");
        row(out, 3, "is", "be", "AUX", 4, "aux");
        row(out, 4, "standing", "stand", "VERB", 0, "root");
        row(out, 5, "in", "in", "ADP", 7, "case");
        row(out, 6, "the", "the", "DET", 7, "det");
        row(out, 7, place, place, "NOUN", 4, "obl");
    } else {
        let food = FOODS[(i / 2) % FOODS.len()];
        let _ = writeln!(out, "# sent_id = {id}");
        let _ = writeln!(out, "# text = the {name} eats {food}");
        row(out, 1, "the", "the", "DET", 2, "det");
        row(out, 2, name, name, "NOUN", 3, "nsubj");
        row(out, 3, "eats", "eat", "VERB", 0, "root");
        row(out, 4, food, food, "NOUN", 3, "obj");
    }
    out.push('\n');
}

/// File names inside a fixture directory.
pub mod files {
    pub const IMAGES: &str = "images.cdle";
    pub const TEXTS: &str = "texts.cdle";
    pub const LABELS: &str = "labels.csv";
    pub const CORPUS: &str = "corpus.conllu";
    pub const CORPUS_IMAGES: &str = "corpus_images.cdle";
    pub const PROPOSALS: &str = "proposals.json";
    pub const ANSWERS: &str = "answers.json";
    pub const RELEVANCE: &str = "relevance.jsonl";
    pub const SPEC: &str = "fixture.json";
}

impl SynthFixture {
    /// Concept ids associated with each category.
    pub fn concepts_per_category(&self) -> Vec<Vec<usize>> {
        (0..self.categories.len())
            .map(|j| self.w_llm.concepts_of(j))
            .collect()
    }

    pub fn proposals_json(&self) -> Result<String, SynthError> {
        let mut s = String::from("{\n");
        for (i, (obj, cs)) in self.proposals.iter().enumerate() {
            let sep = if i + 1 < self.proposals.len() {
                ","
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "  {}: {}{sep}",
                serde_json::to_string(obj)?,
                serde_json::to_string(cs)?
            );
        }
        s.push_str("}\n");
        Ok(s)
    }

    /// Writes every input file of a pipeline run into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        write_embeddings_file(&self.images, &dir.join(files::IMAGES))?;
        write_embeddings_file(&self.texts, &dir.join(files::TEXTS))?;
        write_embeddings_file(&self.corpus_images, &dir.join(files::CORPUS_IMAGES))?;
        write_labels(&self.labels, fs::File::create(dir.join(files::LABELS))?)?;
        fs::write(dir.join(files::CORPUS), &self.corpus_conllu)?;
        fs::write(dir.join(files::PROPOSALS), self.proposals_json()?)?;
        let mut answers = serde_json::to_vec_pretty(&self.answers)?;
        answers.push(b'\n');
        fs::write(dir.join(files::ANSWERS), answers)?;
        let mut rel = String::new();
        for line in &self.relevance {
            rel.push_str(&serde_json::to_string(line)?);
            rel.push('\n');
        }
        fs::write(dir.join(files::RELEVANCE), rel)?;
        let mut spec = serde_json::to_vec_pretty(&self.spec)?;
        spec.push(b'\n');
        fs::write(dir.join(files::SPEC), spec)?;
        Ok(())
    }
}
