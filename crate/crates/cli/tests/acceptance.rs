//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use cdl_core::ablation::prompt_ablation;
use cdl_core::cbm::{
    accuracy, intervention_accuracy, predict, train_cbm, BottleneckModel, CbmConfig, TrainingMeta,
};
use cdl_core::concept_learning::{
    fit, learning_loss, LearningConfig, LearningData, ProjectionPair,
};
use cdl_core::concept_pool::{AssociationKind, AssociationMatrix};
use cdl_core::corpus::{
    extract_all, extract_objects, parse_conllu, write_objects_jsonl, ExtractionOptions,
};
use cdl_core::embeddings::{
    read_embeddings, write_embeddings, ActivationMatrix, EmbeddingMatrix, Normalization, PromptKind,
};
use cdl_core::mi::{mi_exact_binned, mi_knn, ConceptEvidence, Estimator, MiScore};
use cdl_core::selection::{alpha_sweep, combined_scores, default_alpha_grid, select};
use cdl_core::stats::{t_test, TTestKind, SIGNIFICANCE_LEVEL};
use cdl_core::synth::{synth_fixture, SynthSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- MI

fn normal_pdf(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// `Σ_y p_y ∫ f_y ln(f_y / f)` by composite Simpson on a wide grid.
fn mixture_mi(p1: f64, comp: [(f64, f64); 2]) -> f64 {
    let (lo, hi, n) = (-20.0, 20.0, 40_000);
    let h = (hi - lo) / n as f64;
    let weights = [1.0 - p1, p1];
    let integrand = |x: f64| {
        let fy: Vec<f64> = comp.iter().map(|&(m, s)| normal_pdf(x, m, s)).collect();
        let f = weights[0] * fy[0] + weights[1] * fy[1];
        (0..2)
            .filter(|&y| fy[y] > 0.0)
            .map(|y| weights[y] * fy[y] * (fy[y] / f).ln())
            .sum::<f64>()
    };
    let mut s = integrand(lo) + integrand(hi);
    for i in 1..n {
        s += integrand(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn mixture_sample(p1: f64, comp: [(f64, f64); 2], n: usize, seed: u64) -> ConceptEvidence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = u8::from(rng.random_bool(p1));
        let (m, s) = comp[label as usize];
        x.push(Normal::new(m, s).unwrap().sample(&mut rng));
        y.push(label);
    }
    ConceptEvidence::new(0, x, y).unwrap()
}

fn check_mi() -> Check {
    let start = Instant::now();
    // pre-binned joints: four equally filled bins per case
    let cases: [[[usize; 2]; 2]; 3] = [[[4, 1], [1, 4]], [[3, 2], [2, 3]], [[5, 0], [1, 4]]];
    for counts in cases {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (b, c) in counts.iter().enumerate() {
            for j in 0..c[0] + c[1] {
                x.push(b as f64 + j as f64 * 1e-3);
                y.push(u8::from(j >= c[0]));
            }
        }
        let n = x.len() as f64;
        let py = [
            (counts[0][0] + counts[1][0]) as f64 / n,
            (counts[0][1] + counts[1][1]) as f64 / n,
        ];
        let mut hand = 0.0;
        for c in counts {
            let pb = (c[0] + c[1]) as f64 / n;
            for k in 0..2 {
                let p = c[k] as f64 / n;
                if p > 0.0 {
                    hand += p * (p / (pb * py[k])).ln();
                }
            }
        }
        let got = mi_exact_binned(&ConceptEvidence::new(0, x, y).unwrap(), 2)
            .map_err(|e| e.to_string())?
            .raw_value;
        ensure(
            (got - hand).abs() <= 1e-12,
            format!("binned {got} vs hand {hand}"),
        )?;
    }
    let fixture = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
    ensure(
        (fixture - 0.19274).abs() < 5e-6,
        format!("2x2 fixture {fixture}"),
    )?;

    let families = [
        (0.5, [(-1.0, 1.0), (1.0, 1.0)]),
        (0.3, [(0.0, 1.0), (1.5, 0.5)]),
    ];
    let mut detail = Vec::new();
    for (i, &(p1, comp)) in families.iter().enumerate() {
        let truth = mixture_mi(p1, comp);
        let ev = mixture_sample(p1, comp, 10_000, 100 + i as u64);
        let est = mi_knn(&ev, 3).map_err(|e| e.to_string())?.raw_value;
        ensure(
            (est - truth).abs() <= 0.05,
            format!("family {i}: knn {est:.4} vs analytic {truth:.4}"),
        )?;
        detail.push(format!("{est:.4}/{truth:.4}"));

        let mut shuffled = ev.y.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(200 + i as u64));
        let ind = ConceptEvidence::new(0, ev.x.clone(), shuffled).unwrap();
        let k = mi_knn(&ind, 3).map_err(|e| e.to_string())?.value;
        let b = mi_exact_binned(&ind, 16).map_err(|e| e.to_string())?.value;
        ensure(
            k <= 0.02 && b <= 0.02,
            format!("family {i} permuted: knn {k}, binned {b}"),
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, format!("took {secs:.2} s"))?;
    Ok(format!("knn/analytic {}, {secs:.2} s", detail.join(", ")))
}

// ---------------------------------------------------------------- ablation

fn ablation_at(strength: f64) -> Result<BTreeMap<String, f64>, String> {
    let spec = SynthSpec {
        shortcut_strength: strength,
        ..SynthSpec::default()
    };
    let fx = synth_fixture(&spec).map_err(|e| e.to_string())?;
    let index: BTreeMap<&str, usize> = fx
        .categories
        .iter()
        .enumerate()
        .map(|(j, c)| (c.as_str(), j))
        .collect();
    let test: Vec<_> = fx
        .labels
        .iter()
        .filter(|l| l.split.as_deref() == Some("test"))
        .collect();
    let ids: Vec<String> = test.iter().map(|l| l.image_id.clone()).collect();
    let labels: Vec<usize> = test.iter().map(|l| index[l.category.as_str()]).collect();
    let images = fx.images.select(&ids).map_err(|e| e.to_string())?;
    let rows = prompt_ablation(
        "synthetic",
        &PromptKind::ALL,
        &images,
        &labels,
        &fx.texts,
        &fx.w_llm,
        spec.seed,
    )
    .map_err(|e| e.to_string())?;
    Ok(rows.into_iter().map(|r| (r.variant, r.accuracy)).collect())
}

fn check_ablation() -> Check {
    let start = Instant::now();
    let high = ablation_at(SynthSpec::default().shortcut_strength)?;
    let (name, random, concept) = (
        high["name_only"],
        high["name_with_random_concept"],
        high["concept_only"],
    );
    ensure(
        name >= random - 2.0,
        format!("name {name:.1} < random {random:.1} - 2"),
    )?;
    ensure(
        concept <= name - 30.0,
        format!("concept {concept:.1} > name {name:.1} - 30"),
    )?;
    let zero = ablation_at(0.0)?;
    let gap = (zero["concept_only"] - zero["name_only"]).abs();
    ensure(
        gap <= 5.0,
        format!("shortcut 0: |concept - name| = {gap:.1}"),
    )?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, format!("took {secs:.2} s"))?;
    Ok(format!(
        "name {name:.1}, random {random:.1}, concept {concept:.1}; at 0: gap {gap:.1}; {secs:.2} s"
    ))
}

// ---------------------------------------------------------------- CBM

fn separable(seed: u64) -> (ActivationMatrix, Vec<usize>) {
    let (n, m, f) = (500, 10, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
    let values = labels
        .iter()
        .flat_map(|&l| (0..f).map(move |c| if c % m == l { 2.0 } else { 0.0 }))
        .map(|v: f64| v + noise.sample(&mut rng))
        .collect();
    let act = ActivationMatrix {
        image_ids: (0..n).map(|i| format!("i{i}")).collect(),
        concept_ids: (0..f).map(|c| format!("c{c}")).collect(),
        values,
        normalization: Normalization::Raw,
    };
    (act, labels)
}

fn check_cbm() -> Check {
    let (act, labels) = separable(1);
    let cats: Vec<String> = (0..10).map(|j| format!("k{j}")).collect();
    let cfg = CbmConfig {
        reg: 0.01,
        max_iter: 300,
        ..CbmConfig::default()
    };
    let model = train_cbm(&act, &labels, &cats, &cfg).map_err(|e| e.to_string())?;
    let pred = predict(&model, &act).map_err(|e| e.to_string())?;
    let acc = accuracy(&pred.labels, &labels);
    ensure(acc >= 0.99, format!("train accuracy {acc}"))?;
    let h = &model.meta.loss_history;
    ensure(
        h.windows(2).all(|w| w[1] <= w[0]),
        "loss increased between iterations",
    )?;
    let mut perm: Vec<usize> = (0..act.cols()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let permuted = act.select_columns(&perm);
    let other = train_cbm(&permuted, &labels, &cats, &cfg).map_err(|e| e.to_string())?;
    let pred2 = predict(&other, &permuted).map_err(|e| e.to_string())?;
    ensure(
        pred.labels == pred2.labels,
        "predictions changed under column permutation",
    )?;
    Ok(format!(
        "train accuracy {:.3}, {} iterations",
        acc, model.meta.iterations
    ))
}

// ---------------------------------------------------------------- intervention

fn as_model(w: &AssociationMatrix, weights: Vec<f64>, bias: Vec<f64>) -> BottleneckModel {
    BottleneckModel {
        weights: AssociationMatrix::new(
            w.concept_ids.clone(),
            w.concepts.clone(),
            w.categories.clone(),
            weights,
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
            loss_history: Vec::new(),
        },
    }
}

fn check_intervention() -> Check {
    // fixture pool: every category has its own concepts, no signature inside another
    let fx = synth_fixture(&SynthSpec::default()).map_err(|e| e.to_string())?;
    let w = &fx.w_llm;
    let m = w.n_categories();
    let model = as_model(w, w.weights.clone(), vec![0.0; m]);
    let labels: Vec<usize> = (0..m).collect();
    let r = intervention_accuracy(&model, w, &labels, true).map_err(|e| e.to_string())?;
    ensure(
        r.accuracy == 1.0,
        format!("own signatures give {}", r.accuracy),
    )?;

    // 3×3 seeded random case against enumeration
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let bits: Vec<f64> = loop {
        let b: Vec<f64> = (0..9)
            .map(|_| f64::from(rng.random_range(0..2u8)))
            .collect();
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|j| (0..3).map(|i| b[i * 3 + j]).collect())
            .collect();
        let distinct = cols[0] != cols[1] && cols[0] != cols[2] && cols[1] != cols[2];
        if distinct && cols.iter().all(|c| c.contains(&1.0)) {
            break b;
        }
    };
    let normal = Normal::new(0.0, 1.0).unwrap();
    let weights: Vec<f64> = (0..9).map(|_| normal.sample(&mut rng)).collect();
    let bias: Vec<f64> = (0..3).map(|_| normal.sample(&mut rng)).collect();
    let labels: Vec<usize> = (0..60).map(|_| rng.random_range(0..3)).collect();
    let llm = AssociationMatrix::new(
        vec![0, 1, 2],
        vec!["a".into(), "b".into(), "c".into()],
        vec!["x".into(), "y".into(), "z".into()],
        bits.clone(),
        AssociationKind::Binary,
    )
    .unwrap();
    let model = as_model(&llm, weights.clone(), bias.clone());
    let got = intervention_accuracy(&model, &llm, &labels, true).map_err(|e| e.to_string())?;
    let predicted: Vec<usize> = (0..3)
        .map(|l| {
            let mut best = (0, f64::NEG_INFINITY);
            for j in 0..3 {
                let s = bias[j]
                    + (0..3)
                        .map(|i| bits[i * 3 + l] * weights[i * 3 + j])
                        .sum::<f64>();
                if s > best.1 {
                    best = (j, s);
                }
            }
            best.0
        })
        .collect();
    let hits = labels.iter().filter(|&&l| predicted[l] == l).count();
    let brute = hits as f64 / labels.len() as f64;
    ensure(
        got.accuracy == brute,
        format!("3x3: {} vs enumeration {brute}", got.accuracy),
    )?;
    Ok(format!(
        "own signatures 100% over {m} categories; 3x3 case {brute:.3}"
    ))
}

// ---------------------------------------------------------------- extraction

fn check_extraction() -> Check {
    let sentences: [(&str, &[&str]); 4] = [
        (
            "1\tthe\tthe\tDET\t_\t_\t2\tdet\t_\t_\n2\thorse\thorse\tNOUN\t_\t_\t4\tnsubj\t_\t_\n\
3\tis\tbe\tAUX\t_\t_\t4\taux\t_\t_\n4\teating\teat\tVERB\t_\t_\t0\troot\t_\t_\n\
5\tgrass\tgrass\tNOUN\t_\t_\t4\tdobj\t_\t_\n",
            &["horse", "grass"],
        ),
        (
            "1\tThe\tthe\tDET\t_\t_\t2\tdet\t_\t_\n2\tdog\tdog\tNOUN\t_\t_\t4\tnsubjpass\t_\t_\n\
3\tis\tbe\tAUX\t_\t_\t4\tauxpass\t_\t_\n4\tled\tlead\tVERB\t_\t_\t0\troot\t_\t_\n\
5\tby\tby\tADP\t_\t_\t7\tcase\t_\t_\n6\ta\ta\tDET\t_\t_\t7\tdet\t_\t_\n\
7\tleash\tleash\tNOUN\t_\t_\t4\tnmod\t_\t_\n",
            &["dog"],
        ),
        (
            "1\tThe\tthe\tDET\t_\t_\t2\tdet\t_\t_\n2\tman\tman\tNOUN\t_\t_\t3\tnsubj\t_\t_\n\
3\tgives\tgive\tVERB\t_\t_\t0\troot\t_\t_\n4\tthe\tthe\tDET\t_\t_\t5\tdet\t_\t_\n\
5\tgirl\tgirl\tNOUN\t_\t_\t3\tiobj\t_\t_\n6\ta\ta\tDET\t_\t_\t7\tdet\t_\t_\n\
7\tflower\tflower\tNOUN\t_\t_\t3\tdobj\t_\t_\n",
            &["man", "girl", "flower"],
        ),
        (
            "1\ta\ta\tDET\t_\t_\t2\tdet\t_\t_\n2\tgroup\tgroup\tNOUN\t_\t_\t5\tdet:qmod\t_\t_\n\
3\tof\tof\tADP\t_\t_\t2\tfixed\t_\t_\n4\tking\tking\tNOUN\t_\t_\t5\tcompound\t_\t_\n\
5\tpenguins\tpenguin\tNOUN\t_\t_\t6\tnsubj\t_\t_\n6\twalking\twalk\tVERB\t_\t_\t0\troot\t_\t_\n\
7\tin\tin\tADP\t_\t_\t9\tcase\t_\t_\n8\tthe\tthe\tDET\t_\t_\t9\tdet\t_\t_\n\
9\tsnow\tsnow\tNOUN\t_\t_\t6\tobl\t_\t_\n",
            &["king penguins"],
        ),
    ];
    for (conllu, expected) in sentences {
        let recs = parse_conllu(conllu.as_bytes()).map_err(|e| e.to_string())?;
        let got = extract_objects(&recs[0]);
        ensure(
            got == expected,
            format!("{:?}: got {got:?}", recs[0].caption),
        )?;
    }
    let dir = repo_root().join("fixtures/corpus");
    let text = fs::read(dir.join("captions.conllu")).map_err(|e| e.to_string())?;
    let mut records = parse_conllu(text.as_slice()).map_err(|e| e.to_string())?;
    ensure(
        records.len() >= 20,
        format!("only {} sentences", records.len()),
    )?;
    extract_all(&mut records, ExtractionOptions::default());
    let mut out = Vec::new();
    write_objects_jsonl(&records, &mut out).map_err(|e| e.to_string())?;
    let golden = fs::read(dir.join("objects.golden.jsonl")).map_err(|e| e.to_string())?;
    ensure(out == golden, "fixture corpus differs from the golden file")?;
    Ok(format!(
        "4 example sentences, {} golden sentences",
        records.len()
    ))
}

// ---------------------------------------------------------------- concept learning

fn binary(n: usize, m: usize, owner: impl Fn(usize, usize) -> bool) -> AssociationMatrix {
    AssociationMatrix::new(
        (0..n).collect(),
        (0..n).map(|i| format!("c{i}")).collect(),
        (0..m).map(|j| format!("k{j}")).collect(),
        (0..n * m)
            .map(|k| f64::from(u8::from(owner(k / m, k % m))))
            .collect(),
        AssociationKind::Binary,
    )
    .unwrap()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, sd: f64) -> Vec<Vec<f64>> {
    let g = Normal::new(0.0, sd).unwrap();
    (0..n)
        .map(|_| (0..d).map(|_| g.sample(rng)).collect())
        .collect()
}

fn emb(prefix: &str, rows: &[Vec<f64>]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(
        (0..rows.len()).map(|i| format!("{prefix}{i}")).collect(),
        rows,
    )
    .unwrap()
}

fn check_learning() -> Check {
    // gradients on five images
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 4;
    let images = gaussian_rows(&mut rng, 5, d, 1.0);
    let concepts = gaussian_rows(&mut rng, 3, d, 1.0);
    let w = binary(3, 2, |i, j| i == j || i == 2);
    let labels = [0, 1, 1, 0, 1];
    let jitter = gaussian_rows(&mut rng, 2, d * d, 0.2);
    let eye = ProjectionPair::identity(d, 2.5);
    let proj = ProjectionPair {
        img: eye.img.iter().zip(&jitter[0]).map(|(a, b)| a + b).collect(),
        txt: eye.txt.iter().zip(&jitter[1]).map(|(a, b)| a + b).collect(),
        ..eye
    };
    let wd = 0.3;
    let loss = |p: &ProjectionPair| {
        learning_loss(p, &images, &concepts, &w, &labels, wd)
            .unwrap()
            .loss
    };
    let lg =
        learning_loss(&proj, &images, &concepts, &w, &labels, wd).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut rel = |analytic: f64, numeric: f64| {
        let r = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(r);
    };
    for k in 0..d * d {
        for which in 0..2 {
            let (mut up, mut down) = (proj.clone(), proj.clone());
            let (u, dn, g) = if which == 0 {
                (&mut up.img, &mut down.img, lg.grad_img[k])
            } else {
                (&mut up.txt, &mut down.txt, lg.grad_txt[k])
            };
            u[k] += h;
            dn[k] -= h;
            rel(g, (loss(&up) - loss(&down)) / (2.0 * h));
        }
    }
    let (mut up, mut down) = (proj.clone(), proj.clone());
    up.temperature += h;
    down.temperature -= h;
    rel(lg.grad_temperature, (loss(&up) - loss(&down)) / (2.0 * h));
    ensure(
        worst <= 1e-4,
        format!("worst relative gradient error {worst:e}"),
    )?;

    // rotated concepts: images on basis axes, concept texts rotated
    let (d, m) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in gaussian_rows(&mut rng, d, d, 1.0) {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    let noise = Normal::new(0.0, 0.15).unwrap();
    let mut sample = |n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                (0..d)
                    .map(|k| f64::from(u8::from(k / 2 == l)) + noise.sample(&mut rng))
                    .collect()
            })
            .collect();
        (emb("img", &rows), labels)
    };
    let (train, train_labels) = sample(160);
    let (val, val_labels) = sample(40);
    let rotated: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|k| basis[k][i]).collect())
        .collect();
    let concepts = emb("c", &rotated);
    let w = binary(d, m, |i, j| i / 2 == j);
    let w_before = w.clone();
    let data = LearningData {
        train_images: &train,
        train_labels: &train_labels,
        val_images: &val,
        val_labels: &val_labels,
        concepts: &concepts,
        w_llm: &w,
    };
    let cfg = LearningConfig {
        lr: 0.02,
        weight_decay: 1e-4,
        epochs: 60,
        batch_size: 32,
        seed: 5,
        initial_temperature: 10.0,
        train_image_projection: false,
        train_text_projection: true,
        learn_temperature: false,
    };
    let init = ProjectionPair::identity(d, cfg.initial_temperature);
    let a = fit(&init, &data, &cfg).map_err(|e| e.to_string())?;
    let reduction = 1.0 - a.best_val_loss / a.initial_val_loss;
    ensure(
        reduction >= 0.5,
        format!("validation loss reduced by {:.1}%", 100.0 * reduction),
    )?;
    let b = fit(&init, &data, &cfg).map_err(|e| e.to_string())?;
    let bits = |r: &cdl_core::concept_learning::FitResult| -> Vec<u64> {
        r.history
            .iter()
            .flat_map(|e| [e.train_loss.to_bits(), e.val_loss.to_bits()])
            .collect()
    };
    ensure(
        bits(&a) == bits(&b) && a.projection == b.projection,
        "reruns differ",
    )?;
    ensure(w == w_before, "association matrix changed")?;
    Ok(format!(
        "worst gradient error {worst:.1e}, rotated val loss -{:.1}%",
        100.0 * reduction
    ))
}

// ---------------------------------------------------------------- selection

fn check_selection() -> Check {
    let n = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scores: Vec<MiScore> = (0..n)
        .map(|i| MiScore {
            concept_id: i,
            value: f64::from(rng.random_range(0..25u32)) / 50.0,
            raw_value: 0.0,
            estimator: Estimator::Knn { k: 3 },
        })
        .collect();
    let g: BTreeMap<usize, f64> = (0..n)
        .map(|i| (i, f64::from(rng.random_range(0..11u32)) / 10.0))
        .collect();
    let ranked_by = |key: &dyn Fn(usize) -> f64| {
        let mut ids: Vec<usize> = (0..n).collect();
        ids.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).unwrap().then(a.cmp(&b)));
        ids
    };
    let ids_at = |alpha: f64| -> Result<Vec<usize>, String> {
        Ok(combined_scores(&scores, &g, alpha)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|c| c.concept_id)
            .collect())
    };
    ensure(
        ids_at(1.0)? == ranked_by(&|i| scores[i].value),
        "alpha 1 differs from MI ranking",
    )?;
    ensure(
        ids_at(0.0)? == ranked_by(&|i| g[&i]),
        "alpha 0 differs from G ranking",
    )?;

    let c = combined_scores(&scores, &g, 0.8).map_err(|e| e.to_string())?;
    let full = select(&c, n).map_err(|e| e.to_string())?;
    for b in 1..=n {
        let s = select(&c, b).map_err(|e| e.to_string())?;
        ensure(s[..] == full[..b], format!("budget {b} is not a prefix"))?;
    }

    let hook = |chosen: &[usize]| {
        let s: usize = chosen.iter().map(|&i| (i * 7919 + 13) % 101).sum();
        (s % 997) as f64 / 997.0
    };
    let grid = default_alpha_grid();
    let mut recommended = Vec::new();
    for (budget, threshold) in [(5, 0.5), (20, 2.0), (35, 0.0)] {
        let sweep = alpha_sweep(&scores, &g, budget, &grid, threshold, |_, ch| Ok(hook(ch)))
            .map_err(|e| e.to_string())?;
        let accs: Vec<f64> = grid
            .iter()
            .map(|&a| hook(&select(&combined_scores(&scores, &g, a).unwrap(), budget).unwrap()))
            .collect();
        let best = accs.iter().cloned().fold(f64::MIN, f64::max);
        let brute = grid
            .iter()
            .zip(&accs)
            .find(|(_, &acc)| 100.0 * (best - acc) <= threshold + 1e-9)
            .map(|(a, _)| *a);
        ensure(
            brute == Some(sweep.recommended_alpha),
            format!(
                "budget {budget}: sweep {} vs grid scan {brute:?}",
                sweep.recommended_alpha
            ),
        )?;
        recommended.push(sweep.recommended_alpha);
    }
    Ok(format!("prefix 1..{n}, sweep picks {recommended:?}"))
}

// ---------------------------------------------------------------- formats

fn digest(p: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(p).unwrap()))
}

fn cdl(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cdl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!(
            "cdl {args:?}: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ),
    )
}

fn check_formats() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (rows, dim) in [(1, 1), (7, 13), (40, 512)] {
        let data: Vec<f32> = (0..rows * dim)
            .map(|k| match k % 97 {
                0 => f32::MIN_POSITIVE / 3.0,
                1 => -0.0,
                2 => f32::MAX,
                _ => f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff),
            })
            .collect();
        let m = EmbeddingMatrix::new((0..rows).map(|i| format!("row {i} ü")).collect(), dim, data)
            .map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_embeddings(&m, &mut buf).map_err(|e| e.to_string())?;
        let back = read_embeddings(buf.as_slice()).map_err(|e| e.to_string())?;
        let same = back.ids() == m.ids()
            && back
                .data()
                .iter()
                .zip(m.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("{rows}x{dim} round trip differs"))?;
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    cdl(&["synth-fixture", "--out", ".", "--categories", "5"], dir)?;
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        fs::create_dir(dir.join(run)).map_err(|e| e.to_string())?;
        let o = |f: &str| format!("{run}/{f}");
        cdl(
            &[
                "extract-objects",
                "--conllu",
                "corpus.conllu",
                "--out",
                &o("objects.jsonl"),
            ],
            dir,
        )?;
        cdl(
            &[
                "ingest-concepts",
                "--proposals",
                "proposals.json",
                "--answers",
                "answers.json",
                "--labels",
                "labels.csv",
                "--out-pool",
                &o("pool.json"),
                "--out-assoc",
                &o("w.assoc"),
            ],
            dir,
        )?;
        cdl(
            &[
                "compute-activations",
                "--images",
                "images.cdle",
                "--texts",
                "texts.cdle",
                "--pool",
                &o("pool.json"),
                "--zscore",
                "per-concept",
                "--out",
                &o("act.cdle"),
            ],
            dir,
        )?;
        cdl(
            &[
                "rank-concepts",
                "--activations",
                &o("act.cdle"),
                "--labels",
                "labels.csv",
                "--assoc",
                &o("w.assoc"),
                "--out",
                &o("scores.json"),
            ],
            dir,
        )?;
        cdl(
            &[
                "select-concepts",
                "--scores",
                &o("scores.json"),
                "--assoc",
                &o("w.assoc"),
                "--budget",
                "10",
                "--out",
                &o("selected.json"),
            ],
            dir,
        )?;
        cdl(
            &[
                "train-cbm",
                "--activations",
                &o("act.cdle"),
                "--labels",
                "labels.csv",
                "--assoc",
                &o("w.assoc"),
                "--selected",
                &o("selected.json"),
                "--out",
                &o("model.cbm"),
            ],
            dir,
        )?;
        let mut h: Vec<(String, String)> = fs::read_dir(dir.join(run))
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .map(|p| {
                (
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    digest(&p),
                )
            })
            .collect();
        h.sort();
        hashes.push(h);
    }
    ensure(hashes[0] == hashes[1], "step outputs differ between reruns")?;
    cdl(&["run", "--config", "config.toml"], dir)?;
    let first =
        digest(&dir.join("report/metrics.json")) + &digest(&dir.join("report/manifest.json"));
    cdl(&["run", "--config", "config.toml"], dir)?;
    let second =
        digest(&dir.join("report/metrics.json")) + &digest(&dir.join("report/manifest.json"));
    ensure(first == second, "cdl run outputs differ between reruns")?;

    // textbook pooled t-test: t = -2, df = 8
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [3.0, 4.0, 5.0, 6.0, 7.0];
    let r = t_test(&a, &b, TTestKind::Student).map_err(|e| e.to_string())?;
    // two-sided tail for df = 8: 1 - x Σ a_i (1 - x²)^i with x = 2/√12
    let x = 2.0 / 12f64.sqrt();
    let q = 1.0 - x * x;
    let hand = 1.0 - x * (1.0 + 0.5 * q + 0.375 * q * q + 0.3125 * q * q * q);
    ensure(
        (r.p_value - hand).abs() <= 1e-6,
        format!("p {} vs hand {hand}", r.p_value),
    )?;

    let mut pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    let t_abs = |s: &[f64]| {
        let (x, y) = s.split_at(5);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ss = |v: &[f64]| v.iter().map(|z| (z - mean(v)).powi(2)).sum::<f64>();
        ((mean(x) - mean(y)) / ((ss(x) + ss(y)) / 8.0 * 0.4).sqrt()).abs()
    };
    let observed = t_abs(&pooled);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut hits = 0;
    for _ in 0..10_000 {
        pooled.shuffle(&mut rng);
        if t_abs(&pooled) >= observed - 1e-12 {
            hits += 1;
        }
    }
    let perm = (hits + 1) as f64 / 10_001.0;
    ensure(
        (r.p_value < SIGNIFICANCE_LEVEL) == (perm < SIGNIFICANCE_LEVEL),
        format!("t-test p {} vs permutation {perm}", r.p_value),
    )?;
    Ok(format!(
        "CDLE bit-exact, reruns stable, p {:.6} (permutation {perm:.4})",
        r.p_value
    ))
}

// ---------------------------------------------------------------- end to end

fn copy_dir(src: &Path, dst: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dst)?;
    for e in fs::read_dir(src)? {
        let p = e?.path();
        if p.is_file() {
            fs::copy(&p, dst.join(p.file_name().unwrap()))?;
        }
    }
    Ok(())
}

fn check_end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    copy_dir(&repo_root().join("fixtures/synth"), tmp.path()).map_err(|e| e.to_string())?;
    let start = Instant::now();
    cdl(&["run", "--config", "config.toml"], tmp.path())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.2} s"))?;
    let metrics: serde_json::Value = serde_json::from_slice(
        &fs::read(tmp.path().join("report/metrics.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let inv = metrics["invariants"]
        .as_object()
        .ok_or("no invariants in metrics.json")?;
    let failed: Vec<&String> = inv
        .iter()
        .filter(|(_, v)| v != &&serde_json::json!(true))
        .map(|(k, _)| k)
        .collect();
    ensure(failed.is_empty(), format!("invariants failed: {failed:?}"))?;
    ensure(
        metrics["all_invariants_hold"] == true,
        "all_invariants_hold is false",
    )?;
    cdl(&["report", "--dir", "report"], tmp.path())?;
    Ok(format!("{} invariants hold, {secs:.2} s", inv.len()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("mi oracle equivalence", check_mi),
        ("shortcut ablation", check_ablation),
        ("bottleneck classifier", check_cbm),
        ("intervention accuracy", check_intervention),
        ("dependency extraction", check_extraction),
        ("concept learning numerics", check_learning),
        ("selection", check_selection),
        ("formats", check_formats),
        ("end to end", check_end_to_end),
    ];
    let mut failures = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!(
        "{} of {} criteria pass",
        checks.len() - failures,
        checks.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
