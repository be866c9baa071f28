//! Acceptance criteria 1-10. Runs sequentially in one test so the timing
//! bounds are measured without competing work; prints one line per criterion.

use std::collections::HashSet;
use std::io::Write;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kadet::cli::{cmd_train, TrainArgs};
use kadet::datagen::{generate, GenConfig};
use kadet::embedding::{EmbeddingProvider, UnknownPolicy, DEFAULT_DIM};
use kadet::model::gradcheck::{grad_check_full_loss, random_case, GradCheckSetup};
use kadet::model::layers::ontology_relevance;
use kadet::model::{encode, Ablation, Model, ModelConfig};
use kadet::ontology::{coverage, Concept, ExactMatcher, Ontology, OntologyClass};
use kadet::trace::{EntityRecord, UserTrace};
use kadet::training::{
    auc, encode_all, evaluate_encoded, run_ablation_set, stratified_split, train_encoded,
    TrainConfig,
};

/// Learning rate for the synthetic experiments; the library default is too
/// slow to leave the memorizing regime within 100 epochs.
const LR: f64 = 1e-2;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn example_ontology() -> Ontology {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/example_ontology.jsonl");
    let mut o = Ontology::load(&path).unwrap();
    o.attach_embeddings(&hashed()).unwrap();
    o
}

fn hashed() -> EmbeddingProvider {
    EmbeddingProvider::hashed(DEFAULT_DIM).unwrap()
}

fn c1_statement() -> Outcome {
    outcome(
        true,
        "the published 0.824 ± 0.014 AUC needs the access-restricted eRisk corpus and a pretrained \
         transformer; it is not reproducible here and criteria 2-8 stand in for it",
    )
}

fn c2_grad_check() -> Outcome {
    let t = Instant::now();
    let setup = GradCheckSetup::default();
    let worst = (0..10u64)
        .map(|s| grad_check_full_loss(&setup, s).unwrap())
        .fold(0.0f64, f64::max);
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.3e} over seeds 0..10, {secs:.1} s"),
    )
}

fn c3_attention_invariants() -> Outcome {
    let mut worst = 0.0f64;
    let mut fusion_ok = true;
    for seed in 0..100u64 {
        let setup = GradCheckSetup {
            entities: 1 + (seed as usize * 7) % 40,
            concepts: 1 + (seed as usize) % 9,
            ..GradCheckSetup::default()
        };
        let case = random_case(&setup, 1000 + seed).unwrap();
        let model = Model {
            config: case.config,
            params: case.params,
        };
        let r = model.forward_encoded(&case.input).unwrap();
        let sums = [
            r.entities.iter().map(|e| e.temporal).sum::<f64>(),
            r.entities.iter().map(|e| e.ontology).sum(),
            r.entities.iter().map(|e| e.fused).sum(),
            r.fusion[0] + r.fusion[1],
        ];
        worst = sums.iter().map(|s| (s - 1.0).abs()).fold(worst, f64::max);
        fusion_ok &= r.fusion.iter().all(|&a| a >= 0.0);
    }
    outcome(
        worst <= 1e-9 && fusion_ok,
        format!("largest |sum - 1| {worst:.2e} over 100 seeds, fusion weights non-negative: {fusion_ok}"),
    )
}

fn c4_worked_example() -> Outcome {
    // (3,2,1,1,1) has norm 4, so its cosine with the first axis is 0.75 exactly
    let provider = EmbeddingProvider::from_table(
        5,
        [("dejected mood".to_string(), vec![1.0, 0.0, 0.0, 0.0, 0.0])],
        UnknownPolicy::Error,
    )
    .unwrap();
    let mut o = Ontology::new(vec![Concept::new(
        "dejected mood",
        OntologyClass::Symptom,
        0.90,
    )])
    .unwrap();
    o.attach_embeddings(&provider).unwrap();
    let rel = ontology_relevance(&[3.0, 2.0, 1.0, 1.0, 1.0], &o).unwrap();
    outcome(rel == [0.675], format!("relevance {:?}", rel[0]))
}

fn c5_separability() -> Outcome {
    let ontology = example_ontology();
    let provider = hashed();
    let gen = GenConfig::default();
    let data = generate(&gen, &ontology, &provider).unwrap();
    let config = TrainConfig {
        learning_rate: LR,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let t = Instant::now();
    let (auc, epochs) = pool.install(|| {
        let mc = config.model_config(provider.dim(), &ontology);
        let enc = encode_all(&data, &mc, &ontology, &provider).unwrap();
        let labels: Vec<bool> = enc.iter().map(|x| x.label.unwrap()).collect();
        let split = stratified_split(&labels, config.split, config.seed);
        let test: Vec<_> = split.test.iter().map(|&i| enc[i].clone()).collect();
        let out = train_encoded(&enc, &labels, split, mc, &config).unwrap();
        (
            evaluate_encoded(&out.model, &test).unwrap().auc,
            out.history.len(),
        )
    });
    let secs = t.elapsed().as_secs_f64();
    outcome(
        data.len() == 700 && auc >= 0.95 && epochs <= 100 && secs < 120.0,
        format!(
            "{} users, test AUC {auc:.4} after {epochs} epochs, {secs:.1} s on one thread",
            data.len()
        ),
    )
}

fn c6_ablation_direction() -> Outcome {
    let ontology = example_ontology();
    let provider = hashed();
    let config = TrainConfig {
        learning_rate: LR,
        ..TrainConfig::default()
    };
    let gap = |gen: GenConfig, ablation: Ablation| {
        let data = generate(&gen, &ontology, &provider).unwrap();
        let table = run_ablation_set(
            &data,
            &ontology,
            &provider,
            &config,
            5,
            &[Ablation::FULL, ablation],
        )
        .unwrap();
        let (full, abl) = (table.rows[0].mean.auc, table.rows[1].mean.auc);
        (full - abl, full, abl)
    };
    let t = Instant::now();
    let (g_ont, f_ont, a_ont) = gap(
        GenConfig::ontology_planted(0),
        Ablation {
            no_ontology: true,
            ..Ablation::FULL
        },
    );
    let (g_tmp, f_tmp, a_tmp) = gap(
        GenConfig::recency_planted(0),
        Ablation {
            no_temporal: true,
            ..Ablation::FULL
        },
    );
    outcome(
        g_ont >= 0.03 && g_tmp >= 0.03,
        format!(
            "ontology-planted full {f_ont:.4} vs no_ontology {a_ont:.4} (gap {g_ont:.4}); \
             recency-planted full {f_tmp:.4} vs no_temporal {a_tmp:.4} (gap {g_tmp:.4}); 5 runs each, {:.0} s",
            t.elapsed().as_secs_f64()
        ),
    )
}

/// Brute-force pair enumeration in doubled units: 2 per correctly ordered
/// pair, 1 per tie.
fn brute_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (pairs > 0).then(|| num as f64 / (2 * pairs) as f64)
}

fn c7_auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut defined = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=50);
        // coarse grid so ties are common
        let levels = rng.random_range(2..=10);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        labels.shuffle(&mut rng);
        let want = brute_auc(&scores, &labels);
        defined += want.is_some() as usize;
        if auc(&scores, &labels) != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && defined == 200,
        format!("{mismatches} mismatches on 200 datasets of size ≤ 50 with ties"),
    )
}

fn concept(term: &str, synonyms: &[&str]) -> Concept {
    Concept::new(term, OntologyClass::Symptom, 0.5).with_synonyms(synonyms.iter().copied())
}

fn c8_coverage() -> Outcome {
    let terms = |ts: &[&str]| ts.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    // (ontology, scale, hand-enumerated numerator, m)
    let fixtures = [
        (
            vec![concept("A", &[]), concept("B", &[])],
            terms(&["A", "C"]),
            1,
            2,
        ),
        (
            vec![concept("A", &[]), concept("B", &[]), concept("C", &[])],
            terms(&["A", "C"]),
            2,
            2,
        ),
        (
            vec![concept("sad", &["dejected"])],
            terms(&["dejected", "angry", "energy"]),
            1,
            3,
        ),
        // two concepts match "tired"; the indicator is capped so it counts once
        (
            vec![
                concept("fatigue", &["tired"]),
                concept("exhaustion", &["tired"]),
            ],
            terms(&["tired", "guilt"]),
            1,
            2,
        ),
    ];
    let mut wrong = Vec::new();
    for (k, (concepts, scale, num, m)) in fixtures.into_iter().enumerate() {
        let o = Ontology::new(concepts).unwrap();
        let got = coverage(&o, &scale, &ExactMatcher).unwrap();
        if got != num as f64 / m as f64 {
            wrong.push(format!("fixture {k}: {got} != {num}/{m}"));
        }
    }
    outcome(
        wrong.is_empty(),
        if wrong.is_empty() {
            "4 fixtures exact, including 1/3 via a synonym and a doubly matched term".to_string()
        } else {
            wrong.join("; ")
        },
    )
}

fn c9_memory_window() -> Outcome {
    let provider = hashed();
    let ontology = example_ontology();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t_decision = 1_700_000_000i64;
    let mut offsets: Vec<i64> = (0..300).map(|i| 600 + i * 3_600).collect();
    offsets.shuffle(&mut rng);
    let entities: Vec<EntityRecord> = offsets
        .iter()
        .enumerate()
        .map(|(i, &off)| {
            let text = format!("entity {i:03}");
            EntityRecord {
                embedding: provider.embed(&text).unwrap(),
                text,
                timestamp: t_decision - off,
                first_person: true,
                sentence: None,
            }
        })
        .collect();
    let mut by_recency: Vec<(i64, String)> = entities
        .iter()
        .map(|e| (e.timestamp, e.text.clone()))
        .collect();
    by_recency.sort_by_key(|e| std::cmp::Reverse(e.0));
    let expected: HashSet<String> = by_recency[..200].iter().map(|(_, t)| t.clone()).collect();

    let trace = UserTrace::new("window", entities, Some(t_decision), Some(true)).unwrap();
    let config = ModelConfig {
        memory_size: 200,
        ..ModelConfig::new(DEFAULT_DIM, &ontology)
    };
    let model = Model::new(config, 0).unwrap();
    let fed = model.prepare(&trace, &provider).unwrap();
    let report = model
        .forward_encoded(&encode(&fed, &ontology).unwrap())
        .unwrap();
    let seen: HashSet<String> = report.entities.iter().map(|e| e.text.clone()).collect();
    let ok = report.entities.len() == 200
        && seen == expected
        && NonZeroUsize::new(200) == Some(model.config.memory());
    outcome(
        ok,
        format!(
            "{} of 300 entities reached forward, {} of them among the 200 most recent",
            report.entities.len(),
            seen.intersection(&expected).count()
        ),
    )
}

fn train_args(dir: &Path, traces: &Path, ontology: &Path, tag: &str) -> TrainArgs {
    TrainArgs {
        traces: traces.to_path_buf(),
        ontology: ontology.to_path_buf(),
        embeddings: kadet::cli::EmbeddingArgs {
            embeddings: None,
            unknown: kadet::cli::Unknown::Error,
        },
        config: None,
        out: dir.join(format!("{tag}.ckpt.json")),
        seed: Some(4),
        no_temporal: false,
        no_ontology: false,
        no_entity: false,
        memory_size: Some(200),
        lr: Some(LR),
        epochs: Some(15),
        batch_size: None,
        report: Some(dir.join(format!("{tag}.report.txt"))),
        json: Some(dir.join(format!("{tag}.report.json"))),
    }
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ontology_path: PathBuf =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("data/example_ontology.jsonl");
    let traces = dir.path().join("traces.jsonl");
    let data = generate(
        &GenConfig {
            n_users: 140,
            seed: 10,
            ..GenConfig::default()
        },
        &example_ontology(),
        &hashed(),
    )
    .unwrap();
    kadet::trace::save_traces(&data, &traces).unwrap();

    let mut stdout = Vec::new();
    let mut runs = Vec::new();
    for tag in ["a", "b"] {
        let args = train_args(dir.path(), &traces, &ontology_path, tag);
        let mut out = Vec::new();
        cmd_train(&args, &mut out).unwrap();
        stdout.push(out);
        let read = |p: &Path| std::fs::read(p).unwrap();
        runs.push((
            read(&args.out),
            read(args.report.as_ref().unwrap()),
            read(args.json.as_ref().unwrap()),
        ));
    }
    let same_ckpt = runs[0].0 == runs[1].0;
    let same_report = runs[0].1 == runs[1].1 && runs[0].2 == runs[1].2 && stdout[0] == stdout[1];
    outcome(
        same_ckpt && same_report,
        format!(
            "checkpoints identical: {same_ckpt} ({} bytes), reports identical: {same_report}",
            runs[0].0.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [Criterion; 10] = [
        ("published AUC not reproducible", c1_statement),
        ("gradient check of the full loss", c2_grad_check),
        ("attention invariants", c3_attention_invariants),
        ("relevance worked example", c4_worked_example),
        ("synthetic separability", c5_separability),
        ("ablation direction", c6_ablation_direction),
        ("AUC oracle equivalence", c7_auc_oracle),
        ("coverage formula", c8_coverage),
        ("memory window", c9_memory_window),
        ("training determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let line = format!(
            "criterion {:>2} {} {name}: {}\n",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        // bypass the test harness capture so the summary is always visible
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
