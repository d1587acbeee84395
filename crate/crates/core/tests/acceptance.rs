//! Acceptance criteria, one test each. Every test prints a single
//! `PASS`/`FAIL` line to stderr (bypassing libtest capture) before asserting.

mod common;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use lensgnn::alignment::{cross_gnn_probe, train_aligned};
use lensgnn::baselines::{adaboost_fit, bagging_fit_predict};
use lensgnn::classify::SoftmaxRegressionConfig;
use lensgnn::eval::{
    auc, prepare, run_baselines, run_pipeline, run_with_cache, sweep_graph_tokens, BaselineConfig, PipelineConfig,
    StageCache,
};
use lensgnn::graph::{NodeRecord, TextAttributedGraph};
use lensgnn::lm::{
    all_linear_targets, attach_lora, embed_with_injection, generate, lm_forward, merge_lora, parse_label,
    GraphTokenBlock, LanguageModel, LmConfig, LoraConfig, Vocabulary,
};
use lensgnn::prompt::{PromptOptions, PromptTemplate, TaskKind, DEFAULT_MAX_TOKENS};
use lensgnn::sft::{build_sft_dataset, finetune, PromptContext, SftConfig};
use lensgnn::tape::Matrix;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_RUNTIME_SECS: f64 = 120.0;
const INJECTION_PROMPTS: usize = 200;
const FRESH_LORA_TOL: f64 = 1e-12;
const MERGE_TOL: f64 = 1e-6;
const BUDGET_GRAPHS: usize = 500;
const NEIGHBOR_CAP: usize = 20;
const PROMPTED: usize = 4;
const E2E_SEEDS: [u64; 3] = [0, 1, 2];
const E2E_MARGIN: f64 = 0.02;
const E2E_CEILING_GAP: f64 = 0.01;
const PROBE_SEEDS: [u64; 3] = [0, 1, 2];
const PROBE_MARGIN: f64 = 0.05;
const ADABOOST_TOL: f64 = 1e-9;
const AUC_SAMPLES: usize = 1000;
const BAGGING_TOL: f64 = 1e-12;
const SWEEP_T: [usize; 5] = [1, 2, 4, 8, 16];
const OVERFIT_STEPS: usize = 200;
const OVERFIT_LOSS: f64 = 0.05;

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let line = format!("[{}] {id:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn toy_lm(vocab: &Vocabulary, e: usize, seed: u64) -> LanguageModel {
    let cfg = LmConfig {
        e,
        layers: 2,
        heads: 2,
        ffn: 2 * e,
        max_len: 64,
        seed,
        ..LmConfig::new(vocab.len())
    };
    LanguageModel::init(cfg, vocab).unwrap()
}

const WORDS: [&str; 12] = [
    "graph", "node", "paper", "cites", "model", "token", "learning", "neural", "text", "edge", "class", "label",
];

#[test]
fn c01_gradient_oracle() {
    let start = Instant::now();
    let checks = common::all_gradient_checks();
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.component.as_str()).collect();
    let pass = failing.is_empty() && secs <= GRAD_RUNTIME_SECS;
    let detail = format!(
        "{} components × ≥{} probes, max rel err {worst:.2e} (limit {:.0e}), {secs:.1}s, failing {failing:?}",
        checks.len(),
        common::PROBES,
        common::MAX_REL_ERR
    );
    report(1, "gradient oracle", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c02_injection_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab = Vocabulary::build([WORDS.join(" ").as_str()], 3, 8);
    let e = 8;
    let model = toy_lm(&vocab, e, 3);
    let words: Vec<usize> = WORDS.iter().map(|w| vocab.id(w).unwrap()).collect();
    let mut violations = 0;
    let mut injected = 0;
    for _ in 0..INJECTION_PROMPTS {
        let k = rng.random_range(1..=3);
        let t = rng.random_range(1..=8);
        let len = k * t + rng.random_range(1..20);
        let mut positions: Vec<usize> = rand::seq::index::sample(&mut rng, len, k * t).into_vec();
        positions.sort_unstable();
        let mut ids: Vec<usize> = (0..len).map(|_| *words.choose(&mut rng).unwrap()).collect();
        for (j, &p) in positions.iter().enumerate() {
            ids[p] = vocab.dummy_id(j / t, j % t).unwrap();
        }
        let blocks: Vec<GraphTokenBlock> =
            (0..k).map(|g| GraphTokenBlock::new(g, random_matrix(&mut rng, t, e)).unwrap()).collect();
        let plain = model.lookup(&ids).unwrap();
        let out = embed_with_injection(&model, &vocab, &ids, &blocks, &positions).unwrap();
        for r in 0..len {
            let same = plain.row(r).iter().zip(out.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            let expected_changed = positions.contains(&r);
            if same == expected_changed {
                violations += 1;
            }
            if let Some(j) = positions.iter().position(|&p| p == r) {
                injected += 1;
                if out.row(r) != blocks[j / t].vectors.row(j % t) {
                    violations += 1;
                }
            }
        }
    }
    let pass = violations == 0;
    let detail = format!("{INJECTION_PROMPTS} prompts, {injected} injected rows, {violations} violations");
    report(2, "injection invariant", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c03_lora_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vocab = Vocabulary::build([WORDS.join(" ").as_str()], 1, 2);
    let mut fresh_delta: f64 = 0.0;
    let mut merge_delta: f64 = 0.0;
    for seed in 0..5 {
        let model = toy_lm(&vocab, 16, seed);
        let ids: Vec<usize> = (0..12).map(|_| rng.random_range(vocab.num_special()..vocab.len())).collect();
        let x = model.lookup(&ids).unwrap();
        let lora = LoraConfig {
            r: 4,
            alpha: 8.0,
            dropout: 0.0,
            seed,
        };
        let mut adapters = attach_lora(&model, &all_linear_targets(&model.config), &lora).unwrap();
        let base = lm_forward(&model, None, &x, None).unwrap();
        let fresh = lm_forward(&model, Some(&adapters), &x, None).unwrap();
        fresh_delta = fresh_delta.max((&fresh - &base).iter().fold(0.0, |m, v| m.max(v.abs())));
        let names: Vec<String> = adapters.params.names().map(str::to_string).collect();
        for n in &names {
            let (r, c) = adapters.params.get(n).unwrap().dim();
            *adapters.params.get_mut(n).unwrap() = random_matrix(&mut rng, r, c) * 0.2;
        }
        let unmerged = lm_forward(&model, Some(&adapters), &x, None).unwrap();
        let merged_model = merge_lora(&model, &mut adapters).unwrap();
        let merged = lm_forward(&merged_model, None, &x, None).unwrap();
        merge_delta = merge_delta.max((&merged - &unmerged).iter().fold(0.0, |m, v| m.max(v.abs())));
    }
    let pass = fresh_delta <= FRESH_LORA_TOL && merge_delta <= MERGE_TOL;
    let detail = format!(
        "B=0 max |Δ| {fresh_delta:.1e} (≤ {FRESH_LORA_TOL:.0e}), merged vs unmerged {merge_delta:.1e} (≤ {MERGE_TOL:.0e})"
    );
    report(3, "LoRA identities", pass, &detail);
    assert!(pass, "{detail}");
}

fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn contains_run(haystack: &[usize], needle: &[usize]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn c04_budget_and_neighbor_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let template = PromptTemplate::default_for(TaskKind::Node);
    let class_names: Vec<String> = ["alpha", "beta", "gamma delta"].map(String::from).to_vec();
    let mut corpus = vec![template.instruction.clone(), WORDS.join(" ")];
    corpus.extend(class_names.iter().cloned());
    let vocab = Vocabulary::build(corpus.iter().map(String::as_str), 3, 8);
    let instruction = vocab.tokenize(&template.instruction);
    let labels_all: Vec<String> = ["GCN", "GAT", "GIN"].map(String::from).to_vec();
    let e = 4;
    let (mut prompts, mut truncated, mut violations, mut longest, mut most_neighbors) = (0, 0, 0, 0, 0);
    for _ in 0..BUDGET_GRAPHS {
        let n = rng.random_range(2..40);
        let long = rng.random_bool(0.3);
        // prompted nodes keep their own text within budget, since it is never
        // truncated; their neighbors may be arbitrarily long
        let nodes: Vec<NodeRecord> = (0..n)
            .map(|id| {
                let words = if id < PROMPTED {
                    rng.random_range(1..600)
                } else if long && rng.random_bool(0.5) {
                    rng.random_range(200..3000)
                } else {
                    rng.random_range(1..30)
                };
                NodeRecord {
                    id,
                    text: random_text(&mut rng, words),
                    label: Some(rng.random_range(0..class_names.len())),
                }
            })
            .collect();
        // a hub at node 0 often exceeds the neighbor cap
        let mut edges: Vec<(usize, usize)> = (1..n).filter(|_| rng.random_bool(0.8)).map(|j| (0, j)).collect();
        for _ in 0..n {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            if a != b {
                edges.push((a, b));
            }
        }
        let graph = TextAttributedGraph::new(nodes, edges, false, class_names.clone()).unwrap();
        let k = rng.random_range(0..=3);
        let t = rng.random_range(1..=8);
        let blocks: Vec<Vec<GraphTokenBlock>> = (0..k)
            .map(|g| (0..n).map(|_| GraphTokenBlock::new(g, random_matrix(&mut rng, t, e)).unwrap()).collect())
            .collect();
        let ctx = PromptContext {
            template: &template,
            vocab: &vocab,
            gnn_labels: &labels_all[..k],
            t,
            options: PromptOptions {
                with_text: rng.random_bool(0.9),
                with_neighbors: rng.random_bool(0.9),
                neighbor_chars: rng.random_range(16..20_000),
                seed: rng.random(),
            },
            max_tokens: DEFAULT_MAX_TOKENS,
            neighbor_cap: NEIGHBOR_CAP,
        };
        let items: Vec<usize> = (0..n.min(PROMPTED)).collect();
        for s in build_sft_dataset(&graph, &items, &blocks, &ctx).unwrap() {
            prompts += 1;
            let seq = s.pair.sequence();
            longest = longest.max(seq.len());
            most_neighbors = most_neighbors.max(s.spec.neighbors.len());
            let degree = graph.neighbors(s.item).unwrap().len();
            if s.spec.neighbors.len() < degree.min(NEIGHBOR_CAP) && ctx.options.with_neighbors {
                truncated += 1;
            }
            let mut target = vocab.tokenize(&class_names[s.label]);
            target.push(vocab.end());
            let dummies = s.pair.input.iter().filter(|&&id| vocab.is_dummy(id)).count();
            let ok = seq.len() <= DEFAULT_MAX_TOKENS
                && s.spec.neighbors.len() <= NEIGHBOR_CAP
                && contains_run(&s.pair.input, &instruction)
                && s.pair.target == target
                && dummies == k * t
                && s.spec.dummy_positions.len() == k * t
                && s.blocks.len() == k;
            if !ok {
                violations += 1;
            }
        }
    }
    let pass = violations == 0 && truncated > 0;
    let detail = format!(
        "{BUDGET_GRAPHS} graphs, {prompts} prompts ({truncated} with neighbors dropped), longest {longest} \
         tokens (≤ {DEFAULT_MAX_TOKENS}), most neighbors {most_neighbors} (≤ {NEIGHBOR_CAP}), {violations} violations"
    );
    report(4, "budget and neighbor cap", pass, &detail);
    assert!(pass, "{detail}");
}

fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The shipped end-to-end config, reseeded.
fn e2e_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(config_path("synthetic.toml")).unwrap();
    cfg.name = format!("e2e-{seed}");
    cfg.seed = seed;
    cfg.data.synthetic.seed = seed;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn c05_end_to_end_ensemble_benefit() {
    let start = Instant::now();
    let mut rows: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in E2E_SEEDS {
        let cfg = e2e_config(seed);
        let mut cache = StageCache::new();
        let full = run_with_cache(&cfg, &mut cache, None).unwrap();
        let mut text_cfg = cfg.clone();
        text_cfg.gnn.kinds.clear();
        let text = run_with_cache(&text_cfg, &mut cache, None).unwrap();
        let (base, _) = run_baselines(&cfg, &BaselineConfig::default()).unwrap();
        let line = format!(
            "    seed {seed}: full {:.3}, text-only {:.3}, best single GNN {:.3}, bagging {:.3}, stacking {:.3}, adaboost {:.3}\n",
            full.report.accuracy,
            text.report.accuracy,
            base.best_single(),
            base.bagging,
            base.stacking,
            base.adaboost
        );
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        rows.entry("full").or_default().push(full.report.accuracy);
        rows.entry("text-only SFT").or_default().push(text.report.accuracy);
        rows.entry("best single GNN").or_default().push(base.best_single());
        for (name, acc) in base.ensembles() {
            rows.entry(name).or_default().push(acc);
        }
    }
    let full = mean(&rows["full"]);
    let mut pass = true;
    let mut parts = vec![format!("full {full:.3}")];
    for (name, accs) in rows.iter().filter(|(n, _)| **n != "full") {
        let m = mean(accs);
        let ok = full >= m + E2E_MARGIN || full >= 1.0 - E2E_CEILING_GAP;
        pass &= ok;
        parts.push(format!("{name} {m:.3}{}", if ok { "" } else { " (not beaten)" }));
    }
    let detail = format!(
        "mean over {} seeds: {}; {:.0}s",
        E2E_SEEDS.len(),
        parts.join(", "),
        start.elapsed().as_secs_f64()
    );
    report(5, "end-to-end ensemble benefit", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c06_alignment_effect() {
    let probe = SoftmaxRegressionConfig::default();
    let (mut shared, mut private) = (Vec::new(), Vec::new());
    for seed in PROBE_SEEDS {
        let mut cfg = PipelineConfig {
            seed,
            ..Default::default()
        };
        cfg.data.synthetic.seed = seed;
        let prepared = prepare(&cfg).unwrap();
        let data = prepared.alignment_data();
        for (on, out) in [(true, &mut shared), (false, &mut private)] {
            let mut acfg = cfg.alignment_config();
            acfg.shared_classifier = on;
            let ckpt =
                train_aligned(&cfg.gnn_configs(), &data, prepared.num_classes(), &prepared.split, &acfg).unwrap();
            let k = ckpt.num_gnns();
            for from in 0..k {
                for to in (0..k).filter(|&to| to != from) {
                    out.push(cross_gnn_probe(&ckpt, &data, &prepared.split, from, to, &probe).unwrap());
                }
            }
        }
    }
    let (s, p) = (mean(&shared), mean(&private));
    let pass = s >= p + PROBE_MARGIN;
    let detail = format!(
        "cross-GNN probe accuracy over {} seeds × {} ordered pairs: shared {s:.3}, private {p:.3}, margin {:+.3} (need ≥ {PROBE_MARGIN})",
        PROBE_SEEDS.len(),
        shared.len() / PROBE_SEEDS.len(),
        s - p
    );
    report(6, "alignment effect", pass, &detail);
    assert!(pass, "{detail}");
}

fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn c07_classical_ensemble_oracles() {
    // four samples on one feature; every best stump misclassifies one sample
    let x = Matrix::from_shape_vec((4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let y = [0, 0, 1, 0];
    let fit = adaboost_fit(&x, &[0, 1, 2, 3], &y, 2, 1).unwrap();
    let alpha = fit.alphas[0];
    let wrong: Vec<bool> = (0..4).map(|i| fit.stumps[0].predict(x.row(i)) != y[i]).collect();
    // ε = 1/4: the missed weight triples to 3/4, then all renormalise by 3/2
    let mut weights_err: f64 = if wrong.iter().filter(|&&w| w).count() == 1 { 0.0 } else { f64::INFINITY };
    for (w, &miss) in fit.weight_history[1].iter().zip(&wrong) {
        let expected = if miss { 0.5 } else { 1.0 / 6.0 };
        weights_err = weights_err.max((w - expected).abs());
    }
    let ada_ok = (fit.errors[0] - 0.25).abs() <= ADABOOST_TOL
        && (alpha - 3f64.ln()).abs() <= ADABOOST_TOL
        && weights_err <= ADABOOST_TOL;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<f64> = (0..AUC_SAMPLES).map(|_| rng.random_range(0..50) as f64 / 10.0).collect();
    let labels: Vec<bool> = scores.iter().map(|s| rng.random_bool((0.2 + s / 10.0).min(0.9))).collect();
    let got = auc(&scores, &labels).unwrap();
    let want = brute_force_auc(&scores, &labels);
    let auc_ok = got == want;

    let n = 30;
    let train: Vec<usize> = (0..20).collect();
    let per_bag: RefCell<Vec<Matrix>> = RefCell::new(Vec::new());
    let factory = |rows: &[usize], seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ rows.len() as u64);
        let mut m = Matrix::from_shape_fn((n, 3), |_| r.random_range(0.01..1.0));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        per_bag.borrow_mut().push(m.clone());
        Ok(m)
    };
    let (out, _) = bagging_fit_predict(factory, &train, 7, true, 11).unwrap();
    let bags = per_bag.borrow();
    let mut expected = Matrix::zeros((n, 3));
    for b in bags.iter() {
        expected += b;
    }
    expected /= bags.len() as f64;
    let bag_err = (&out.proba - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let bag_ok = bags.len() == 7 && bag_err <= BAGGING_TOL;

    let pass = ada_ok && auc_ok && bag_ok;
    let detail = format!(
        "AdaBoost ε₁ {:.4} α₁ {alpha:.12} vs ln 3 {:.12}, weight err {weights_err:.1e}; AUC {got:.6} vs brute force \
         {want:.6} on {AUC_SAMPLES} tied samples; bagging err {bag_err:.1e} over {} bags",
        fit.errors[0],
        3f64.ln(),
        bags.len()
    );
    report(7, "classical-ensemble oracles", pass, &detail);
    assert!(pass, "{detail}");
}

/// The shipped smoke config with its run directory redirected into `dir`.
fn small_config(dir: &std::path::Path, run_dir: &str) -> std::path::PathBuf {
    let body = std::fs::read_to_string(config_path("small.toml")).unwrap();
    let path = dir.join(format!("{run_dir}.toml"));
    std::fs::write(&path, format!("run_dir = {:?}\n{body}", dir.join(run_dir))).unwrap();
    path
}

#[test]
fn c08_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(small_config(dir.path(), "a")).unwrap();
    let b = run_pipeline(small_config(dir.path(), "b")).unwrap();
    let pass = a.accuracy == b.accuracy && a.checkpoints == b.checkpoints && !a.checkpoints.is_empty();
    let detail = format!(
        "accuracy {:.4} vs {:.4}, {} checkpoint digests {}",
        a.accuracy,
        b.accuracy,
        a.checkpoints.len(),
        if a.checkpoints == b.checkpoints { "identical" } else { "differ" }
    );
    report(8, "determinism", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c09_sweep_harness() {
    let dir = tempfile::tempdir().unwrap();
    let base = PipelineConfig::load(small_config(dir.path(), "sweep")).unwrap();
    let rows = sweep_graph_tokens(&SWEEP_T, &base, Some(dir.path())).unwrap();
    let table = std::fs::read_to_string(dir.path().join("sweep_t.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    let ts: Vec<usize> = lines.iter().skip(1).map(|l| l.split('\t').next().unwrap().parse().unwrap()).collect();
    let pass = rows.len() == SWEEP_T.len() && lines.len() == SWEEP_T.len() + 1 && ts == SWEEP_T;
    let accs: Vec<String> = rows.iter().map(|r| format!("t={} {:.3}", r.t, r.report.accuracy)).collect();
    let detail = format!("{} data rows for t in {ts:?}: {}", lines.len() - 1, accs.join(", "));
    report(9, "sweep harness", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c10_single_sample_overfit() {
    let template = PromptTemplate::default_for(TaskKind::Node);
    let class_names: Vec<String> = ["theory", "systems", "databases"].map(String::from).to_vec();
    let nodes = vec![
        NodeRecord {
            id: 0,
            text: "a paper about query optimisation".into(),
            label: Some(2),
        },
        NodeRecord {
            id: 1,
            text: "a paper about lower bounds".into(),
            label: Some(0),
        },
    ];
    let graph = TextAttributedGraph::new(nodes, vec![(0, 1)], false, class_names.clone()).unwrap();
    let mut corpus: Vec<String> = vec![template.instruction.clone()];
    corpus.extend(graph.nodes().iter().map(|n| n.text.clone()));
    corpus.extend(class_names.iter().cloned());
    let vocab = Vocabulary::build(corpus.iter().map(String::as_str), 1, 2);
    let model = LanguageModel::init(
        LmConfig {
            e: 32,
            layers: 2,
            heads: 2,
            ffn: 64,
            max_len: 256,
            seed: 10,
            ..LmConfig::new(vocab.len())
        },
        &vocab,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let blocks = vec![(0..2).map(|_| GraphTokenBlock::new(0, random_matrix(&mut rng, 2, 32) * 0.1).unwrap()).collect()];
    let labels = vec!["GCN".to_string()];
    let ctx = PromptContext {
        template: &template,
        vocab: &vocab,
        gnn_labels: &labels,
        t: 2,
        options: PromptOptions::default(),
        max_tokens: DEFAULT_MAX_TOKENS,
        neighbor_cap: NEIGHBOR_CAP,
    };
    let sample = build_sft_dataset(&graph, &[0], &blocks, &ctx).unwrap();
    let cfg = SftConfig {
        batch_size: 1,
        lora_targets: all_linear_targets(&model.config),
        max_epochs: OVERFIT_STEPS,
        warmup_ratio: 0.0,
        ..Default::default()
    };
    let (adapters, log) = finetune(&model, &vocab, &sample, &[], &class_names, &cfg).unwrap();
    let reached = log.steps.iter().position(|s| s.loss < OVERFIT_LOSS);
    let s = &sample[0];
    let text = generate(&model, Some(&adapters), &vocab, &s.spec.tokens, &s.blocks, &s.spec.positions(), 8).unwrap();
    let parsed = parse_label(&text, &class_names).ok();
    let pass = reached.is_some_and(|i| i < OVERFIT_STEPS) && parsed == Some(s.label);
    let detail = format!(
        "loss < {OVERFIT_LOSS} at step {}, final loss {:.4}, generated {text:?} → {:?} (label {})",
        reached.map_or("never".to_string(), |i| (i + 1).to_string()),
        log.steps.last().map_or(f64::NAN, |s| s.loss),
        parsed.map(|p| class_names[p].as_str()),
        class_names[s.label]
    );
    report(10, "single-sample overfit", pass, &detail);
    assert!(pass, "{detail}");
}
