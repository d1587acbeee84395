//! Finite-difference gradient harness shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use lensgnn::alignment::{train_aligned, AlignmentConfig, AlignmentData};
use lensgnn::gnn::{Gnn, GnnConfig, GnnKind, GraphStructure};
use lensgnn::graph::SplitAssignment;
use lensgnn::lm::{all_linear_targets, attach_lora, LanguageModel, LmConfig, LoraConfig, Vocabulary};
use lensgnn::params::ParamStore;
use lensgnn::tape::{Matrix, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
pub const PROBES: usize = 50;
/// Gradients smaller than this are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-6;

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

pub fn random_structure(rng: &mut ChaCha8Rng, n: usize) -> GraphStructure {
    let mut a = Matrix::zeros((n, n));
    for i in 0..n {
        // a ring keeps every node connected, extra chords vary the degrees
        let j = (i + 1) % n;
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
        let k = rng.random_range(0..n);
        if k != i {
            a[[i, k]] = 1.0;
            a[[k, i]] = 1.0;
        }
    }
    GraphStructure::from_adjacency(a).unwrap()
}

/// Result of probing one group of tensors.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub component: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.probes >= PROBES && self.max_rel_err <= MAX_REL_ERR
    }
}

/// Probes `PROBES` random scalars among the tensors accepted by `select`.
pub fn probe(
    component: &str,
    store: &ParamStore,
    analytic: &BTreeMap<String, Matrix>,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> f64,
    rng: &mut ChaCha8Rng,
) -> GradCheck {
    let names: Vec<&str> = store.names().filter(|n| select(n)).collect();
    assert!(!names.is_empty(), "{component}: no tensors selected");
    let mass: f64 = names
        .iter()
        .filter_map(|n| analytic.get(*n))
        .map(|g| g.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    assert!(mass > 0.0, "{component}: every analytic gradient is zero");
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let name = names[rng.random_range(0..names.len())];
        let (r, c) = store.get(name).unwrap().dim();
        let (i, j) = (rng.random_range(0..r), rng.random_range(0..c));
        let mut plus = store.clone();
        plus.get_mut(name).unwrap()[[i, j]] += STEP;
        let mut minus = store.clone();
        minus.get_mut(name).unwrap()[[i, j]] -= STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
        let exact = analytic.get(name).map_or(0.0, |g| g[[i, j]]);
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(SCALE_FLOOR);
        worst = worst.max(rel);
    }
    GradCheck {
        component: component.to_string(),
        probes: PROBES,
        max_rel_err: worst,
    }
}

/// Every tensor of a two-layer encoder, loss `sum(output ⊙ U)`.
pub fn gnn_check(kind: GnnKind, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let structure = random_structure(&mut rng, 9);
    let x = random_matrix(&mut rng, 9, 5);
    let upstream = random_matrix(&mut rng, 9, 6);
    let cfg = GnnConfig {
        layers: 2,
        hidden: 6,
        heads: 2,
        epsilon: 0.3,
        learn_epsilon: true,
        ..GnnConfig::new(kind).with_seed(seed)
    };
    let gnn = Gnn::init(cfg, 5).unwrap();
    let analytic = gnn.backward(&structure, &x, &upstream).unwrap();
    let loss = |p: &ParamStore| {
        let g = Gnn {
            params: p.clone(),
            ..gnn.clone()
        };
        let out = g.forward(&structure, &x).unwrap().matrix;
        (&out * &upstream).sum()
    };
    probe(kind.label(), &gnn.params, &analytic, |_| true, loss, &mut rng)
}

/// Projector and shared classifier tensors of a briefly trained two-GNN
/// alignment, under the cross-entropy of each GNN in turn.
pub fn alignment_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 12;
    let structure = random_structure(&mut rng, n);
    let features = random_matrix(&mut rng, n, 4) * 0.3;
    let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % 3)).collect();
    let data = AlignmentData::Nodes {
        structure: &structure,
        features: &features,
        labels: &labels,
    };
    let split = SplitAssignment {
        train: (0..8).collect(),
        validation: vec![8, 9],
        test: vec![10, 11],
        ..Default::default()
    };
    let gnns = [GnnKind::Gcn, GnnKind::Gin].map(|k| GnnConfig::new(k).with_hidden(5).with_seed(3));
    let cfg = AlignmentConfig {
        epochs: 1,
        t: 2,
        e: 3,
        classifier_hidden: 7,
        seed: 9,
        ..Default::default()
    };
    let ckpt = train_aligned(&gnns, &data, 3, &split, &cfg).unwrap();
    let items: Vec<usize> = (0..n).collect();
    let store = ckpt.tensors();
    let mut out = Vec::new();
    for g in 0..2 {
        let (_, analytic) = ckpt.loss_and_gradients(g, &data, &items).unwrap();
        let loss = |p: &ParamStore| ckpt.with_tensors(p).unwrap().loss_and_gradients(g, &data, &items).unwrap().0;
        let proj = format!("proj{g}.");
        out.push(probe(&format!("projector {g}"), &store, &analytic, |n| n.starts_with(&proj), &loss, &mut rng));
        out.push(probe(
            &format!("shared classifier via GNN {g}"),
            &store,
            &analytic,
            |n| n.starts_with("cls0."),
            &loss,
            &mut rng,
        ));
    }
    out
}

/// LoRA `A` and `B` tensors on every linear map of a one-block model, loss
/// next-token cross-entropy.
pub fn lora_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocabulary::build(["a b c d e f g h"], 1, 2);
    let model = LanguageModel::init(
        LmConfig {
            e: 8,
            layers: 1,
            heads: 2,
            ffn: 16,
            max_len: 16,
            seed: 4,
            ..LmConfig::new(vocab.len())
        },
        &vocab,
    )
    .unwrap();
    let lora = LoraConfig {
        r: 2,
        alpha: 4.0,
        dropout: 0.0,
        seed: 8,
    };
    let mut adapters = attach_lora(&model, &all_linear_targets(&model.config), &lora).unwrap();
    // nonzero B so that A receives gradient too
    let names: Vec<String> = adapters.params.names().map(str::to_string).collect();
    for n in names.iter().filter(|n| n.ends_with(".b")) {
        let (r, c) = adapters.params.get(n).unwrap().dim();
        *adapters.params.get_mut(n).unwrap() = random_matrix(&mut rng, r, c) * 0.3;
    }
    let ids = vocab.tokenize("a c e g b d f h a");
    let x = model.lookup(&ids).unwrap();
    let rows: Vec<usize> = (0..ids.len() - 1).collect();
    let targets: Vec<usize> = ids[1..].to_vec();
    let run = |p: &ParamStore, grads: bool| {
        let mut ad = adapters.clone();
        ad.params = p.clone();
        let mut tape = Tape::new();
        let base = model.params.bind(&mut tape, |_| false);
        let ab = ad.params.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let tr = model.trace(&mut tape, &base, Some((&ad, &ab)), xv, None, None);
        let loss = tape.cross_entropy(tr.logits, &rows, &targets);
        let g = if grads { ab.gradients(&tape.backward(loss)) } else { BTreeMap::new() };
        (tape.scalar(loss), g)
    };
    let (_, analytic) = run(&adapters.params, true);
    let loss = |p: &ParamStore| run(p, false).0;
    vec![
        probe("LoRA A", &adapters.params, &analytic, |n| n.ends_with(".a"), &loss, &mut rng),
        probe("LoRA B", &adapters.params, &analytic, |n| n.ends_with(".b"), &loss, &mut rng),
    ]
}

/// Every component of the gradient oracle.
pub fn all_gradient_checks() -> Vec<GradCheck> {
    let mut out: Vec<GradCheck> = [GnnKind::Gcn, GnnKind::Gat, GnnKind::Gin]
        .into_iter()
        .enumerate()
        .map(|(i, k)| gnn_check(k, 11 + i as u64))
        .collect();
    out.extend(alignment_checks(5));
    out.extend(lora_checks(21));
    out
}
