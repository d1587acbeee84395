//! Seeded text-attributed graph with two structure-only classes and two
//! text-only classes.
//!
//! * `dense` and `sparse` nodes share one text pattern and differ only in
//!   degree. Both degrees exceed the prompt neighbor cap, so neighbor lists
//!   look alike to a text model.
//! * `forward` and `reverse` nodes have low degree and carry the same words
//!   in a different order, which a bag-of-words encoder cannot tell apart.
//!   They link only to `dense`/`sparse` nodes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rng_for, NodeRecord, TextAttributedGraph};

pub const SYNTHETIC_CLASSES: [&str; 4] = ["dense", "sparse", "forward", "reverse"];

const FILLER: [&str; 16] = [
    "amber", "birch", "cedar", "delta", "ember", "fjord", "grove", "harbor", "iris", "juniper",
    "kelp", "lumen", "maple", "nectar", "onyx", "pebble",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTagConfig {
    pub nodes: usize,
    /// Inclusive degree ranges per class, in class order.
    pub degrees: [(usize, usize); 4],
    pub seed: u64,
}

impl Default for SyntheticTagConfig {
    fn default() -> Self {
        Self {
            nodes: 300,
            degrees: [(32, 40), (22, 28), (3, 8), (3, 8)],
            seed: 0,
        }
    }
}

fn node_text(class: usize, rng: &mut impl Rng) -> String {
    let a = FILLER.choose(rng).expect("nonempty");
    let b = FILLER.choose(rng).expect("nonempty");
    let (x, y) = match class {
        0 | 1 => ("green", "green"),
        2 => ("red", "blue"),
        _ => ("blue", "red"),
    };
    format!("item {a} {x} then {y} {b}")
}

/// Balanced classes; edges from configuration-model stub matching with
/// self-loops and duplicates dropped, then topped up to each class's
/// minimum degree. Word-order nodes only link to degree-class nodes.
pub fn synthetic_tag(config: &SyntheticTagConfig) -> Result<TextAttributedGraph> {
    if config.nodes < 8 {
        return Err(Error::Config("synthetic graph needs at least 8 nodes".into()));
    }
    if config.degrees.iter().any(|&(lo, hi)| lo > hi || hi >= config.nodes) {
        return Err(Error::Config("synthetic degree ranges must satisfy lo ≤ hi < nodes".into()));
    }
    let mut rng = rng_for(config.seed, 0x5e7);
    let mut classes: Vec<usize> = (0..config.nodes).map(|i| i % 4).collect();
    classes.shuffle(&mut rng);
    // stubs of the word-order classes pair only with degree-class stubs, so
    // a word-order node never sees the order cue in its neighbors' texts
    let (mut hub_stubs, mut leaf_stubs) = (Vec::new(), Vec::new());
    for (i, &c) in classes.iter().enumerate() {
        let (lo, hi) = config.degrees[c];
        let d = rng.random_range(lo..=hi);
        let pool = if c < 2 { &mut hub_stubs } else { &mut leaf_stubs };
        pool.extend(std::iter::repeat_n(i, d));
    }
    hub_stubs.shuffle(&mut rng);
    leaf_stubs.shuffle(&mut rng);
    if leaf_stubs.len() > hub_stubs.len() {
        return Err(Error::Config("word-order classes need fewer stubs than degree classes".into()));
    }
    let mut edges = std::collections::BTreeSet::new();
    let add = |a: usize, b: usize, edges: &mut std::collections::BTreeSet<(usize, usize)>| {
        a != b && edges.insert((a.min(b), a.max(b)))
    };
    let rest = hub_stubs.split_off(leaf_stubs.len());
    for (&a, &b) in leaf_stubs.iter().zip(&hub_stubs) {
        add(a, b, &mut edges);
    }
    for p in rest.chunks_exact(2) {
        add(p[0], p[1], &mut edges);
    }
    // dropped duplicates can pull a node below its range; top it up
    let mut degree = vec![0usize; config.nodes];
    for &(a, b) in &edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let hubs: Vec<usize> = (0..config.nodes).filter(|&i| classes[i] < 2).collect();
    for (i, &c) in classes.iter().enumerate() {
        while degree[i] < config.degrees[c].0 {
            let j = *hubs.choose(&mut rng).expect("degree classes are nonempty");
            if add(i, j, &mut edges) {
                degree[i] += 1;
                degree[j] += 1;
            }
        }
    }
    let nodes = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| NodeRecord {
            id: i,
            text: node_text(c, &mut rng),
            label: Some(c),
        })
        .collect();
    TextAttributedGraph::new(
        nodes,
        edges.into_iter().collect(),
        false,
        SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}
