//! Text-attributed graphs: data model, line-delimited dataset IO, splits and
//! neighbor sampling.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Matrix;

/// Default neighbor cap used when sampling neighbor text for prompts.
pub const DEFAULT_NEIGHBOR_CAP: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub text: String,
    pub label: Option<usize>,
}

/// An immutable graph whose nodes carry text. Node ids are `0..N`, so row `i`
/// of any per-node matrix belongs to node `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextAttributedGraph {
    nodes: Vec<NodeRecord>,
    edges: Vec<(usize, usize)>,
    directed: bool,
    class_names: Vec<String>,
    neighbors: Vec<Vec<usize>>,
}

impl TextAttributedGraph {
    /// Validates and canonicalizes. Undirected edges are stored as `(min, max)`
    /// and deduplicated; directed edges are only deduplicated.
    pub fn new(
        mut nodes: Vec<NodeRecord>,
        edges: Vec<(usize, usize)>,
        directed: bool,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        nodes.sort_by_key(|n| n.id);
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Validation(format!(
                    "node ids must be unique and contiguous from 0; found id {} at position {i}",
                    n.id
                )));
            }
            if let Some(l) = n.label {
                if l >= class_names.len() {
                    return Err(Error::Validation(format!(
                        "node {} has label index {l} but only {} classes exist",
                        n.id,
                        class_names.len()
                    )));
                }
            }
        }
        let n = nodes.len();
        let mut seen = BTreeSet::new();
        let mut canonical = Vec::with_capacity(edges.len());
        for (src, dst) in edges {
            if src >= n || dst >= n {
                return Err(Error::Validation(format!(
                    "edge ({src}, {dst}) references a node outside 0..{n}"
                )));
            }
            if src == dst {
                return Err(Error::Validation(format!("self-loop edge on node {src}")));
            }
            let e = if directed || src < dst {
                (src, dst)
            } else {
                (dst, src)
            };
            if seen.insert(e) {
                canonical.push(e);
            }
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(s, d) in &canonical {
            neighbors[s].push(d);
            if !directed {
                neighbors[d].push(s);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            nodes,
            edges: canonical,
            directed,
            class_names,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Result<&NodeRecord> {
        self.nodes.get(id).ok_or(Error::UnknownNode(id))
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Nodes whose messages flow into `id`, sorted by id.
    pub fn neighbors(&self, id: usize) -> Result<&[usize]> {
        self.neighbors
            .get(id)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownNode(id))
    }

    pub fn degree(&self, id: usize) -> Result<usize> {
        self.neighbors(id).map(|n| n.len())
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.label).collect()
    }

    /// Dense adjacency without self-loops: `a[i][j] = 1` when `j` sends to `i`.
    pub fn adjacency(&self) -> Matrix {
        let n = self.num_nodes();
        let mut a = Matrix::zeros((n, n));
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                a[[i, j]] = 1.0;
            }
        }
        a
    }

    /// Same graph with node `i` renamed to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes() {
            return Err(Error::Dimension("permutation length".into()));
        }
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeRecord {
                id: perm[n.id],
                text: n.text.clone(),
                label: n.label,
            })
            .collect();
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Self::new(nodes, edges, self.directed, self.class_names.clone())
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the row sums of `A + I`. Self-loops
/// live only here; the stored edge list never contains them.
pub fn normalized_adjacency(graph: &TextAttributedGraph) -> Matrix {
    let mut a = graph.adjacency();
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    for i in 0..n {
        for j in 0..n {
            if a[[i, j]] != 0.0 {
                a[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
    }
    a
}

pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, salt))
}

/// Up to `cap` distinct neighbors of `node`, chosen uniformly at random when
/// the degree exceeds the cap. Returned in ascending id order.
pub fn sample_neighbors(
    graph: &TextAttributedGraph,
    node: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let all = graph.neighbors(node)?;
    if all.len() <= cap {
        return Ok(all.to_vec());
    }
    let mut rng = rng_for(seed, node as u64);
    let mut picked: Vec<usize> = index::sample(&mut rng, all.len(), cap)
        .into_iter()
        .map(|i| all[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub shot_count: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn labeled_nodes(graph: &TextAttributedGraph) -> Vec<usize> {
    graph
        .nodes()
        .iter()
        .filter(|n| n.label.is_some())
        .map(|n| n.id)
        .collect()
}

fn floor_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

fn check_fractions(f: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = f;
    if a < 0.0 || b < 0.0 || c < 0.0 || a + b + c > 1.0 + 1e-9 {
        return Err(Error::Split(format!(
            "fractions ({a}, {b}, {c}) must be nonnegative and sum to at most 1"
        )));
    }
    Ok(())
}

/// Partition `ids` (already shuffled) into train/validation/test. When the
/// fractions sum to one, the rounding remainder goes to test.
fn partition(ids: &[usize], f: (f64, f64, f64)) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let n = ids.len();
    let n_train = floor_count(f.0, n);
    let n_val = floor_count(f.1, n).min(n - n_train);
    let n_test = if (f.0 + f.1 + f.2 - 1.0).abs() < 1e-9 {
        n - n_train - n_val
    } else {
        floor_count(f.2, n).min(n - n_train - n_val)
    };
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..n_train + n_val].to_vec();
    let mut test = ids[n_train + n_val..n_train + n_val + n_test].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (train, val, test)
}

/// Random split of the labeled nodes by fractions (train, validation, test).
pub fn make_split(
    graph: &TextAttributedGraph,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    check_fractions(fractions)?;
    let mut ids = labeled_nodes(graph);
    if ids.is_empty() {
        return Err(Error::Split("graph has no labeled nodes".into()));
    }
    ids.shuffle(&mut rng_for(seed, 0x5b17));
    let (train, validation, test) = partition(&ids, fractions);
    Ok(SplitAssignment {
        train,
        validation,
        test,
        shot_count: None,
        warnings: Vec::new(),
    })
}

/// `shots` training nodes per class (or the whole class if smaller); the rest
/// of the labeled nodes are divided between validation and test by
/// `rest_fractions`.
pub fn make_shot_split(
    graph: &TextAttributedGraph,
    shots: usize,
    rest_fractions: (f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    if shots == 0 {
        return Err(Error::Split("shots must be at least 1".into()));
    }
    check_fractions((0.0, rest_fractions.0, rest_fractions.1))?;
    let mut rng = rng_for(seed, 0x5407);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); graph.num_classes()];
    for n in graph.nodes() {
        if let Some(l) = n.label {
            by_class[l].push(n.id);
        }
    }
    let mut train = Vec::new();
    let mut rest = Vec::new();
    let mut warnings = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            let msg = format!(
                "class {:?} has no labeled nodes; skipped",
                graph.class_names()[class]
            );
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        members.shuffle(&mut rng);
        let take = shots.min(members.len());
        train.extend_from_slice(&members[..take]);
        rest.extend_from_slice(&members[take..]);
    }
    if train.is_empty() {
        return Err(Error::Split("graph has no labeled nodes".into()));
    }
    rest.shuffle(&mut rng);
    let (_, validation, test) = partition(&rest, (0.0, rest_fractions.0, rest_fractions.1));
    train.sort_unstable();
    Ok(SplitAssignment {
        train,
        validation,
        test,
        shot_count: Some(shots),
        warnings,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Record {
    Header {
        classes: Vec<String>,
        #[serde(default)]
        directed: bool,
    },
    Node {
        id: usize,
        text: String,
        #[serde(default)]
        label: Option<String>,
    },
    Edge {
        src: usize,
        dst: usize,
    },
}

fn resolve_label(
    label: Option<String>,
    index: &HashMap<String, usize>,
    line: usize,
) -> Result<Option<usize>> {
    match label {
        None => Ok(None),
        Some(name) => index.get(&name).copied().map(Some).ok_or(Error::Parse {
            line,
            message: format!("label {name:?} is not among the declared classes"),
        }),
    }
}

/// Reads the line-delimited dataset format: one header record, then node and
/// edge records in any order. Blank lines are ignored.
pub fn load_tag(path: impl AsRef<Path>) -> Result<TextAttributedGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tag(BufReader::new(file))
}

pub fn read_tag(reader: impl BufRead) -> Result<TextAttributedGraph> {
    let mut header: Option<(Vec<String>, bool)> = None;
    let mut index = HashMap::new();
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match record {
            Record::Header { classes, directed } => {
                if header.is_some() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "duplicate header record".into(),
                    });
                }
                index = classes
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.clone(), i))
                    .collect();
                header = Some((classes, directed));
            }
            Record::Node { id, text, label } => {
                if header.is_none() {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "node record before header".into(),
                    });
                }
                if !ids.insert(id) {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!("duplicate node id {id}"),
                    });
                }
                let label = resolve_label(label, &index, lineno)?;
                nodes.push(NodeRecord { id, text, label });
            }
            Record::Edge { src, dst } => edges.push((src, dst)),
        }
    }
    let (classes, directed) = header.ok_or(Error::Parse {
        line: 0,
        message: "missing header record".into(),
    })?;
    TextAttributedGraph::new(nodes, edges, directed, classes)
}

pub fn write_tag(graph: &TextAttributedGraph, mut out: impl Write) -> std::io::Result<()> {
    let header = Record::Header {
        classes: graph.class_names.clone(),
        directed: graph.directed,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for n in &graph.nodes {
        let rec = Record::Node {
            id: n.id,
            text: n.text.clone(),
            label: n.label.map(|l| graph.class_names[l].clone()),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    for &(src, dst) in &graph.edges {
        writeln!(out, "{}", serde_json::to_string(&Record::Edge { src, dst })?)?;
    }
    Ok(())
}

pub fn save_tag(graph: &TextAttributedGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tag(graph, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One graph of a graph-classification dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphRecord {
    pub graph: TextAttributedGraph,
    pub label: Option<usize>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub class_names: Vec<String>,
    pub graphs: Vec<GraphRecord>,
}

#[derive(Serialize, Deserialize)]
struct GraphNodeEntry {
    id: usize,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct EdgeEntry {
    src: usize,
    dst: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GraphLine {
    Graph {
        nodes: Vec<GraphNodeEntry>,
        edges: Vec<EdgeEntry>,
        label: Option<String>,
        #[serde(default)]
        text: String,
    },
    Header {
        classes: Vec<String>,
        #[serde(default)]
        directed: bool,
    },
}

/// Graph-classification format: a header line, then one record per graph.
pub fn load_graph_dataset(path: impl AsRef<Path>) -> Result<GraphDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut classes: Option<(Vec<String>, bool)> = None;
    let mut index = HashMap::new();
    let mut graphs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        match rec {
            GraphLine::Header {
                classes: c,
                directed,
            } => {
                index = c.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
                classes = Some((c, directed));
            }
            GraphLine::Graph {
                nodes,
                edges,
                label,
                text,
            } => {
                let Some((names, directed)) = &classes else {
                    return Err(Error::Parse {
                        line: lineno,
                        message: "graph record before header".into(),
                    });
                };
                let label = resolve_label(label, &index, lineno)?;
                let nodes = nodes
                    .into_iter()
                    .map(|n| NodeRecord {
                        id: n.id,
                        text: n.text,
                        label: None,
                    })
                    .collect();
                let edges = edges.into_iter().map(|e| (e.src, e.dst)).collect();
                let graph = TextAttributedGraph::new(nodes, edges, *directed, names.clone())
                    .map_err(|e| Error::Parse {
                        line: lineno,
                        message: e.to_string(),
                    })?;
                graphs.push(GraphRecord { graph, label, text });
            }
        }
    }
    let (class_names, _) = classes.ok_or(Error::Parse {
        line: 0,
        message: "missing header record".into(),
    })?;
    Ok(GraphDataset {
        class_names,
        graphs,
    })
}

pub fn save_graph_dataset(data: &GraphDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let directed = data.graphs.first().is_some_and(|g| g.graph.is_directed());
    let mut lines = vec![serde_json::to_string(&GraphLine::Header {
        classes: data.class_names.clone(),
        directed,
    })
    .expect("header serializes")];
    for g in &data.graphs {
        let rec = GraphLine::Graph {
            nodes: g
                .graph
                .nodes()
                .iter()
                .map(|n| GraphNodeEntry {
                    id: n.id,
                    text: n.text.clone(),
                })
                .collect(),
            edges: g
                .graph
                .edges()
                .iter()
                .map(|&(src, dst)| EdgeEntry { src, dst })
                .collect(),
            label: g.label.map(|l| data.class_names[l].clone()),
            text: g.text.clone(),
        };
        lines.push(serde_json::to_string(&rec).expect("graph serializes"));
    }
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Split the labeled graphs of a dataset by fractions, as for nodes.
pub fn make_graph_split(
    data: &GraphDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    check_fractions(fractions)?;
    let mut ids: Vec<usize> = data
        .graphs
        .iter()
        .enumerate()
        .filter(|(_, g)| g.label.is_some())
        .map(|(i, _)| i)
        .collect();
    if ids.is_empty() {
        return Err(Error::Split("dataset has no labeled graphs".into()));
    }
    ids.shuffle(&mut rng_for(seed, 0x6a17));
    let (train, validation, test) = partition(&ids, fractions);
    Ok(SplitAssignment {
        train,
        validation,
        test,
        shot_count: None,
        warnings: Vec::new(),
    })
}
