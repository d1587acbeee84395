//! GCN, GAT and GIN encoders over dense adjacency.
//!
//! Every layer follows the same message-passing shape: aggregate neighbor
//! states, combine with the node's own state, transform. ReLU sits between
//! layers and the final layer is left linear so its output can feed the
//! graph-token projector unconstrained.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rng_for, TextAttributedGraph};
use crate::params::{glorot, Bound, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GnnKind {
    Gcn,
    Gat,
    Gin,
}

impl GnnKind {
    pub fn label(self) -> &'static str {
        match self {
            GnnKind::Gcn => "GCN",
            GnnKind::Gat => "GAT",
            GnnKind::Gin => "GIN",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(GnnKind::Gcn),
            "gat" => Ok(GnnKind::Gat),
            "gin" => Ok(GnnKind::Gin),
            other => Err(Error::Config(format!("unknown GNN kind {other:?}"))),
        }
    }
}

impl fmt::Display for GnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub kind: GnnKind,
    pub layers: usize,
    pub hidden: usize,
    /// Attention heads (GAT only).
    pub heads: usize,
    /// Initial epsilon (GIN only).
    pub epsilon: f64,
    pub learn_epsilon: bool,
    pub dropout: f64,
    /// GAT attends over the node itself as well as its neighbors.
    pub self_loops: bool,
    pub seed: u64,
}

impl GnnConfig {
    pub fn new(kind: GnnKind) -> Self {
        Self {
            kind,
            layers: 2,
            hidden: 256,
            heads: 4,
            epsilon: 0.0,
            learn_epsilon: true,
            dropout: 0.0,
            self_loops: true,
            seed: 0,
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::Config(
                "GNN layers, hidden and heads must all be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dense structural inputs derived once per graph.
#[derive(Clone, Debug)]
pub struct GraphStructure {
    /// `A` without self-loops, `a[i][j] = 1` when `j` sends to `i`.
    pub adjacency: Matrix,
    /// `D^{-1/2}(A+I)D^{-1/2}`.
    pub normalized: Matrix,
    /// Attention support `A + I`.
    pub mask_with_self: Rc<Array2<bool>>,
    pub mask_without_self: Rc<Array2<bool>>,
}

impl GraphStructure {
    pub fn from_adjacency(adjacency: Matrix) -> Result<Self> {
        let (n, m) = adjacency.dim();
        if n != m {
            return Err(Error::Dimension(format!("adjacency is {n}x{m}")));
        }
        let mut with_self = adjacency.clone();
        for i in 0..n {
            with_self[[i, i]] += 1.0;
        }
        let inv_sqrt: Vec<f64> = with_self
            .rows()
            .into_iter()
            .map(|r| 1.0 / r.sum().sqrt())
            .collect();
        let normalized =
            Matrix::from_shape_fn((n, n), |(i, j)| with_self[[i, j]] * inv_sqrt[i] * inv_sqrt[j]);
        let mask_with_self = Rc::new(with_self.mapv(|v| v != 0.0));
        let mask_without_self = Rc::new(adjacency.mapv(|v| v != 0.0));
        Ok(Self {
            adjacency,
            normalized,
            mask_with_self,
            mask_without_self,
        })
    }

    pub fn from_graph(graph: &TextAttributedGraph) -> Self {
        Self::from_adjacency(graph.adjacency()).expect("graph adjacency is square")
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.nrows()
    }
}

/// Output of the final layer: row `i` is node `i`'s representation.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnRepresentation {
    pub matrix: Matrix,
    pub kind: GnnKind,
    pub layer_index: usize,
}

/// An encoder: configuration, input width and named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gnn {
    pub config: GnnConfig,
    pub in_dim: usize,
    pub params: ParamStore,
}

/// Forward result recorded on a tape.
pub struct GnnTrace {
    pub output: Var,
    /// Per layer, per head attention coefficients (GAT only).
    pub attention: Vec<Vec<Var>>,
}

impl Gnn {
    pub fn init(config: GnnConfig, in_dim: usize) -> Result<Self> {
        config.validate()?;
        if in_dim == 0 {
            return Err(Error::Config("GNN input width must be positive".into()));
        }
        let mut rng = rng_for(config.seed, 0x6e6e);
        let mut p = ParamStore::new();
        let h = config.hidden;
        for l in 0..config.layers {
            let fan_in = if l == 0 { in_dim } else { h };
            match config.kind {
                GnnKind::Gcn => {
                    p.insert(format!("layer{l}.weight"), glorot(&mut rng, h, fan_in));
                    p.insert(format!("layer{l}.bias"), Matrix::zeros((1, h)));
                }
                GnnKind::Gat => {
                    for head in 0..config.heads {
                        p.insert(
                            format!("layer{l}.head{head}.weight"),
                            glorot(&mut rng, h, fan_in),
                        );
                        p.insert(format!("layer{l}.head{head}.att_dst"), glorot(&mut rng, 1, h));
                        p.insert(format!("layer{l}.head{head}.att_src"), glorot(&mut rng, 1, h));
                    }
                    p.insert(
                        format!("layer{l}.out.weight"),
                        glorot(&mut rng, h, h * config.heads),
                    );
                    p.insert(format!("layer{l}.out.bias"), Matrix::zeros((1, h)));
                }
                GnnKind::Gin => {
                    p.insert(
                        format!("layer{l}.eps"),
                        Matrix::from_elem((1, 1), config.epsilon),
                    );
                    p.insert(format!("layer{l}.mlp0.weight"), glorot(&mut rng, h, fan_in));
                    p.insert(format!("layer{l}.mlp0.bias"), Matrix::zeros((1, h)));
                    p.insert(format!("layer{l}.mlp1.weight"), glorot(&mut rng, h, h));
                    p.insert(format!("layer{l}.mlp1.bias"), Matrix::zeros((1, h)));
                }
            }
        }
        Ok(Self {
            config,
            in_dim,
            params: p,
        })
    }

    /// Whether a tensor takes gradient updates. A frozen GIN epsilon is the
    /// only non-trainable tensor.
    pub fn is_trainable(&self, name: &str) -> bool {
        !(name.ends_with(".eps") && !self.config.learn_epsilon)
    }

    fn check_inputs(&self, structure: &GraphStructure, features: &Matrix) -> Result<()> {
        if structure.num_nodes() != features.nrows() {
            return Err(Error::Dimension(format!(
                "adjacency has {} nodes but features have {} rows",
                structure.num_nodes(),
                features.nrows()
            )));
        }
        if features.ncols() != self.in_dim {
            return Err(Error::Dimension(format!(
                "encoder expects width {} but features have {}",
                self.in_dim,
                features.ncols()
            )));
        }
        Ok(())
    }

    /// Records the forward pass. Dropout is applied only when `rng` is given.
    pub fn trace(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        structure: &GraphStructure,
        x: Var,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> GnnTrace {
        let cfg = &self.config;
        let mut h = x;
        let mut attention = Vec::new();
        let norm = tape.constant(structure.normalized.clone());
        let adj = tape.constant(structure.adjacency.clone());
        for l in 0..cfg.layers {
            if let Some(r) = rng.as_deref_mut() {
                h = dropout(tape, h, cfg.dropout, r);
            }
            h = match cfg.kind {
                GnnKind::Gcn => {
                    let xw = tape.linear(h, bound.var(&format!("layer{l}.weight")));
                    let agg = tape.matmul(norm, xw);
                    tape.add_row(agg, bound.var(&format!("layer{l}.bias")))
                }
                GnnKind::Gat => {
                    let mask = if cfg.self_loops {
                        structure.mask_with_self.clone()
                    } else {
                        structure.mask_without_self.clone()
                    };
                    let mut heads = Vec::with_capacity(cfg.heads);
                    let mut alphas = Vec::with_capacity(cfg.heads);
                    for head in 0..cfg.heads {
                        let pre = format!("layer{l}.head{head}");
                        let wh = tape.linear(h, bound.var(&format!("{pre}.weight")));
                        let s_dst = tape.linear(wh, bound.var(&format!("{pre}.att_dst")));
                        let s_src = tape.linear(wh, bound.var(&format!("{pre}.att_src")));
                        let e = tape.outer_add(s_dst, s_src);
                        let e = tape.leaky_relu(e, 0.2);
                        let alpha = tape.masked_softmax(e, mask.clone());
                        alphas.push(alpha);
                        heads.push(tape.matmul(alpha, wh));
                    }
                    attention.push(alphas);
                    let cat = tape.concat_cols(&heads);
                    tape.affine(
                        cat,
                        bound.var(&format!("layer{l}.out.weight")),
                        bound.var(&format!("layer{l}.out.bias")),
                    )
                }
                GnnKind::Gin => {
                    let neigh = tape.matmul(adj, h);
                    let scaled = tape.scale_by(h, bound.var(&format!("layer{l}.eps")));
                    let own = tape.add(h, scaled);
                    let z = tape.add(own, neigh);
                    let z = tape.affine(
                        z,
                        bound.var(&format!("layer{l}.mlp0.weight")),
                        bound.var(&format!("layer{l}.mlp0.bias")),
                    );
                    let z = tape.relu(z);
                    tape.affine(
                        z,
                        bound.var(&format!("layer{l}.mlp1.weight")),
                        bound.var(&format!("layer{l}.mlp1.bias")),
                    )
                }
            };
            if l + 1 < cfg.layers {
                h = tape.relu(h);
            }
        }
        GnnTrace {
            output: h,
            attention,
        }
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(
        &self,
        structure: &GraphStructure,
        features: &Matrix,
    ) -> Result<GnnRepresentation> {
        self.check_inputs(structure, features)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let trace = self.trace(&mut tape, &bound, structure, x, None);
        let matrix = tape.value(trace.output).clone();
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} output", self.config.kind)));
        }
        Ok(GnnRepresentation {
            matrix,
            kind: self.config.kind,
            layer_index: self.config.layers - 1,
        })
    }

    /// GAT attention coefficients of one layer and head, in evaluation mode.
    pub fn attention(
        &self,
        structure: &GraphStructure,
        features: &Matrix,
        layer: usize,
        head: usize,
    ) -> Result<Matrix> {
        if self.config.kind != GnnKind::Gat {
            return Err(Error::Config("attention coefficients exist only for GAT".into()));
        }
        self.check_inputs(structure, features)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(features.clone());
        let trace = self.trace(&mut tape, &bound, structure, x, None);
        let var = trace
            .attention
            .get(layer)
            .and_then(|l| l.get(head))
            .ok_or_else(|| Error::Dimension(format!("no attention at layer {layer} head {head}")))?;
        Ok(tape.value(*var).clone())
    }

    /// Parameter gradients of `sum(output ⊙ upstream)`.
    pub fn backward(
        &self,
        structure: &GraphStructure,
        features: &Matrix,
        upstream: &Matrix,
    ) -> Result<BTreeMap<String, Matrix>> {
        self.check_inputs(structure, features)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |n| self.is_trainable(n));
        let x = tape.constant(features.clone());
        let trace = self.trace(&mut tape, &bound, structure, x, None);
        if tape.shape(trace.output) != upstream.dim() {
            return Err(Error::Dimension("upstream gradient shape".into()));
        }
        let loss = weighted_sum(&mut tape, trace.output, upstream);
        let grads = tape.backward(loss);
        let mut out = bound.gradients(&grads);
        for name in self.params.names() {
            if self.is_trainable(name) && !out.contains_key(name) {
                out.insert(name.to_string(), Matrix::zeros(self.params.get(name).unwrap().dim()));
            }
        }
        for (name, g) in &out {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(out)
    }
}

/// Scalar `sum(y ⊙ w)` for a constant weight matrix `w`.
pub(crate) fn weighted_sum(tape: &mut Tape, y: Var, w: &Matrix) -> Var {
    let (r, c) = w.dim();
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv);
    let ones_r = tape.constant(Matrix::ones((1, r)));
    let ones_c = tape.constant(Matrix::ones((c, 1)));
    let col = tape.matmul(ones_r, prod);
    tape.matmul(col, ones_c)
}

/// Inverted dropout with a freshly drawn mask.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut dyn rand::RngCore) -> Var {
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let shape = tape.shape(x);
    let mask = Matrix::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Mean of node rows: the graph-level vector used for graph classification.
pub fn readout(rep: &GnnRepresentation) -> Result<Vec<f64>> {
    if rep.matrix.nrows() == 0 {
        return Err(Error::Validation("readout of an empty graph".into()));
    }
    Ok(rep
        .matrix
        .mean_axis(ndarray::Axis(0))
        .expect("nonempty")
        .to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeRecord;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path_graph(n: usize) -> TextAttributedGraph {
        let nodes = (0..n)
            .map(|id| NodeRecord {
                id,
                text: String::new(),
                label: None,
            })
            .collect();
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        TextAttributedGraph::new(nodes, edges, false, vec![]).unwrap()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn small(kind: GnnKind) -> GnnConfig {
        GnnConfig {
            hidden: 6,
            heads: 2,
            epsilon: 0.1,
            ..GnnConfig::new(kind)
        }
    }

    #[test]
    fn gcn_isolated_node_is_self_transform() {
        let cfg = GnnConfig {
            layers: 1,
            ..small(GnnKind::Gcn)
        };
        let gnn = Gnn::init(cfg, 3).unwrap();
        let s = GraphStructure::from_graph(&path_graph(1));
        let x = random_features(1, 3, 1);
        let out = gnn.forward(&s, &x).unwrap();
        let w = gnn.params.get("layer0.weight").unwrap();
        let expected = x.dot(&w.t());
        for (a, b) in out.matrix.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let gnn = Gnn::init(small(GnnKind::Gcn), 3).unwrap();
        let s = GraphStructure::from_graph(&path_graph(4));
        assert!(matches!(
            gnn.forward(&s, &random_features(3, 3, 0)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            gnn.forward(&s, &random_features(4, 5, 0)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gat_symmetric_neighbors_split_attention() {
        // star: center 0 with leaves 1 and 2 carrying identical features
        let nodes = (0..3)
            .map(|id| NodeRecord {
                id,
                text: String::new(),
                label: None,
            })
            .collect();
        let g = TextAttributedGraph::new(nodes, vec![(0, 1), (0, 2)], false, vec![]).unwrap();
        let s = GraphStructure::from_graph(&g);
        let mut x = random_features(3, 4, 3);
        let leaf = x.row(1).to_owned();
        x.row_mut(2).assign(&leaf);
        let cfg = GnnConfig {
            self_loops: false,
            ..small(GnnKind::Gat)
        };
        let gnn = Gnn::init(cfg, 4).unwrap();
        let att = gnn.attention(&s, &x, 0, 0).unwrap();
        assert!((att[[0, 1]] - 0.5).abs() < 1e-12);
        assert!((att[[0, 2]] - 0.5).abs() < 1e-12);
        let with_self = Gnn::init(small(GnnKind::Gat), 4).unwrap();
        let att = with_self.attention(&s, &x, 0, 1).unwrap();
        assert!((att[[0, 1]] - att[[0, 2]]).abs() < 1e-12);
        for row in att.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        for kind in [GnnKind::Gcn, GnnKind::Gat, GnnKind::Gin] {
            let gnn = Gnn::init(small(kind), 3).unwrap();
            let s = GraphStructure::from_graph(&path_graph(3));
            let x = random_features(3, 3, 2);
            let grads = gnn.backward(&s, &x, &Matrix::zeros((3, 6))).unwrap();
            assert_eq!(grads.len(), gnn.params.len());
            assert!(grads.values().all(|g| g.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn frozen_epsilon_gets_no_gradient() {
        let cfg = GnnConfig {
            learn_epsilon: false,
            ..small(GnnKind::Gin)
        };
        let gnn = Gnn::init(cfg, 3).unwrap();
        let s = GraphStructure::from_graph(&path_graph(2));
        let grads = gnn
            .backward(&s, &random_features(2, 3, 0), &Matrix::ones((2, 6)))
            .unwrap();
        assert!(!grads.contains_key("layer0.eps"));
    }

    #[test]
    fn readout_cases() {
        let rep = |m: Matrix| GnnRepresentation {
            matrix: m,
            kind: GnnKind::Gcn,
            layer_index: 1,
        };
        let single = Matrix::from_shape_vec((1, 3), vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(readout(&rep(single)).unwrap(), vec![1.0, -2.0, 3.0]);
        let pm = Matrix::from_shape_vec((2, 2), vec![0.5, -1.5, -0.5, 1.5]).unwrap();
        assert_eq!(readout(&rep(pm)).unwrap(), vec![0.0, 0.0]);
        let eye = Matrix::eye(3);
        for v in readout(&rep(eye)).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(readout(&rep(Matrix::zeros((0, 3)))).is_err());
    }

    #[test]
    fn gin_separates_path_from_triangle() {
        let nodes = || {
            (0..3)
                .map(|id| NodeRecord {
                    id,
                    text: String::new(),
                    label: None,
                })
                .collect::<Vec<_>>()
        };
        let path = TextAttributedGraph::new(nodes(), vec![(0, 1), (1, 2)], false, vec![]).unwrap();
        let tri =
            TextAttributedGraph::new(nodes(), vec![(0, 1), (1, 2), (0, 2)], false, vec![]).unwrap();
        let x = Matrix::ones((3, 4));
        let gnn = Gnn::init(small(GnnKind::Gin), 4).unwrap();
        let a = readout(&gnn.forward(&GraphStructure::from_graph(&path), &x).unwrap()).unwrap();
        let b = readout(&gnn.forward(&GraphStructure::from_graph(&tri), &x).unwrap()).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum();
        assert!(diff > 1e-6, "GIN outputs coincide: {a:?}");
    }

    #[test]
    fn dropout_only_in_training() {
        let cfg = GnnConfig {
            dropout: 0.5,
            ..small(GnnKind::Gcn)
        };
        let gnn = Gnn::init(cfg, 3).unwrap();
        let s = GraphStructure::from_graph(&path_graph(4));
        let x = random_features(4, 3, 5);
        assert_eq!(gnn.forward(&s, &x).unwrap(), gnn.forward(&s, &x).unwrap());
        let mut tape = Tape::new();
        let bound = gnn.params.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = gnn.trace(&mut tape, &bound, &s, xv, Some(&mut rng));
        assert_ne!(tape.value(t.output), &gnn.forward(&s, &x).unwrap().matrix);
    }
}
