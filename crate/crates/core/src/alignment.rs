//! Stage 1: several GNN encoders trained against one shared classifier so
//! their outputs land in a common space, then reshaped into graph tokens and
//! frozen.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::classify::{softmax_rows, SoftmaxRegression, SoftmaxRegressionConfig};
use crate::error::{Error, Result};
use crate::gnn::{Gnn, GnnConfig, GraphStructure};
use crate::graph::{rng_for, SplitAssignment};
use crate::lm::GraphTokenBlock;
use crate::optim::AdamW;
use crate::params::{glorot, Bound, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternation {
    /// GNN 1 makes a full pass over the train split, then GNN 2, ...
    PerEpoch,
    /// Every GNN takes one step on a batch before the next batch.
    PerBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierInput {
    /// Classifier reads the projected `t·e` graph-token vector.
    Reshaped,
    /// Classifier reads the raw GNN output.
    Hidden,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub epochs: usize,
    /// First epoch in which the shared classifier no longer updates.
    /// Defaults to half the epochs.
    pub freeze_epoch: Option<usize>,
    pub gnn_lr: f64,
    pub classifier_lr: f64,
    pub weight_decay: f64,
    pub alternation: Alternation,
    /// Training items per step; `None` means the whole train split.
    pub batch_size: Option<usize>,
    /// One classifier shared by every GNN (alignment on) versus one private
    /// classifier per GNN (alignment off).
    pub shared_classifier: bool,
    pub classifier_input: ClassifierInput,
    pub classifier_hidden: usize,
    /// Graph tokens per node.
    pub t: usize,
    /// LM embedding width.
    pub e: usize,
    pub seed: u64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            freeze_epoch: None,
            gnn_lr: 0.01,
            classifier_lr: 0.01,
            weight_decay: 1e-3,
            alternation: Alternation::PerEpoch,
            batch_size: None,
            shared_classifier: true,
            classifier_input: ClassifierInput::Reshaped,
            classifier_hidden: 64,
            t: 8,
            e: 64,
            seed: 0,
        }
    }
}

impl AlignmentConfig {
    pub fn freeze_at(&self) -> usize {
        self.freeze_epoch.unwrap_or(self.epochs / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.e == 0 {
            return Err(Error::Config("t and e must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.classifier_hidden == 0 {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Inputs for stage 1: one graph with labeled nodes, or a set of labeled graphs.
#[derive(Clone, Copy, Debug)]
pub enum AlignmentData<'a> {
    Nodes {
        structure: &'a GraphStructure,
        features: &'a Matrix,
        labels: &'a [Option<usize>],
    },
    Graphs {
        structures: &'a [GraphStructure],
        features: &'a [Matrix],
        labels: &'a [Option<usize>],
    },
}

impl AlignmentData<'_> {
    pub fn len(&self) -> usize {
        match self {
            AlignmentData::Nodes { labels, .. } | AlignmentData::Graphs { labels, .. } => {
                labels.len()
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        match self {
            AlignmentData::Nodes { labels, .. } | AlignmentData::Graphs { labels, .. } => {
                labels.get(i).copied().flatten()
            }
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            AlignmentData::Nodes { features, .. } => features.ncols(),
            AlignmentData::Graphs { features, .. } => features.first().map_or(0, |f| f.ncols()),
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            AlignmentData::Nodes {
                structure,
                features,
                labels,
            } => {
                if structure.num_nodes() != features.nrows() || labels.len() != features.nrows() {
                    return Err(Error::Dimension(
                        "structure, features and labels disagree on node count".into(),
                    ));
                }
            }
            AlignmentData::Graphs {
                structures,
                features,
                labels,
            } => {
                if structures.len() != features.len() || labels.len() != features.len() {
                    return Err(Error::Dimension(
                        "graph structures, features and labels disagree on count".into(),
                    ));
                }
                for (s, f) in structures.iter().zip(features.iter()) {
                    if s.num_nodes() != f.nrows() || f.nrows() == 0 {
                        return Err(Error::Dimension("graph with mismatched or empty features".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-GNN linear maps from the encoder width to `t·e`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReshapeProjector {
    pub t: usize,
    pub e: usize,
    pub hidden: usize,
    /// `{k}.weight` (`t·e × hidden`) and `{k}.bias` for each GNN `k`.
    pub params: ParamStore,
}

impl ReshapeProjector {
    pub fn num_gnns(&self) -> usize {
        self.params.len() / 2
    }

    pub fn output_len(&self) -> usize {
        self.t * self.e
    }

    /// Affine map of one hidden vector through GNN `gnn_index`'s projector.
    pub fn reshape(&self, h: &[f64], gnn_index: usize) -> Result<Vec<f64>> {
        let w = self
            .params
            .get(&format!("{gnn_index}.weight"))
            .ok_or_else(|| Error::Dimension(format!("no projector for GNN {gnn_index}")))?;
        let b = self.params.get(&format!("{gnn_index}.bias")).expect("paired bias");
        if h.len() != w.ncols() {
            return Err(Error::Dimension(format!(
                "projector expects {} inputs, got {}",
                w.ncols(),
                h.len()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projector input".into()));
        }
        let hv = ndarray::ArrayView1::from(h);
        Ok((w.dot(&hv) + b.row(0)).to_vec())
    }
}

/// Free-function form of [`ReshapeProjector::reshape`].
pub fn reshape_tokens(h: &[f64], projector: &ReshapeProjector, gnn_index: usize) -> Result<Vec<f64>> {
    projector.reshape(h, gnn_index)
}

/// Contiguous, order-preserving split of a `t·e` vector into `t` vectors.
pub fn segment_tokens(v: &[f64], t: usize, e: usize) -> Result<Vec<Vec<f64>>> {
    if t == 0 || e == 0 || v.len() != t * e {
        return Err(Error::Dimension(format!(
            "cannot segment length {} into {t} x {e}",
            v.len()
        )));
    }
    Ok(v.chunks(e).map(|c| c.to_vec()).collect())
}

/// Two-layer MLP head. With alignment on, one instance serves every GNN.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedClassifier {
    /// `l0.weight`, `l0.bias`, `l1.weight`, `l1.bias`.
    pub params: ParamStore,
    pub frozen: bool,
    pub freeze_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentLogEntry {
    pub epoch: usize,
    pub gnn_index: usize,
    pub batch: usize,
    pub loss: f64,
    pub classifier_frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    gnn_configs: Vec<GnnConfig>,
    in_dim: usize,
    num_classes: usize,
    config: AlignmentConfig,
    frozen: bool,
}

/// Frozen stage-1 result: encoders, projectors and classifier(s).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentCheckpoint {
    pub gnns: Vec<Gnn>,
    pub projector: ReshapeProjector,
    pub classifiers: Vec<SharedClassifier>,
    pub config: AlignmentConfig,
    pub num_classes: usize,
    pub seed: u64,
    pub config_digest: String,
    pub frozen: bool,
    pub log: Vec<AlignmentLogEntry>,
}

pub const CHECKPOINT_KIND: &str = "lensgnn/alignment";

fn config_digest(gnns: &[GnnConfig], cfg: &AlignmentConfig, in_dim: usize, classes: usize) -> String {
    let v = serde_json::json!({
        "gnns": gnns,
        "alignment": cfg,
        "in_dim": in_dim,
        "classes": classes,
    });
    crate::checkpoint::json_digest(&v)
}

fn gnn_prefix(k: usize) -> String {
    format!("gnn{k}.")
}
fn proj_prefix(k: usize) -> String {
    format!("proj{k}.")
}
fn cls_prefix(c: usize) -> String {
    format!("cls{c}.")
}

/// Encoder output rows for `items`, on the tape. Node data returns the full
/// node matrix with `rows` pointing at the items; graph data returns one
/// pooled row per item.
fn trace_items(
    tape: &mut Tape,
    gnn: &Gnn,
    bound: &Bound,
    data: &AlignmentData,
    items: &[usize],
    mut rng: Option<&mut dyn rand::RngCore>,
) -> (Var, Vec<usize>) {
    match data {
        AlignmentData::Nodes {
            structure,
            features,
            ..
        } => {
            let x = tape.constant((*features).clone());
            let out = gnn.trace(tape, bound, structure, x, rng).output;
            (out, items.to_vec())
        }
        AlignmentData::Graphs {
            structures,
            features,
            ..
        } => {
            let mut pooled = Vec::with_capacity(items.len());
            for &i in items {
                let x = tape.constant(features[i].clone());
                let out = gnn
                    .trace(tape, bound, &structures[i], x, reborrow(&mut rng))
                    .output;
                pooled.push(tape.mean_rows(out));
            }
            (tape.concat_rows(&pooled), (0..items.len()).collect())
        }
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn rand::RngCore>) -> Option<&'a mut dyn rand::RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

fn trace_projector(tape: &mut Tape, bound: &Bound, h: Var) -> Var {
    tape.affine(h, bound.var("weight"), bound.var("bias"))
}

fn trace_classifier(tape: &mut Tape, bound: &Bound, z: Var) -> Var {
    let a = tape.affine(z, bound.var("l0.weight"), bound.var("l0.bias"));
    let a = tape.relu(a);
    tape.affine(a, bound.var("l1.weight"), bound.var("l1.bias"))
}

/// Trains `gnn_configs.len()` encoders against a shared (or private)
/// classifier and returns the frozen result.
pub fn train_aligned(
    gnn_configs: &[GnnConfig],
    data: &AlignmentData,
    num_classes: usize,
    split: &SplitAssignment,
    config: &AlignmentConfig,
) -> Result<AlignmentCheckpoint> {
    if gnn_configs.is_empty() {
        return Err(Error::Config("at least one GNN is required".into()));
    }
    config.validate()?;
    data.check()?;
    let train: Vec<usize> = split
        .train
        .iter()
        .copied()
        .filter(|&i| data.label(i).is_some())
        .collect();
    if train.is_empty() {
        return Err(Error::Split("train split has no labeled items".into()));
    }
    if num_classes == 0 {
        return Err(Error::Config("need at least one class".into()));
    }
    let in_dim = data.in_dim();
    let k = gnn_configs.len();
    let te = config.t * config.e;
    let mut gnns = Vec::with_capacity(k);
    let mut state = ParamStore::new();
    let mut init_rng = rng_for(config.seed, 0xa119);
    for (i, gc) in gnn_configs.iter().enumerate() {
        let gnn = Gnn::init(gc.clone(), in_dim)?;
        state.extend_prefixed(&gnn_prefix(i), &gnn.params);
        state.insert(
            format!("{}weight", proj_prefix(i)),
            glorot(&mut init_rng, te, gc.hidden),
        );
        state.insert(format!("{}bias", proj_prefix(i)), Matrix::zeros((1, te)));
        gnns.push(gnn);
    }
    let n_cls = if config.shared_classifier { 1 } else { k };
    for c in 0..n_cls {
        let cls_in = match config.classifier_input {
            ClassifierInput::Reshaped => te,
            ClassifierInput::Hidden => gnn_configs[c.min(k - 1)].hidden,
        };
        if config.classifier_input == ClassifierInput::Hidden
            && gnn_configs.iter().any(|g| g.hidden != cls_in)
        {
            return Err(Error::Config(
                "a classifier on hidden vectors needs equal hidden widths".into(),
            ));
        }
        let p = cls_prefix(c);
        state.insert(
            format!("{p}l0.weight"),
            glorot(&mut init_rng, config.classifier_hidden, cls_in),
        );
        state.insert(format!("{p}l0.bias"), Matrix::zeros((1, config.classifier_hidden)));
        state.insert(
            format!("{p}l1.weight"),
            glorot(&mut init_rng, num_classes, config.classifier_hidden),
        );
        state.insert(format!("{p}l1.bias"), Matrix::zeros((1, num_classes)));
    }

    let freeze_at = config.freeze_at();
    let mut opt = AdamW::new(config.weight_decay);
    let mut rng = rng_for(config.seed, 0xd409);
    let mut log = Vec::new();
    let lr_ratio = config.classifier_lr / config.gnn_lr;

    for epoch in 0..config.epochs {
        let frozen_cls = epoch >= freeze_at;
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let batches: Vec<Vec<usize>> = match config.batch_size {
            None => vec![order],
            Some(b) => order.chunks(b).map(|c| c.to_vec()).collect(),
        };
        let mut schedule = Vec::new();
        match config.alternation {
            Alternation::PerEpoch => {
                for g in 0..k {
                    for b in 0..batches.len() {
                        schedule.push((g, b));
                    }
                }
            }
            Alternation::PerBatch => {
                for b in 0..batches.len() {
                    for g in 0..k {
                        schedule.push((g, b));
                    }
                }
            }
        }
        for (g, b) in schedule {
            let batch = &batches[b];
            let c = if config.shared_classifier { 0 } else { g };
            let mut tape = Tape::new();
            let gp = gnn_prefix(g);
            let pp = proj_prefix(g);
            let cp = cls_prefix(c);
            let gnn = &gnns[g];
            let gb = state.bind_prefixed(&mut tape, &gp, |n| gnn.is_trainable(n));
            let pb = state.bind_prefixed(&mut tape, &pp, |_| true);
            let cb = state.bind_prefixed(&mut tape, &cp, |_| !frozen_cls);
            let (h, rows) = trace_items(&mut tape, gnn, &gb, data, batch, Some(&mut rng));
            let z = trace_projector(&mut tape, &pb, h);
            let cls_in = match config.classifier_input {
                ClassifierInput::Reshaped => z,
                ClassifierInput::Hidden => h,
            };
            let logits = trace_classifier(&mut tape, &cb, cls_in);
            let targets: Vec<usize> = batch.iter().map(|&i| data.label(i).unwrap()).collect();
            let loss = tape.cross_entropy(logits, &rows, &targets);
            let loss_value = tape.scalar(loss);
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    context: format!("GNN {g} ({})", gnn.config.kind),
                    epoch,
                });
            }
            let grads = tape.backward(loss);
            let mut all: BTreeMap<String, Matrix> = gb.gradients_prefixed(&grads, &gp);
            all.extend(pb.gradients_prefixed(&grads, &pp));
            if !frozen_cls {
                all.extend(cb.gradients_prefixed(&grads, &cp));
            }
            opt.step(&mut state, &all, config.gnn_lr, |n| {
                if n.starts_with("cls") {
                    lr_ratio
                } else {
                    1.0
                }
            });
            log.push(AlignmentLogEntry {
                epoch,
                gnn_index: g,
                batch: b,
                loss: loss_value,
                classifier_frozen: frozen_cls,
            });
        }
    }

    state.check_finite()?;
    for (i, gnn) in gnns.iter_mut().enumerate() {
        gnn.params = state.strip_prefix(&gnn_prefix(i));
    }
    let mut proj = ParamStore::new();
    for i in 0..k {
        proj.extend_prefixed(&format!("{i}."), &state.strip_prefix(&proj_prefix(i)));
    }
    let classifiers = (0..n_cls)
        .map(|c| SharedClassifier {
            params: state.strip_prefix(&cls_prefix(c)),
            frozen: true,
            freeze_epoch: freeze_at,
        })
        .collect();
    Ok(AlignmentCheckpoint {
        config_digest: config_digest(gnn_configs, config, in_dim, num_classes),
        gnns,
        projector: ReshapeProjector {
            t: config.t,
            e: config.e,
            hidden: gnn_configs[0].hidden,
            params: proj,
        },
        classifiers,
        config: config.clone(),
        num_classes,
        seed: config.seed,
        frozen: true,
        log,
    })
}

impl AlignmentCheckpoint {
    pub fn num_gnns(&self) -> usize {
        self.gnns.len()
    }

    fn classifier_for(&self, gnn_index: usize) -> &SharedClassifier {
        if self.classifiers.len() == 1 {
            &self.classifiers[0]
        } else {
            &self.classifiers[gnn_index]
        }
    }

    fn check_index(&self, gnn_index: usize) -> Result<()> {
        if gnn_index >= self.gnns.len() {
            return Err(Error::Dimension(format!(
                "GNN index {gnn_index} out of range for {} encoders",
                self.gnns.len()
            )));
        }
        Ok(())
    }

    /// Encoder outputs (`items × hidden`) of GNN `gnn_index`, evaluation mode.
    pub fn hidden(&self, gnn_index: usize, data: &AlignmentData) -> Result<Matrix> {
        self.check_index(gnn_index)?;
        data.check()?;
        let gnn = &self.gnns[gnn_index];
        let mut tape = Tape::new();
        let b = gnn.params.bind(&mut tape, |_| false);
        let items: Vec<usize> = (0..data.len()).collect();
        let (h, rows) = trace_items(&mut tape, gnn, &b, data, &items, None);
        let out = tape.value(h).select(ndarray::Axis(0), &rows);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("GNN {gnn_index} output")));
        }
        Ok(out)
    }

    /// Projected `t·e` vectors for every item, evaluation mode.
    pub fn reshaped(&self, gnn_index: usize, data: &AlignmentData) -> Result<Matrix> {
        let h = self.hidden(gnn_index, data)?;
        let w = self.projector.params.require(&format!("{gnn_index}.weight"))?;
        let b = self.projector.params.require(&format!("{gnn_index}.bias"))?;
        Ok(h.dot(&w.t()) + b)
    }

    /// Class probabilities from the classifier attached to GNN `gnn_index`.
    pub fn predict_proba(&self, gnn_index: usize, data: &AlignmentData) -> Result<Matrix> {
        let x = match self.config.classifier_input {
            ClassifierInput::Reshaped => self.reshaped(gnn_index, data)?,
            ClassifierInput::Hidden => self.hidden(gnn_index, data)?,
        };
        let p = &self.classifier_for(gnn_index).params;
        let a = x.dot(&p.require("l0.weight")?.t()) + p.require("l0.bias")?;
        let a = a.mapv(|v| v.max(0.0));
        let logits = a.dot(&p.require("l1.weight")?.t()) + p.require("l1.bias")?;
        Ok(softmax_rows(&logits))
    }

    /// Graph-token blocks for every item, one `Vec` per GNN.
    pub fn all_blocks(&self, data: &AlignmentData) -> Result<Vec<Vec<GraphTokenBlock>>> {
        if !self.frozen {
            return Err(Error::State("alignment checkpoint is not frozen".into()));
        }
        let mut per_gnn = Vec::with_capacity(self.gnns.len());
        for k in 0..self.gnns.len() {
            let z = self.reshaped(k, data)?;
            let blocks = z
                .rows()
                .into_iter()
                .map(|row| GraphTokenBlock::from_flat(k, row.as_slice().unwrap(), self.config.t, self.config.e))
                .collect::<Result<Vec<_>>>()?;
            per_gnn.push(blocks);
        }
        Ok(per_gnn)
    }

    /// The `k` graph-token blocks of one node (node data) or one graph
    /// (graph data).
    pub fn extract_graph_tokens(
        &self,
        data: &AlignmentData,
        id: usize,
    ) -> Result<Vec<GraphTokenBlock>> {
        if !self.frozen {
            return Err(Error::State("alignment checkpoint is not frozen".into()));
        }
        if id >= data.len() {
            return Err(Error::UnknownNode(id));
        }
        let mut blocks = Vec::with_capacity(self.gnns.len());
        for k in 0..self.gnns.len() {
            let h = self.hidden(k, data)?;
            let v = self.projector.reshape(h.row(id).as_slice().unwrap(), k)?;
            blocks.push(GraphTokenBlock::from_flat(k, &v, self.config.t, self.config.e)?);
        }
        Ok(blocks)
    }

    /// All frozen tensors under their container names.
    pub fn tensors(&self) -> ParamStore {
        let mut all = ParamStore::new();
        for (i, g) in self.gnns.iter().enumerate() {
            all.extend_prefixed(&gnn_prefix(i), &g.params);
        }
        all.extend_prefixed("proj", &self.projector.params);
        for (c, cls) in self.classifiers.iter().enumerate() {
            all.extend_prefixed(&cls_prefix(c), &cls.params);
        }
        all
    }

    pub fn digest(&self) -> String {
        self.tensors().digest()
    }

    /// The same encoders and heads with every tensor replaced from
    /// `tensors`, named as in [`Self::tensors`].
    pub fn with_tensors(&self, tensors: &ParamStore) -> Result<Self> {
        let mut c = self.to_container();
        c.tensors = tensors.clone();
        Self::from_container(&c)
    }

    /// Cross-entropy of GNN `gnn_index` through its projector and classifier
    /// on the labeled `items`, without dropout, with the gradient of every
    /// tensor on that path (classifier included) keyed as in [`Self::tensors`].
    pub fn loss_and_gradients(
        &self,
        gnn_index: usize,
        data: &AlignmentData,
        items: &[usize],
    ) -> Result<(f64, BTreeMap<String, Matrix>)> {
        self.check_index(gnn_index)?;
        data.check()?;
        let targets = items
            .iter()
            .map(|&i| data.label(i).ok_or_else(|| Error::Label(format!("item {i} has no label"))))
            .collect::<Result<Vec<_>>>()?;
        let state = self.tensors();
        let c = if self.classifiers.len() == 1 { 0 } else { gnn_index };
        let (gp, pp, cp) = (gnn_prefix(gnn_index), proj_prefix(gnn_index), cls_prefix(c));
        let gnn = &self.gnns[gnn_index];
        let mut tape = Tape::new();
        let gb = state.bind_prefixed(&mut tape, &gp, |n| gnn.is_trainable(n));
        let pb = state.bind_prefixed(&mut tape, &pp, |_| true);
        let cb = state.bind_prefixed(&mut tape, &cp, |_| true);
        let (h, rows) = trace_items(&mut tape, gnn, &gb, data, items, None);
        let z = trace_projector(&mut tape, &pb, h);
        let cls_in = match self.config.classifier_input {
            ClassifierInput::Reshaped => z,
            ClassifierInput::Hidden => h,
        };
        let logits = trace_classifier(&mut tape, &cb, cls_in);
        let loss = tape.cross_entropy(logits, &rows, &targets);
        let grads = tape.backward(loss);
        let mut all = gb.gradients_prefixed(&grads, &gp);
        all.extend(pb.gradients_prefixed(&grads, &pp));
        all.extend(cb.gradients_prefixed(&grads, &cp));
        Ok((tape.scalar(loss), all))
    }

    pub fn to_container(&self) -> Checkpoint {
        let meta = Meta {
            gnn_configs: self.gnns.iter().map(|g| g.config.clone()).collect(),
            in_dim: self.gnns[0].in_dim,
            num_classes: self.num_classes,
            config: self.config.clone(),
            frozen: self.frozen,
        };
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config_digest: self.config_digest.clone(),
            seed: self.seed,
            meta: serde_json::to_value(meta).expect("meta serializes"),
            tensors: self.tensors(),
        }
    }

    pub fn from_container(c: &Checkpoint) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected {CHECKPOINT_KIND}, found {}", c.kind)));
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("alignment metadata: {e}")))?;
        let gnns = meta
            .gnn_configs
            .iter()
            .enumerate()
            .map(|(i, gc)| Gnn {
                config: gc.clone(),
                in_dim: meta.in_dim,
                params: c.tensors.strip_prefix(&gnn_prefix(i)),
            })
            .collect::<Vec<_>>();
        let n_cls = if meta.config.shared_classifier { 1 } else { gnns.len() };
        let classifiers = (0..n_cls)
            .map(|i| SharedClassifier {
                params: c.tensors.strip_prefix(&cls_prefix(i)),
                frozen: true,
                freeze_epoch: meta.config.freeze_at(),
            })
            .collect();
        let projector = ReshapeProjector {
            t: meta.config.t,
            e: meta.config.e,
            hidden: meta.gnn_configs.first().map_or(0, |g| g.hidden),
            params: c.tensors.strip_prefix("proj"),
        };
        Ok(Self {
            gnns,
            projector,
            classifiers,
            num_classes: meta.num_classes,
            seed: c.seed,
            config_digest: c.config_digest.clone(),
            frozen: meta.frozen,
            config: meta.config,
            log: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Checkpoint::load(path)?)
    }
}

/// Probe transfer: fit a linear probe on GNN `from`'s projected vectors for
/// the train items and score it on GNN `to`'s vectors for the test items.
pub fn cross_gnn_probe(
    ckpt: &AlignmentCheckpoint,
    data: &AlignmentData,
    split: &SplitAssignment,
    from: usize,
    to: usize,
    probe: &SoftmaxRegressionConfig,
) -> Result<f64> {
    let src = ckpt.reshaped(from, data)?;
    let dst = ckpt.reshaped(to, data)?;
    let train: Vec<usize> = split.train.iter().copied().filter(|&i| data.label(i).is_some()).collect();
    let test: Vec<usize> = split.test.iter().copied().filter(|&i| data.label(i).is_some()).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Split("probe needs labeled train and test items".into()));
    }
    let targets: Vec<usize> = train.iter().map(|&i| data.label(i).unwrap()).collect();
    let model = SoftmaxRegression::fit(&src, &train, &targets, ckpt.num_classes, probe);
    let probs = model.predict_proba(&dst.select(ndarray::Axis(0), &test));
    let correct = test
        .iter()
        .enumerate()
        .filter(|(r, &i)| crate::classify::argmax(probs.row(*r)) == data.label(i).unwrap())
        .count();
    Ok(correct as f64 / test.len() as f64)
}
