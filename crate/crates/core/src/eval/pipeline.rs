use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, auc, MetricsReport};
use super::synthetic::{synthetic_tag, SyntheticTagConfig};
use crate::alignment::{train_aligned, AlignmentCheckpoint, AlignmentConfig, AlignmentData};
use crate::checkpoint::{json_digest, Checkpoint};
use crate::params::ParamStore;
use crate::tape::Matrix;
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, GnnKind, GraphStructure};
use crate::graph::{
    load_graph_dataset, load_tag, make_graph_split, make_shot_split, make_split, mix_seed, GraphDataset,
    SplitAssignment, TextAttributedGraph, DEFAULT_NEIGHBOR_CAP,
};
use crate::lm::{
    embed_with_injection, generate_ids, lm_forward, pretrain, GraphTokenBlock, LanguageModel, LmConfig,
    LoraAdapters, PretrainConfig, Vocabulary,
};
use crate::prompt::{PromptOptions, PromptTemplate, TaskKind, DEFAULT_NEIGHBOR_CHARS};
use crate::sft::{
    build_graph_sft_dataset, build_sft_dataset, evaluate, finetune, PromptContext, SftConfig, SftSample,
    TrainingLog,
};
use crate::text::{encode_nodes, TextEncoderConfig};

/// Environment variable naming the run directory when neither a flag nor
/// the config sets one.
pub const RUN_DIR_ENV: &str = "LENSGNN_RUN_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file. Absent means the built-in synthetic graph (node task).
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticTagConfig,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Labeled training items per class; overrides the train fraction.
    pub shots: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticTagConfig::default(),
            split: [0.6, 0.2, 0.2],
            shots: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GnnSection {
    /// Encoders in prompt order; empty runs the LM on text alone.
    pub kinds: Vec<GnnKind>,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    pub learn_epsilon: bool,
    pub self_loops: bool,
}

impl Default for GnnSection {
    fn default() -> Self {
        Self {
            kinds: vec![GnnKind::Gcn, GnnKind::Gat, GnnKind::Gin],
            layers: 2,
            hidden: 64,
            heads: 4,
            dropout: 0.0,
            learn_epsilon: true,
            self_loops: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub e: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// Placeholder rows reserved in the vocabulary.
    pub reserve_gnns: usize,
    pub reserve_tokens: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for LmSection {
    fn default() -> Self {
        Self {
            e: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: 2080,
            reserve_gnns: 3,
            reserve_tokens: 16,
            pretrain_epochs: 4,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub template: Option<PathBuf>,
    pub with_text: bool,
    pub with_neighbors: bool,
    pub neighbor_cap: usize,
    pub neighbor_chars: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            template: None,
            with_text: true,
            with_neighbors: true,
            neighbor_cap: DEFAULT_NEIGHBOR_CAP,
            neighbor_chars: DEFAULT_NEIGHBOR_CHARS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub speed_probe: bool,
    pub probe_inferences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            speed_probe: false,
            probe_inferences: 100,
        }
    }
}

/// Everything one end-to-end run needs. Every section may be omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub seed: u64,
    pub task: TaskKind,
    pub run_dir: Option<PathBuf>,
    /// Graph tokens per GNN.
    pub t: usize,
    pub data: DataSection,
    pub text: TextEncoderConfig,
    pub gnn: GnnSection,
    pub alignment: AlignmentConfig,
    pub lm: LmSection,
    pub prompt: PromptSection,
    pub sft: SftConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "lensgnn".into(),
            seed: 0,
            task: TaskKind::Node,
            run_dir: None,
            t: 8,
            data: DataSection::default(),
            text: TextEncoderConfig {
                d: 64,
                ..Default::default()
            },
            gnn: GnnSection::default(),
            alignment: AlignmentConfig {
                epochs: 150,
                gnn_lr: 3e-3,
                batch_size: Some(32),
                ..Default::default()
            },
            lm: LmSection::default(),
            prompt: PromptSection::default(),
            sft: SftConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // relative paths inside the file resolve against its directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.path, &mut cfg.prompt.template].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 && !self.gnn.kinds.is_empty() {
            return Err(Error::Config("t must be at least 1 when GNNs are used".into()));
        }
        if self.gnn.kinds.len() > self.lm.reserve_gnns.max(self.gnn.kinds.len()) {
            return Err(Error::Config("more GNNs than reserved placeholder runs".into()));
        }
        if self.task == TaskKind::Graph && self.data.path.is_none() {
            return Err(Error::Config("graph task needs data.path".into()));
        }
        let s = self.data.split;
        if s.iter().any(|f| !(0.0..=1.0).contains(f)) || s.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config(format!("split fractions {s:?} must lie in [0, 1] and sum to at most 1")));
        }
        self.text.validate()?;
        self.sft.validate()?;
        self.alignment_config().validate()?;
        for g in self.gnn_configs() {
            g.validate()?;
        }
        Ok(())
    }

    /// Digest of every setting that can change results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run_dir = None;
        c.name.clear();
        json_digest(&c)
    }

    pub fn gnn_configs(&self) -> Vec<GnnConfig> {
        self.gnn
            .kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| GnnConfig {
                kind,
                layers: self.gnn.layers,
                hidden: self.gnn.hidden,
                heads: self.gnn.heads,
                epsilon: 0.0,
                learn_epsilon: self.gnn.learn_epsilon,
                dropout: self.gnn.dropout,
                self_loops: self.gnn.self_loops,
                seed: mix_seed(self.seed, 100 + i as u64),
            })
            .collect()
    }

    pub fn alignment_config(&self) -> AlignmentConfig {
        AlignmentConfig {
            t: self.t,
            e: self.lm.e,
            seed: mix_seed(self.seed, 2),
            ..self.alignment.clone()
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: mix_seed(self.seed, 5),
            ..self.sft.clone()
        }
    }

    /// GNN names as they appear in prompts; repeated kinds get a suffix.
    pub fn gnn_labels(&self) -> Vec<String> {
        let mut seen: HashMap<GnnKind, usize> = HashMap::new();
        self.gnn
            .kinds
            .iter()
            .map(|k| {
                let n = seen.entry(*k).or_default();
                *n += 1;
                if *n == 1 {
                    k.label().to_string()
                } else {
                    format!("{}-{}", k.label(), n)
                }
            })
            .collect()
    }

    /// Flag or config value, then the environment, then `runs/<name>`.
    pub fn resolve_run_dir(&self) -> PathBuf {
        self.run_dir
            .clone()
            .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    fn template(&self) -> Result<PromptTemplate> {
        match &self.prompt.template {
            Some(p) => PromptTemplate::load(self.task, p),
            None => Ok(PromptTemplate::default_for(self.task)),
        }
    }

    fn prompt_options(&self) -> PromptOptions {
        PromptOptions {
            with_text: self.prompt.with_text,
            with_neighbors: self.prompt.with_neighbors,
            neighbor_chars: self.prompt.neighbor_chars,
            seed: mix_seed(self.seed, 4),
        }
    }
}

/// Loaded dataset with features and split.
pub enum PreparedData {
    Nodes {
        graph: TextAttributedGraph,
        structure: GraphStructure,
        features: crate::tape::Matrix,
    },
    Graphs {
        data: GraphDataset,
        structures: Vec<GraphStructure>,
        features: Vec<crate::tape::Matrix>,
    },
}

pub struct Prepared {
    pub data: PreparedData,
    pub split: SplitAssignment,
    pub labels: Vec<Option<usize>>,
    pub class_names: Vec<String>,
}

impl Prepared {
    pub fn alignment_data(&self) -> AlignmentData<'_> {
        match &self.data {
            PreparedData::Nodes { structure, features, .. } => AlignmentData::Nodes {
                structure,
                features,
                labels: &self.labels,
            },
            PreparedData::Graphs { structures, features, .. } => AlignmentData::Graphs {
                structures,
                features,
                labels: &self.labels,
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Texts the vocabulary and base model see: node texts, or graph
    /// descriptions plus the texts of their nodes.
    pub fn texts(&self) -> Vec<&str> {
        match &self.data {
            PreparedData::Nodes { graph, .. } => graph.nodes().iter().map(|n| n.text.as_str()).collect(),
            PreparedData::Graphs { data, .. } => data
                .graphs
                .iter()
                .flat_map(|g| std::iter::once(g.text.as_str()).chain(g.graph.nodes().iter().map(|n| n.text.as_str())))
                .collect(),
        }
    }
}

/// Stage `prepare`: load or generate data, split it and encode node text.
pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let fractions = (cfg.data.split[0], cfg.data.split[1], cfg.data.split[2]);
    let split_seed = mix_seed(cfg.seed, 1);
    match cfg.task {
        TaskKind::Node => {
            let graph = match &cfg.data.path {
                Some(p) => load_tag(p)?,
                None => synthetic_tag(&cfg.data.synthetic)?,
            };
            let split = match cfg.data.shots {
                Some(n) => {
                    let rest = fractions.1 + fractions.2;
                    if rest <= 0.0 {
                        return Err(Error::Config("shot splits need validation or test fractions".into()));
                    }
                    make_shot_split(&graph, n, (fractions.1 / rest, fractions.2 / rest), split_seed)?
                }
                None => make_split(&graph, fractions, split_seed)?,
            };
            let features = encode_nodes(&graph, &cfg.text)?.matrix;
            let structure = GraphStructure::from_graph(&graph);
            Ok(Prepared {
                labels: graph.labels(),
                class_names: graph.class_names().to_vec(),
                split,
                data: PreparedData::Nodes {
                    graph,
                    structure,
                    features,
                },
            })
        }
        TaskKind::Graph => {
            let path = cfg.data.path.as_ref().expect("validated");
            let data = load_graph_dataset(path)?;
            let split = make_graph_split(&data, fractions, split_seed)?;
            let mut structures = Vec::with_capacity(data.graphs.len());
            let mut features = Vec::with_capacity(data.graphs.len());
            for g in &data.graphs {
                structures.push(GraphStructure::from_graph(&g.graph));
                features.push(encode_nodes(&g.graph, &cfg.text)?.matrix);
            }
            Ok(Prepared {
                labels: data.graphs.iter().map(|g| g.label).collect(),
                class_names: data.class_names.clone(),
                split,
                data: PreparedData::Graphs {
                    data,
                    structures,
                    features,
                },
            })
        }
    }
}

/// Stage `train-gnns`. `None` when the config uses no GNN.
pub fn train_gnns(cfg: &PipelineConfig, prepared: &Prepared) -> Result<Option<AlignmentCheckpoint>> {
    if cfg.gnn.kinds.is_empty() {
        return Ok(None);
    }
    train_aligned(
        &cfg.gnn_configs(),
        &prepared.alignment_data(),
        prepared.num_classes(),
        &prepared.split,
        &cfg.alignment_config(),
    )
    .map(Some)
}

/// Stage `extract-tokens`: `blocks[k][item]`.
pub fn extract_tokens(ckpt: Option<&AlignmentCheckpoint>, prepared: &Prepared) -> Result<Vec<Vec<GraphTokenBlock>>> {
    match ckpt {
        Some(c) => c.all_blocks(&prepared.alignment_data()),
        None => Ok(Vec::new()),
    }
}

/// Vocabulary over the template, class names, GNN names and dataset text,
/// and a base model pretrained on the dataset text.
pub fn build_base_lm(cfg: &PipelineConfig, prepared: &Prepared) -> Result<(LanguageModel, Vocabulary, Vec<f64>)> {
    let template = cfg.template()?;
    let literal = template.literal_text();
    let names = prepared.class_names.join(" ");
    let gnn_names = "GCN GAT GIN - 2 3 4 |".to_string();
    let labels = cfg.gnn_labels().join(" ");
    let texts = prepared.texts();
    let corpus = texts
        .iter()
        .copied()
        .chain([literal.as_str(), names.as_str(), gnn_names.as_str(), labels.as_str()]);
    let vocab = Vocabulary::build(
        corpus,
        cfg.lm.reserve_gnns.max(cfg.gnn.kinds.len()),
        cfg.lm.reserve_tokens.max(cfg.t),
    );
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        e: cfg.lm.e,
        layers: cfg.lm.layers,
        heads: cfg.lm.heads,
        ffn: cfg.lm.ffn,
        max_len: cfg.lm.max_len,
        seed: mix_seed(cfg.seed, 3),
    };
    let mut model = LanguageModel::init(lm_cfg, &vocab)?;
    let mut sequences: Vec<Vec<usize>> = texts
        .iter()
        .chain([&names.as_str()])
        .map(|t| {
            let mut ids = vocab.tokenize(t);
            ids.push(vocab.end());
            ids
        })
        .collect();
    sequences.retain(|s| s.len() >= 2);
    let history = if cfg.lm.pretrain_epochs > 0 {
        let pcfg = PretrainConfig {
            epochs: cfg.lm.pretrain_epochs,
            lr: cfg.lm.pretrain_lr,
            weight_decay: 0.01,
            batch_size: cfg.lm.pretrain_batch,
            seed: mix_seed(cfg.seed, 6),
        };
        pretrain(&mut model, &sequences, &pcfg)?
    } else {
        Vec::new()
    };
    Ok((model, vocab, history))
}

/// Prompts for the train, validation and test items.
pub struct SftData {
    pub train: Vec<SftSample>,
    pub validation: Vec<SftSample>,
    pub test: Vec<SftSample>,
}

impl SftData {
    pub fn all(&self) -> impl Iterator<Item = &SftSample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

pub fn build_samples(
    cfg: &PipelineConfig,
    prepared: &Prepared,
    vocab: &Vocabulary,
    blocks: &[Vec<GraphTokenBlock>],
) -> Result<SftData> {
    let template = cfg.template()?;
    let labels = cfg.gnn_labels();
    let ctx = PromptContext {
        template: &template,
        vocab,
        gnn_labels: &labels,
        t: cfg.t,
        options: cfg.prompt_options(),
        max_tokens: cfg.sft.max_tokens,
        neighbor_cap: cfg.prompt.neighbor_cap,
    };
    let build = |items: &[usize]| match &prepared.data {
        PreparedData::Nodes { graph, .. } => build_sft_dataset(graph, items, blocks, &ctx),
        PreparedData::Graphs { data, .. } => build_graph_sft_dataset(data, items, blocks, &ctx),
    };
    Ok(SftData {
        train: build(&prepared.split.train)?,
        validation: build(&prepared.split.validation)?,
        test: build(&prepared.split.test)?,
    })
}

/// Class probabilities from the logits of each class name's first token at
/// the answer position, renormalised over the classes.
pub fn label_scores(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    vocab: &Vocabulary,
    sample: &SftSample,
    class_names: &[String],
) -> Result<Vec<f64>> {
    let x = embed_with_injection(model, vocab, &sample.spec.tokens, &sample.blocks, &sample.spec.positions())?;
    let logits = lm_forward(model, adapters, &x, None)?;
    let last = logits.row(logits.nrows() - 1);
    let firsts: Vec<f64> = class_names
        .iter()
        .map(|c| vocab.tokenize(c).first().map_or(f64::NEG_INFINITY, |&id| last[id]))
        .collect();
    let m = firsts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = firsts.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|v| v / z).collect())
}

/// Greedy-generation throughput over at least `min_inferences` prompts,
/// cycling through `samples`.
pub fn speed_probe(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    vocab: &Vocabulary,
    samples: &[SftSample],
    max_new: usize,
    min_inferences: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("speed probe needs at least one sample".into()));
    }
    let n = min_inferences.max(samples.len());
    let start = Instant::now();
    for s in samples.iter().cycle().take(n) {
        generate_ids(model, adapters, vocab, &s.spec.tokens, &s.blocks, &s.spec.positions(), max_new)?;
    }
    Ok(n as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Predictions of one fitted LM on a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub items: Vec<usize>,
    pub labels: Vec<usize>,
    pub predicted: Vec<Option<usize>>,
}

/// Everything a run produced, in memory.
pub struct PipelineOutcome {
    pub report: MetricsReport,
    pub alignment: Option<AlignmentCheckpoint>,
    pub base: LanguageModel,
    pub vocab: Vocabulary,
    pub adapters: LoraAdapters,
    pub log: TrainingLog,
    pub validation: Predictions,
    pub test: Predictions,
    /// Longest prompt (with target and end) emitted for any item.
    pub max_prompt_tokens: usize,
    /// Most neighbor texts in any emitted prompt.
    pub max_prompt_neighbors: usize,
}

/// Stage-1 checkpoints and base models shared between runs whose settings
/// agree.
#[derive(Default)]
pub struct StageCache {
    alignment: HashMap<String, Option<AlignmentCheckpoint>>,
    base: HashMap<String, (LanguageModel, Vocabulary)>,
}

impl StageCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alignment_entries(&self) -> usize {
        self.alignment.len()
    }
}

fn alignment_key(cfg: &PipelineConfig) -> String {
    json_digest(&(
        &cfg.task,
        &cfg.data,
        &cfg.text,
        &cfg.gnn,
        &cfg.alignment_config(),
        cfg.seed,
    ))
}

fn base_key(cfg: &PipelineConfig) -> String {
    json_digest(&(
        &cfg.task,
        &cfg.data.path,
        &cfg.data.synthetic,
        &cfg.lm,
        &cfg.prompt.template,
        cfg.lm.reserve_gnns.max(cfg.gnn.kinds.len()),
        cfg.lm.reserve_tokens.max(cfg.t),
        cfg.seed,
    ))
}

fn predictions_of(
    base: &LanguageModel,
    adapters: &LoraAdapters,
    vocab: &Vocabulary,
    samples: &[SftSample],
    class_names: &[String],
) -> Result<(Predictions, usize)> {
    let (_, failures, pred) = evaluate(base, Some(adapters), vocab, samples, class_names)?;
    Ok((
        Predictions {
            items: samples.iter().map(|s| s.item).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            predicted: pred,
        },
        failures,
    ))
}

/// Result of the `eval` stage.
pub struct Evaluation {
    pub report: MetricsReport,
    pub validation: Predictions,
    pub test: Predictions,
}

/// Stage `eval`: greedy predictions on the validation and test prompts,
/// accuracy, AUC for binary tasks and the optional throughput probe.
/// `wall_clock_secs` covers this stage only.
pub fn evaluate_stage(
    cfg: &PipelineConfig,
    prepared: &Prepared,
    base: &LanguageModel,
    vocab: &Vocabulary,
    adapters: &LoraAdapters,
    data: &SftData,
    alignment_digest: Option<String>,
) -> Result<Evaluation> {
    let start = Instant::now();
    let (test, failures) = predictions_of(base, adapters, vocab, &data.test, &prepared.class_names)?;
    let (validation, _) = predictions_of(base, adapters, vocab, &data.validation, &prepared.class_names)?;
    let acc = accuracy(&test.predicted, &test.labels)?;
    let auc_value = if prepared.num_classes() == 2 {
        let scores = data
            .test
            .iter()
            .map(|s| label_scores(base, Some(adapters), vocab, s, &prepared.class_names).map(|p| p[1]))
            .collect::<Result<Vec<_>>>()?;
        let positive: Vec<bool> = test.labels.iter().map(|&l| l == 1).collect();
        auc(&scores, &positive).ok()
    } else {
        None
    };
    let samples_sec = if cfg.eval.speed_probe {
        let max_new = prepared
            .class_names
            .iter()
            .map(|c| vocab.tokenize(c).len())
            .max()
            .unwrap_or(1)
            + 1;
        Some(speed_probe(base, Some(adapters), vocab, &data.test, max_new, cfg.eval.probe_inferences)?)
    } else {
        None
    };
    let mut checkpoints = std::collections::BTreeMap::new();
    if let Some(d) = alignment_digest {
        checkpoints.insert("alignment".to_string(), d);
    }
    checkpoints.insert("base_lm".to_string(), base.digest());
    checkpoints.insert("lora".to_string(), adapters.to_container(&base.digest()).digest());
    let report = MetricsReport {
        run: cfg.name.clone(),
        accuracy: acc,
        auc: auc_value,
        parse_failures: failures,
        num_eval: test.labels.len(),
        seed: cfg.seed,
        config_digest: cfg.digest(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        samples_sec,
        checkpoints,
    };
    report.validate()?;
    Ok(Evaluation {
        report,
        validation,
        test,
    })
}

pub const TOKENS_CHECKPOINT_KIND: &str = "lensgnn/tokens";

/// Graph tokens as one `items × (t·e)` tensor per GNN, named `gnn{k}`.
pub fn tokens_to_container(blocks: &[Vec<GraphTokenBlock>], alignment_digest: &str) -> Checkpoint {
    let mut tensors = ParamStore::new();
    let (mut t, mut e) = (0, 0);
    for (k, per_item) in blocks.iter().enumerate() {
        if let Some(b) = per_item.first() {
            (t, e) = (b.t(), b.e());
        }
        let m = Matrix::from_shape_fn((per_item.len(), t * e), |(i, j)| per_item[i].vectors[[j / e, j % e]]);
        tensors.insert(format!("gnn{k}"), m);
    }
    Checkpoint {
        kind: TOKENS_CHECKPOINT_KIND.into(),
        config_digest: alignment_digest.to_string(),
        seed: 0,
        meta: serde_json::json!({"k": blocks.len(), "t": t, "e": e}),
        tensors,
    }
}

pub fn tokens_from_container(c: &Checkpoint) -> Result<Vec<Vec<GraphTokenBlock>>> {
    if c.kind != TOKENS_CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!("expected {TOKENS_CHECKPOINT_KIND}, found {}", c.kind)));
    }
    let get = |key: &str| {
        c.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("token metadata lacks {key}")))
    };
    let (k, t, e) = (get("k")?, get("t")?, get("e")?);
    (0..k)
        .map(|g| {
            let m = c.tensors.require(&format!("gnn{g}"))?;
            m.rows()
                .into_iter()
                .map(|row| GraphTokenBlock::from_flat(g, &row.to_vec(), t, e))
                .collect()
        })
        .collect()
}

/// Runs every stage in memory, reusing cached stage-1 and base-model
/// results. Writes artifacts when `out_dir` is set.
pub fn run_with_cache(cfg: &PipelineConfig, cache: &mut StageCache, out_dir: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let prepared = prepare(cfg).map_err(|e| e.in_stage("prepare"))?;
    let akey = alignment_key(cfg);
    let alignment = match cache.alignment.get(&akey) {
        Some(a) => a.clone(),
        None => {
            let a = train_gnns(cfg, &prepared).map_err(|e| e.in_stage("train-gnns"))?;
            cache.alignment.insert(akey, a.clone());
            a
        }
    };
    let blocks = extract_tokens(alignment.as_ref(), &prepared).map_err(|e| e.in_stage("extract-tokens"))?;
    let bkey = base_key(cfg);
    let (base, vocab) = match cache.base.get(&bkey) {
        Some(b) => b.clone(),
        None => {
            let (m, v, _) = build_base_lm(cfg, &prepared).map_err(|e| e.in_stage("train-lm"))?;
            cache.base.insert(bkey, (m.clone(), v.clone()));
            (m, v)
        }
    };
    let data = build_samples(cfg, &prepared, &vocab, &blocks).map_err(|e| e.in_stage("train-lm"))?;
    let sft = cfg.sft_config();
    let (adapters, log) = finetune(&base, &vocab, &data.train, &data.validation, &prepared.class_names, &sft)
        .map_err(|e| e.in_stage("train-lm"))?;
    let ev = evaluate_stage(cfg, &prepared, &base, &vocab, &adapters, &data, alignment.as_ref().map(|a| a.digest()))
        .map_err(|e| e.in_stage("eval"))?;
    let mut report = ev.report;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    let outcome = PipelineOutcome {
        max_prompt_tokens: data.all().map(|s| s.pair.sequence().len()).max().unwrap_or(0),
        max_prompt_neighbors: data.all().map(|s| s.spec.neighbors.len()).max().unwrap_or(0),
        report,
        alignment,
        base,
        vocab,
        adapters,
        log,
        validation: ev.validation,
        test: ev.test,
    };
    if let Some(dir) = out_dir {
        write_artifacts(dir, cfg, &outcome).map_err(|e| e.in_stage("eval"))?;
    }
    Ok(outcome)
}

fn write_artifacts(dir: &Path, cfg: &PipelineConfig, o: &PipelineOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.toml");
    let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    if let Some(a) = &o.alignment {
        a.save(dir.join("alignment.ckpt"))?;
    }
    o.base.save(dir.join("base_lm.ckpt"))?;
    o.vocab.save(dir.join("vocab"))?;
    o.adapters.to_container(&o.base.digest()).save(dir.join("lora.ckpt"))?;
    o.log.write_jsonl(dir.join("sft_log.jsonl"))?;
    let pred_path = dir.join("predictions.jsonl");
    let mut lines = String::new();
    for ((item, label), p) in o.test.items.iter().zip(&o.test.labels).zip(&o.test.predicted) {
        lines.push_str(&serde_json::json!({"item": item, "label": label, "predicted": p}).to_string());
        lines.push('\n');
    }
    std::fs::write(&pred_path, lines).map_err(|e| Error::io(&pred_path, e))?;
    o.report.save(dir.join("report.json"))?;
    o.report.append(dir.join("reports.jsonl"))
}

/// Loads `path` and runs every stage, writing checkpoints, the fine-tuning
/// log and the report under the resolved run directory.
pub fn run_pipeline(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let cfg = PipelineConfig::load(path)?;
    let dir = cfg.resolve_run_dir();
    Ok(run_with_cache(&cfg, &mut StageCache::new(), Some(&dir))?.report)
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub gnns: Vec<GnnKind>,
    pub alignment: bool,
    pub with_text: bool,
    pub with_neighbor: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub gnns: Vec<GnnKind>,
    pub alignment: bool,
    pub with_text: bool,
    pub with_neighbor: bool,
    pub report: MetricsReport,
    /// Most neighbor texts found in any prompt the cell emitted.
    pub max_prompt_neighbors: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    cell: Vec<AblationSpec>,
}

/// Reads `[[cell]]` tables from a TOML file.
pub fn load_grid(path: impl AsRef<Path>) -> Result<Vec<AblationSpec>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let g: GridFile = toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(g.cell)
}

/// The eight ablation rows: text-only, each single GNN, then all three
/// GNNs without text, without alignment, without neighbors, and complete.
pub fn standard_ablation_grid() -> Vec<AblationSpec> {
    use GnnKind::*;
    let row = |gnns: &[GnnKind], alignment, with_text, with_neighbor| AblationSpec {
        gnns: gnns.to_vec(),
        alignment,
        with_text,
        with_neighbor,
    };
    vec![
        row(&[], false, true, true),
        row(&[Gcn], false, true, true),
        row(&[Gat], false, true, true),
        row(&[Gin], false, true, true),
        row(&[Gcn, Gat, Gin], true, false, true),
        row(&[Gcn, Gat, Gin], false, true, true),
        row(&[Gcn, Gat, Gin], true, true, false),
        row(&[Gcn, Gat, Gin], true, true, true),
    ]
}

/// `base` with one ablation row applied.
pub fn apply_ablation(base: &PipelineConfig, spec: &AblationSpec) -> PipelineConfig {
    let mut c = base.clone();
    c.gnn.kinds = spec.gnns.clone();
    c.alignment.shared_classifier = spec.alignment;
    c.prompt.with_text = spec.with_text;
    c.prompt.with_neighbors = spec.with_neighbor;
    c
}

/// One run per grid row with the base seed, sharing stage-1 checkpoints
/// between rows whose GNN subset and alignment flag agree.
pub fn run_ablation(base: &PipelineConfig, grid: &[AblationSpec], out_dir: Option<&Path>) -> Result<Vec<AblationCell>> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    let mut cache = StageCache::new();
    let mut cells = Vec::with_capacity(grid.len());
    for (i, spec) in grid.iter().enumerate() {
        let mut cfg = apply_ablation(base, spec);
        cfg.name = format!("{}-ablation-{i}", base.name);
        let dir = out_dir.map(|d| d.join(format!("cell{i}")));
        let o = run_with_cache(&cfg, &mut cache, dir.as_deref())?;
        cells.push(AblationCell {
            gnns: spec.gnns.clone(),
            alignment: spec.alignment,
            with_text: spec.with_text,
            with_neighbor: spec.with_neighbor,
            report: o.report,
            max_prompt_neighbors: o.max_prompt_neighbors,
        });
    }
    if let Some(d) = out_dir {
        let p = d.join("ablation.jsonl");
        let mut text = String::new();
        for c in &cells {
            text.push_str(&serde_json::to_string(c).expect("cell serializes"));
            text.push('\n');
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t: usize,
    pub report: MetricsReport,
}

/// One full run per graph-token count, all with the base seed.
pub fn sweep_graph_tokens(values: &[usize], base: &PipelineConfig, out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value of t".into()));
    }
    let mut cache = StageCache::new();
    let mut rows = Vec::with_capacity(values.len());
    for &t in values {
        let mut cfg = base.clone();
        cfg.t = t;
        cfg.name = format!("{}-t{t}", base.name);
        let dir = out_dir.map(|d| d.join(format!("t{t}")));
        let o = run_with_cache(&cfg, &mut cache, dir.as_deref())?;
        rows.push(SweepRow { t, report: o.report });
    }
    if let Some(d) = out_dir {
        write_plot_table(&rows, d.join("sweep_t.tsv"))?;
    }
    Ok(rows)
}

/// Tab-separated `t, accuracy, parse_failures, wall_clock_secs`, with a
/// header line.
pub fn write_plot_table(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("t\taccuracy\tparse_failures\twall_clock_secs\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{}\t{:.3}\n",
            r.t, r.report.accuracy, r.report.parse_failures, r.report.wall_clock_secs
        ));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
