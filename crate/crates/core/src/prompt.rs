//! Prompt templates, placeholder runs and token budgeting.
//!
//! Template syntax: literal text with named slots `{instruction}`,
//! `{node_text}`, `{neighbors}`, `{classes}`, `{answer}`, one
//! `{gnn_run:LABEL}` per GNN (or `{gnn_runs}` for all of them in order).
//! Write `{{` and `}}` for literal braces. `{answer}` must close the
//! template; nothing is rendered after it.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rng_for, TextAttributedGraph};
use crate::lm::{placeholder, Vocabulary};

pub const DEFAULT_MAX_TOKENS: usize = 2047;
pub const DEFAULT_NEIGHBOR_CHARS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Node,
    Graph,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Instruction,
    NodeText,
    Neighbors,
    Classes,
    Answer,
    GnnRun(String),
    GnnRuns,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TaskKind,
    pub instruction: String,
    segments: Vec<Segment>,
}

pub const NODE_INSTRUCTION: &str = "Given a node from a text attributed graph , its text , \
the text of its neighbors and graph tokens from several GNN encoders , classify the node .";
pub const GRAPH_INSTRUCTION: &str = "Given a molecular graph , its description and graph \
tokens from several GNN encoders , classify the graph .";

const NODE_BODY: &str = "{instruction}\nNode text : {node_text}\nNeighbors : {neighbors}\n\
{gnn_runs}\nWhich category does it belong to ? Choose from : {classes} .\nAnswer : {answer}";
const GRAPH_BODY: &str = "{instruction}\nGraph : {node_text}\n{gnn_runs}\n\
Which category does the molecule belong to ? Choose from : {classes} .\nAnswer : {answer}";

impl PromptTemplate {
    pub fn parse(kind: TaskKind, instruction: &str, body: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut chars = body.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    lit.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    lit.push('}');
                }
                '}' => return Err(Error::Template("unmatched '}' (write '}}' for a literal)".into())),
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some('{') | None => {
                                return Err(Error::Template(format!("unterminated slot {{{name}")))
                            }
                            Some(ch) => name.push(ch),
                        }
                    }
                    if !lit.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut lit)));
                    }
                    segments.push(match name.as_str() {
                        "instruction" => Segment::Instruction,
                        "node_text" => Segment::NodeText,
                        "neighbors" => Segment::Neighbors,
                        "classes" => Segment::Classes,
                        "answer" => Segment::Answer,
                        "gnn_runs" => Segment::GnnRuns,
                        other => match other.strip_prefix("gnn_run:") {
                            Some(label) if !label.trim().is_empty() => {
                                Segment::GnnRun(label.trim().to_string())
                            }
                            _ => return Err(Error::Template(format!("unknown slot {{{other}}}"))),
                        },
                    });
                }
                _ => lit.push(c),
            }
        }
        if !lit.is_empty() {
            segments.push(Segment::Literal(lit));
        }
        let t = Self {
            kind,
            instruction: instruction.to_string(),
            segments,
        };
        t.validate()?;
        Ok(t)
    }

    fn count(&self, s: &Segment) -> usize {
        self.segments.iter().filter(|x| *x == s).count()
    }

    fn validate(&self) -> Result<()> {
        for (slot, seg) in [("answer", Segment::Answer), ("classes", Segment::Classes)] {
            match self.count(&seg) {
                0 => return Err(Error::Template(format!("template lacks the {{{slot}}} slot"))),
                1 => {}
                _ => return Err(Error::Template(format!("slot {{{slot}}} appears twice"))),
            }
        }
        for (slot, seg) in [
            ("instruction", Segment::Instruction),
            ("node_text", Segment::NodeText),
            ("neighbors", Segment::Neighbors),
            ("gnn_runs", Segment::GnnRuns),
        ] {
            if self.count(&seg) > 1 {
                return Err(Error::Template(format!("slot {{{slot}}} appears twice")));
            }
        }
        let labels = self.declared_gnns();
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::Template("a GNN run is declared twice".into()));
        }
        if !labels.is_empty() && self.count(&Segment::GnnRuns) > 0 {
            return Err(Error::Template("mix of {gnn_runs} and {gnn_run:...} slots".into()));
        }
        if self.segments.last() != Some(&Segment::Answer) {
            return Err(Error::Template("{answer} must end the template".into()));
        }
        Ok(())
    }

    /// Labels of explicit `{gnn_run:LABEL}` slots, in template order.
    pub fn declared_gnns(&self) -> Vec<String> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::GnnRun(l) => Some(l.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Node => Self::parse(kind, NODE_INSTRUCTION, NODE_BODY),
            TaskKind::Graph => Self::parse(kind, GRAPH_INSTRUCTION, GRAPH_BODY),
        }
        .expect("built-in template is valid")
    }

    /// Reads a template file. A first line of the form `instruction: ...`
    /// overrides the default instruction for `kind`.
    pub fn load(kind: TaskKind, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (instruction, body) = match raw.split_once('\n') {
            Some((first, rest)) if first.starts_with("instruction:") => {
                (first["instruction:".len()..].trim().to_string(), rest.to_string())
            }
            _ => (Self::default_for(kind).instruction, raw),
        };
        Self::parse(kind, &instruction, body.trim_end())
    }

    /// Literal words of the template and instruction, for vocabulary building.
    pub fn literal_text(&self) -> String {
        let mut out = self.instruction.clone();
        for s in &self.segments {
            if let Segment::Literal(l) = s {
                out.push(' ');
                out.push_str(l);
            }
        }
        out.push_str(" GNN type : , representations");
        out
    }
}

/// What the prompt should contain beyond instruction, placeholders and classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub with_text: bool,
    pub with_neighbors: bool,
    /// Characters kept from each neighbor text.
    pub neighbor_chars: usize,
    /// Seed of the neighbor drop order used by budget enforcement.
    pub seed: u64,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            with_text: true,
            with_neighbors: true,
            neighbor_chars: DEFAULT_NEIGHBOR_CHARS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Part {
    Fixed(Vec<usize>, String),
    Neighbor {
        id: usize,
        tokens: Vec<usize>,
        text: String,
    },
}

/// A rendered prompt with its token ids and placeholder positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Placeholder literal and its token position, in increasing position.
    pub dummy_positions: Vec<(String, usize)>,
    /// GNN index of each placeholder run, in prompt order.
    pub run_order: Vec<usize>,
    /// Neighbor ids still present in the prompt.
    pub neighbors: Vec<usize>,
    /// Label text appended for training; counts towards the budget.
    pub target: Option<String>,
    /// Placeholders per GNN run.
    pub t: usize,
    seed: u64,
    parts: Vec<Part>,
    placeholder_ids: Vec<usize>,
    separator: Vec<usize>,
    target_len: usize,
}

impl PromptSpec {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of GNN runs.
    pub fn k(&self) -> usize {
        self.run_order.len()
    }

    /// Prompt tokens plus, when a target is set, its tokens and the end marker.
    pub fn token_count(&self) -> usize {
        self.tokens.len() + if self.target.is_some() { self.target_len + 1 } else { 0 }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.dummy_positions.iter().map(|(_, p)| *p).collect()
    }

    /// `blocks` (indexed by GNN) rearranged into prompt order, ready for
    /// injection at [`PromptSpec::positions`].
    pub fn order_blocks<T: Clone>(&self, blocks: &[T]) -> Result<Vec<T>> {
        if blocks.len() != self.run_order.len() {
            return Err(Error::Injection(format!(
                "{} token blocks for {} GNN runs",
                blocks.len(),
                self.run_order.len()
            )));
        }
        Ok(self.run_order.iter().map(|&k| blocks[k].clone()).collect())
    }

    /// Attaches a training label and records its token length.
    pub fn with_target(mut self, label: &str, vocab: &Vocabulary) -> Self {
        self.target_len = vocab.tokenize(label).len();
        self.target = Some(label.to_string());
        self
    }

    fn assemble(&mut self) {
        self.tokens.clear();
        self.text.clear();
        self.neighbors.clear();
        let mut first = true;
        for part in &self.parts {
            match part {
                Part::Fixed(t, s) => {
                    self.tokens.extend(t);
                    self.text.push_str(s);
                }
                Part::Neighbor { id, tokens, text } => {
                    if !first {
                        self.tokens.extend(&self.separator);
                        self.text.push_str(" | ");
                    }
                    first = false;
                    self.tokens.extend(tokens);
                    self.text.push_str(text);
                    self.neighbors.push(*id);
                }
            }
        }
        let index: HashMap<usize, usize> = self
            .placeholder_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        let mut found = Vec::with_capacity(self.placeholder_ids.len());
        for (p, id) in self.tokens.iter().enumerate() {
            if let Some(&i) = index.get(id) {
                found.push((i, p));
            }
        }
        for (slot, (i, p)) in self.dummy_positions.iter_mut().zip(found) {
            slot.0 = placeholder(i / self.t, i % self.t);
            slot.1 = p;
        }
    }
}

fn clip_chars(text: &str, n: usize) -> &str {
    match text.char_indices().nth(n) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

fn fixed(vocab: &Vocabulary, s: String) -> Part {
    Part::Fixed(vocab.tokenize(&s), s)
}

/// Renders the prompt of one target.
///
/// `node_text` is the target's text (node or whole graph); `neighbors` pairs
/// each sampled neighbor id with its text. `gnn_labels[k]` names GNN `k`;
/// each gets one run of `t` placeholders.
#[allow(clippy::too_many_arguments)]
pub fn build_prompt_from_parts(
    template: &PromptTemplate,
    node_text: &str,
    neighbors: &[(usize, &str)],
    gnn_labels: &[String],
    t: usize,
    class_names: &[String],
    vocab: &Vocabulary,
    options: &PromptOptions,
) -> Result<PromptSpec> {
    let declared = template.declared_gnns();
    if !declared.is_empty() {
        let want: BTreeSet<&String> = gnn_labels.iter().collect();
        let have: BTreeSet<&String> = declared.iter().collect();
        if want != have || gnn_labels.len() != declared.len() {
            return Err(Error::Template(format!(
                "template declares GNN runs {declared:?} but the pipeline has {gnn_labels:?}"
            )));
        }
    }
    if gnn_labels.len() > vocab.k_max() || t > vocab.t_max() || (t == 0 && !gnn_labels.is_empty()) {
        return Err(Error::Template(format!(
            "{} runs of {t} placeholders do not fit the reserved {}x{}",
            gnn_labels.len(),
            vocab.k_max(),
            vocab.t_max()
        )));
    }
    let index: HashMap<&String, usize> = gnn_labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let run = |k: usize| -> String {
        let toks: Vec<String> = (0..t).map(|i| placeholder(k, i)).collect();
        format!("GNN type : {} , representations : {}", gnn_labels[k], toks.join(" "))
    };
    let mut parts = Vec::new();
    let mut run_order = Vec::new();
    for seg in &template.segments {
        match seg {
            Segment::Literal(s) => parts.push(fixed(vocab, s.clone())),
            Segment::Instruction => parts.push(fixed(vocab, template.instruction.clone())),
            Segment::NodeText => {
                let s = if options.with_text { node_text.to_string() } else { String::new() };
                parts.push(fixed(vocab, s));
            }
            Segment::Neighbors => {
                if options.with_text && options.with_neighbors {
                    for &(id, text) in neighbors {
                        let s = clip_chars(text, options.neighbor_chars).to_string();
                        parts.push(Part::Neighbor {
                            id,
                            tokens: vocab.tokenize(&s),
                            text: s,
                        });
                    }
                }
            }
            Segment::Classes => parts.push(fixed(vocab, class_names.join(" , "))),
            Segment::Answer => {}
            Segment::GnnRun(label) => {
                let k = index[label];
                run_order.push(k);
                parts.push(fixed(vocab, run(k)));
            }
            Segment::GnnRuns => {
                let all: Vec<String> = (0..gnn_labels.len()).map(run).collect();
                run_order.extend(0..gnn_labels.len());
                parts.push(fixed(vocab, all.join("\n")));
            }
        }
    }
    if run_order.len() != gnn_labels.len() {
        return Err(Error::Template(format!(
            "template places {} GNN runs but the pipeline has {}",
            run_order.len(),
            gnn_labels.len()
        )));
    }
    let mut placeholder_ids = Vec::new();
    for k in 0..gnn_labels.len() {
        for i in 0..t {
            placeholder_ids.push(vocab.dummy_id(k, i)?);
        }
    }
    let mut spec = PromptSpec {
        text: String::new(),
        tokens: Vec::new(),
        dummy_positions: vec![(String::new(), 0); placeholder_ids.len()],
        run_order,
        neighbors: Vec::new(),
        target: None,
        t,
        seed: options.seed,
        parts,
        placeholder_ids,
        separator: vocab.tokenize("|"),
        target_len: 0,
    };
    spec.assemble();
    Ok(spec)
}

/// Prompt for `node_id` of `graph`, with the neighbors of `neighbor_sample`.
#[allow(clippy::too_many_arguments)]
pub fn build_prompt(
    template: &PromptTemplate,
    graph: &TextAttributedGraph,
    node_id: usize,
    neighbor_sample: &[usize],
    gnn_labels: &[String],
    t: usize,
    vocab: &Vocabulary,
    options: &PromptOptions,
) -> Result<PromptSpec> {
    let node = graph.node(node_id)?;
    let neighbors = neighbor_sample
        .iter()
        .map(|&id| graph.node(id).map(|n| (id, n.text.as_str())))
        .collect::<Result<Vec<_>>>()?;
    build_prompt_from_parts(
        template,
        &node.text,
        &neighbors,
        gnn_labels,
        t,
        graph.class_names(),
        vocab,
        options,
    )
}

/// Drops whole neighbors, in a seeded order, until the prompt (with its
/// target, if any) fits `max_tokens`. Everything else is kept.
pub fn enforce_budget(spec: &PromptSpec, max_tokens: usize) -> Result<PromptSpec> {
    if spec.token_count() <= max_tokens {
        return Ok(spec.clone());
    }
    let mut out = spec.clone();
    let mut ids: Vec<usize> = spec
        .parts
        .iter()
        .filter_map(|p| match p {
            Part::Neighbor { id, .. } => Some(*id),
            _ => None,
        })
        .collect();
    ids.sort_unstable();
    ids.shuffle(&mut rng_for(spec.seed, 0xb0d6e7));
    for id in ids {
        if out.token_count() <= max_tokens {
            break;
        }
        if let Some(i) = out
            .parts
            .iter()
            .position(|p| matches!(p, Part::Neighbor { id: n, .. } if *n == id))
        {
            out.parts.remove(i);
            out.assemble();
        }
    }
    if out.token_count() > max_tokens {
        return Err(Error::Budget {
            needed: out.token_count(),
            budget: max_tokens,
        });
    }
    Ok(out)
}

/// One supervised example: `input` is the prompt, `target` the label tokens
/// and end marker, `loss_mask` covers `input ++ target` and is 1 exactly on
/// the target part.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingPair {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub loss_mask: Vec<u8>,
}

impl TrainingPair {
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.input.clone();
        s.extend(&self.target);
        s
    }
}

pub fn render_training_pair(
    spec: &PromptSpec,
    label: &str,
    class_names: &[String],
    vocab: &Vocabulary,
) -> Result<TrainingPair> {
    if !class_names.iter().any(|c| c == label) {
        return Err(Error::Label(label.to_string()));
    }
    let mut target = vocab.tokenize(label);
    target.push(vocab.end());
    let mut loss_mask = vec![0u8; spec.tokens.len()];
    loss_mask.extend(std::iter::repeat_n(1u8, target.len()));
    Ok(TrainingPair {
        input: spec.tokens.clone(),
        target,
        loss_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn setup(texts: &[&str]) -> (TextAttributedGraph, Vocabulary, PromptTemplate) {
        use crate::graph::NodeRecord;
        let nodes = texts
            .iter()
            .enumerate()
            .map(|(id, t)| NodeRecord {
                id,
                text: t.to_string(),
                label: Some(id % 2),
            })
            .collect();
        let edges = (1..texts.len()).map(|i| (0, i)).collect();
        let classes = names(&["Neural_Networks", "Theory"]);
        let g = TextAttributedGraph::new(nodes, edges, false, classes.clone()).unwrap();
        let tpl = PromptTemplate::default_for(TaskKind::Node);
        let mut corpus: Vec<&str> = texts.to_vec();
        let lit = tpl.literal_text();
        corpus.push(&lit);
        let cls = classes.join(" ");
        corpus.push(&cls);
        (g, Vocabulary::build(corpus, 3, 8), tpl)
    }

    #[test]
    fn placeholder_runs() {
        let (g, v, tpl) = setup(&["center node", "left", "right"]);
        let labels = names(&["GCN", "GAT"]);
        let spec = build_prompt(&tpl, &g, 0, &[1, 2], &labels, 3, &v, &Default::default()).unwrap();
        assert_eq!(spec.dummy_positions.len(), 6);
        for (name, p) in &spec.dummy_positions {
            assert_eq!(v.id(name), Some(spec.tokens[*p]));
        }
        assert!(spec.positions().windows(2).all(|w| w[0] < w[1]));
        let gcn = spec.text.find("GNN type : GCN").unwrap();
        assert!(gcn < spec.text.find("<gtok_0_0>").unwrap());
        assert!(spec.text.contains("center node") && spec.text.contains("left | right"));
        assert!(spec.text.contains("Neural_Networks , Theory"));
        let lonely = build_prompt(&tpl, &g, 1, &[], &labels, 3, &v, &Default::default()).unwrap();
        assert!(lonely.text.contains("Neighbors : \n"));
        assert_eq!(lonely.dummy_positions.len(), 6);
    }

    #[test]
    fn template_errors_and_escapes() {
        assert!(matches!(
            PromptTemplate::parse(TaskKind::Node, "", "{node_text} {answer}"),
            Err(Error::Template(_))
        ));
        assert!(PromptTemplate::parse(TaskKind::Node, "", "{classes} {bogus} {answer}").is_err());
        assert!(PromptTemplate::parse(TaskKind::Node, "", "{classes} {answer} tail").is_err());
        let dup = "{gnn_run:GCN} {gnn_run:GCN} {classes} {answer}";
        assert!(PromptTemplate::parse(TaskKind::Node, "", dup).is_err());
        let t = PromptTemplate::parse(TaskKind::Node, "", "{{x}} {classes} {answer}").unwrap();
        assert!(t.literal_text().contains("{x}"));
        let (g, v, _) = setup(&["a", "b"]);
        let explicit =
            PromptTemplate::parse(TaskKind::Node, "", "{gnn_run:GAT} {gnn_run:GCN} {classes} {answer}")
                .unwrap();
        let labels = names(&["GCN", "GAT"]);
        let spec = build_prompt(&explicit, &g, 0, &[], &labels, 2, &v, &Default::default()).unwrap();
        assert_eq!(spec.run_order, vec![1, 0]);
        assert_eq!(spec.order_blocks(&["gcn", "gat"]).unwrap(), vec!["gat", "gcn"]);
        assert!(build_prompt(&explicit, &g, 0, &[], &labels[..1], 2, &v, &Default::default()).is_err());
    }

    fn long_graph() -> (TextAttributedGraph, Vocabulary, PromptTemplate) {
        let filler = "word ".repeat(140);
        let mut texts = vec!["target text".to_string()];
        for i in 0..20 {
            texts.push(format!("n{i} {filler}"));
        }
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        setup(&refs)
    }

    #[test]
    fn budget_drops_whole_neighbors() {
        let (g, v, tpl) = long_graph();
        let labels = names(&["GCN", "GAT", "GIN"]);
        let sample: Vec<usize> = (1..21).collect();
        let opts = PromptOptions {
            neighbor_chars: 10_000,
            ..Default::default()
        };
        let spec = build_prompt(&tpl, &g, 0, &sample, &labels, 8, &v, &opts).unwrap();
        assert!(spec.len() > 2900);
        let cut = enforce_budget(&spec, DEFAULT_MAX_TOKENS).unwrap();
        assert!(cut.token_count() <= DEFAULT_MAX_TOKENS);
        assert!(cut.neighbors.len() < 20);
        assert_eq!(cut.dummy_positions.len(), 24);
        for (name, p) in &cut.dummy_positions {
            assert_eq!(v.id(name), Some(cut.tokens[*p]));
        }
        assert!(cut.text.contains("target text") && cut.text.contains(NODE_INSTRUCTION));
        assert_eq!(enforce_budget(&cut, DEFAULT_MAX_TOKENS).unwrap(), cut);
        let short = build_prompt(&tpl, &g, 0, &[1], &labels, 8, &v, &Default::default()).unwrap();
        assert_eq!(enforce_budget(&short, DEFAULT_MAX_TOKENS).unwrap(), short);
        assert!(matches!(enforce_budget(&spec, 20), Err(Error::Budget { .. })));
    }

    #[test]
    fn neighbor_text_is_capped() {
        let (g, v, tpl) = long_graph();
        let spec = build_prompt(&tpl, &g, 0, &[1], &[], 0, &v, &Default::default()).unwrap();
        assert!(spec.text.len() < 256 + 600);
        assert!(spec.dummy_positions.is_empty());
    }

    #[test]
    fn training_pairs() {
        let (g, v, tpl) = setup(&["center", "x"]);
        let classes = g.class_names().to_vec();
        let spec = build_prompt(&tpl, &g, 0, &[1], &names(&["GCN"]), 2, &v, &Default::default()).unwrap();
        let a = render_training_pair(&spec, "Neural_Networks", &classes, &v).unwrap();
        let b = render_training_pair(&spec, "Theory", &classes, &v).unwrap();
        assert_eq!(a.input, b.input);
        assert_ne!(a.target, b.target);
        let ones: usize = a.loss_mask.iter().map(|&m| m as usize).sum();
        assert_eq!(ones, v.tokenize("Neural_Networks").len() + 1);
        assert!(a.loss_mask[..a.input.len()].iter().all(|&m| m == 0));
        assert!(matches!(
            render_training_pair(&spec, "Banana", &classes, &v),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn without_text_only_instruction_and_tokens() {
        let (g, v, tpl) = setup(&["center words", "neighbor words"]);
        let opts = PromptOptions {
            with_text: false,
            ..Default::default()
        };
        let spec = build_prompt(&tpl, &g, 0, &[1], &names(&["GCN"]), 2, &v, &opts).unwrap();
        assert!(!spec.text.contains("center") && !spec.text.contains("neighbor words"));
        assert!(spec.neighbors.is_empty());
        let opts = PromptOptions {
            with_neighbors: false,
            ..Default::default()
        };
        let spec = build_prompt(&tpl, &g, 0, &[1], &names(&["GCN"]), 2, &v, &opts).unwrap();
        assert!(spec.text.contains("center") && !spec.text.contains("neighbor words"));
    }
}
