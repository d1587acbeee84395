//! Desk-scale decoder-only transformer: embedding lookup with graph-token
//! injection, causal forward pass, greedy decoding and label parsing.

mod lora;
mod pretrain;
mod vocab;

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gnn::dropout;
use crate::graph::rng_for;
use crate::params::{gaussian, glorot, Bound, ParamStore};
use crate::tape::{Matrix, Tape, Var};

pub use lora::{
    all_linear_targets, attach_lora, default_lora_targets, merge_lora, trainable_fraction,
    LoraAdapters, LoraConfig, LORA_CHECKPOINT_KIND,
};
pub use pretrain::{pretrain, PretrainConfig};
pub use vocab::{placeholder, split_words, SpecialManifest, Vocabulary, END, PAD, UNK};

/// The `t` graph-token vectors (`t × e`) contributed by one GNN.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTokenBlock {
    pub gnn_index: usize,
    pub vectors: Matrix,
}

impl GraphTokenBlock {
    pub fn new(gnn_index: usize, vectors: Matrix) -> Result<Self> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("graph tokens of GNN {gnn_index}")));
        }
        Ok(Self { gnn_index, vectors })
    }

    /// Rows are consecutive length-`e` segments of `flat`.
    pub fn from_flat(gnn_index: usize, flat: &[f64], t: usize, e: usize) -> Result<Self> {
        if t == 0 || e == 0 || flat.len() != t * e {
            return Err(Error::Dimension(format!(
                "cannot segment length {} into {t} x {e}",
                flat.len()
            )));
        }
        let vectors = Array2::from_shape_vec((t, e), flat.to_vec()).expect("checked length");
        Self::new(gnn_index, vectors)
    }

    pub fn t(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn e(&self) -> usize {
        self.vectors.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub e: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    pub seed: u64,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            e: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_len: 2080,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.e == 0 || self.heads == 0 || self.e % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of the head count {}",
                self.e, self.heads
            )));
        }
        if self.layers == 0 || self.ffn == 0 || self.vocab_size < 3 || self.max_len == 0 {
            return Err(Error::Config("LM needs layers, ffn width, vocabulary and context".into()));
        }
        Ok(())
    }
}

pub const LM_CHECKPOINT_KIND: &str = "lensgnn/lm";

/// Parameters of the base model.
///
/// Tensor names: `tok_emb`, `pos_emb`, `layer{l}.ln1.{gamma,beta}`,
/// `layer{l}.attn.{q,k,v,o}.weight`, `layer{l}.ln2.{gamma,beta}`,
/// `layer{l}.ffn.{up,down}.{weight,bias}`, `ln_f.{gamma,beta}`, `head.weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
    /// Rows of `tok_emb` reserved for graph placeholders; kept at zero.
    pub dummy_ids: std::ops::Range<usize>,
}

impl LanguageModel {
    pub fn init(config: LmConfig, vocab: &Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "LM vocabulary size {} differs from the vocabulary ({})",
                config.vocab_size,
                vocab.len()
            )));
        }
        let mut rng = rng_for(config.seed, 0x1a);
        let (e, v) = (config.e, config.vocab_size);
        let mut p = ParamStore::new();
        let mut tok = gaussian(&mut rng, v, e, 0.1);
        let dummy = 3..vocab.num_special();
        for id in dummy.clone() {
            tok.row_mut(id).fill(0.0);
        }
        p.insert("tok_emb", tok);
        p.insert("pos_emb", gaussian(&mut rng, config.max_len, e, 0.02));
        for l in 0..config.layers {
            for ln in ["ln1", "ln2"] {
                p.insert(format!("layer{l}.{ln}.gamma"), Matrix::ones((1, e)));
                p.insert(format!("layer{l}.{ln}.beta"), Matrix::zeros((1, e)));
            }
            for m in ["q", "k", "v", "o"] {
                p.insert(format!("layer{l}.attn.{m}.weight"), glorot(&mut rng, e, e));
            }
            p.insert(format!("layer{l}.ffn.up.weight"), glorot(&mut rng, config.ffn, e));
            p.insert(format!("layer{l}.ffn.up.bias"), Matrix::zeros((1, config.ffn)));
            p.insert(format!("layer{l}.ffn.down.weight"), glorot(&mut rng, e, config.ffn));
            p.insert(format!("layer{l}.ffn.down.bias"), Matrix::zeros((1, e)));
        }
        p.insert("ln_f.gamma", Matrix::ones((1, e)));
        p.insert("ln_f.beta", Matrix::zeros((1, e)));
        p.insert("head.weight", glorot(&mut rng, v, e));
        Ok(Self {
            config,
            params: p,
            dummy_ids: dummy,
        })
    }

    pub fn e(&self) -> usize {
        self.config.e
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Plain table lookup of `ids`.
    pub fn lookup(&self, ids: &[usize]) -> Result<Matrix> {
        let table = self.params.require("tok_emb")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.nrows()) {
            return Err(Error::Dimension(format!("token id {bad} outside the vocabulary")));
        }
        Ok(table.select(Axis(0), ids))
    }

    /// Causal forward pass on the tape. `x` holds the `len × e` token
    /// embeddings; positional embeddings are added here. With `head_rows`
    /// the output projection is applied only to those positions. A `None`
    /// rng means evaluation mode (no adapter dropout).
    pub fn trace(
        &self,
        tape: &mut Tape,
        base: &Bound,
        adapters: Option<(&LoraAdapters, &Bound)>,
        x: Var,
        head_rows: Option<&[usize]>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> LmTrace {
        let (n, _) = tape.shape(x);
        let c = &self.config;
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather_rows(base.var("pos_emb"), &positions);
        let mut h = tape.add(x, pos);
        let mask = Rc::new(Array2::from_shape_fn((n, n), |(i, j)| j <= i));
        let hd = c.e / c.heads;
        let inv = 1.0 / (hd as f64).sqrt();
        let mut layer_outputs = Vec::with_capacity(c.layers);
        let proj = |tape: &mut Tape, name: &str, x: Var, rng: &mut Option<&mut dyn RngCore>| {
            let mut y = tape.linear(x, base.var(name));
            if let Some((ad, ab)) = adapters {
                if let Some(a) = ab.try_var(&format!("{name}.a")) {
                    let b = ab.var(&format!("{name}.b"));
                    let xin = match rng.as_deref_mut() {
                        Some(r) => dropout(tape, x, ad.dropout, r),
                        None => x,
                    };
                    let low = tape.linear(xin, a);
                    let delta = tape.linear(low, b);
                    let delta = tape.scale(delta, ad.scale());
                    y = tape.add(y, delta);
                }
            }
            y
        };
        for l in 0..c.layers {
            let a = tape.layer_norm(
                h,
                base.var(&format!("layer{l}.ln1.gamma")),
                base.var(&format!("layer{l}.ln1.beta")),
            );
            let q = proj(tape, &format!("layer{l}.attn.q.weight"), a, &mut rng);
            let k = proj(tape, &format!("layer{l}.attn.k.weight"), a, &mut rng);
            let v = proj(tape, &format!("layer{l}.attn.v.weight"), a, &mut rng);
            let mut heads = Vec::with_capacity(c.heads);
            for i in 0..c.heads {
                let qh = tape.slice_cols(q, i * hd, (i + 1) * hd);
                let kh = tape.slice_cols(k, i * hd, (i + 1) * hd);
                let vh = tape.slice_cols(v, i * hd, (i + 1) * hd);
                let kt = tape.transpose(kh);
                let s = tape.matmul(qh, kt);
                let s = tape.scale(s, inv);
                let p = tape.masked_softmax(s, mask.clone());
                heads.push(tape.matmul(p, vh));
            }
            let cat = tape.concat_cols(&heads);
            let o = proj(tape, &format!("layer{l}.attn.o.weight"), cat, &mut rng);
            h = tape.add(h, o);
            let f = tape.layer_norm(
                h,
                base.var(&format!("layer{l}.ln2.gamma")),
                base.var(&format!("layer{l}.ln2.beta")),
            );
            let up = proj(tape, &format!("layer{l}.ffn.up.weight"), f, &mut rng);
            let up = tape.add_row(up, base.var(&format!("layer{l}.ffn.up.bias")));
            let up = tape.gelu(up);
            let down = proj(tape, &format!("layer{l}.ffn.down.weight"), up, &mut rng);
            let down = tape.add_row(down, base.var(&format!("layer{l}.ffn.down.bias")));
            h = tape.add(h, down);
            layer_outputs.push(h);
        }
        let h = tape.layer_norm(h, base.var("ln_f.gamma"), base.var("ln_f.beta"));
        let h = match head_rows {
            Some(rows) => tape.gather_rows(h, rows),
            None => h,
        };
        let logits = proj(tape, "head.weight", h, &mut rng);
        LmTrace {
            logits,
            layer_outputs,
        }
    }

    pub fn to_container(&self) -> Checkpoint {
        Checkpoint {
            kind: LM_CHECKPOINT_KIND.into(),
            config_digest: crate::checkpoint::json_digest(&self.config),
            seed: self.config.seed,
            meta: serde_json::json!({
                "config": self.config,
                "dummy_ids": [self.dummy_ids.start, self.dummy_ids.end],
            }),
            tensors: self.params.clone(),
        }
    }

    pub fn from_container(c: &Checkpoint) -> Result<Self> {
        if c.kind != LM_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected {LM_CHECKPOINT_KIND}, found {}",
                c.kind
            )));
        }
        let config: LmConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("LM config: {e}")))?;
        let range: [usize; 2] = serde_json::from_value(c.meta["dummy_ids"].clone())
            .map_err(|e| Error::Checkpoint(format!("LM dummy ids: {e}")))?;
        Ok(Self {
            config,
            params: c.tensors.clone(),
            dummy_ids: range[0]..range[1],
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Checkpoint::load(path)?)
    }
}

pub struct LmTrace {
    pub logits: Var,
    /// Residual stream after each block.
    pub layer_outputs: Vec<Var>,
}

/// Token embeddings for `ids` with graph-token rows written over the
/// placeholder positions.
///
/// `positions` lists placeholder positions in block order: the first
/// `blocks[0].t()` entries take `blocks[0]`'s rows, and so on. Positions must
/// be strictly increasing, must point at placeholder ids, and must cover
/// every placeholder in `ids`.
pub fn embed_with_injection(
    model: &LanguageModel,
    vocab: &Vocabulary,
    ids: &[usize],
    blocks: &[GraphTokenBlock],
    positions: &[usize],
) -> Result<Matrix> {
    let needed: usize = blocks.iter().map(|b| b.t()).sum();
    if needed != positions.len() {
        return Err(Error::Injection(format!(
            "{} positions for {needed} graph-token vectors",
            positions.len()
        )));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Injection("positions must be strictly increasing".into()));
    }
    if let Some(&p) = positions.last() {
        if p >= ids.len() {
            return Err(Error::Injection(format!(
                "position {p} beyond sequence of {}",
                ids.len()
            )));
        }
    }
    if let Some(b) = blocks.iter().find(|b| b.e() != model.e()) {
        return Err(Error::Injection(format!(
            "block width {} differs from LM width {}",
            b.e(),
            model.e()
        )));
    }
    for &p in positions {
        if !vocab.is_dummy(ids[p]) {
            return Err(Error::Injection(format!("position {p} is not a placeholder")));
        }
    }
    let covered: std::collections::HashSet<usize> = positions.iter().copied().collect();
    if let Some(p) = (0..ids.len()).find(|p| vocab.is_dummy(ids[*p]) && !covered.contains(p)) {
        return Err(Error::Injection(format!(
            "placeholder at position {p} reached the LM without injection"
        )));
    }
    let mut out = model.lookup(ids)?;
    let vectors = blocks.iter().flat_map(|b| b.vectors.rows());
    for (&p, v) in positions.iter().zip(vectors) {
        out.row_mut(p).assign(&v);
    }
    Ok(out)
}

/// Logits (`len × V`) for pre-embedded input. `rng = None` is evaluation mode.
pub fn lm_forward(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    embedded: &Matrix,
    rng: Option<&mut dyn RngCore>,
) -> Result<Matrix> {
    if embedded.ncols() != model.e() {
        return Err(Error::Dimension(format!(
            "embedded width {} differs from LM width {}",
            embedded.ncols(),
            model.e()
        )));
    }
    if embedded.nrows() == 0 || embedded.nrows() > model.config.max_len {
        return Err(Error::Dimension(format!(
            "sequence length {} outside 1..={}",
            embedded.nrows(),
            model.config.max_len
        )));
    }
    if adapters.is_some_and(|a| a.is_merged()) {
        return Err(Error::State("adapters were merged into the base weights".into()));
    }
    let mut tape = Tape::new();
    let base = model.params.bind(&mut tape, |_| false);
    let ab = adapters.map(|a| a.params.bind(&mut tape, |_| false));
    let x = tape.constant(embedded.clone());
    let tr = model.trace(
        &mut tape,
        &base,
        adapters.zip(ab.as_ref()),
        x,
        None,
        rng,
    );
    for (l, v) in tr.layer_outputs.iter().enumerate() {
        if tape.value(*v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("LM layer {l} activation")));
        }
    }
    let logits = tape.value(tr.logits).clone();
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("LM output logits".into()));
    }
    Ok(logits)
}

/// Greedy continuation ids, stopping after the end token (excluded from the
/// result) or `max_new` tokens. Special ids other than end are never emitted.
pub fn generate_ids(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    vocab: &Vocabulary,
    ids: &[usize],
    blocks: &[GraphTokenBlock],
    positions: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    let mut seq = ids.to_vec();
    let mut out = Vec::new();
    let mut embedded = embed_with_injection(model, vocab, ids, blocks, positions)?;
    for _ in 0..max_new {
        if seq.len() >= model.config.max_len {
            break;
        }
        let logits = lm_forward(model, adapters, &embedded, None)?;
        let last = logits.row(logits.nrows() - 1);
        let mut best = vocab.end();
        for (i, &v) in last.iter().enumerate() {
            if (i == vocab.end() || !vocab.is_special(i)) && v > last[best] {
                best = i;
            }
        }
        if best == vocab.end() {
            break;
        }
        out.push(best);
        seq.push(best);
        let row = model.lookup(&[best])?;
        embedded.push_row(row.row(0)).expect("same width");
    }
    Ok(out)
}

pub fn generate(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    vocab: &Vocabulary,
    ids: &[usize],
    blocks: &[GraphTokenBlock],
    positions: &[usize],
    max_new: usize,
) -> Result<String> {
    let out = generate_ids(model, adapters, vocab, ids, blocks, positions, max_new)?;
    Ok(vocab.detokenize(&out))
}

/// Generated text that maps to no class, or to several.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseFailure {
    pub text: String,
    pub candidates: Vec<String>,
}

impl std::fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.candidates.is_empty() {
            write!(f, "no class matches {:?}", self.text)
        } else {
            write!(f, "{:?} is ambiguous between {}", self.text, self.candidates.join(", "))
        }
    }
}

fn normalize_label(s: &str) -> String {
    s.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact match first, otherwise a unique case-insensitive substring match
/// (underscores and hyphens count as spaces).
pub fn parse_label(generated: &str, class_names: &[String]) -> std::result::Result<usize, ParseFailure> {
    let trimmed = generated.trim();
    if let Some(i) = class_names.iter().position(|c| c == trimmed) {
        return Ok(i);
    }
    let text = format!(" {} ", normalize_label(generated));
    let hits: Vec<usize> = class_names
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            let n = normalize_label(c);
            !n.is_empty() && text.contains(&format!(" {n} "))
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [one] => Ok(*one),
        _ => Err(ParseFailure {
            text: generated.to_string(),
            candidates: hits.iter().map(|&i| class_names[i].clone()).collect(),
        }),
    }
}
