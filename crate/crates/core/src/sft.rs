//! Stage 2: LoRA fine-tuning of the LM on prompts carrying injected graph
//! tokens.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{rng_for, sample_neighbors, TextAttributedGraph};
use crate::lm::{
    attach_lora, default_lora_targets, embed_with_injection, generate, parse_label, GraphTokenBlock,
    LanguageModel, LoraAdapters, LoraConfig, Vocabulary,
};
use crate::optim::AdamW;
use crate::prompt::{
    build_prompt, build_prompt_from_parts, enforce_budget, render_training_pair, PromptOptions,
    PromptSpec, PromptTemplate, TrainingPair,
};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub lr: f64,
    pub lora_r: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    /// Learning-rate multiplier for the `B` factors.
    pub loraplus_ratio: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_ratio: f64,
    pub max_tokens: usize,
    /// Weight names that receive adapters; empty means query and value
    /// projections of every block.
    pub lora_targets: Vec<String>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lora_r: 4,
            lora_alpha: 8.0,
            lora_dropout: 0.0,
            loraplus_ratio: 16.0,
            batch_size: 4,
            max_epochs: 10,
            patience: 3,
            warmup_ratio: 0.1,
            max_tokens: crate::prompt::DEFAULT_MAX_TOKENS,
            lora_targets: Vec::new(),
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("warmup_ratio must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lora_r == 0 {
            return Err(Error::Config("lora_r must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.loraplus_ratio > 0.0) {
            return Err(Error::Config("lr and loraplus_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Reads a flat `key = value` file whose keys mirror the fields.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&raw).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            r: self.lora_r,
            alpha: self.lora_alpha,
            dropout: self.lora_dropout,
            seed: self.seed,
        }
    }
}

/// Linear warmup over `⌈ratio·total⌉` steps, then cosine decay to zero.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let step = step.min(total_steps);
    let warm = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warm {
        return Ok(base_lr * step as f64 / warm as f64);
    }
    let span = (total_steps - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// A prompt, its graph tokens in prompt order, and the supervised pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SftSample {
    pub item: usize,
    pub label: usize,
    pub spec: PromptSpec,
    pub blocks: Vec<GraphTokenBlock>,
    pub pair: TrainingPair,
}

impl SftSample {
    pub fn injection_count(&self) -> usize {
        self.blocks.iter().map(|b| b.t()).sum()
    }
}

/// Everything needed to render prompts for one dataset.
pub struct PromptContext<'a> {
    pub template: &'a PromptTemplate,
    pub vocab: &'a Vocabulary,
    pub gnn_labels: &'a [String],
    pub t: usize,
    pub options: PromptOptions,
    pub max_tokens: usize,
    pub neighbor_cap: usize,
}

fn finish_sample(
    ctx: &PromptContext,
    item: usize,
    label: usize,
    class_names: &[String],
    spec: PromptSpec,
    blocks: &[GraphTokenBlock],
) -> Result<SftSample> {
    let name = &class_names[label];
    let spec = enforce_budget(&spec.with_target(name, ctx.vocab), ctx.max_tokens)?;
    let pair = render_training_pair(&spec, name, class_names, ctx.vocab)?;
    Ok(SftSample {
        item,
        label,
        blocks: spec.order_blocks(blocks)?,
        spec,
        pair,
    })
}

/// One sample per labeled node in `items`. `blocks[k][node]` holds GNN `k`'s
/// tokens for `node`; it may be empty when `gnn_labels` is.
pub fn build_sft_dataset(
    graph: &TextAttributedGraph,
    items: &[usize],
    blocks: &[Vec<GraphTokenBlock>],
    ctx: &PromptContext,
) -> Result<Vec<SftSample>> {
    if blocks.len() != ctx.gnn_labels.len() {
        return Err(Error::Injection(format!(
            "{} token sets for {} GNN labels",
            blocks.len(),
            ctx.gnn_labels.len()
        )));
    }
    let mut out = Vec::with_capacity(items.len());
    for &node in items {
        let Some(label) = graph.node(node)?.label else {
            continue;
        };
        let sample = sample_neighbors(graph, node, ctx.neighbor_cap, ctx.options.seed)?;
        let opts = PromptOptions {
            seed: crate::graph::mix_seed(ctx.options.seed, node as u64),
            ..ctx.options
        };
        let spec = build_prompt(ctx.template, graph, node, &sample, ctx.gnn_labels, ctx.t, ctx.vocab, &opts)?;
        let node_blocks: Vec<GraphTokenBlock> = blocks.iter().map(|b| b[node].clone()).collect();
        out.push(finish_sample(ctx, node, label, graph.class_names(), spec, &node_blocks)?);
    }
    Ok(out)
}

/// Graph-classification variant: one sample per labeled graph in `items`,
/// prompted with the graph's description.
pub fn build_graph_sft_dataset(
    data: &crate::graph::GraphDataset,
    items: &[usize],
    blocks: &[Vec<GraphTokenBlock>],
    ctx: &PromptContext,
) -> Result<Vec<SftSample>> {
    let mut out = Vec::with_capacity(items.len());
    for &i in items {
        let rec = data
            .graphs
            .get(i)
            .ok_or(Error::UnknownNode(i))?;
        let Some(label) = rec.label else { continue };
        let spec = build_prompt_from_parts(
            ctx.template,
            &rec.text,
            &[],
            ctx.gnn_labels,
            ctx.t,
            &data.class_names,
            ctx.vocab,
            &ctx.options,
        )?;
        let gb: Vec<GraphTokenBlock> = blocks.iter().map(|b| b[i].clone()).collect();
        out.push(finish_sample(ctx, i, label, &data.class_names, spec, &gb)?);
    }
    Ok(out)
}

/// Loss over the masked target tokens of `pair`, given the embedded full
/// sequence `x` (`input ++ target` rows).
pub fn trace_sft_loss(
    tape: &mut Tape,
    model: &LanguageModel,
    base: &crate::params::Bound,
    adapters: Option<(&LoraAdapters, &crate::params::Bound)>,
    x: Var,
    pair: &TrainingPair,
    rng: Option<&mut dyn rand::RngCore>,
) -> Var {
    let seq = pair.sequence();
    let rows: Vec<usize> = (0..seq.len() - 1).filter(|&p| pair.loss_mask[p + 1] == 1).collect();
    let targets: Vec<usize> = rows.iter().map(|&p| seq[p + 1]).collect();
    let tr = model.trace(tape, base, adapters, x, Some(&rows), rng);
    let local: Vec<usize> = (0..rows.len()).collect();
    tape.cross_entropy(tr.logits, &local, &targets)
}

fn embed_sample(model: &LanguageModel, vocab: &Vocabulary, s: &SftSample) -> Result<crate::tape::Matrix> {
    embed_with_injection(model, vocab, &s.pair.sequence(), &s.blocks, &s.spec.positions())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub base_digest_before: String,
    pub base_digest_after: String,
}

impl TrainingLog {
    /// One JSON record per line: steps first, then epochs.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for s in &self.steps {
            let line = serde_json::json!({"kind": "step", "step": s.step, "epoch": s.epoch, "loss": s.loss, "lr": s.lr});
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        for e in &self.epochs {
            let line = serde_json::json!({"kind": "epoch", "epoch": e.epoch, "train_loss": e.train_loss, "val_accuracy": e.val_accuracy});
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Epoch at which training halts: the first epoch that is `patience` epochs
/// past the best validation accuracy so far, else the last epoch.
pub fn early_stop_epoch(val_accuracy: &[f64], patience: usize) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for (e, &a) in val_accuracy.iter().enumerate() {
        if a > best {
            best = a;
            best_epoch = e;
        } else if e - best_epoch >= patience {
            return e;
        }
    }
    val_accuracy.len().saturating_sub(1)
}

/// Greedy label predictions; `None` marks a parse failure.
pub fn predict(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    vocab: &Vocabulary,
    samples: &[SftSample],
    class_names: &[String],
) -> Result<Vec<Option<usize>>> {
    let max_new = class_names
        .iter()
        .map(|c| vocab.tokenize(c).len())
        .max()
        .unwrap_or(1)
        + 1;
    samples
        .iter()
        .map(|s| {
            let out = generate(model, adapters, vocab, &s.spec.tokens, &s.blocks, &s.spec.positions(), max_new)?;
            Ok(parse_label(&out, class_names).ok())
        })
        .collect()
}

fn accuracy_of(pred: &[Option<usize>], samples: &[SftSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(samples).filter(|(p, s)| **p == Some(s.label)).count();
    hits as f64 / samples.len() as f64
}

/// Fits fresh adapters on `train`, keeping the ones with the best
/// validation accuracy. The base model is only read.
pub fn finetune(
    model: &LanguageModel,
    vocab: &Vocabulary,
    train: &[SftSample],
    validation: &[SftSample],
    class_names: &[String],
    config: &SftConfig,
) -> Result<(LoraAdapters, TrainingLog)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Split("no training samples for fine-tuning".into()));
    }
    let targets = if config.lora_targets.is_empty() {
        default_lora_targets(&model.config)
    } else {
        config.lora_targets.clone()
    };
    let mut adapters = attach_lora(model, &targets, &config.lora())?;
    let embedded: Vec<_> = train
        .iter()
        .map(|s| embed_sample(model, vocab, s))
        .collect::<Result<_>>()?;
    let mut log = TrainingLog {
        base_digest_before: model.digest(),
        ..Default::default()
    };
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.max_epochs;
    let mut opt = AdamW::new(0.0);
    let mut rng = rng_for(config.seed, 0x5f7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, LoraAdapters)> = None;
    let mut val_history = Vec::new();
    let mut step = 0;
    let ratio = config.loraplus_ratio;
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let lr = lr_schedule(step + 1, total, config.warmup_ratio, config.lr)?;
            let mut grads = std::collections::BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let base = model.params.bind(&mut tape, |_| false);
                let ab = adapters.params.bind(&mut tape, |_| true);
                let x = tape.constant(embedded[i].clone());
                let drop_rng: Option<&mut dyn rand::RngCore> =
                    if adapters.dropout > 0.0 { Some(&mut rng) } else { None };
                let loss = trace_sft_loss(&mut tape, model, &base, Some((&adapters, &ab)), x, &train[i].pair, drop_rng);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        context: format!("fine-tuning step {step}"),
                        epoch,
                    });
                }
                batch_loss += value;
                let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
                crate::params::accumulate(&mut grads, ab.gradients(&tape.backward(scaled)));
            }
            opt.step(&mut adapters.params, &grads, lr, |n| if n.ends_with(".b") { ratio } else { 1.0 });
            let mean = batch_loss / batch.len() as f64;
            log.steps.push(StepRecord { step, epoch, loss: mean, lr });
            epoch_loss += batch_loss;
            step += 1;
        }
        let val_accuracy = if validation.is_empty() {
            None
        } else {
            let pred = predict(model, Some(&adapters), vocab, validation, class_names)?;
            Some(accuracy_of(&pred, validation))
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_accuracy,
        });
        log.stopped_epoch = epoch;
        let score = val_accuracy.unwrap_or(0.0);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, adapters.clone()));
        }
        val_history.push(score);
        if validation.is_empty() {
            continue;
        }
        if early_stop_epoch(&val_history, config.patience) == epoch
            && best.as_ref().is_some_and(|(_, b, _)| epoch - b >= config.patience)
        {
            break;
        }
    }
    let (best_adapters, best_epoch) = match best {
        Some((_, e, a)) if !validation.is_empty() => (a, e),
        _ => (adapters, log.stopped_epoch),
    };
    log.best_epoch = best_epoch;
    log.base_digest_after = model.digest();
    Ok((best_adapters, log))
}

/// Accuracy of greedy predictions on `samples`, plus the parse-failure count.
pub fn evaluate(
    model: &LanguageModel,
    adapters: Option<&LoraAdapters>,
    vocab: &Vocabulary,
    samples: &[SftSample],
    class_names: &[String],
) -> Result<(f64, usize, Vec<Option<usize>>)> {
    let pred = predict(model, adapters, vocab, samples, class_names)?;
    let failures = pred.iter().filter(|p| p.is_none()).count();
    Ok((accuracy_of(&pred, samples), failures, pred))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 0.1, 1.0).unwrap(), 0.0);
        assert_eq!(lr_schedule(10, 100, 0.1, 1.0).unwrap(), 1.0);
        let mid = lr_schedule(55, 100, 0.1, 2.0).unwrap();
        assert!((mid - 2.0 * 0.5 * (1.0 + (std::f64::consts::PI * 45.0 / 90.0).cos())).abs() < 1e-12);
        assert!((mid - 1.0).abs() < 1e-12);
        assert!(lr_schedule(0, 0, 0.1, 1.0).is_err());
        assert!(lr_schedule(100, 100, 0.1, 1.0).unwrap().abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let v = lr_schedule(s, 100, 0.1, 1.0).unwrap();
            assert!(v <= prev + 1e-15);
            prev = v;
        }
        let before = lr_schedule(9, 100, 0.1, 1.0).unwrap();
        let after = lr_schedule(11, 100, 0.1, 1.0).unwrap();
        assert!((before - 1.0).abs() < 0.11 && (after - 1.0).abs() < 0.01);
    }

    #[test]
    fn early_stopping_rule() {
        // best at epoch 1, then three flat epochs: stop at 1 + 2
        assert_eq!(early_stop_epoch(&[0.5, 0.6, 0.6, 0.55, 0.6], 2), 3);
        assert_eq!(early_stop_epoch(&[0.1, 0.2, 0.3], 2), 2);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sft.toml");
        std::fs::write(&p, "lr = 0.002\nlora_r = 8\nloraplus_ratio = 24\nseed = 3\n").unwrap();
        let c = SftConfig::load(&p).unwrap();
        assert_eq!(c.lora_r, 8);
        assert_eq!(c.max_tokens, 2047);
        std::fs::write(&p, "warmup_ratio = 1.0\n").unwrap();
        assert!(matches!(SftConfig::load(&p), Err(Error::Config(_))));
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(matches!(SftConfig::load(&p), Err(Error::Config(_))));
    }
}
