//! Next-token pretraining of the base model on plain text.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::graph::rng_for;
use crate::optim::AdamW;
use crate::params::accumulate;
use crate::tape::{Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            weight_decay: 0.01,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Trains every base tensor to predict each next token of `sequences`
/// (token ids, end marker included by the caller). Returns the mean loss of
/// each epoch.
pub fn pretrain(
    model: &mut LanguageModel,
    sequences: &[Vec<usize>],
    config: &PretrainConfig,
) -> Result<Vec<f64>> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let usable: Vec<&Vec<usize>> = sequences
        .iter()
        .filter(|s| s.len() >= 2 && s.len() <= model.config.max_len)
        .collect();
    if usable.is_empty() {
        return Err(Error::Validation("no pretraining sequence of usable length".into()));
    }
    if usable.iter().flat_map(|s| s.iter()).any(|id| model.dummy_ids.contains(id)) {
        return Err(Error::Injection("pretraining text contains graph placeholders".into()));
    }
    let mut opt = AdamW::new(config.weight_decay);
    let mut rng = rng_for(config.seed, 0x9e7);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
            for &i in batch {
                let seq = usable[i];
                let mut tape = Tape::new();
                let base = model.params.bind(&mut tape, |_| true);
                let x = tape.gather_rows(base.var("tok_emb"), &seq[..seq.len() - 1]);
                let tr = model.trace(&mut tape, &base, None, x, None, None);
                let rows: Vec<usize> = (0..seq.len() - 1).collect();
                let loss = tape.cross_entropy(tr.logits, &rows, &seq[1..]);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        context: "base LM pretraining".into(),
                        epoch,
                    });
                }
                total += value;
                let loss = tape.scale(loss, 1.0 / batch.len() as f64);
                accumulate(&mut grads, base.gradients(&tape.backward(loss)));
            }
            opt.step(&mut model.params, &grads, config.lr, |_| 1.0);
        }
        history.push(total / usable.len() as f64);
    }
    Ok(history)
}
