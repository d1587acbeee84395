//! Low-rank adapters: `W x` becomes `W x + (α/r)·B·A x` on targeted weights.

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::rng_for;
use crate::params::{gaussian, ParamStore};
use crate::tape::Matrix;

pub const LORA_CHECKPOINT_KIND: &str = "lensgnn/lora";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            r: 4,
            alpha: 8.0,
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Adapter tensors are `{target}.a` (`r × n`) and `{target}.b` (`m × r`).
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub params: ParamStore,
    targets: Vec<String>,
    merged: bool,
}

impl LoraAdapters {
    pub fn empty(config: &LoraConfig) -> Result<Self> {
        if config.r == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        Ok(Self {
            r: config.r,
            alpha: config.alpha,
            dropout: config.dropout,
            params: ParamStore::new(),
            targets: Vec::new(),
            merged: false,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Adds an adapter on `target`: `A` small gaussian, `B` zero.
    pub fn attach(&mut self, model: &LanguageModel, target: &str, seed: u64) -> Result<()> {
        if self.merged {
            return Err(Error::State("cannot attach to merged adapters".into()));
        }
        let w = model
            .params
            .get(target)
            .filter(|_| target.ends_with(".weight"))
            .ok_or_else(|| Error::Config(format!("unknown LoRA target {target:?}")))?;
        if self.targets.iter().any(|t| t == target) {
            return Err(Error::Config(format!("LoRA target {target:?} attached twice")));
        }
        let (m, n) = w.dim();
        let salt = self.targets.len() as u64;
        let mut rng = rng_for(seed, 0x10a0 + salt);
        self.params.insert(
            format!("{target}.a"),
            gaussian(&mut rng, self.r, n, 1.0 / (n as f64).sqrt()),
        );
        self.params.insert(format!("{target}.b"), Matrix::zeros((m, self.r)));
        self.targets.push(target.to_string());
        Ok(())
    }

    /// `(α/r)·B·A` for one target.
    pub fn delta(&self, target: &str) -> Result<Matrix> {
        let a = self.params.require(&format!("{target}.a"))?;
        let b = self.params.require(&format!("{target}.b"))?;
        Ok(b.dot(a) * self.scale())
    }

    pub fn to_container(&self, base_digest: &str) -> Checkpoint {
        Checkpoint {
            kind: LORA_CHECKPOINT_KIND.into(),
            config_digest: base_digest.to_string(),
            seed: 0,
            meta: serde_json::json!({
                "r": self.r,
                "alpha": self.alpha,
                "dropout": self.dropout,
                "targets": self.targets,
                "merged": self.merged,
            }),
            tensors: self.params.clone(),
        }
    }

    pub fn from_container(c: &Checkpoint) -> Result<Self> {
        if c.kind != LORA_CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected {LORA_CHECKPOINT_KIND}, found {}",
                c.kind
            )));
        }
        let field = |k: &str| {
            c.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("adapter metadata lacks {k}")))
        };
        let bad = |e: serde_json::Error| Error::Checkpoint(format!("adapter metadata: {e}"));
        Ok(Self {
            r: serde_json::from_value(field("r")?).map_err(bad)?,
            alpha: serde_json::from_value(field("alpha")?).map_err(bad)?,
            dropout: serde_json::from_value(field("dropout")?).map_err(bad)?,
            targets: serde_json::from_value(field("targets")?).map_err(bad)?,
            merged: serde_json::from_value(field("merged")?).map_err(bad)?,
            params: c.tensors.clone(),
        })
    }
}

/// Attention query and value projections of every block.
pub fn default_lora_targets(config: &LmConfig) -> Vec<String> {
    (0..config.layers)
        .flat_map(|l| ["q", "v"].map(|m| format!("layer{l}.attn.{m}.weight")))
        .collect()
}

/// Every projection matrix in the blocks plus the output head.
pub fn all_linear_targets(config: &LmConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..config.layers)
        .flat_map(|l| {
            [
                "attn.q.weight",
                "attn.k.weight",
                "attn.v.weight",
                "attn.o.weight",
                "ffn.up.weight",
                "ffn.down.weight",
            ]
            .map(|m| format!("layer{l}.{m}"))
        })
        .collect();
    out.push("head.weight".into());
    out
}

pub fn attach_lora(model: &LanguageModel, targets: &[String], config: &LoraConfig) -> Result<LoraAdapters> {
    let mut adapters = LoraAdapters::empty(config)?;
    for t in targets {
        adapters.attach(model, t, config.seed)?;
    }
    Ok(adapters)
}

/// Folds the adapters into a copy of the base weights and marks them merged;
/// a second merge is rejected.
pub fn merge_lora(model: &LanguageModel, adapters: &mut LoraAdapters) -> Result<LanguageModel> {
    if adapters.merged {
        return Err(Error::State("adapters already merged".into()));
    }
    let mut out = model.clone();
    for t in &adapters.targets {
        let d = adapters.delta(t)?;
        let w = out
            .params
            .get_mut(t)
            .ok_or_else(|| Error::Config(format!("unknown LoRA target {t:?}")))?;
        *w += &d;
    }
    adapters.merged = true;
    Ok(out)
}

/// Adapter scalars over base plus adapter scalars.
pub fn trainable_fraction(model: &LanguageModel, adapters: &LoraAdapters) -> f64 {
    let a = adapters.num_scalars() as f64;
    a / (model.num_scalars() as f64 + a)
}
