use serde::{Deserialize, Serialize};

use super::pipeline::{prepare, PipelineConfig, Predictions, Prepared};
use crate::alignment::train_aligned;
use crate::baselines::{
    adaboost_fit_predict, bagging_fit_predict, mlp_baseline, stack_features, stacking_fit_predict,
    BaseLearnerOutput, MlpConfig,
};
use crate::classify::{SoftmaxRegression, SoftmaxRegressionConfig};
use crate::error::{Error, Result};
use crate::graph::{mix_seed, SplitAssignment};
use crate::tape::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub bags: usize,
    pub rounds: usize,
    pub meta_epochs: usize,
    pub meta_lr: f64,
    pub mlp: MlpConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            bags: 10,
            rounds: 20,
            meta_epochs: 200,
            meta_lr: 0.05,
            mlp: MlpConfig::default(),
        }
    }
}

/// Test accuracies of the non-LM reference methods for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub seed: u64,
    /// Each GNN trained alone with its own classifier.
    pub single_gnns: Vec<(String, f64)>,
    pub mlp: f64,
    pub bagging: f64,
    pub stacking: f64,
    pub adaboost: f64,
}

impl BaselineReport {
    pub fn best_single(&self) -> f64 {
        self.single_gnns.iter().map(|(_, a)| *a).fold(0.0, f64::max)
    }

    pub fn worst_single(&self) -> f64 {
        self.single_gnns.iter().map(|(_, a)| *a).fold(1.0, f64::min)
    }

    pub fn ensembles(&self) -> [(&'static str, f64); 3] {
        [("bagging", self.bagging), ("stacking", self.stacking), ("adaboost", self.adaboost)]
    }
}

/// Class probabilities for every item from each configured GNN trained on
/// its own.
pub fn single_gnn_outputs(cfg: &PipelineConfig, prepared: &Prepared) -> Result<Vec<BaseLearnerOutput>> {
    let labels = cfg.gnn_labels();
    let data = prepared.alignment_data();
    let mut out = Vec::new();
    for (g, name) in cfg.gnn_configs().into_iter().zip(labels) {
        let ckpt = train_aligned(&[g], &data, prepared.num_classes(), &prepared.split, &cfg.alignment_config())?;
        out.push(BaseLearnerOutput::new(name, ckpt.predict_proba(0, &data)?)?);
    }
    Ok(out)
}

/// Bagging, stacking and AdaBoost over `learners`, each scored on the test
/// items.
pub fn ensemble_accuracies(
    learners: &[BaseLearnerOutput],
    labels: &[Option<usize>],
    num_classes: usize,
    split: &SplitAssignment,
    config: &BaselineConfig,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let meta = SoftmaxRegressionConfig {
        epochs: config.meta_epochs,
        lr: config.meta_lr,
        seed: mix_seed(seed, 7),
        ..Default::default()
    };
    let x = stack_features(learners);
    let factory = |rows: &[usize], s: u64| -> Result<Matrix> {
        let targets: Vec<usize> = rows.iter().map(|&r| labels[r].expect("labeled")).collect();
        let m = SoftmaxRegression::fit(&x, rows, &targets, num_classes, &SoftmaxRegressionConfig { seed: s, ..meta.clone() });
        Ok(m.predict_proba(&x))
    };
    let train: Vec<usize> = split.train.iter().copied().filter(|&i| labels[i].is_some()).collect();
    let (bag, _) = bagging_fit_predict(factory, &train, config.bags, true, mix_seed(seed, 8))?;
    let (stack, _) = stacking_fit_predict(learners, labels, num_classes, split, &meta)?;
    let (ada, _, _) = adaboost_fit_predict(learners, labels, num_classes, split, config.rounds)?;
    Ok((
        bag.accuracy(&split.test, labels),
        stack.accuracy(&split.test, labels),
        ada.accuracy(&split.test, labels),
    ))
}

/// Single GNNs, the MLP and the three classical ensemblers over the GNNs'
/// probabilities, all under the pipeline's seed and split.
pub fn run_baselines(cfg: &PipelineConfig, config: &BaselineConfig) -> Result<(BaselineReport, Vec<BaseLearnerOutput>)> {
    if cfg.gnn.kinds.len() < 2 {
        return Err(Error::Config("baselines need at least two GNN kinds".into()));
    }
    let prepared = prepare(cfg).map_err(|e| e.in_stage("prepare"))?;
    let learners = single_gnn_outputs(cfg, &prepared).map_err(|e| e.in_stage("train-gnns"))?;
    let labels = &prepared.labels;
    let split = &prepared.split;
    let mlp = match &prepared.data {
        super::pipeline::PreparedData::Nodes { features, .. } => {
            let mcfg = MlpConfig {
                seed: mix_seed(cfg.seed, 9),
                ..config.mlp.clone()
            };
            mlp_baseline(features, labels, prepared.num_classes(), split, &mcfg)?.accuracy(&split.test, labels)
        }
        super::pipeline::PreparedData::Graphs { .. } => f64::NAN,
    };
    let (bagging, stacking, adaboost) =
        ensemble_accuracies(&learners, labels, prepared.num_classes(), split, config, cfg.seed)?;
    let report = BaselineReport {
        seed: cfg.seed,
        single_gnns: learners.iter().map(|l| (l.name.clone(), l.accuracy(&split.test, labels))).collect(),
        mlp,
        bagging,
        stacking,
        adaboost,
    };
    Ok((report, learners))
}

/// Parsed LM labels as one-hot rows for `n` items; items without a
/// prediction (or with a parse failure) get uniform rows.
pub fn one_hot_predictions(preds: &[&Predictions], n: usize, num_classes: usize) -> Result<BaseLearnerOutput> {
    let mut m = Matrix::from_elem((n, num_classes), 1.0 / num_classes as f64);
    for p in preds {
        for (&item, pred) in p.items.iter().zip(&p.predicted) {
            if let Some(c) = pred {
                m.row_mut(item).fill(0.0);
                m[[item, *c]] = 1.0;
            }
        }
    }
    BaseLearnerOutput::new("LM", m)
}
