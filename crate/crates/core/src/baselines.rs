//! MLP baseline and classical ensemblers over per-learner class probabilities.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{softmax_rows, SoftmaxRegression, SoftmaxRegressionConfig};
use crate::error::{Error, Result};
use crate::graph::{rng_for, SplitAssignment};
use crate::optim::AdamW;
use crate::params::{glorot, ParamStore};
use crate::tape::{Matrix, Tape};

/// Class-probability rows of one learner for every item.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLearnerOutput {
    pub name: String,
    pub proba: Matrix,
}

impl BaseLearnerOutput {
    pub fn new(name: impl Into<String>, proba: Matrix) -> Result<Self> {
        for (i, row) in proba.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (row.sum() - 1.0).abs() > 1e-6 {
                return Err(Error::Validation(format!("row {i} is not a probability distribution")));
            }
        }
        Ok(Self {
            name: name.into(),
            proba,
        })
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.proba
            .rows()
            .into_iter()
            .map(crate::classify::argmax)
            .collect()
    }

    /// Fraction of `items` whose argmax equals the label.
    pub fn accuracy(&self, items: &[usize], labels: &[Option<usize>]) -> f64 {
        let pred = self.predictions();
        let scored: Vec<usize> = items.iter().copied().filter(|&i| labels[i].is_some()).collect();
        if scored.is_empty() {
            return 0.0;
        }
        scored.iter().filter(|&&i| Some(pred[i]) == labels[i]).count() as f64 / scored.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleKind {
    Bagging,
    Stacking,
    Adaboost,
}

/// A fitted ensembler: its kind, the learners it combines and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub kind: EnsembleKind,
    pub learners: Vec<String>,
    /// Stacking: flattened meta-learner weights. AdaBoost: per-round α.
    /// Bagging: uniform bag weights.
    pub weights: Vec<f64>,
    pub meta_input_dim: usize,
}

fn labeled(items: &[usize], labels: &[Option<usize>]) -> (Vec<usize>, Vec<usize>) {
    items
        .iter()
        .filter_map(|&i| labels.get(i).copied().flatten().map(|y| (i, y)))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            lr: 0.01,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// Two-layer MLP on node features, trained full-batch on the train split.
pub fn mlp_baseline(
    features: &Matrix,
    labels: &[Option<usize>],
    num_classes: usize,
    split: &SplitAssignment,
    config: &MlpConfig,
) -> Result<BaseLearnerOutput> {
    let (rows, targets) = labeled(&split.train, labels);
    if rows.is_empty() {
        return Err(Error::Split("MLP needs labeled training items".into()));
    }
    let mut rng = rng_for(config.seed, 0x31b);
    let mut p = ParamStore::new();
    p.insert("l0.weight", glorot(&mut rng, config.hidden, features.ncols()));
    p.insert("l0.bias", Matrix::zeros((1, config.hidden)));
    p.insert("l1.weight", glorot(&mut rng, num_classes, config.hidden) * 0.01);
    p.insert("l1.bias", Matrix::zeros((1, num_classes)));
    let mut opt = AdamW::new(config.weight_decay);
    let xs = features.select(Axis(0), &rows);
    let local: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, |_| true);
        let x = tape.constant(xs.clone());
        let h = tape.affine(x, b.var("l0.weight"), b.var("l0.bias"));
        let h = tape.relu(h);
        let logits = tape.affine(h, b.var("l1.weight"), b.var("l1.bias"));
        let loss = tape.cross_entropy(logits, &local, &targets);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Divergence {
                context: "MLP baseline".into(),
                epoch,
            });
        }
        let grads = b.gradients(&tape.backward(loss));
        opt.step(&mut p, &grads, config.lr, |_| 1.0);
    }
    let h = (features.dot(&p.require("l0.weight")?.t()) + p.require("l0.bias")?).mapv(|v| v.max(0.0));
    let logits = h.dot(&p.require("l1.weight")?.t()) + p.require("l1.bias")?;
    BaseLearnerOutput::new("MLP", softmax_rows(&logits))
}

/// Averages `n_bags` learners, each fitted by `factory` on a bootstrap
/// resample (with replacement) of the labeled train items. With
/// `bootstrap = false` every bag sees the train items unchanged.
pub fn bagging_fit_predict<F>(
    factory: F,
    train: &[usize],
    n_bags: usize,
    bootstrap: bool,
    seed: u64,
) -> Result<(BaseLearnerOutput, EnsembleModel)>
where
    F: Fn(&[usize], u64) -> Result<Matrix>,
{
    if n_bags == 0 {
        return Err(Error::Config("bagging needs at least one bag".into()));
    }
    if train.is_empty() {
        return Err(Error::Split("bagging needs training items".into()));
    }
    let mut rng = rng_for(seed, 0xba6);
    let mut sum: Option<Matrix> = None;
    for bag in 0..n_bags {
        let rows: Vec<usize> = if bootstrap {
            (0..train.len()).map(|_| train[rng.random_range(0..train.len())]).collect()
        } else {
            train.to_vec()
        };
        let p = factory(&rows, crate::graph::mix_seed(seed, bag as u64))?;
        sum = Some(match sum {
            None => p,
            Some(s) => s + p,
        });
    }
    let avg = sum.expect("at least one bag") / n_bags as f64;
    let model = EnsembleModel {
        kind: EnsembleKind::Bagging,
        learners: (0..n_bags).map(|b| format!("bag{b}")).collect(),
        weights: vec![1.0 / n_bags as f64; n_bags],
        meta_input_dim: 0,
    };
    Ok((BaseLearnerOutput::new("Bagging", avg)?, model))
}

/// Concatenates probability matrices column-wise (`n × Σ C`).
pub fn stack_features(learners: &[BaseLearnerOutput]) -> Matrix {
    let views: Vec<_> = learners.iter().map(|l| l.proba.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("equal row counts")
}

/// Logistic meta-learner trained on the learners' validation-fold
/// probabilities, applied to every item.
pub fn stacking_fit_predict(
    learners: &[BaseLearnerOutput],
    labels: &[Option<usize>],
    num_classes: usize,
    split: &SplitAssignment,
    meta: &SoftmaxRegressionConfig,
) -> Result<(BaseLearnerOutput, EnsembleModel)> {
    if learners.len() < 2 {
        return Err(Error::Config("stacking needs at least two learners".into()));
    }
    let (rows, targets) = labeled(&split.validation, labels);
    if rows.is_empty() {
        return Err(Error::Split("stacking needs a labeled validation fold".into()));
    }
    let x = stack_features(learners);
    let model = SoftmaxRegression::fit(&x, &rows, &targets, num_classes, meta);
    let ens = EnsembleModel {
        kind: EnsembleKind::Stacking,
        learners: learners.iter().map(|l| l.name.clone()).collect(),
        weights: model.weights().iter().copied().collect(),
        meta_input_dim: model.num_inputs(),
    };
    Ok((BaseLearnerOutput::new("Stacking", model.predict_proba(&x))?, ens))
}

/// Depth-1 tree: `feature <= threshold` picks `left`, else `right`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

impl Stump {
    pub fn predict(&self, x: ndarray::ArrayView1<f64>) -> usize {
        if x[self.feature] <= self.threshold {
            self.left
        } else {
            self.right
        }
    }

    /// Minimum weighted-error stump over every feature and midpoint threshold.
    /// Ties keep the first candidate in (feature, threshold) order.
    pub fn fit(x: &Matrix, rows: &[usize], y: &[usize], w: &[f64], classes: usize) -> Self {
        let mut best = (f64::INFINITY, Stump { feature: 0, threshold: f64::INFINITY, left: 0, right: 0 });
        for f in 0..x.ncols() {
            let mut vals: Vec<f64> = rows.iter().map(|&r| x[[r, f]]).collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            vals.dedup();
            let mut cuts: Vec<f64> = vals.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();
            cuts.push(f64::INFINITY);
            for &c in &cuts {
                let mut lw = vec![0.0; classes];
                let mut rw = vec![0.0; classes];
                for (i, &r) in rows.iter().enumerate() {
                    if x[[r, f]] <= c {
                        lw[y[i]] += w[i];
                    } else {
                        rw[y[i]] += w[i];
                    }
                }
                let pick = |v: &[f64]| {
                    let mut b = 0;
                    for (k, &s) in v.iter().enumerate() {
                        if s > v[b] {
                            b = k;
                        }
                    }
                    b
                };
                let (l, r) = (pick(&lw), pick(&rw));
                let err: f64 = lw.iter().sum::<f64>() - lw[l] + rw.iter().sum::<f64>() - rw[r];
                if err < best.0 - 1e-15 {
                    best = (err, Stump { feature: f, threshold: c, left: l, right: r });
                }
            }
        }
        best.1
    }
}

/// Upper bound on a round's α when its weighted error is zero.
pub const ALPHA_CAP: f64 = 10.0;

/// Fitted SAMME ensemble with its per-round trace.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaBoostFit {
    pub stumps: Vec<Stump>,
    pub alphas: Vec<f64>,
    pub errors: Vec<f64>,
    /// Sample weights before each round, then after the last.
    pub weight_history: Vec<Vec<f64>>,
    pub classes: usize,
}

impl AdaBoostFit {
    /// Normalised α-weighted votes.
    pub fn predict_proba(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros((x.nrows(), self.classes));
        let total: f64 = self.alphas.iter().sum();
        for (i, row) in x.rows().into_iter().enumerate() {
            if total <= 0.0 {
                out.row_mut(i).fill(1.0 / self.classes as f64);
                continue;
            }
            for (s, a) in self.stumps.iter().zip(&self.alphas) {
                out[[i, s.predict(row)]] += a / total;
            }
        }
        out
    }
}

/// Multiclass SAMME over depth-1 stumps. A round whose weighted error
/// reaches `1 − 1/K` is rejected and training halts; a zero-error round gets
/// weight [`ALPHA_CAP`] and ends training.
pub fn adaboost_fit(
    x: &Matrix,
    rows: &[usize],
    y: &[usize],
    classes: usize,
    rounds: usize,
) -> Result<AdaBoostFit> {
    if rounds == 0 || classes < 2 {
        return Err(Error::Config("AdaBoost needs rounds ≥ 1 and at least two classes".into()));
    }
    if rows.is_empty() || rows.len() != y.len() {
        return Err(Error::Split("AdaBoost needs labeled training items".into()));
    }
    let k = classes as f64;
    let mut w = vec![1.0 / rows.len() as f64; rows.len()];
    let mut fit = AdaBoostFit {
        stumps: Vec::new(),
        alphas: Vec::new(),
        errors: Vec::new(),
        weight_history: vec![w.clone()],
        classes,
    };
    for _ in 0..rounds {
        let stump = Stump::fit(x, rows, y, &w, classes);
        let miss: Vec<bool> = rows.iter().zip(y).map(|(&r, &t)| stump.predict(x.row(r)) != t).collect();
        let err: f64 = w.iter().zip(&miss).filter(|(_, &m)| m).map(|(a, _)| a).sum::<f64>() / w.iter().sum::<f64>();
        if err >= 1.0 - 1.0 / k {
            break;
        }
        if err <= 0.0 {
            fit.stumps.push(stump);
            fit.alphas.push(ALPHA_CAP);
            fit.errors.push(0.0);
            break;
        }
        let alpha = ((1.0 - err) / err).ln() + (k - 1.0).ln();
        for (wi, &m) in w.iter_mut().zip(&miss) {
            if m {
                *wi *= alpha.exp();
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        fit.stumps.push(stump);
        fit.alphas.push(alpha);
        fit.errors.push(err);
        fit.weight_history.push(w.clone());
    }
    Ok(fit)
}

/// AdaBoost over the learners' stacked probabilities, trained on the train split.
pub fn adaboost_fit_predict(
    learners: &[BaseLearnerOutput],
    labels: &[Option<usize>],
    num_classes: usize,
    split: &SplitAssignment,
    rounds: usize,
) -> Result<(BaseLearnerOutput, EnsembleModel, AdaBoostFit)> {
    let x = stack_features(learners);
    let (rows, y) = labeled(&split.train, labels);
    let fit = adaboost_fit(&x, &rows, &y, num_classes, rounds)?;
    if fit.alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("AdaBoost round weight".into()));
    }
    let ens = EnsembleModel {
        kind: EnsembleKind::Adaboost,
        learners: learners.iter().map(|l| l.name.clone()).collect(),
        weights: fit.alphas.clone(),
        meta_input_dim: x.ncols(),
    };
    Ok((BaseLearnerOutput::new("AdaBoost", fit.predict_proba(&x))?, ens, fit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize) -> (Matrix, Vec<Option<usize>>, SplitAssignment) {
        let x = Matrix::from_shape_fn((n, 3), |(i, j)| {
            let c = if i % 2 == 0 { 1.0 } else { -1.0 };
            c * (1.0 + j as f64) + 0.05 * ((i * 7 + j) % 5) as f64
        });
        let y = (0..n).map(|i| Some(i % 2)).collect();
        let split = SplitAssignment {
            train: (0..n / 2).collect(),
            validation: (n / 2..3 * n / 4).collect(),
            test: (3 * n / 4..n).collect(),
            ..Default::default()
        };
        (x, y, split)
    }

    #[test]
    fn mlp_separable_and_untrained() {
        let (x, y, split) = blobs(40);
        let out = mlp_baseline(&x, &y, 2, &split, &MlpConfig::default()).unwrap();
        assert_eq!(out.accuracy(&split.test, &y), 1.0);
        let cold = MlpConfig {
            epochs: 0,
            ..Default::default()
        };
        let u = mlp_baseline(&x, &y, 2, &split, &cold).unwrap();
        assert!(u.proba.iter().all(|&p| (p - 0.5).abs() < 0.05));
        assert_eq!(u, mlp_baseline(&x, &y, 2, &split, &cold).unwrap());
    }

    #[test]
    fn bagging_degenerate_and_identical() {
        let p = Matrix::from_shape_fn((5, 2), |(i, j)| if j == 0 { 0.1 * i as f64 } else { 1.0 - 0.1 * i as f64 });
        let (out, m) = bagging_fit_predict(|_, _| Ok(p.clone()), &[0, 1, 2], 1, false, 0).unwrap();
        assert_eq!(out.proba, p);
        assert_eq!(m.weights, vec![1.0]);
        let (out, _) = bagging_fit_predict(|_, _| Ok(p.clone()), &[0, 1, 2], 4, true, 0).unwrap();
        for (a, b) in out.proba.iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stacking_prefers_the_good_learner() {
        let n = 80;
        let labels: Vec<Option<usize>> = (0..n).map(|i| Some(i % 3)).collect();
        let perfect = Matrix::from_shape_fn((n, 3), |(i, c)| if c == i % 3 { 0.9 } else { 0.05 });
        let mut rng = rng_for(1, 1);
        let noise = softmax_rows(&Matrix::from_shape_fn((n, 3), |_| rng.random::<f64>()));
        let learners = vec![
            BaseLearnerOutput::new("good", perfect).unwrap(),
            BaseLearnerOutput::new("noise", noise).unwrap(),
        ];
        let split = SplitAssignment {
            train: (0..40).collect(),
            validation: (40..60).collect(),
            test: (60..80).collect(),
            ..Default::default()
        };
        let (out, m) =
            stacking_fit_predict(&learners, &labels, 3, &split, &Default::default()).unwrap();
        assert_eq!(m.meta_input_dim, 6);
        assert!(out.accuracy(&split.test, &labels) >= 0.98);
        let no_val = SplitAssignment {
            validation: vec![],
            ..split
        };
        assert!(matches!(
            stacking_fit_predict(&learners, &labels, 3, &no_val, &Default::default()),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn samme_alpha_and_weights() {
        // one feature; the best stump misclassifies exactly one of four
        let x = Matrix::from_shape_vec((4, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = vec![0, 1, 0, 1];
        let fit = adaboost_fit(&x, &[0, 1, 2, 3], &y, 2, 1).unwrap();
        assert!((fit.errors[0] - 0.25).abs() < 1e-12);
        assert!((fit.alphas[0] - 3f64.ln()).abs() < 1e-9);
        let w = fit.weight_history.last().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let perfect = adaboost_fit(&x, &[0, 1, 2, 3], &[0, 0, 1, 1], 2, 5).unwrap();
        assert_eq!(perfect.alphas, vec![ALPHA_CAP]);
    }
}
