//! Multinomial logistic regression, used as probe and meta-learner.

use crate::graph::rng_for;
use crate::optim::AdamW;
use crate::params::{glorot, ParamStore};
use crate::tape::{Matrix, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxRegressionConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SoftmaxRegressionConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.05,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxRegression {
    params: ParamStore,
}

impl SoftmaxRegression {
    /// Full-batch fit on `rows` of `x` (repeats allowed) with matching targets.
    pub fn fit(
        x: &Matrix,
        rows: &[usize],
        targets: &[usize],
        classes: usize,
        config: &SoftmaxRegressionConfig,
    ) -> Self {
        let mut rng = rng_for(config.seed, 0x106);
        let mut params = ParamStore::new();
        params.insert("weight", glorot(&mut rng, classes, x.ncols()) * 0.1);
        params.insert("bias", Matrix::zeros((1, classes)));
        let mut opt = AdamW::new(config.weight_decay);
        let xs = x.select(ndarray::Axis(0), rows);
        let local: Vec<usize> = (0..rows.len()).collect();
        for _ in 0..config.epochs {
            let mut tape = Tape::new();
            let b = params.bind(&mut tape, |_| true);
            let xv = tape.constant(xs.clone());
            let logits = tape.affine(xv, b.var("weight"), b.var("bias"));
            let loss = tape.cross_entropy(logits, &local, targets);
            let grads = b.gradients(&tape.backward(loss));
            opt.step(&mut params, &grads, config.lr, |_| 1.0);
        }
        Self { params }
    }

    pub fn predict_proba(&self, x: &Matrix) -> Matrix {
        let w = self.params.get("weight").expect("fitted");
        let b = self.params.get("bias").expect("fitted");
        softmax_rows(&(x.dot(&w.t()) + b))
    }

    /// Weight matrix (`classes × inputs`).
    pub fn weights(&self) -> &Matrix {
        self.params.get("weight").expect("fitted")
    }

    pub fn num_inputs(&self) -> usize {
        self.params.get("weight").map(|w| w.ncols()).unwrap_or(0)
    }
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
