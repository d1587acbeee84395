//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every model in the crate (GNN encoders, projector, shared classifier, the
//! transformer and its adapters) records its forward pass on a [`Tape`] and
//! pulls parameter gradients back out with [`Tape::backward`]. Values are
//! always 2-D; vectors are `1×n` rows and scalars are `1×1`.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`, the layout used by every linear layer (weights are `out × in`).
    Linear(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Transpose(Var),
    OuterAdd(Var, Var),
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Matrix,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x · wᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let value = self.value(x).dot(&self.value(w).t());
        let rg = self.rg(&[x, w]);
        self.push(value, Op::Linear(x, w), rg)
    }

    /// `x · wᵀ + b` with `b` a `1×out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.linear(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: bias must be a single row");
        let value = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, k), rg)
    }

    /// Multiply every entry of `a` by the `1×1` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let value = self.value(a) * self.scalar(s);
        let rg = self.rg(&[a, s]);
        self.push(value, Op::ScaleBy(a, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// `out[i][j] = a[i] + b[j]` for column vectors `a` (n×1) and `b` (m×1).
    pub fn outer_add(&mut self, a: Var, b: Var) -> Var {
        let (n, ca) = self.shape(a);
        let (m, cb) = self.shape(b);
        assert!(ca == 1 && cb == 1, "outer_add expects column vectors");
        let av = self.value(a);
        let bv = self.value(b);
        let value = Matrix::from_shape_fn((n, m), |(i, j)| av[[i, 0]] + bv[[j, 0]]);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::OuterAdd(a, b), rg)
    }

    /// Row-wise softmax restricted to entries where `mask` is true. Rows with
    /// no admissible entry come out as all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: Rc<Array2<bool>>) -> Var {
        assert_eq!(self.shape(a), mask.dim(), "masked_softmax: mask shape");
        let x = self.value(a);
        let mut out = Matrix::zeros(x.dim());
        for (i, row) in x.outer_iter().enumerate() {
            let mrow = mask.row(i);
            let max = row
                .iter()
                .zip(mrow.iter())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..row.len() {
                if mrow[j] {
                    let e = (row[j] - max).exp();
                    out[[i, j]] = e;
                    total += e;
                }
            }
            out.row_mut(i).mapv_inplace(|v| v / total);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::MaskedSoftmax(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), rows);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// Column means, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.nrows() > 0, "mean_rows on empty matrix");
        let value = x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let rg = self.rg(&[a]);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Per-row layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = Matrix::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                xhat[[i, j]] = (v - mean) * is;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy over the listed `rows` of `logits`, each
    /// paired with its target class. Rows may repeat (bootstrap weighting).
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Var {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "cross_entropy over zero rows");
        let x = self.value(logits);
        let mut probs = Matrix::zeros((rows.len(), x.ncols()));
        let mut loss = 0.0;
        for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
            let row = x.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[[k, j]] = e;
                total += e;
            }
            probs.row_mut(k).mapv_inplace(|v| v / total);
            loss -= (row[t] - max) - total.ln();
        }
        loss /= rows.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Backpropagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    acc(*a, g.dot(&bv.t()));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, av.t().dot(g));
                }
            }
            Op::Linear(x, w) => {
                if self.nodes[x.0].requires_grad {
                    acc(*x, g.dot(self.value(*w)));
                }
                if self.nodes[w.0].requires_grad {
                    acc(*w, g.t().dot(self.value(*x)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                if self.nodes[s.0].requires_grad {
                    let ds = (g * self.value(*a)).sum();
                    acc(*s, Matrix::from_elem((1, 1), ds));
                }
                acc(*a, g * sv);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, g * self.value(*b));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= *slope
                        }
                    });
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *d *= 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                });
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::OuterAdd(a, b) => {
                acc(*a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(1)));
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.dim());
                for i in 0..y.nrows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..y.ncols() {
                        d[[i, j]] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    acc(*p, g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Matrix::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*end]).assign(g);
                acc(*a, d);
            }
            Op::GatherRows(a, rows) => {
                let mut d = Matrix::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(r);
                    dst += &g.row(k);
                }
                acc(*a, d);
            }
            Op::MeanRows(a) => {
                let (n, m) = self.shape(*a);
                let row = g.row(0).to_owned() / n as f64;
                acc(*a, row.broadcast((n, m)).unwrap().to_owned());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.nodes[gamma.0].requires_grad {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[beta.0].requires_grad {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[x.0].requires_grad {
                    let gv = self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut d = Matrix::zeros(xhat.dim());
                    for i in 0..xhat.nrows() {
                        let dxhat: Vec<f64> = (0..xhat.ncols())
                            .map(|j| g[[i, j]] * gv[[0, j]])
                            .collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, v)| v * xhat[[i, j]])
                            .sum();
                        for j in 0..xhat.ncols() {
                            d[[i, j]] = inv_std[i] / n
                                * (n * dxhat[j] - sum_d - xhat[[i, j]] * sum_dx);
                        }
                    }
                    acc(*x, d);
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let scale = g[[0, 0]] / rows.len() as f64;
                let mut d = Matrix::zeros(self.shape(*logits));
                for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    let mut dst = d.row_mut(r);
                    dst.scaled_add(scale, &probs.row(k));
                    dst[t] -= scale;
                }
                acc(*logits, d);
            }
        }
    }
}
