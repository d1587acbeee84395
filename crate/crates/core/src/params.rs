//! Named tensor collections shared by every trainable component.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Matrix, Tape, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Copies every tensor of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.tensors {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, v) in &self.tensors {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(k.clone()));
            }
        }
        Ok(())
    }

    /// Records every tensor on the tape; names for which `trainable` is true
    /// become gradient-carrying leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Binds only tensors under `prefix`; the returned handles use the names
    /// with the prefix stripped.
    pub fn bind_prefixed(
        &self,
        tape: &mut Tape,
        prefix: &str,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound {
        let vars = self
            .tensors
            .iter()
            .filter_map(|(k, v)| {
                let short = k.strip_prefix(prefix)?;
                let var = if trainable(short) {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                Some((short.to_string(), var))
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(|s| s.as_str())
    }

    /// Collects gradients for every bound name that received one.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    /// Like [`Bound::gradients`] but with `prefix` prepended to every name.
    pub fn gradients_prefixed(&self, grads: &Gradients, prefix: &str) -> BTreeMap<String, Matrix> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (format!("{prefix}{k}"), g.clone())))
            .collect()
    }
}

/// Glorot-uniform matrix with `rows × cols` layout.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Accumulate `src` into `dst`, summing shared names.
pub fn accumulate(dst: &mut BTreeMap<String, Matrix>, src: BTreeMap<String, Matrix>) {
    for (k, v) in src {
        match dst.get_mut(&k) {
            Some(existing) => *existing += &v,
            None => {
                dst.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_values_and_names() {
        let mut a = ParamStore::new();
        a.insert("w", Matrix::zeros((2, 2)));
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.get_mut("w").unwrap()[[0, 0]] = 1e-300;
        assert_ne!(a.digest(), b.digest());
        let mut c = ParamStore::new();
        c.insert("v", Matrix::zeros((2, 2)));
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn prefix_round_trip() {
        let mut a = ParamStore::new();
        a.insert("w", Matrix::ones((1, 3)));
        let mut all = ParamStore::new();
        all.extend_prefixed("gnn0.", &a);
        assert!(all.contains("gnn0.w"));
        assert_eq!(all.strip_prefix("gnn0."), a);
        assert_eq!(all.num_scalars(), 3);
    }
}
