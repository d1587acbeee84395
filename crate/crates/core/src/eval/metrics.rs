use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to their label. `None` is a parse failure
/// and counts as wrong.
pub fn accuracy(predictions: &[Option<usize>], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| **p == Some(**y)).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from sorted ranks in `O(n log n)` with integer
/// pair counts, so it agrees bit for bit with the quadratic definition.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC is undefined when only one class is present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of (positive, negative) wins plus ties
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let (mut p, mut n) = (0u64, 0u64);
        for &k in &idx[i..j] {
            if labels[k] {
                p += 1;
            } else {
                n += 1;
            }
        }
        doubled += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

/// Record of one evaluation run.
///
/// Field names are stable: they are the keys of the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: String,
    pub accuracy: f64,
    /// Binary tasks only.
    pub auc: Option<f64>,
    pub parse_failures: usize,
    pub num_eval: usize,
    pub seed: u64,
    pub config_digest: String,
    pub wall_clock_secs: f64,
    pub samples_sec: Option<f64>,
    /// Digest of every checkpoint the run produced, by artifact name.
    pub checkpoints: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::Metric(format!("accuracy {} outside [0, 1]", self.accuracy)));
        }
        if let Some(a) = self.auc {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Metric(format!("AUC {a} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Appends one JSON line.
    pub fn append(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let line = serde_json::to_string(self).expect("report serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[Some(0), Some(1), Some(2)], &[0, 1, 2]).unwrap(), 1.0);
        assert!((accuracy(&[Some(0), Some(1), Some(2)], &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let p = [Some(0), Some(1), None, Some(3), Some(4)];
        assert_eq!(accuracy(&p, &[0, 1, 2, 3, 4]).unwrap(), 0.8);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[Some(0)], &[0, 1]).is_err());
    }

    #[test]
    fn auc_examples() {
        let l = [true, false, true, false];
        assert_eq!(auc(&[0.9, 0.8, 0.4, 0.3], &l).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.1, 0.8, 0.2], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        let s = [0.3, 0.3, 0.7, 0.1, 0.7, 0.5];
        let l = [true, false, true, false, false, true];
        assert_eq!(auc(&s, &l).unwrap(), brute_auc(&s, &l));
    }

    #[test]
    fn report_round_trip() {
        let r = MetricsReport {
            run: "x".into(),
            accuracy: 0.5,
            auc: None,
            parse_failures: 1,
            num_eval: 4,
            seed: 2,
            config_digest: "abc".into(),
            wall_clock_secs: 1.0,
            samples_sec: Some(3.0),
            checkpoints: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        r.append(&p).unwrap();
        r.append(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let back: Vec<MetricsReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, vec![r.clone(), r]);
    }
}
