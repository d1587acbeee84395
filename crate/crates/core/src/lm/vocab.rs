//! Word-level vocabulary with reserved special and graph-token ids.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const END: &str = "<end>";

pub fn placeholder(gnn: usize, i: usize) -> String {
    format!("<gtok_{gnn}_{i}>")
}

fn token_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<gtok_\d+_\d+>|[A-Za-z0-9_]+|[^\sA-Za-z0-9_]").unwrap())
}

/// Splits text into word, punctuation and placeholder pieces.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    token_pattern().find_iter(text).map(|m| m.as_str())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialManifest {
    pub pad: usize,
    pub unk: usize,
    pub end: usize,
    pub k_max: usize,
    pub t_max: usize,
    pub num_special: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    k_max: usize,
    t_max: usize,
}

impl Vocabulary {
    /// Specials first (pad, unk, end, then `k_max·t_max` graph placeholders),
    /// followed by the sorted distinct words of `corpus`.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>, k_max: usize, t_max: usize) -> Self {
        let mut tokens = vec![PAD.to_string(), UNK.to_string(), END.to_string()];
        for k in 0..k_max {
            for i in 0..t_max {
                tokens.push(placeholder(k, i));
            }
        }
        let mut words = BTreeSet::new();
        for text in corpus {
            for w in split_words(text) {
                if !w.starts_with("<gtok_") {
                    words.insert(w.to_string());
                }
            }
        }
        tokens.extend(words);
        Self::from_tokens(tokens, k_max, t_max)
    }

    fn from_tokens(tokens: Vec<String>, k_max: usize, t_max: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            k_max,
            t_max,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn end(&self) -> usize {
        2
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn num_special(&self) -> usize {
        3 + self.k_max * self.t_max
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.num_special()
    }

    pub fn is_dummy(&self, id: usize) -> bool {
        id >= 3 && id < self.num_special()
    }

    /// Reserved id of placeholder `i` in GNN run `gnn`.
    pub fn dummy_id(&self, gnn: usize, i: usize) -> Result<usize> {
        if gnn >= self.k_max || i >= self.t_max {
            return Err(Error::Injection(format!(
                "placeholder ({gnn}, {i}) outside the reserved {}x{} range",
                self.k_max, self.t_max
            )));
        }
        Ok(3 + gnn * self.t_max + i)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .map(|w| self.id(w).unwrap_or(self.unk()))
            .collect()
    }

    /// Tokens joined by single spaces; pad and end are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.pad() && i != self.end())
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn manifest(&self) -> SpecialManifest {
        SpecialManifest {
            pad: self.pad(),
            unk: self.unk(),
            end: self.end(),
            k_max: self.k_max,
            t_max: self.t_max,
            num_special: self.num_special(),
        }
    }

    /// Writes `vocab.txt` (one token per line) and `special_tokens.json`
    /// into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("vocab.txt");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(&path, e))?;
        }
        let mpath = dir.join("special_tokens.json");
        let json = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join("special_tokens.json");
        let raw = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: SpecialManifest = serde_json::from_str(&raw).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let path = dir.join("vocab.txt");
        let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let tokens = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(|e| Error::io(&path, e))?;
        let vocab = Self::from_tokens(tokens, manifest.k_max, manifest.t_max);
        if vocab.manifest() != manifest || vocab.token(2) != Some(END) {
            return Err(Error::Validation(
                "vocabulary file disagrees with its special-token manifest".into(),
            ));
        }
        Ok(vocab)
    }
}
