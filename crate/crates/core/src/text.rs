//! Node feature initialization from text.
//!
//! Two providers sit behind one interface: a remote batch embedding service
//! (any sentence encoder exposed over HTTP) and a hermetic hashing encoder
//! that needs no model files.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::tape::Matrix;

pub const DEFAULT_DIM: usize = 384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provider {
    ExternalEmbeddingService,
    HashFallback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    L2,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    /// Batch endpoint accepting `{"texts": [...]}` and answering
    /// `{"embeddings": [[...], ...]}`.
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_batch")]
    pub max_batch: usize,
    #[serde(default = "default_retries")]
    pub retries: usize,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    30.0
}
fn default_batch() -> usize {
    64
}
fn default_retries() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub provider: Provider,
    pub d: usize,
    pub normalization: Normalization,
    pub seed: u64,
    /// Texts longer than this many characters are cut before encoding.
    #[serde(default)]
    pub max_chars: Option<usize>,
    #[serde(default)]
    pub external: Option<ExternalConfig>,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            provider: Provider::HashFallback,
            d: DEFAULT_DIM,
            normalization: Normalization::L2,
            seed: 0,
            max_chars: None,
            external: None,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("text embedding dimension must be positive".into()));
        }
        if self.provider == Provider::ExternalEmbeddingService && self.external.is_none() {
            return Err(Error::Config(
                "external provider selected but no endpoint configured".into(),
            ));
        }
        Ok(())
    }

    pub fn provider_name(&self) -> String {
        match self.provider {
            Provider::HashFallback => format!("hash-fallback/d{}/s{}", self.d, self.seed),
            Provider::ExternalEmbeddingService => format!(
                "external/{}",
                self.external.as_ref().map(|e| e.endpoint.as_str()).unwrap_or("")
            ),
        }
    }
}

/// Row `i` is the embedding of node `i`'s text.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeFeatureMatrix {
    pub matrix: Matrix,
    pub d: usize,
    pub provider_name: String,
}

fn clip(text: &str, max_chars: Option<usize>) -> &str {
    match max_chars {
        Some(m) => match text.char_indices().nth(m) {
            Some((i, _)) => &text[..i],
            None => text,
        },
        None => text,
    }
}

/// Lowercased alphanumeric runs.
pub fn hash_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

fn hash_encode(text: &str, d: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for tok in hash_tokens(text) {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(tok.as_bytes());
        let bytes = h.finalize();
        let bucket = u64::from_le_bytes(bytes[..8].try_into().unwrap()) % d as u64;
        let sign = if bytes[8] & 1 == 0 { 1.0 } else { -1.0 };
        v[bucket as usize] += sign;
    }
    v
}

fn normalize(v: &mut [f64], how: Normalization) {
    if how == Normalization::L2 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

/// Embeds one text. Empty text under the hashing provider is the zero vector.
pub fn encode_text(text: &str, config: &TextEncoderConfig) -> Result<Vec<f64>> {
    let m = encode_texts(&[text], config)?;
    Ok(m.row(0).to_vec())
}

/// Embeds a batch of texts, one row per text.
pub fn encode_texts(texts: &[&str], config: &TextEncoderConfig) -> Result<Matrix> {
    config.validate()?;
    let clipped: Vec<&str> = texts.iter().map(|t| clip(t, config.max_chars)).collect();
    let rows: Vec<Vec<f64>> = match config.provider {
        Provider::HashFallback => clipped
            .iter()
            .map(|t| hash_encode(t, config.d, config.seed))
            .collect(),
        Provider::ExternalEmbeddingService => {
            let ext = config.external.as_ref().expect("validated");
            ExternalClient::new(ext.clone())?.embed(&clipped, config.d)?
        }
    };
    let mut m = Matrix::zeros((texts.len(), config.d));
    for (i, mut r) in rows.into_iter().enumerate() {
        normalize(&mut r, config.normalization);
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of text #{i}")));
        }
        m.row_mut(i).assign(&ndarray::Array1::from(r));
    }
    Ok(m)
}

pub fn encode_nodes(
    graph: &TextAttributedGraph,
    config: &TextEncoderConfig,
) -> Result<NodeFeatureMatrix> {
    let texts: Vec<&str> = graph.nodes().iter().map(|n| n.text.as_str()).collect();
    Ok(NodeFeatureMatrix {
        matrix: encode_texts(&texts, config)?,
        d: config.d,
        provider_name: config.provider_name(),
    })
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    digest: String,
    provider: String,
    vector: Vec<f64>,
}

/// Append-only on-disk cache keyed by (provider, SHA-256 of text).
pub struct EmbeddingCache {
    path: PathBuf,
    entries: Mutex<HashMap<(String, String), Vec<f64>>>,
    writer: Mutex<File>,
}

impl EmbeddingCache {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("embedding cache: {e}"),
                })?;
                entries.insert((rec.provider, rec.digest), rec.vector);
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            entries: Mutex::new(entries),
            writer: Mutex::new(writer),
        })
    }

    pub fn text_digest(text: &str) -> String {
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn get(&self, provider: &str, text: &str) -> Option<Vec<f64>> {
        let key = (provider.to_string(), Self::text_digest(text));
        self.entries.lock().unwrap().get(&key).cloned()
    }

    pub fn put(&self, provider: &str, text: &str, vector: &[f64]) -> Result<()> {
        let digest = Self::text_digest(text);
        let rec = CacheRecord {
            digest: digest.clone(),
            provider: provider.to_string(),
            vector: vector.to_vec(),
        };
        let line = serde_json::to_string(&rec).expect("cache record serializes");
        {
            let mut w = self.writer.lock().unwrap();
            writeln!(w, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.entries
            .lock()
            .unwrap()
            .insert((provider.to_string(), digest), vector.to_vec());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// HTTP client for a batch embedding endpoint, with retries and a cache.
pub struct ExternalClient {
    config: ExternalConfig,
    agent: ureq::Agent,
    cache: Option<EmbeddingCache>,
}

impl ExternalClient {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        let cache = match &config.cache_path {
            Some(p) => Some(EmbeddingCache::open(p)?),
            None => None,
        };
        Ok(Self {
            config,
            agent,
            cache,
        })
    }

    fn provider_key(&self) -> String {
        format!("external/{}", self.config.endpoint)
    }

    fn request(&self, batch: &[&str], d: usize) -> Result<Vec<Vec<f64>>> {
        let attempts = self.config.retries.max(1);
        let mut last = String::new();
        for _ in 0..attempts {
            let resp = self
                .agent
                .post(&self.config.endpoint)
                .send_json(EmbedRequest { texts: batch })
                .and_then(|mut r| r.body_mut().read_json::<EmbedResponse>());
            match resp {
                Ok(r) => {
                    if r.embeddings.len() != batch.len() {
                        last = format!(
                            "asked for {} embeddings, got {}",
                            batch.len(),
                            r.embeddings.len()
                        );
                        continue;
                    }
                    if let Some(bad) = r.embeddings.iter().find(|v| v.len() != d) {
                        return Err(Error::Dimension(format!(
                            "provider returned width {} but d = {d}",
                            bad.len()
                        )));
                    }
                    return Ok(r.embeddings);
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::Provider {
            attempts,
            message: last,
        })
    }

    pub fn embed(&self, texts: &[&str], d: usize) -> Result<Vec<Vec<f64>>> {
        let key = self.provider_key();
        let mut out: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| self.cache.as_ref().and_then(|c| c.get(&key, t)))
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        for chunk in missing.chunks(self.config.max_batch.max(1)) {
            let batch: Vec<&str> = chunk.iter().map(|&i| texts[i]).collect();
            let vecs = self.request(&batch, d)?;
            for (&i, v) in chunk.iter().zip(vecs) {
                if let Some(c) = &self.cache {
                    c.put(&key, texts[i], &v)?;
                }
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}
