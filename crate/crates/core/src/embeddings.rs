//! Word vectors, target indicators and the trainable encoder adapter.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PostRecord;
use crate::error::{Error, Result};
use crate::numerics::{glorot_with, Graph, ParamGroup, Tensor, Var};

/// Dimensionality of the pretrained word vectors used for target indicators.
pub const INDICATOR_DIM: usize = 300;

/// Immutable token → vector table loaded from a GloVe-style text file.
#[derive(Debug, Clone)]
pub struct WordVectorStore {
    dim: usize,
    lowercase: bool,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectorStore {
    pub fn new(dim: usize, lowercase: bool) -> Self {
        Self {
            dim,
            lowercase,
            vectors: HashMap::new(),
        }
    }

    /// Loads `token v1 … v300` lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::from_reader(BufReader::new(file), INDICATOR_DIM, true)
    }

    pub fn from_reader(reader: impl BufRead, dim: usize, lowercase: bool) -> Result<Self> {
        let mut store = Self::new(dim, lowercase);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line has a token");
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|e| Error::Format {
                        line: lineno,
                        message: format!("bad value `{p}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != dim {
                return Err(Error::Format {
                    line: lineno,
                    message: format!("token `{token}` has {} values, expected {dim}", values.len()),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format {
                    line: lineno,
                    message: format!("token `{token}` has a non-finite value"),
                });
            }
            store.insert(token, values)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "vector for `{token}` has {} values, store dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        let key = if self.lowercase { token.to_lowercase() } else { token.to_string() };
        // First occurrence wins, as in GloVe files where duplicates are rare casing variants.
        self.vectors.entry(key).or_insert(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        if self.lowercase {
            self.vectors.get(&token.to_lowercase()).map(Vec::as_slice)
        } else {
            self.vectors.get(token).map(Vec::as_slice)
        }
    }

    /// Writes the store in GloVe text format, tokens sorted.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        for t in tokens {
            write!(out, "{t}")?;
            for v in &self.vectors[t] {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Lowercases and splits a target name on whitespace, `_` and `-`.
pub fn tokenize_target(name: &str) -> Vec<String> {
    name.to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// A target's conditioning vector: the mean of its tokens' word vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetIndicator {
    pub name: String,
    /// Tokens that resolved to a word vector.
    pub tokens: Vec<String>,
    /// Tokens with no word vector; skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
    pub vector: Vec<f64>,
}

pub fn build_indicator(name: &str, store: &WordVectorStore) -> Result<TargetIndicator> {
    let mut tokens = Vec::new();
    let mut skipped = Vec::new();
    let mut sum = vec![0.0; store.dim()];
    for tok in tokenize_target(name) {
        match store.get(&tok) {
            Some(v) => {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                tokens.push(tok);
            }
            None => skipped.push(tok),
        }
    }
    if tokens.is_empty() {
        return Err(Error::UnresolvableTarget(name.to_string()));
    }
    if !skipped.is_empty() {
        log::warn!("target `{name}`: no word vector for {skipped:?}, skipped");
    }
    let n = tokens.len() as f64;
    let vector = sum.into_iter().map(|s| s / n).collect();
    Ok(TargetIndicator {
        name: name.to_string(),
        tokens,
        skipped,
        vector,
    })
}

/// Builds indicators for `names`, in order.
pub fn build_indicators<S: AsRef<str>>(names: &[S], store: &WordVectorStore) -> Result<Vec<TargetIndicator>> {
    names.iter().map(|n| build_indicator(n.as_ref(), store)).collect()
}

/// Trainable map from stored post embeddings into the model's hidden space.
///
/// A stack of bias-free linear layers with ReLU between them; the default
/// depth of one is a single linear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderAdapter {
    pub group: ParamGroup,
    input_dim: usize,
    output_dim: usize,
}

pub const ENCODER_GROUP: &str = "enc";

impl EncoderAdapter {
    pub fn new(input_dim: usize, output_dim: usize, depth: usize, rng: &mut impl Rng) -> Self {
        let mut group = ParamGroup::new(ENCODER_GROUP);
        let depth = depth.max(1);
        for i in 0..depth {
            let fan_in = if i == 0 { input_dim } else { output_dim };
            group.push(format!("w{i}"), glorot_with(&[fan_in, output_dim], rng));
        }
        Self {
            group,
            input_dim,
            output_dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut group = ParamGroup::new(ENCODER_GROUP);
        group.push("w0", Tensor::identity(dim));
        Self {
            group,
            input_dim: dim,
            output_dim: dim,
        }
    }

    pub(crate) fn from_group(group: ParamGroup) -> Result<Self> {
        let first = group.get("w0")?;
        let (input_dim, output_dim) = first.dims2();
        Ok(Self {
            group,
            input_dim,
            output_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Encodes a batch `[n, input_dim]` on the tape.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input_dim {
            return Err(Error::Dimension(format!(
                "adapter expects {}-dim embeddings, got {cols}",
                self.input_dim
            )));
        }
        let mut h = x;
        for i in 0..self.group.len() {
            if i > 0 {
                h = g.relu(h);
            }
            let w = g.param(&self.group, i);
            h = g.matmul(h, w)?;
        }
        Ok(h)
    }
}

/// Stored embedding of a record, or the hashed bag-of-words fallback when enabled.
pub fn record_input(record: &PostRecord, input_dim: usize, text_fallback: bool) -> Result<Vec<f64>> {
    if let Some(e) = &record.embedding {
        if e.len() != input_dim {
            return Err(Error::Dimension(format!(
                "record `{}` has a {}-dim embedding, expected {input_dim}",
                record.id,
                e.len()
            )));
        }
        return Ok(e.clone());
    }
    match (&record.text, text_fallback) {
        (Some(text), true) => Ok(hashed_bag_of_words(text, input_dim)),
        _ => Err(Error::Data(format!(
            "record `{}` has no embedding and the text fallback is disabled",
            record.id
        ))),
    }
}

/// L2-normalized token counts hashed (FNV-1a) into `dim` buckets.
pub fn hashed_bag_of_words(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in tok.to_lowercase().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x100000001b3);
        }
        v[(h % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// `s = adapter(embedding)` for a single record.
pub fn encode_post(record: &PostRecord, adapter: &EncoderAdapter, text_fallback: bool) -> Result<Tensor> {
    let x = record_input(record, adapter.input_dim(), text_fallback)?;
    let mut g = Graph::new();
    let xv = g.constant(Tensor::matrix(1, x.len(), x)?);
    let s = adapter.forward_graph(&mut g, xv)?;
    g.value(s).reshape(&[adapter.output_dim()])
}
