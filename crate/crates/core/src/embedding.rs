//! Word representations: vocabulary, static vectors, and per-sentence contextual vectors.
//!
//! A token's input vector is its static row concatenated with the contextual
//! row for its position, so the embedding width is `static_dim + contextual_dim`.
//!
//! Contextual vectors are precomputed and read from a binary cache:
//!
//! ```text
//! magic     8 bytes   "DEIMCTX1"
//! dim       u32 LE    contextual width
//! count     u32 LE    number of records
//! record*:
//!   id_len  u32 LE
//!   id      id_len bytes of UTF-8 (the sentence key, see `Sentence::key`)
//!   tokens  u32 LE    token count of the untruncated sentence
//!   values  tokens*dim f32 LE, row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const CACHE_MAGIC: &[u8; 8] = b"DEIMCTX1";

/// Lowercases and splits on whitespace; every punctuation character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() && !ch.is_control() {
            tokens.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// One side of a sentence pair after tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    /// Token ids, truncated to the task cap.
    pub ids: Vec<usize>,
    /// Tokens matching `ids`.
    pub tokens: Vec<String>,
    /// Cache key: the untruncated token sequence joined by single spaces.
    pub key: String,
    /// Token count before truncation.
    pub full_len: usize,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, vocab: &Vocab, cap: usize) -> Self {
        let key = tokens.join(" ");
        let full_len = tokens.len();
        let tokens: Vec<String> = tokens.into_iter().take(cap).collect();
        let ids = tokens.iter().map(|t| vocab.id(t)).collect();
        Self {
            ids,
            tokens,
            key,
            full_len,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { index, tokens }
    }
}

impl Vocab {
    /// Builds a vocabulary ordered by descending frequency, ties broken alphabetically.
    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut counts: HashMap<&'a str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab = Self::default();
        for (t, _) in entries {
            vocab.push(t);
        }
        vocab
    }

    fn push(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(PAD_TOKEN) || lines.next() != Some(UNK_TOKEN) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: format!("vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"),
            });
        }
        let mut vocab = Self::default();
        for (n, line) in lines.enumerate() {
            if vocab.contains(line) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 3,
                    msg: format!("duplicate token {line:?}"),
                });
            }
            vocab.push(line);
        }
        Ok(vocab)
    }
}

/// Static matrix for `vocab`: rows found in the vector file are copied, other
/// rows are drawn from U(-0.05, 0.05), and the PAD row is zero.
pub fn load_static_vectors<R: Rng + ?Sized>(
    path: &Path,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let mut table = random_static_vectors(vocab, dim, rng);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut found = 0usize;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        let values: Vec<&str> = fields.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                path: path.into(),
                line: n + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        let parsed = values
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: path.into(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        let id = vocab.id(token);
        if id == UNK && token != UNK_TOKEN || id == PAD {
            continue;
        }
        table.row_mut(id).copy_from_slice(&parsed);
        found += 1;
    }
    log::info!("static vectors: {found}/{} vocabulary rows found in {}", vocab.len(), path.display());
    Ok(table)
}

/// Static matrix with every non-PAD row drawn from U(-0.05, 0.05).
pub fn random_static_vectors<R: Rng + ?Sized>(vocab: &Vocab, dim: usize, rng: &mut R) -> Tensor {
    let mut table = Tensor::uniform(&[vocab.len(), dim], -0.05, 0.05, rng);
    table.row_mut(PAD).fill(0.0);
    table
}

/// Supplier of per-position contextual vectors for a sentence.
pub trait ContextualSource: Send + Sync {
    fn dim(&self) -> usize;

    /// Row-major `sentence.len() × dim` vectors for the (truncated) tokens.
    fn lookup(&self, sentence: &Sentence) -> Result<Vec<f64>>;
}

/// Contextual vectors loaded from a cache file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextualCache {
    dim: usize,
    entries: HashMap<String, (usize, Vec<f32>)>,
}

impl ContextualCache {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, key: &str, tokens: usize, values: Vec<f32>) -> Result<()> {
        if values.len() != tokens * self.dim {
            return Err(Error::dim("contextual entry", &[tokens, self.dim], &[values.len()]));
        }
        self.entries.insert(key.to_string(), (tokens, values));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Writes records sorted by key so the file is byte-stable.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort();
        for key in keys {
            let (tokens, values) = &self.entries[key];
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            buf.extend_from_slice(&(*tokens as u32).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Parse {
            path: path.into(),
            line: 0,
            msg: msg.to_string(),
        };
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let dim = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let count = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut cache = Self::new(dim);
        for _ in 0..count {
            let id_len = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let id = r.take(id_len).ok_or_else(|| bad("truncated record"))?;
            let id = std::str::from_utf8(id).map_err(|_| bad("sentence id is not UTF-8"))?;
            let tokens = r.u32().ok_or_else(|| bad("truncated record"))? as usize;
            let raw = r.take(tokens * dim * 4).ok_or_else(|| bad("truncated record"))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            cache.insert(id, tokens, values)?;
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(cache)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl ContextualSource for ContextualCache {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, sentence: &Sentence) -> Result<Vec<f64>> {
        let (tokens, values) = self
            .entries
            .get(&sentence.key)
            .ok_or_else(|| Error::CacheMiss(sentence.key.clone()))?;
        if *tokens != sentence.full_len {
            return Err(Error::InvalidData(format!(
                "contextual entry for {:?} has {tokens} rows, sentence has {} tokens",
                sentence.key, sentence.full_len
            )));
        }
        Ok(values[..sentence.len() * self.dim].iter().map(|&v| f64::from(v)).collect())
    }
}

/// Deterministic stand-in for a contextual encoder: each value is a seeded
/// hash of (token, position, coordinate) mapped into [-0.5, 0.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StubContextual {
    pub dim: usize,
    pub seed: u64,
}

impl StubContextual {
    pub fn vector(&self, token: &str, position: usize) -> Vec<f64> {
        let base = fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17) ^ (position as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        (0..self.dim)
            .map(|k| {
                let h = splitmix64(base.wrapping_add(k as u64));
                (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    /// Materialises the stub output for `sentences` as a cache.
    pub fn to_cache<'a>(&self, sentences: impl IntoIterator<Item = &'a Sentence>) -> ContextualCache {
        let mut cache = ContextualCache::new(self.dim);
        for s in sentences {
            let tokens: Vec<&str> = s.key.split(' ').filter(|t| !t.is_empty()).collect();
            let values = tokens
                .iter()
                .enumerate()
                .flat_map(|(p, t)| self.vector(t, p))
                .map(|v| v as f32)
                .collect();
            cache
                .insert(&s.key, tokens.len(), values)
                .expect("stub rows match token count");
        }
        cache
    }
}

impl ContextualSource for StubContextual {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, sentence: &Sentence) -> Result<Vec<f64>> {
        Ok(sentence
            .tokens
            .iter()
            .enumerate()
            .flat_map(|(p, t)| self.vector(t, p))
            .collect())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Vocabulary, static vectors, and an optional contextual source.
#[derive(Clone)]
pub struct EmbeddingTable {
    pub vocab: Vocab,
    pub static_vectors: Tensor,
    pub contextual: Option<Arc<dyn ContextualSource>>,
}

impl std::fmt::Debug for EmbeddingTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingTable")
            .field("vocab", &self.vocab.len())
            .field("static_dim", &self.static_dim())
            .field("contextual_dim", &self.contextual_dim())
            .finish()
    }
}

impl EmbeddingTable {
    pub fn new(vocab: Vocab, static_vectors: Tensor, contextual: Option<Arc<dyn ContextualSource>>) -> Result<Self> {
        if static_vectors.rank() != 2 || static_vectors.rows() != vocab.len() {
            return Err(Error::dim("embedding table", static_vectors.shape(), &[vocab.len()]));
        }
        Ok(Self {
            vocab,
            static_vectors,
            contextual,
        })
    }

    pub fn static_dim(&self) -> usize {
        self.static_vectors.cols()
    }

    pub fn contextual_dim(&self) -> usize {
        self.contextual.as_ref().map_or(0, |c| c.dim())
    }

    pub fn dim(&self) -> usize {
        self.static_dim() + self.contextual_dim()
    }

    /// `pad_to × dim` matrix: row `t < len` is `[static; contextual]`, PAD rows are zero.
    pub fn embed_sentence(&self, sentence: &Sentence, pad_to: usize) -> Result<Tensor> {
        let ctx = self.contextual_rows(sentence)?;
        compose_rows(&self.static_vectors, sentence, ctx.as_deref(), self.contextual_dim(), pad_to)
    }

    /// Contextual rows for `sentence`, or `None` when contextual vectors are disabled.
    pub fn contextual_rows(&self, sentence: &Sentence) -> Result<Option<Vec<f64>>> {
        self.contextual.as_ref().map(|c| c.lookup(sentence)).transpose()
    }
}

pub(crate) fn compose_rows(
    statics: &Tensor,
    sentence: &Sentence,
    contextual: Option<&[f64]>,
    contextual_dim: usize,
    pad_to: usize,
) -> Result<Tensor> {
    let len = sentence.len();
    if len == 0 || pad_to < len {
        return Err(Error::dim("embed", &[len], &[pad_to]));
    }
    let d1 = statics.cols();
    let dim = d1 + contextual_dim;
    let mut out = Tensor::zeros(&[pad_to, dim]);
    for (t, &id) in sentence.ids.iter().enumerate() {
        if id == PAD {
            continue;
        }
        let row = out.row_mut(t);
        row[..d1].copy_from_slice(statics.row(id));
        if let Some(ctx) = contextual {
            row[d1..].copy_from_slice(&ctx[t * contextual_dim..(t + 1) * contextual_dim]);
        }
    }
    Ok(out)
}
