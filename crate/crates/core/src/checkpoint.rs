//! Checkpoint directories.
//!
//! A checkpoint is a directory with three files:
//!
//! * `manifest.txt`: `key = value` lines (format tag, epoch, optimizer step,
//!   RNG state, fingerprint, best metric, one `tensor = name shape` line per
//!   tensor) followed by the resolved configuration under `config.` keys.
//! * `tensors.bin`: magic `DEIMTNS1`, `u32` tensor count, then per tensor a
//!   `u32` name length, the UTF-8 name, a `u32` rank, `u64` extents and the
//!   values as little-endian `f64`. Optimizer moments are stored as
//!   `adam.m/<name>` and `adam.v/<name>`.
//! * `vocab.txt`: one token per line, in id order.
//!
//! All integers are little-endian. Saving a loaded checkpoint reproduces the
//! same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const FORMAT: &str = "deim-checkpoint-1";
const TENSOR_MAGIC: &[u8; 8] = b"DEIMTNS1";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: usize,
    pub params: Vec<(String, Tensor)>,
    pub adam: Adam,
    pub rng: RngState,
    pub fingerprint: String,
    /// Validation metric at `epoch` (NaN when no validation split was given).
    pub metric: f64,
    pub vocab: Vocab,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl Checkpoint {
    fn all_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.params.clone();
        for (kind, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            if moments.len() != self.params.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            for ((name, t), values) in self.params.iter().zip(moments) {
                out.push((format!("adam.{kind}/{name}"), Tensor::new(t.shape(), values.clone())?));
            }
        }
        Ok(out)
    }

    pub fn manifest(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "format = {FORMAT}");
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "adam_step = {}", self.adam.step);
        let _ = writeln!(s, "rng_seed = {}", hex(&self.rng.seed));
        let _ = writeln!(s, "rng_stream = {}", self.rng.stream);
        let _ = writeln!(s, "rng_word_pos = {}", self.rng.word_pos);
        let _ = writeln!(s, "fingerprint = {}", self.fingerprint);
        let _ = writeln!(s, "metric = {:?}", self.metric);
        for (name, t) in self.all_tensors()? {
            let _ = writeln!(s, "tensor = {name} {}", shape_text(t.shape()));
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(s, "config.{line}");
        }
        Ok(s)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest()?;
        let mut buf = Vec::new();
        let tensors = self.all_tensors()?;
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write("tensors.bin", &buf)?;
        write("manifest.txt", manifest.as_bytes())?;
        self.vocab.save(&dir.join("vocab.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", dir.display()));
        let mpath = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;

        let mut fields = std::collections::HashMap::new();
        let mut config_text = String::new();
        for line in manifest.lines() {
            let Some((k, v)) = line.split_once(" = ") else {
                return Err(bad(format!("malformed manifest line {line:?}")));
            };
            if let Some(key) = k.strip_prefix("config.") {
                let _ = writeln!(config_text, "{key} = {v}");
            } else if k != "tensor" {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let field = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("manifest lacks {k}")));
        if field("format")? != FORMAT {
            return Err(bad(format!("unsupported format {}", field("format")?)));
        }
        let num = |k: &str| -> Result<u128> { field(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
        let config = TrainConfig::parse(&config_text)?;
        let rng = RngState {
            seed: unhex(&field("rng_seed")?).ok_or_else(|| bad("bad rng_seed".into()))?,
            stream: num("rng_stream")? as u64,
            word_pos: num("rng_word_pos")?,
        };
        let metric: f64 = field("metric")?.parse().map_err(|_| bad("bad metric".into()))?;

        let tpath = dir.join("tensors.bin");
        let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
        let tensors = read_tensors(&bytes).map_err(bad)?;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m/") {
                check_moment(&params, m.len(), rest, &t).map_err(bad)?;
                m.push(t.into_data());
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                check_moment(&params, v.len(), rest, &t).map_err(bad)?;
                v.push(t.into_data());
            } else {
                params.push((name, t));
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(bad("optimizer moments do not cover every parameter".into()));
        }
        let adam = Adam {
            config: AdamConfig {
                lr: config.lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
            },
            step: num("adam_step")? as u64,
            m,
            v,
        };
        Ok(Self {
            epoch: num("epoch")? as usize,
            fingerprint: field("fingerprint")?,
            vocab: Vocab::load(&dir.join("vocab.txt"))?,
            config,
            params,
            adam,
            rng,
            metric,
        })
    }
}

fn check_moment(params: &[(String, Tensor)], i: usize, name: &str, t: &Tensor) -> std::result::Result<(), String> {
    match params.get(i) {
        Some((n, p)) if n == name && p.shape() == t.shape() => Ok(()),
        _ => Err(format!("optimizer moment {name} out of order or mis-shaped")),
    }
}

fn read_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let out = bytes.get(pos..pos + n).ok_or("truncated tensors.bin")?;
        pos += n;
        Ok(out)
    };
    if take(8)? != TENSOR_MAGIC {
        return Err("bad tensors.bin magic".into());
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = u32_of(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_of(take(4)?);
        let name = std::str::from_utf8(take(len)?).map_err(|_| "tensor name is not UTF-8")?.to_string();
        let rank = u32_of(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name.clone(), Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?));
    }
    if pos != bytes.len() {
        return Err("trailing bytes in tensors.bin".into());
    }
    Ok(out)
}
