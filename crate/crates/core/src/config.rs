//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::Task;
use crate::embedding::fnv1a;
use crate::error::{Error, Result};
use crate::heads::{Pooling, Reduction};

/// Components that can be switched off for the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablation {
    pub no_elmo: bool,
    pub no_alignment: bool,
    pub no_fusion: bool,
    pub no_self_attention: bool,
    pub only_h2p: bool,
    pub only_p2h: bool,
}

/// Display names and fingerprints of the seven ablation-matrix rows, full model first.
pub const ABLATION_ROWS: [(&str, &str); 7] = [
    ("DEIM", "full"),
    ("w/o ELMO", "no_elmo"),
    ("w/o alignment", "no_alignment"),
    ("w/o fusion", "no_fusion"),
    ("w/o self-attention", "no_self_attention"),
    ("Only H->P", "only_h2p"),
    ("Only P->H", "only_p2h"),
];

impl Ablation {
    fn flags(&self) -> [(&'static str, bool); 6] {
        [
            ("no_elmo", self.no_elmo),
            ("no_alignment", self.no_alignment),
            ("no_fusion", self.no_fusion),
            ("no_self_attention", self.no_self_attention),
            ("only_h2p", self.only_h2p),
            ("only_p2h", self.only_p2h),
        ]
    }

    /// `"full"` or the active flags joined by `+`.
    pub fn fingerprint(&self) -> String {
        let on: Vec<&str> = self.flags().iter().filter(|f| f.1).map(|f| f.0).collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }

    pub fn from_fingerprint(fp: &str) -> Result<Self> {
        let mut a = Self::default();
        if fp == "full" {
            return Ok(a);
        }
        for flag in fp.split('+') {
            a.set(flag, true)?;
        }
        Ok(a)
    }

    fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        let slot = match flag {
            "no_elmo" => &mut self.no_elmo,
            "no_alignment" => &mut self.no_alignment,
            "no_fusion" => &mut self.no_fusion,
            "no_self_attention" => &mut self.no_self_attention,
            "only_h2p" => &mut self.only_h2p,
            "only_p2h" => &mut self.only_p2h,
            _ => return Err(Error::Config(format!("unknown ablation flag {flag:?}"))),
        };
        *slot = on;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.only_h2p && self.only_p2h {
            return Err(Error::Config("only_h2p and only_p2h are mutually exclusive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub static_vectors: Option<PathBuf>,
    pub contextual_cache: Option<PathBuf>,
    pub static_dim: usize,
    pub contextual_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub conv_layers: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// 0 means the task's default cap.
    pub max_len: usize,
    pub max_train: usize,
    pub max_dev: usize,
    pub clip_norm: f64,
    pub freeze_static: bool,
    pub loss_reduction: Reduction,
    pub pooling: Pooling,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub include_no_answer: bool,
    pub min_count: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Snli,
            train: None,
            dev: None,
            vocab: None,
            static_vectors: None,
            contextual_cache: None,
            static_dim: 300,
            contextual_dim: 1024,
            hidden: 150,
            kernel: 3,
            conv_layers: 2,
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dropout: 0.2,
            epochs: 30,
            batch_size: 128,
            seed: 1,
            max_len: 0,
            max_train: 0,
            max_dev: 0,
            clip_norm: 5.0,
            freeze_static: false,
            loss_reduction: Reduction::Mean,
            pooling: Pooling::Splice,
            early_stop_patience: 0,
            include_no_answer: false,
            min_count: 1,
            ablation: Ablation::default(),
        }
    }
}

pub const KEYS: &[&str] = &[
    "task",
    "train",
    "dev",
    "vocab",
    "static_vectors",
    "contextual_cache",
    "static_dim",
    "contextual_dim",
    "hidden",
    "kernel",
    "conv_layers",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "dropout",
    "epochs",
    "batch_size",
    "seed",
    "max_len",
    "max_train",
    "max_dev",
    "clip_norm",
    "freeze_static",
    "loss_reduction",
    "pooling",
    "early_stop_patience",
    "include_no_answer",
    "min_count",
    "no_elmo",
    "no_alignment",
    "no_fusion",
    "no_self_attention",
    "only_h2p",
    "only_p2h",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Sets `key` (dashes and underscores are interchangeable).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "task" => self.task = value.parse()?,
            "train" => self.train = opt_path(value),
            "dev" => self.dev = opt_path(value),
            "vocab" => self.vocab = opt_path(value),
            "static_vectors" => self.static_vectors = opt_path(value),
            "contextual_cache" => self.contextual_cache = opt_path(value),
            "static_dim" => self.static_dim = parse_num(&key, value)?,
            "contextual_dim" => self.contextual_dim = parse_num(&key, value)?,
            "hidden" => self.hidden = parse_num(&key, value)?,
            "kernel" => self.kernel = parse_num(&key, value)?,
            "conv_layers" => self.conv_layers = parse_num(&key, value)?,
            "lr" => self.lr = parse_num(&key, value)?,
            "beta1" => self.beta1 = parse_num(&key, value)?,
            "beta2" => self.beta2 = parse_num(&key, value)?,
            "eps" => self.eps = parse_num(&key, value)?,
            "dropout" => self.dropout = parse_num(&key, value)?,
            "epochs" => self.epochs = parse_num(&key, value)?,
            "batch_size" => self.batch_size = parse_num(&key, value)?,
            "seed" => self.seed = parse_num(&key, value)?,
            "max_len" => self.max_len = parse_num(&key, value)?,
            "max_train" => self.max_train = parse_num(&key, value)?,
            "max_dev" => self.max_dev = parse_num(&key, value)?,
            "clip_norm" => self.clip_norm = parse_num(&key, value)?,
            "freeze_static" => self.freeze_static = parse_bool(&key, value)?,
            "loss_reduction" => {
                self.loss_reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("loss_reduction must be mean or sum, got {value:?}"))),
                }
            }
            "pooling" => {
                self.pooling = match value {
                    "splice" => Pooling::Splice,
                    "meanmax" => Pooling::MeanMax,
                    _ => return Err(Error::Config(format!("pooling must be splice or meanmax, got {value:?}"))),
                }
            }
            "early_stop_patience" => self.early_stop_patience = parse_num(&key, value)?,
            "include_no_answer" => self.include_no_answer = parse_bool(&key, value)?,
            "min_count" => self.min_count = parse_num(&key, value)?,
            flag @ ("no_elmo" | "no_alignment" | "no_fusion" | "no_self_attention" | "only_h2p" | "only_p2h") => {
                let on = parse_bool(flag, value)?;
                self.ablation.set(flag, on)?;
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let p = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "task" => self.task.to_string(),
            "train" => p(&self.train),
            "dev" => p(&self.dev),
            "vocab" => p(&self.vocab),
            "static_vectors" => p(&self.static_vectors),
            "contextual_cache" => p(&self.contextual_cache),
            "static_dim" => self.static_dim.to_string(),
            "contextual_dim" => self.contextual_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "kernel" => self.kernel.to_string(),
            "conv_layers" => self.conv_layers.to_string(),
            "lr" => self.lr.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "dropout" => self.dropout.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "max_len" => self.max_len.to_string(),
            "max_train" => self.max_train.to_string(),
            "max_dev" => self.max_dev.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "freeze_static" => self.freeze_static.to_string(),
            "loss_reduction" => match self.loss_reduction {
                Reduction::Mean => "mean".into(),
                Reduction::Sum => "sum".into(),
            },
            "pooling" => match self.pooling {
                Pooling::Splice => "splice".into(),
                Pooling::MeanMax => "meanmax".into(),
            },
            "early_stop_patience" => self.early_stop_patience.to_string(),
            "include_no_answer" => self.include_no_answer.to_string(),
            "min_count" => self.min_count.to_string(),
            flag => self
                .ablation
                .flags()
                .iter()
                .find(|f| f.0 == flag)
                .map(|f| f.1.to_string())?,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value, one `key = value` per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel width must be odd, got {}", self.kernel));
        }
        if self.hidden == 0 || self.static_dim == 0 || self.batch_size == 0 {
            return bad("hidden, static_dim and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0,1)".into());
        }
        self.ablation.validate()
    }

    pub fn max_len(&self) -> usize {
        if self.max_len > 0 {
            self.max_len
        } else {
            self.task.max_len()
        }
    }

    /// Contextual width after ablation.
    pub fn effective_contextual_dim(&self) -> usize {
        if self.ablation.no_elmo {
            0
        } else {
            self.contextual_dim
        }
    }

    /// Ablation fingerprint plus a hash of the full resolved configuration.
    pub fn fingerprint(&self) -> String {
        format!("{}@{:016x}", self.ablation.fingerprint(), fnv1a(self.to_text().as_bytes()))
    }
}
