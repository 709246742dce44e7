//! Training loop, evaluation, prediction, and the ablation matrix.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Dropout, Graph};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::{Ablation, TrainConfig, ABLATION_ROWS};
use crate::data::{self, build_batches, make_ranking_triples, Task, TokenizedPair};
use crate::embedding::{load_static_vectors, random_static_vectors, ContextualCache, ContextualSource, StubContextual, Vocab};
use crate::error::{Error, Result};
use crate::heads::{cross_entropy, hinge_loss};
use crate::metrics::{accuracy, map_mrr, Scored};
use crate::model::{argmax, Model, ModelConfig};
use crate::optim::{clip_global_norm, Adam, AdamConfig};

/// Training and validation pairs sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<TokenizedPair>,
    pub dev: Vec<TokenizedPair>,
}

/// Reads and tokenizes the splits named in `cfg`. The vocabulary comes from
/// `cfg.vocab` when set, otherwise from the training split.
pub fn load_corpus(cfg: &TrainConfig) -> Result<Corpus> {
    let train_path = cfg
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("no training split given (set `train`)".into()))?;
    let mut train_raw = data::read_dataset(train_path, cfg.task)?.pairs;
    if cfg.max_train > 0 {
        train_raw.truncate(cfg.max_train);
    }
    let vocab = match &cfg.vocab {
        Some(p) => Vocab::load(p)?,
        None => data::build_vocab(&train_raw, cfg.min_count),
    };
    let train = data::prepare_pairs(&train_raw, &vocab, cfg.max_len()).pairs;
    let dev = match &cfg.dev {
        Some(p) => load_split(p, cfg, &vocab, cfg.max_dev)?,
        None => Vec::new(),
    };
    Ok(Corpus { vocab, train, dev })
}

/// Reads one split against an existing vocabulary, keeping at most `limit` pairs (0 keeps all).
pub fn load_split(path: &Path, cfg: &TrainConfig, vocab: &Vocab, limit: usize) -> Result<Vec<TokenizedPair>> {
    let mut raw = data::read_dataset(path, cfg.task)?.pairs;
    if limit > 0 {
        raw.truncate(limit);
    }
    Ok(data::prepare_pairs(&raw, vocab, cfg.max_len()).pairs)
}

/// The contextual source named by `cfg`: a cache file when given, otherwise the
/// deterministic stub. `None` when the contextual width is zero.
pub fn contextual_source(cfg: &TrainConfig) -> Result<Option<Arc<dyn ContextualSource>>> {
    let dim = cfg.effective_contextual_dim();
    if dim == 0 {
        return Ok(None);
    }
    match &cfg.contextual_cache {
        Some(p) => {
            let cache = ContextualCache::load(p)?;
            if cache.dim() != dim {
                return Err(Error::Config(format!(
                    "contextual cache {} has width {}, contextual_dim is {dim}",
                    p.display(),
                    cache.dim()
                )));
            }
            Ok(Some(Arc::new(cache)))
        }
        None => {
            log::warn!("no contextual_cache given; using the deterministic stub source ({dim} dims)");
            Ok(Some(Arc::new(StubContextual { dim, seed: cfg.seed })))
        }
    }
}

/// A freshly initialised model for `cfg`, drawing from `rng`.
pub fn init_model(cfg: &TrainConfig, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Result<Model> {
    cfg.validate()?;
    let table = match &cfg.static_vectors {
        Some(p) => load_static_vectors(p, vocab, cfg.static_dim, rng)?,
        None => random_static_vectors(vocab, cfg.static_dim, rng),
    };
    Model::new(ModelConfig::from_train(cfg), vocab.clone(), table, contextual_source(cfg)?, rng)
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    Model::from_parts(
        ModelConfig::from_train(&ckpt.config),
        ckpt.vocab.clone(),
        contextual_source(&ckpt.config)?,
        ckpt.params.clone(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batch_losses: Vec<f64>,
    /// Mean of `batch_losses`.
    pub train_loss: f64,
    /// Validation metric (accuracy or MAP), when a validation split exists.
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// State after the epoch with the best validation metric (the last epoch without validation data).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub stopped_early: bool,
}

impl TrainOutcome {
    /// One `epoch=… loss=… dev=…` line per epoch.
    pub fn history_text(&self) -> String {
        self.history
            .iter()
            .map(|r| match r.dev_metric {
                Some(m) => format!("epoch={} loss={:?} dev={m:?}\n", r.epoch, r.train_loss),
                None => format!("epoch={} loss={:?}\n", r.epoch, r.train_loss),
            })
            .collect()
    }
}

fn snapshot(model: &Model, adam: &Adam, rng: &ChaCha8Rng, cfg: &TrainConfig, epoch: usize, metric: f64) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        epoch,
        params: model.params().to_vec(),
        adam: adam.clone(),
        rng: RngState::capture(rng),
        fingerprint: cfg.fingerprint(),
        metric,
        vocab: model.vocab.clone(),
    }
}

/// Gradient of every parameter after one backward pass (zeros where none flowed).
fn collect_grads(model: &Model, g: &Graph) -> Vec<Vec<f64>> {
    let mut sparse = g.param_grads(|i| model.param(i).cols());
    (0..model.params().len())
        .map(|i| sparse.remove(&i).unwrap_or_else(|| vec![0.0; model.param(i).len()]))
        .collect()
}

/// Training loss of one batch; `members` index `pairs`, or triples for ranking.
fn batch_loss(
    model: &Model,
    cfg: &TrainConfig,
    g: &mut Graph,
    pairs: &[TokenizedPair],
    batch: &Batch,
    dropout: &mut Dropout,
) -> Result<crate::autograd::Var> {
    let vars = model.register(g);
    match batch {
        Batch::Pairs(members) => {
            let refs: Vec<&TokenizedPair> = members.iter().map(|&i| &pairs[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|p| p.label).collect();
            let probs = model.forward_batch(g, &vars, &refs, dropout)?;
            cross_entropy(g, probs, &labels, cfg.loss_reduction)
        }
        Batch::Triples(triples) => {
            let pos: Vec<&TokenizedPair> = triples.iter().map(|t| &pairs[t.positive]).collect();
            let neg: Vec<&TokenizedPair> = triples.iter().map(|t| &pairs[t.negative]).collect();
            let sp = model.forward_batch(g, &vars, &pos, dropout)?;
            let sn = model.forward_batch(g, &vars, &neg, dropout)?;
            hinge_loss(g, sp, sn)
        }
    }
}

enum Batch {
    Pairs(Vec<usize>),
    Triples(Vec<data::Triple>),
}

fn epoch_batches(cfg: &TrainConfig, pairs: &[TokenizedPair], shuffle_seed: u64) -> Vec<Batch> {
    if cfg.task.is_ranking() {
        let mut triples = make_ranking_triples(pairs, shuffle_seed);
        use rand::seq::SliceRandom;
        triples.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        triples
            .chunks(cfg.batch_size.max(1))
            .map(|c| Batch::Triples(c.to_vec()))
            .collect()
    } else {
        build_batches(pairs, cfg.batch_size, Some(shuffle_seed))
            .into_iter()
            .map(|b| Batch::Pairs(b.members))
            .collect()
    }
}

/// One optimizer step on one batch; returns the loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    cfg: &TrainConfig,
    pairs: &[TokenizedPair],
    members: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch = Batch::Pairs(members.to_vec());
    step(model, adam, cfg, pairs, &batch, rng, (0, 0))
}

fn step(
    model: &mut Model,
    adam: &mut Adam,
    cfg: &TrainConfig,
    pairs: &[TokenizedPair],
    batch: &Batch,
    rng: &mut ChaCha8Rng,
    at: (usize, usize),
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = {
        let mut dropout = Dropout::train(cfg.dropout, rng);
        batch_loss(model, cfg, &mut g, pairs, batch, &mut dropout)?
    };
    let value = g.value(loss).item();
    g.backward(loss)?;
    let mut grads = collect_grads(model, &g);
    let finite = grads.iter().flatten().all(|v| v.is_finite());
    let max_grad = grads
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| if v.is_nan() || v.abs() > m { v.abs() } else { m });
    if !value.is_finite() || !finite {
        return Err(Error::Diverged {
            epoch: at.0,
            batch: at.1,
            loss: value,
            max_grad,
        });
    }
    clip_global_norm(&mut grads, cfg.clip_norm);
    let frozen: Vec<bool> = (0..grads.len()).map(|i| !model.trainable(i)).collect();
    let mut slices = model.values_mut();
    let refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
    adam.step(&mut slices, &refs, &frozen)?;
    Ok(value)
}

/// Validation metric used for model selection: accuracy, or MAP for ranking.
fn selection_metric(report: &EvalReport) -> f64 {
    match report.metric {
        Metric::Accuracy(a) => a,
        Metric::Ranking { map, .. } => map,
    }
}

/// Trains from scratch on `corpus` under `cfg`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidData("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = init_model(cfg, &corpus.vocab, &mut rng)?;
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        },
        &sizes,
    );
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let shuffle_seed: u64 = rng.gen();
        let batches = epoch_batches(cfg, &corpus.train, shuffle_seed);
        let mut losses = Vec::with_capacity(batches.len());
        for (b, batch) in batches.iter().enumerate() {
            losses.push(step(&mut model, &mut adam, cfg, &corpus.train, batch, &mut rng, (epoch, b + 1))?);
        }
        let train_loss = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let dev_metric = if corpus.dev.is_empty() {
            None
        } else {
            Some(selection_metric(&evaluate(&model, &corpus.dev, cfg)?))
        };
        log::info!(
            "epoch {epoch}/{} loss={train_loss:.6}{}",
            cfg.epochs,
            dev_metric.map(|m| format!(" dev={m:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            batch_losses: losses,
            train_loss,
            dev_metric,
        });

        let metric = dev_metric.unwrap_or(f64::NAN);
        let improved = match (&best, dev_metric) {
            (None, _) | (_, None) => true,
            (Some(b), Some(m)) => m > b.metric,
        };
        if improved {
            best = Some(snapshot(&model, &adam, &rng, cfg, epoch, metric));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}");
                stopped_early = true;
                break;
            }
        }
    }
    let last_epoch = history.last().map_or(0, |r| r.epoch);
    let last_metric = history.last().and_then(|r| r.dev_metric).unwrap_or(f64::NAN);
    let last = snapshot(&model, &adam, &rng, cfg, last_epoch, last_metric);
    Ok(TrainOutcome {
        history,
        best: best.unwrap_or_else(|| last.clone()),
        last,
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Accuracy(f64),
    Ranking { map: f64, mrr: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub metric: Metric,
    /// Pairs scored (groups counted for ranking).
    pub count: usize,
    pub fingerprint: String,
    /// Whether groups without a relevant candidate entered MAP/MRR.
    pub include_no_answer: bool,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.metric {
            Metric::Accuracy(a) => writeln!(f, "acc={a:.4}")?,
            Metric::Ranking { map, mrr } => writeln!(f, "map={map:.4} mrr={mrr:.4}")?,
        }
        writeln!(f, "task={}", self.task)?;
        writeln!(f, "count={}", self.count)?;
        if self.task.is_ranking() {
            writeln!(f, "include_no_answer={}", self.include_no_answer)?;
        }
        write!(f, "fingerprint={}", self.fingerprint)
    }
}

/// Scores every pair in inference mode.
pub fn evaluate(model: &Model, pairs: &[TokenizedPair], cfg: &TrainConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidData("evaluation split is empty".into()));
    }
    let refs: Vec<&TokenizedPair> = pairs.iter().collect();
    let outputs = model.predict(&refs)?;
    let metric = if cfg.task.is_ranking() {
        let scored: Vec<Vec<Scored>> = data::groups(pairs)
            .iter()
            .map(|grp| {
                grp.members
                    .iter()
                    .map(|&i| Scored {
                        score: outputs[i][0],
                        relevant: pairs[i].label == 1,
                    })
                    .collect()
            })
            .collect();
        let m = map_mrr(&scored, cfg.include_no_answer)?;
        return Ok(EvalReport {
            task: cfg.task,
            metric: Metric::Ranking { map: m.map, mrr: m.mrr },
            count: m.groups,
            fingerprint: cfg.fingerprint(),
            include_no_answer: cfg.include_no_answer,
        });
    } else {
        let preds: Vec<usize> = outputs.iter().map(|o| argmax(o)).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.label).collect();
        Metric::Accuracy(accuracy(&preds, &labels)?)
    };
    Ok(EvalReport {
        task: cfg.task,
        metric,
        count: pairs.len(),
        fingerprint: cfg.fingerprint(),
        include_no_answer: cfg.include_no_answer,
    })
}

/// One `pair_id<TAB>label<TAB>outputs…` line per pair: the predicted label and
/// class probabilities, or `score` and the matching score for ranking.
pub fn predict_lines(model: &Model, pairs: &[TokenizedPair], task: Task) -> Result<Vec<String>> {
    let refs: Vec<&TokenizedPair> = pairs.iter().collect();
    let outputs = model.predict(&refs)?;
    Ok(pairs
        .iter()
        .zip(outputs)
        .map(|(p, out)| {
            let values: Vec<String> = out.iter().map(|v| format!("{v:.6}")).collect();
            let label = if task.is_ranking() {
                "score"
            } else {
                task.labels()[argmax(&out)]
            };
            format!("{}\t{label}\t{}", p.pair_id, values.join("\t"))
        })
        .collect())
}

/// One row of the ablation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub fingerprint: &'static str,
    /// Mean over seeds of the validation metric.
    pub metric: f64,
    pub per_seed: Vec<f64>,
    /// `(metric − full) × 100`; zero for the full model.
    pub delta_points: f64,
    pub param_count: usize,
}

/// Trains and evaluates the seven variants (full model first) once per seed.
/// Evaluates on the validation split, or the training split when there is none.
pub fn ablation_matrix(base: &TrainConfig, corpus: &Corpus, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let eval_split = if corpus.dev.is_empty() { &corpus.train } else { &corpus.dev };
    let mut rows: Vec<AblationRow> = Vec::with_capacity(ABLATION_ROWS.len());
    for (name, fp) in ABLATION_ROWS {
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut param_count = 0;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.ablation = Ablation::from_fingerprint(fp)?;
            cfg.seed = seed;
            let out = train(&cfg, corpus)?;
            let model = model_from_checkpoint(&out.best)?;
            param_count = model.param_count();
            per_seed.push(selection_metric(&evaluate(&model, eval_split, &cfg)?));
            log::info!("ablation {fp} seed {seed}: {:.4}", per_seed.last().copied().unwrap_or(f64::NAN));
        }
        let metric = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        let full = rows.first().map_or(metric, |r| r.metric);
        rows.push(AblationRow {
            name,
            fingerprint: fp,
            metric,
            per_seed,
            delta_points: (metric - full) * 100.0,
            param_count,
        });
    }
    Ok(rows)
}

/// The matrix as `name=… fingerprint=… metric=… delta=…` lines.
pub fn ablation_text(rows: &[AblationRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "name={:?} fingerprint={} metric={:.4} delta={:+.1} params={}\n",
                r.name, r.fingerprint, r.metric, r.delta_points, r.param_count
            )
        })
        .collect()
}
