//! Browser demo bindings.
//!
//! A small model is trained in the page on the bundled synthetic corpus.
//! [`Demo`] does the work natively and returns JSON; the `wasm` module wraps
//! it for JavaScript as `WebDemo`.

use deim::autograd::{Dropout, Graph, Var};
use deim::data::{build_batches, parse_dataset, prepare_pairs, TokenizedPair};
use deim::embedding::{tokenize, Sentence};
use deim::heads::head_forward;
use deim::model::{argmax, Model};
use deim::optim::{Adam, AdamConfig};
use deim::trainer::{evaluate, init_model, train_step, Metric};
use deim::{Ablation, Error, Result, Task, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use std::path::Path;

pub const CORPUS: &str = include_str!("../../../fixtures/tiny_snli.tsv");

/// Longest sentence accepted by [`Demo::inspect`].
pub const MAX_TOKENS: usize = 24;

pub struct Demo {
    cfg: TrainConfig,
    model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    pairs: Vec<TokenizedPair>,
    epoch: usize,
    losses: Vec<f64>,
}

fn rows(g: &Graph, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn row_means(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect()
}

impl Demo {
    /// Fresh model with the given ablation fingerprint (`full`, `no_fusion`, …).
    pub fn new(ablation: &str, seed: u64) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.static_dim = 16;
        cfg.contextual_dim = 8;
        cfg.hidden = 16;
        cfg.batch_size = 16;
        cfg.lr = 0.005;
        cfg.dropout = 0.1;
        cfg.seed = seed;
        cfg.ablation = Ablation::from_fingerprint(ablation)?;
        cfg.validate()?;
        let raw = parse_dataset(CORPUS, Path::new("tiny_snli.tsv"), cfg.task)?.pairs;
        let vocab = deim::data::build_vocab(&raw, 1);
        let pairs = prepare_pairs(&raw, &vocab, cfg.max_len()).pairs;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = init_model(&cfg, &vocab, &mut rng)?;
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.eps,
            },
            &sizes,
        );
        Ok(Demo {
            cfg,
            model,
            adam,
            rng,
            pairs,
            epoch: 0,
            losses: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Runs `epochs` more passes over the corpus; returns the loss curve so far
    /// and the current training accuracy.
    pub fn train(&mut self, epochs: usize) -> Result<Value> {
        for _ in 0..epochs {
            let batches = build_batches(&self.pairs, self.cfg.batch_size, Some(self.rng.gen()));
            let mut total = 0.0;
            for b in &batches {
                total += train_step(&mut self.model, &mut self.adam, &self.cfg, &self.pairs, &b.members, &mut self.rng)?;
            }
            self.epoch += 1;
            self.losses.push(total / batches.len() as f64);
        }
        let Metric::Accuracy(acc) = evaluate(&self.model, &self.pairs, &self.cfg)?.metric else {
            unreachable!("the demo task is classification")
        };
        Ok(json!({
            "epoch": self.epoch,
            "losses": self.losses,
            "train_accuracy": acc,
            "pairs": self.pairs.len(),
        }))
    }

    /// Every intermediate map for one sentence pair.
    pub fn inspect(&self, a: &str, b: &str) -> Result<Value> {
        let sa = self.sentence(a)?;
        let sb = self.sentence(b)?;
        let mut g = Graph::new();
        let vars = self.model.register(&mut g);
        let tr = self.model.forward_pair(&mut g, &vars, &sa, &sb, &mut Dropout::eval())?;
        let probs = head_forward(&mut g, tr.pooled, vars.head_w, vars.head_b, self.model.config.head)?;
        let probs = g.value(probs).data().to_vec();
        let alignment = tr.encoding.alignment.as_ref().map(|al| {
            json!({
                "scores": rows(&g, al.scores),
                "a_to_b": rows(&g, al.row_weights),
                "b_to_a": rows(&g, al.col_weights),
            })
        });
        let gates = tr.encoding.gates.map(|(ga, gb)| {
            json!({
                "a": row_means(&rows(&g, ga)),
                "b": row_means(&rows(&g, gb)),
            })
        });
        let p2h: Vec<f64> = g.value(tr.p2h.weights).data().to_vec();
        Ok(json!({
            "tokens_a": sa.tokens,
            "tokens_b": sb.tokens,
            "ablation": self.cfg.ablation.fingerprint(),
            "epoch": self.epoch,
            "alignment": alignment,
            "gates": gates,
            "similarity": rows(&g, tr.similarity),
            "h2p": rows(&g, tr.h2p_weights),
            "p2h": p2h,
            "self_attention": tr.self_weights.map(|w| rows(&g, w)),
            "labels": Task::Snli.labels(),
            "probs": probs,
            "prediction": Task::Snli.labels()[argmax(&probs)],
        }))
    }

    fn sentence(&self, text: &str) -> Result<Sentence> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(Sentence::new(tokens, &self.model.vocab, MAX_TOKENS))
    }
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use super::Demo;
    use wasm_bindgen::prelude::*;

    #[wasm_bindgen]
    pub struct WebDemo(Demo);

    fn js(e: impl std::fmt::Display) -> JsError {
        JsError::new(&e.to_string())
    }

    #[wasm_bindgen]
    impl WebDemo {
        #[wasm_bindgen(constructor)]
        pub fn new(ablation: &str, seed: u32) -> Result<WebDemo, JsError> {
            Demo::new(ablation, seed.into()).map(WebDemo).map_err(js)
        }

        /// JSON: `{epoch, losses, train_accuracy, pairs}`.
        pub fn train(&mut self, epochs: u32) -> Result<String, JsError> {
            self.0.train(epochs as usize).map(|v| v.to_string()).map_err(js)
        }

        /// JSON with the alignment, gate, interaction and self-attention maps.
        pub fn inspect(&self, a: &str, b: &str) -> Result<String, JsError> {
            self.0.inspect(a, b).map(|v| v.to_string()).map_err(js)
        }

        pub fn epoch(&self) -> u32 {
            self.0.epoch() as u32
        }
    }
}
