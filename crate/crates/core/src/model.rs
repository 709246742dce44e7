//! The full matching network: parameters, the per-pair forward trace, and
//! batched head outputs.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Dropout, Graph, Var};
use crate::config::{Ablation, TrainConfig};
use crate::data::TokenizedPair;
use crate::embedding::{ContextualSource, Sentence, Vocab};
use crate::encoder::{encode_pair, ContextVars, EncoderVars, FuseVars, PairEncoding};
use crate::error::{Error, Result};
use crate::heads::{head_forward, pool, HeadKind, Pooling};
use crate::interaction::{h2p_attention, merge, p2h_attention, self_attend, similarity, zeros_like, P2h};
use crate::tensor::Tensor;

/// Index of the static embedding table among the parameters.
pub const STATIC_TABLE: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub static_dim: usize,
    /// Contextual width before ablation.
    pub contextual_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub conv_layers: usize,
    pub head: HeadKind,
    pub pooling: Pooling,
    pub dropout: f64,
    pub freeze_static: bool,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            static_dim: cfg.static_dim,
            contextual_dim: cfg.contextual_dim,
            hidden: cfg.hidden,
            kernel: cfg.kernel,
            conv_layers: cfg.conv_layers,
            head: cfg.task.head(),
            pooling: cfg.pooling,
            dropout: cfg.dropout,
            freeze_static: cfg.freeze_static,
            ablation: cfg.ablation,
        }
    }

    /// Contextual width actually fed to the encoder.
    pub fn effective_contextual_dim(&self) -> usize {
        if self.ablation.no_elmo {
            0
        } else {
            self.contextual_dim
        }
    }

    pub fn input_dim(&self) -> usize {
        self.static_dim + self.effective_contextual_dim()
    }

    /// Names and shapes of every parameter after the static table, in index order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (e, d, w) = (self.input_dim(), self.hidden, self.kernel);
        let mut out = vec![("enc.proj.w".to_string(), vec![e, d]), ("enc.proj.b".into(), vec![d])];
        for i in 0..self.conv_layers {
            out.push((format!("enc.conv{i}.k"), vec![w, d, d]));
            out.push((format!("enc.conv{i}.b"), vec![d]));
        }
        for n in ["enc.attn.q", "enc.attn.k", "enc.attn.v"] {
            out.push((n.into(), vec![d, d]));
        }
        if !self.ablation.no_alignment {
            out.push(("align.wc".into(), vec![d, d]));
            out.push(("align.wq".into(), vec![d, d]));
        }
        if self.ablation.no_fusion {
            out.push(("fuse.proj".into(), vec![2 * d, d]));
        } else {
            out.push(("fuse.w1".into(), vec![4 * d, d]));
            out.push(("fuse.w2".into(), vec![4 * d, d]));
        }
        out.push(("inter.wh".into(), vec![d, d]));
        out.push(("inter.wp".into(), vec![d, d]));
        out.push(("head.w".into(), vec![8 * d, self.head.out_dim()]));
        out.push(("head.b".into(), vec![self.head.out_dim()]));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel width must be odd, got {}", self.kernel)));
        }
        if self.hidden == 0 || self.static_dim == 0 {
            return Err(Error::Config("hidden and static_dim must be positive".into()));
        }
        self.ablation.validate()
    }
}

/// Graph handles of every parameter, registered for one forward pass.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub inter_wh: Var,
    pub inter_wp: Var,
    pub head_w: Var,
    pub head_b: Var,
}

/// Every intermediate of one pair's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PairTrace {
    pub x: Var,
    pub y: Var,
    pub encoding: PairEncoding,
    pub similarity: Var,
    pub h2p_weights: Var,
    pub q_att: Var,
    pub p2h: P2h,
    pub c_att: Var,
    pub merged: Var,
    /// `None` when self-attention is ablated.
    pub self_weights: Option<Var>,
    pub z: Var,
    pub pooled: Var,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub contextual: Option<Arc<dyn ContextualSource>>,
    params: Vec<(String, Tensor)>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            contextual: self.contextual.clone(),
            params: self.params.clone(),
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("vocab", &self.vocab.len())
            .field("params", &self.param_count())
            .finish()
    }
}

impl Model {
    /// Glorot weights, zero biases. `contextual` is dropped when the ablation disables it.
    pub fn new<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: Vocab,
        static_vectors: Tensor,
        contextual: Option<Arc<dyn ContextualSource>>,
        rng: &mut R,
    ) -> Result<Self> {
        let contextual = if config.ablation.no_elmo { None } else { contextual };
        let layout = config.layout();
        let mut params = Vec::with_capacity(layout.len() + 1);
        params.push(("embed.static".to_string(), static_vectors));
        for (name, shape) in layout {
            let t = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                Tensor::glorot(&shape, rng)
            };
            params.push((name, t));
        }
        Self::from_parts(config, vocab, contextual, params)
    }

    /// Assembles a model from named tensors, checking names and shapes against the layout.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        contextual: Option<Arc<dyn ContextualSource>>,
        params: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        config.validate()?;
        let ctx_dim = contextual.as_ref().map_or(0, |c| c.dim());
        if ctx_dim != config.effective_contextual_dim() {
            return Err(Error::Config(format!(
                "contextual source has width {ctx_dim}, configuration expects {}",
                config.effective_contextual_dim()
            )));
        }
        let mut expected = vec![("embed.static".to_string(), vec![vocab.len(), config.static_dim])];
        expected.extend(config.layout());
        if params.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, t), (want_name, want_shape)) in params.iter().zip(&expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            vocab,
            contextual,
            params,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i].1
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].1
    }

    /// Mutable views of every parameter's values, in index order.
    pub fn values_mut(&mut self) -> Vec<&mut [f64]> {
        self.params.iter_mut().map(|(_, t)| t.data_mut()).collect()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|(n, _)| n == name)
    }

    /// Total number of scalar parameters, embedding table included.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Whether parameter `i` is updated by the optimizer.
    pub fn trainable(&self, i: usize) -> bool {
        !(i == STATIC_TABLE && self.config.freeze_static)
    }

    fn var(&self, g: &mut Graph, name: &str) -> Var {
        let i = self.index_of(name).unwrap_or_else(|| panic!("layout has no parameter {name}"));
        g.param(i, &self.params[i].1)
    }

    pub fn register(&self, g: &mut Graph) -> ModelVars {
        let context = ContextVars {
            proj_w: self.var(g, "enc.proj.w"),
            proj_b: self.var(g, "enc.proj.b"),
            convs: (0..self.config.conv_layers)
                .map(|i| (self.var(g, &format!("enc.conv{i}.k")), self.var(g, &format!("enc.conv{i}.b"))))
                .collect(),
            attn_q: self.var(g, "enc.attn.q"),
            attn_k: self.var(g, "enc.attn.k"),
            attn_v: self.var(g, "enc.attn.v"),
        };
        let align = (!self.config.ablation.no_alignment).then(|| (self.var(g, "align.wc"), self.var(g, "align.wq")));
        let fuse = if self.config.ablation.no_fusion {
            FuseVars::Spliced {
                w: self.var(g, "fuse.proj"),
            }
        } else {
            FuseVars::Gated {
                w1: self.var(g, "fuse.w1"),
                w2: self.var(g, "fuse.w2"),
            }
        };
        ModelVars {
            encoder: EncoderVars { context, align, fuse },
            inter_wh: self.var(g, "inter.wh"),
            inter_wp: self.var(g, "inter.wp"),
            head_w: self.var(g, "head.w"),
            head_b: self.var(g, "head.b"),
        }
    }

    /// Embedded input matrix of a sentence as a tensor (PAD rows beyond its length are zero).
    pub fn embed_tensor(&self, sentence: &Sentence, pad_to: usize) -> Result<Tensor> {
        let ctx = self.contextual_rows(sentence)?;
        crate::embedding::compose_rows(
            &self.params[STATIC_TABLE].1,
            sentence,
            ctx.as_deref(),
            self.config.effective_contextual_dim(),
            pad_to,
        )
    }

    fn contextual_rows(&self, sentence: &Sentence) -> Result<Option<Vec<f64>>> {
        self.contextual.as_ref().map(|c| c.lookup(sentence)).transpose()
    }

    /// Embeds a sentence on the graph: gathered static rows, then contextual rows as constants.
    pub fn embed(&self, g: &mut Graph, sentence: &Sentence) -> Result<Var> {
        if sentence.is_empty() {
            return Err(Error::EmptySequence);
        }
        let table = &self.params[STATIC_TABLE].1;
        let statics = g.gather(STATIC_TABLE, table, &sentence.ids, self.trainable(STATIC_TABLE))?;
        match self.contextual_rows(sentence)? {
            None => Ok(statics),
            Some(rows) => {
                let ctx = g.constant(Tensor::new(&[sentence.len(), self.config.effective_contextual_dim()], rows)?);
                g.concat(&[statics, ctx], 1)
            }
        }
    }

    /// Forward pass from embedded inputs `x` (`n × e`) and `y` (`m × e`) to the pooled vector.
    pub fn forward_embedded(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        x: Var,
        y: Var,
        mask_x: &[bool],
        mask_y: &[bool],
        dropout: &mut Dropout,
    ) -> Result<PairTrace> {
        let ab = self.config.ablation;
        let x = g.mask_rows(x, mask_x)?;
        let y = g.mask_rows(y, mask_y)?;
        let encoding = encode_pair(g, x, y, mask_x, mask_y, &vars.encoder, dropout)?;
        let (h, p) = (encoding.h, encoding.p);

        let s = similarity(g, h, p, vars.inter_wh, vars.inter_wp)?;
        let (h2p_weights, q_att) = h2p_attention(g, s, p, mask_x, mask_y)?;
        let p2h = p2h_attention(g, s, h, mask_x, mask_y)?;
        let q_att = if ab.only_p2h { zeros_like(g, q_att) } else { q_att };
        let c_att = if ab.only_h2p { zeros_like(g, p2h.tiled) } else { p2h.tiled };

        let merged = merge(g, h, q_att, c_att)?;
        let (self_weights, z) = if ab.no_self_attention {
            (None, merged)
        } else {
            let (w, z) = self_attend(g, merged, mask_x)?;
            (Some(w), z)
        };
        let pooled = pool(g, z, mask_x, self.config.pooling)?;
        Ok(PairTrace {
            x,
            y,
            encoding,
            similarity: s,
            h2p_weights,
            q_att,
            p2h,
            c_att,
            merged,
            self_weights,
            z,
            pooled,
        })
    }

    pub fn forward_pair(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        a: &Sentence,
        b: &Sentence,
        dropout: &mut Dropout,
    ) -> Result<PairTrace> {
        let x = self.embed(g, a)?;
        let y = self.embed(g, b)?;
        let mask_x = vec![true; a.len()];
        let mask_y = vec![true; b.len()];
        self.forward_embedded(g, vars, x, y, &mask_x, &mask_y, dropout)
    }

    /// Head outputs (`N × out_dim`) for a batch of pairs.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        pairs: &[&TokenizedPair],
        dropout: &mut Dropout,
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::InvalidData("empty batch".into()));
        }
        let mut pooled = Vec::with_capacity(pairs.len());
        for p in pairs {
            pooled.push(self.forward_pair(g, vars, &p.a, &p.b, dropout)?.pooled);
        }
        let stacked = if pooled.len() == 1 { pooled[0] } else { g.concat(&pooled, 0)? };
        head_forward(g, stacked, vars.head_w, vars.head_b, self.config.head)
    }

    /// Inference-mode head outputs, one row per pair.
    pub fn predict(&self, pairs: &[&TokenizedPair]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut g = Graph::new();
            let vars = self.register(&mut g);
            let y = self.forward_batch(&mut g, &vars, &[p], &mut Dropout::eval())?;
            out.push(g.value(y).data().to_vec());
        }
        Ok(out)
    }
}

/// Index of the largest entry; the first wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
