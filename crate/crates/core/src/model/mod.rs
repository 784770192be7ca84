//! Transformer models with capture hooks and a flattened attention-weight view.

mod batch;
pub mod checkpoint;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nncore::{Gradients, Graph, Mask, NnError, NodeId, Tensor};

pub use batch::{Batch, Metrics, Scoring};
pub use params::{dot, Param, ParamStore, ParamVector};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("batch does not match architecture")]
    WrongBatch,
    #[error("parameter vector has length {got}, expected {expected}")]
    ViewLength { got: usize, expected: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Decoder-only: number of blocks. Encoder-decoder: encoder blocks.
    pub n_layers: usize,
    /// Decoder blocks of an encoder-decoder model.
    #[serde(default)]
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_in: usize,
    pub vocab_out: usize,
    /// Longest input (source) sequence.
    pub max_len: usize,
    /// Longest decoder sequence (encoder-decoder only).
    #[serde(default)]
    pub max_tgt_len: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// 2 layers, d_model 128, 4 heads, 3 input tokens, 13 depth classes.
    pub fn dyck() -> Self {
        Self {
            arch: Arch::DecoderOnly,
            n_layers: 2,
            n_dec_layers: 0,
            d_model: 128,
            n_heads: 4,
            d_ff: 32,
            vocab_in: crate::tasks::DYCK_VOCAB,
            vocab_out: 13,
            max_len: crate::tasks::DYCK_DEFAULT_LEN,
            max_tgt_len: 0,
            init_std: 0.2,
        }
    }

    /// Desk-scale encoder-decoder for the mini-SCAN fragment.
    pub fn scan_small() -> Self {
        Self {
            arch: Arch::EncoderDecoder,
            n_layers: 1,
            n_dec_layers: 1,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_in: crate::tasks::SCAN_COMMAND_VOCAB.len(),
            vocab_out: crate::tasks::SCAN_ACTION_VOCAB.len(),
            max_len: 12,
            max_tgt_len: 20,
            init_std: default_init_std(),
        }
    }

    /// Decoder-only model reading `a b =` and predicting the residue.
    pub fn modadd(p: usize) -> Self {
        Self {
            arch: Arch::DecoderOnly,
            n_layers: 1,
            n_dec_layers: 0,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_in: p + 1,
            vocab_out: p,
            max_len: 3,
            max_tgt_len: 0,
            init_std: default_init_std(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of blocks carrying attention.
    pub fn total_blocks(&self) -> usize {
        match self.arch {
            Arch::DecoderOnly => self.n_layers,
            Arch::EncoderDecoder => self.n_layers + self.n_dec_layers,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 {
            return err("d_model and n_heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(&format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return err("n_layers must be positive");
        }
        if self.vocab_in == 0 || self.vocab_out == 0 || self.max_len == 0 {
            return err("vocabularies and max_len must be positive");
        }
        if self.arch == Arch::EncoderDecoder && (self.n_dec_layers == 0 || self.max_tgt_len == 0) {
            return err("encoder-decoder needs n_dec_layers and max_tgt_len");
        }
        if !(self.init_std > 0.0) {
            return err("init_std must be positive");
        }
        Ok(())
    }
}

/// Activations captured during a forward pass.
#[derive(Clone, Debug)]
pub struct CaptureBundle {
    /// `[batch, len, vocab_out]`.
    pub logits: Tensor,
    /// Residual stream after each block of the main stack, `[batch, len, d]`.
    pub resid: Vec<Tensor>,
    /// Self-attention probabilities per block, `[batch, heads, len, len]`.
    pub attn: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Traced {
    logits: NodeId,
    resid: Vec<NodeId>,
    attn: Vec<NodeId>,
}

fn block_prefixes(cfg: &ModelConfig) -> (Vec<String>, Vec<String>) {
    match cfg.arch {
        Arch::DecoderOnly => ((0..cfg.n_layers).map(|i| format!("layers.{i}")).collect(), Vec::new()),
        Arch::EncoderDecoder => (
            (0..cfg.n_layers).map(|i| format!("enc.layers.{i}")).collect(),
            (0..cfg.n_dec_layers).map(|i| format!("dec.layers.{i}")).collect(),
        ),
    }
}

impl Model {
    /// Scaled-normal init (std `init_std`; attention and MLP output
    /// projections further scaled by `1/sqrt(2 * blocks)`), zero biases, unit
    /// layernorm gains.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = config.init_std;
        let out_std = std / (2.0 * config.total_blocks() as f64).sqrt();
        let d = config.d_model;
        let mut ps = ParamStore::default();
        let mut normal = |shape: &[usize], s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
        };
        let ln = |ps: &mut ParamStore, name: &str| {
            ps.push(format!("{name}.g"), Tensor::full(&[d], 1.0), false);
            ps.push(format!("{name}.b"), Tensor::zeros(&[d]), false);
        };
        let (src_prefix, stacks) = match config.arch {
            Arch::DecoderOnly => ("", block_prefixes(&config).0),
            Arch::EncoderDecoder => ("enc.", block_prefixes(&config).0),
        };
        ps.push(format!("{src_prefix}tok_emb"), normal(&[config.vocab_in, d], std), true);
        ps.push(format!("{src_prefix}pos_emb"), normal(&[config.max_len, d], std), true);
        let attn = |ps: &mut ParamStore, normal: &mut dyn FnMut(&[usize], f64) -> Tensor, pre: &str| {
            for m in ["q", "k", "v"] {
                ps.push(format!("{pre}.{m}"), normal(&[d, d], std), true);
            }
            ps.push(format!("{pre}.o"), normal(&[d, d], out_std), true);
        };
        let mlp = |ps: &mut ParamStore, normal: &mut dyn FnMut(&[usize], f64) -> Tensor, pre: &str| {
            ps.push(format!("{pre}.w1"), normal(&[d, config.d_ff], std), true);
            ps.push(format!("{pre}.b1"), Tensor::zeros(&[config.d_ff]), false);
            ps.push(format!("{pre}.w2"), normal(&[config.d_ff, d], out_std), true);
            ps.push(format!("{pre}.b2"), Tensor::zeros(&[d]), false);
        };
        for pre in &stacks {
            ln(&mut ps, &format!("{pre}.ln1"));
            attn(&mut ps, &mut normal, &format!("{pre}.attn"));
            ln(&mut ps, &format!("{pre}.ln2"));
            mlp(&mut ps, &mut normal, &format!("{pre}.mlp"));
        }
        ln(&mut ps, &format!("{src_prefix}ln_f"));
        if config.arch == Arch::EncoderDecoder {
            ps.push("dec.tok_emb", normal(&[config.vocab_out, d], std), true);
            ps.push("dec.pos_emb", normal(&[config.max_tgt_len, d], std), true);
            for pre in &block_prefixes(&config).1 {
                ln(&mut ps, &format!("{pre}.ln1"));
                attn(&mut ps, &mut normal, &format!("{pre}.self"));
                ln(&mut ps, &format!("{pre}.ln2"));
                attn(&mut ps, &mut normal, &format!("{pre}.cross"));
                ln(&mut ps, &format!("{pre}.ln3"));
                mlp(&mut ps, &mut normal, &format!("{pre}.mlp"));
            }
            ln(&mut ps, "dec.ln_f");
        }
        ps.push("head.w", normal(&[d, config.vocab_out], std), true);
        ps.push("head.b", Tensor::zeros(&[config.vocab_out]), false);
        Ok(Self { config, params: ps })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Names of the attention matrices, in view order: block by block
    /// (encoder blocks first), and within a block `q, k, v, o` (decoder
    /// blocks: self then cross).
    pub fn attention_names(&self) -> Vec<String> {
        let (enc, dec) = block_prefixes(&self.config);
        let mut out = Vec::new();
        for pre in &enc {
            for m in ["q", "k", "v", "o"] {
                out.push(format!("{pre}.attn.{m}"));
            }
        }
        for pre in &dec {
            for kind in ["self", "cross"] {
                for m in ["q", "k", "v", "o"] {
                    out.push(format!("{pre}.{kind}.{m}"));
                }
            }
        }
        out
    }

    fn attention_indices(&self) -> Vec<usize> {
        self.attention_names()
            .iter()
            .map(|n| self.params.index_of(n).expect("attention parameter exists"))
            .collect()
    }

    /// Dimension `p` of the attention view.
    pub fn attention_dim(&self) -> usize {
        self.attention_indices()
            .iter()
            .map(|&i| self.params.iter().nth(i).unwrap().value.len())
            .sum()
    }

    /// Flattened concatenation of every attention matrix.
    pub fn attention_view(&self) -> ParamVector {
        let all: Vec<&Param> = self.params.iter().collect();
        let mut out = Vec::with_capacity(self.attention_dim());
        for i in self.attention_indices() {
            out.extend_from_slice(all[i].value.data());
        }
        ParamVector(out)
    }

    /// Writes `view` back into the attention matrices.
    pub fn set_attention_view(&mut self, view: &ParamVector) -> Result<(), ModelError> {
        let expected = self.attention_dim();
        if view.len() != expected {
            return Err(ModelError::ViewLength {
                got: view.len(),
                expected,
            });
        }
        let idx = self.attention_indices();
        let mut off = 0;
        let mut params: Vec<&mut Param> = self.params.iter_mut().collect();
        for i in idx {
            let dst = params[i].value.data_mut();
            let n = dst.len();
            dst.copy_from_slice(&view.0[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Restricts a full per-parameter list (aligned with `params`) to the
    /// attention view.
    pub fn gather_attention(&self, per_param: &[Vec<f64>]) -> ParamVector {
        let mut out = Vec::with_capacity(self.attention_dim());
        for i in self.attention_indices() {
            out.extend_from_slice(&per_param[i]);
        }
        ParamVector(out)
    }

    fn register(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>, NnError> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(&p.name, p.value.clone())
                } else {
                    g.input(p.value.clone())
                }
            })
            .collect()
    }

    fn trace(&self, g: &mut Graph, batch: &Batch, trainable: bool) -> Result<Traced, ModelError> {
        batch.check(&self.config)?;
        let ids = self.register(g, trainable)?;
        let names: Vec<&str> = self.params.iter().map(|p| p.name.as_str()).collect();
        let p = |n: &str| ids[names.iter().position(|&x| x == n).expect("param registered")];
        let cfg = &self.config;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());

        let embed =
            |g: &mut Graph, tok: &str, pos: &str, toks: &[usize], b: usize, t: usize| -> Result<NodeId, NnError> {
                let e = g.embedding(p(tok), toks, &[b, t])?;
                let positions: Vec<usize> = (0..t).collect();
                let pe = g.embedding(p(pos), &positions, &[t])?;
                g.add(e, pe)
            };
        let layernorm =
            |g: &mut Graph, x: NodeId, pre: &str| g.layernorm(x, p(&format!("{pre}.g")), p(&format!("{pre}.b")), 1e-5);
        let heads = |g: &mut Graph, x: NodeId, b: usize, t: usize| -> Result<NodeId, NnError> {
            let r = g.reshape(x, &[b, t, h, dh])?;
            g.permute(r, &[0, 2, 1, 3])
        };
        // returns (output, attention probabilities)
        let attention = |g: &mut Graph,
                         xq: NodeId,
                         xkv: NodeId,
                         pre: &str,
                         b: usize,
                         tq: usize,
                         tk: usize,
                         mask: &Mask|
         -> Result<(NodeId, NodeId), NnError> {
            let q = g.matmul(xq, p(&format!("{pre}.q")))?;
            let k = g.matmul(xkv, p(&format!("{pre}.k")))?;
            let v = g.matmul(xkv, p(&format!("{pre}.v")))?;
            let (q, k, v) = (heads(g, q, b, tq)?, heads(g, k, b, tk)?, heads(g, v, b, tk)?);
            let s = g.bmm(q, k, true)?;
            let s = g.scale(s, 1.0 / (dh as f64).sqrt())?;
            let a = g.softmax(s, mask)?;
            let c = g.bmm(a, v, false)?;
            let c = g.permute(c, &[0, 2, 1, 3])?;
            let c = g.reshape(c, &[b, tq, d])?;
            Ok((g.matmul(c, p(&format!("{pre}.o")))?, a))
        };
        let mlp = |g: &mut Graph, x: NodeId, pre: &str| -> Result<NodeId, NnError> {
            let a = g.matmul(x, p(&format!("{pre}.w1")))?;
            let a = g.add(a, p(&format!("{pre}.b1")))?;
            let a = g.gelu(a)?;
            let o = g.matmul(a, p(&format!("{pre}.w2")))?;
            g.add(o, p(&format!("{pre}.b2")))
        };

        let mut resid = Vec::new();
        let mut attn = Vec::new();
        let (enc, dec) = block_prefixes(cfg);
        match batch {
            Batch::Decoder {
                tokens,
                batch: b,
                len: t,
                ..
            } => {
                let (b, t) = (*b, *t);
                let mut x = embed(g, "tok_emb", "pos_emb", tokens, b, t)?;
                for pre in &enc {
                    let hn = layernorm(g, x, &format!("{pre}.ln1"))?;
                    let (o, a) = attention(g, hn, hn, &format!("{pre}.attn"), b, t, t, &Mask::Causal)?;
                    x = g.add(x, o)?;
                    let hn = layernorm(g, x, &format!("{pre}.ln2"))?;
                    let m = mlp(g, hn, &format!("{pre}.mlp"))?;
                    x = g.add(x, m)?;
                    resid.push(x);
                    attn.push(a);
                }
                let xf = layernorm(g, x, "ln_f")?;
                let l = g.matmul(xf, p("head.w"))?;
                let logits = g.add(l, p("head.b"))?;
                Ok(Traced { logits, resid, attn })
            }
            Batch::Seq2Seq {
                src,
                src_len: s,
                src_valid,
                tgt_in,
                tgt_len: t,
                batch: b,
                ..
            } => {
                let (b, s, t) = (*b, *s, *t);
                let mut x = embed(g, "enc.tok_emb", "enc.pos_emb", src, b, s)?;
                let enc_mask = Mask::KeyPadding {
                    valid: src_valid.clone(),
                    rows_per_batch: h * s,
                };
                for pre in &enc {
                    let hn = layernorm(g, x, &format!("{pre}.ln1"))?;
                    let (o, _) = attention(g, hn, hn, &format!("{pre}.attn"), b, s, s, &enc_mask)?;
                    x = g.add(x, o)?;
                    let hn = layernorm(g, x, &format!("{pre}.ln2"))?;
                    let m = mlp(g, hn, &format!("{pre}.mlp"))?;
                    x = g.add(x, m)?;
                }
                let memory = layernorm(g, x, "enc.ln_f")?;
                let cross_mask = Mask::KeyPadding {
                    valid: src_valid.clone(),
                    rows_per_batch: h * t,
                };
                let mut y = embed(g, "dec.tok_emb", "dec.pos_emb", tgt_in, b, t)?;
                for pre in &dec {
                    let hn = layernorm(g, y, &format!("{pre}.ln1"))?;
                    let (o, a) = attention(g, hn, hn, &format!("{pre}.self"), b, t, t, &Mask::Causal)?;
                    y = g.add(y, o)?;
                    let hn = layernorm(g, y, &format!("{pre}.ln2"))?;
                    let (o, _) = attention(g, hn, memory, &format!("{pre}.cross"), b, t, s, &cross_mask)?;
                    y = g.add(y, o)?;
                    let hn = layernorm(g, y, &format!("{pre}.ln3"))?;
                    let m = mlp(g, hn, &format!("{pre}.mlp"))?;
                    y = g.add(y, m)?;
                    resid.push(y);
                    attn.push(a);
                }
                let yf = layernorm(g, y, "dec.ln_f")?;
                let l = g.matmul(yf, p("head.w"))?;
                let logits = g.add(l, p("head.b"))?;
                Ok(Traced { logits, resid, attn })
            }
        }
    }

    /// Forward pass returning logits, residual states and attention maps.
    pub fn forward_capture(&self, batch: &Batch) -> Result<CaptureBundle, ModelError> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, false)?;
        Ok(CaptureBundle {
            logits: g.value(tr.logits).clone(),
            resid: tr.resid.iter().map(|&i| g.value(i).clone()).collect(),
            attn: tr.attn.iter().map(|&i| g.value(i).clone()).collect(),
        })
    }

    /// Logits only.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, false)?;
        Ok(g.value(tr.logits).clone())
    }

    /// Mean cross-entropy and accuracy on one batch.
    pub fn loss_and_metrics(&self, batch: &Batch) -> Result<Metrics, ModelError> {
        let logits = self.logits(batch)?;
        batch.score(&logits)
    }

    /// Loss, metrics and gradients for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(Metrics, Gradients), ModelError> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, true)?;
        let metrics = batch.score(g.value(tr.logits))?;
        let loss = g.cross_entropy(tr.logits, batch.targets())?;
        let grads = g.backward(loss)?;
        Ok((metrics, grads))
    }

    /// Metrics over many examples, evaluated in chunks of `chunk` batches.
    pub fn evaluate(&self, batches: &[Batch]) -> Result<Metrics, ModelError> {
        let mut total = Metrics::default();
        for b in batches {
            total.merge(&self.loss_and_metrics(b)?);
        }
        Ok(total)
    }
}
