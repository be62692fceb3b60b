//! Decoder-only transformer token policy with a frozen random backbone.
//!
//! Trainable state is limited to LoRA adapters (attention projections and
//! per-expert FFN up/down) and the MoE routers. Embeddings, attention base
//! weights, the shared FFN and the logit head never change after
//! construction, so a policy can always be rebuilt from its config and its
//! trainables alone.
//!
//! Parameter names follow `embed`, `head`, `layer{l}.attn.{q,k,v,o}`,
//! `layer{l}.ffn.{up,down}`, `layer{l}.router`,
//! `layer{l}.expert{e}.{up,down}.lora_{a,b}` (or `layer{l}.dense.*` when the
//! mixture is disabled) and `layer{l}.attn.{q,k,v,o}.lora_{a,b}`.

pub mod checkpoint;
pub mod lora;
pub mod moe;
pub mod params;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{sigmoid, Mat, Tape, Var};
use crate::codec::{valid_token_mask, ActionTokens, BinSpec};
use crate::seed;
use lora::{adapted_linear, gaussian, LoraAdapter, LoraInit};
use moe::{dense_forward, moe_forward, ExpertAdapters, MoeLayer, RouterStats};
use params::{ParamId, ParamStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("action prefix of length {len} is too long for {dims} action dimensions")]
    PrefixTooLong { len: usize, dims: usize },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch sequences must share one length")]
    RaggedBatch,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub scaling: f64,
    pub attn_lora: bool,
    pub use_moe: bool,
    /// Adapter rank of the single-path variant; `None` means `n_experts · rank`.
    pub dense_rank: Option<usize>,
    pub max_len: usize,
    /// Standard deviation of the frozen logit head, in units of `1/sqrt(hidden)`.
    pub head_scale: f64,
    pub backbone_seed: u64,
    pub init_seed: u64,
    pub lora_init: LoraInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden: 128,
            heads: 4,
            ffn: 256,
            n_experts: 4,
            top_k: 2,
            rank: 8,
            scaling: 1.0,
            attn_lora: true,
            use_moe: true,
            dense_rank: None,
            max_len: 32,
            head_scale: 2.0,
            backbone_seed: 0,
            init_seed: 1,
            lora_init: LoraInit::ZeroB,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.n_layers == 0 || self.hidden == 0 || self.ffn == 0 || self.max_len == 0 {
            return bad("sizes must be positive");
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden must be a multiple of heads");
        }
        if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
            return bad("need 1 <= top_k <= n_experts");
        }
        if !(self.head_scale > 0.0) || !(self.scaling > 0.0) {
            return bad("head_scale and scaling must be positive");
        }
        if self.rank == 0 || self.dense_rank == Some(0) {
            return bad("LoRA rank must be positive");
        }
        Ok(())
    }

    pub fn effective_dense_rank(&self) -> usize {
        self.dense_rank.unwrap_or(self.n_experts * self.rank)
    }

    /// Hash of everything that determines parameter shapes and frozen values.
    pub fn fingerprint(&self, bins: &BinSpec) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(serde_json::to_vec(bins).expect("bins serialize"));
        params::hex(&h.finalize()[..16])
    }
}

#[derive(Debug, Clone)]
enum Ffn {
    Moe(MoeLayer),
    Dense {
        w_up: ParamId,
        w_down: ParamId,
        lora: ExpertAdapters,
    },
}

#[derive(Debug, Clone)]
struct Block {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    attn: Option<[LoraAdapter; 4]>,
    ffn: Ffn,
}

/// Router output of one layer during a forward pass.
pub struct RouterTrace {
    pub probs: Var,
    pub stats: RouterStats,
    pub evals: Vec<usize>,
}

pub struct ForwardOut {
    /// One row of vocabulary logits per requested pick.
    pub logits: Var,
    /// Empty for the single-path variant.
    pub router: Vec<RouterTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QOut {
    pub logits: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug)]
pub struct MoePolicy {
    pub config: ModelConfig,
    pub bins: BinSpec,
    pub params: ParamStore,
    embed: ParamId,
    head: ParamId,
    blocks: Vec<Block>,
    pos: Mat,
    forward_calls: AtomicU64,
}

impl Clone for MoePolicy {
    fn clone(&self) -> Self {
        MoePolicy {
            config: self.config.clone(),
            bins: self.bins.clone(),
            params: self.params.clone(),
            embed: self.embed,
            head: self.head,
            blocks: self.blocks.clone(),
            pos: self.pos.clone(),
            forward_calls: AtomicU64::new(0),
        }
    }
}

/// Standard sine/cosine position table.
pub fn sinusoidal_positions(len: usize, d: usize) -> Mat {
    Mat::from_shape_fn((len, d), |(p, i)| {
        let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = p as f64 * freq;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl MoePolicy {
    pub fn new(config: ModelConfig, bins: BinSpec) -> Result<Self, ModelError> {
        config.validate()?;
        bins.validate().map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let (d, h, v) = (config.hidden, config.ffn, bins.vocab_size());
        let mut fr = seed::rng(config.backbone_seed, "backbone");
        let mut tr = seed::rng(config.init_seed, "adapters");
        let mut ps = ParamStore::default();
        let sd = 1.0 / (d as f64).sqrt();

        let embed = ps.add("embed", gaussian(v, d, 1.0, &mut fr), false);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut proj = |name: &str, ps: &mut ParamStore| ps.add(format!("layer{l}.attn.{name}"), gaussian(d, d, sd, &mut fr), false);
            let wq = proj("q", &mut ps);
            let wk = proj("k", &mut ps);
            let wv = proj("v", &mut ps);
            let wo = proj("o", &mut ps);
            let w_up = ps.add(format!("layer{l}.ffn.up"), gaussian(d, h, sd, &mut fr), false);
            let w_down = ps.add(format!("layer{l}.ffn.down"), gaussian(h, d, 1.0 / (h as f64).sqrt(), &mut fr), false);

            let (r, s, init) = (config.rank, config.scaling, config.lora_init);
            let attn = config.attn_lora.then(|| {
                ["q", "k", "v", "o"].map(|n| LoraAdapter::register(&mut ps, &format!("layer{l}.attn.{n}"), d, d, r, s, init, &mut tr))
            });
            let ffn = if config.use_moe {
                let router = ps.add(format!("layer{l}.router"), gaussian(d, config.n_experts, sd, &mut tr), true);
                let experts = (0..config.n_experts)
                    .map(|e| ExpertAdapters {
                        up: LoraAdapter::register(&mut ps, &format!("layer{l}.expert{e}.up"), d, h, r, s, init, &mut tr),
                        down: LoraAdapter::register(&mut ps, &format!("layer{l}.expert{e}.down"), h, d, r, s, init, &mut tr),
                    })
                    .collect();
                Ffn::Moe(MoeLayer {
                    w_up,
                    w_down,
                    router,
                    experts,
                    top_k: config.top_k,
                })
            } else {
                let dr = config.effective_dense_rank();
                Ffn::Dense {
                    w_up,
                    w_down,
                    lora: ExpertAdapters {
                        up: LoraAdapter::register(&mut ps, &format!("layer{l}.dense.up"), d, h, dr, s, init, &mut tr),
                        down: LoraAdapter::register(&mut ps, &format!("layer{l}.dense.down"), h, d, dr, s, init, &mut tr),
                    },
                }
            };
            blocks.push(Block { wq, wk, wv, wo, attn, ffn });
        }
        let head = ps.add("head", gaussian(d, v, sd * config.head_scale, &mut fr), false);
        let pos = sinusoidal_positions(config.max_len, d);
        Ok(MoePolicy {
            config,
            bins,
            params: ps,
            embed,
            head,
            blocks,
            pos,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.bins.vocab_size()
    }

    pub fn n_dims(&self) -> usize {
        self.bins.n_dims()
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint(&self.bins)
    }

    pub fn n_trainable(&self) -> usize {
        self.params.n_trainable_scalars()
    }

    /// MoE layers in order; empty for the single-path variant.
    pub fn moe_layers(&self) -> Vec<&MoeLayer> {
        self.blocks
            .iter()
            .filter_map(|b| match &b.ffn {
                Ffn::Moe(m) => Some(m),
                Ffn::Dense { .. } => None,
            })
            .collect()
    }

    /// Number of `forward` invocations since construction or the last reset.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    /// Overwrite this network's trainables with another's (target sync).
    pub fn sync_from(&mut self, online: &MoePolicy) {
        self.params.copy_trainables_from(&online.params);
    }

    /// Batched forward over equal-length token sequences. Returns logits at
    /// the `(sequence, position)` pairs in `picks`, in order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        seqs: &[Vec<u32>],
        picks: &[(usize, usize)],
    ) -> Result<ForwardOut, ModelError> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let len = seqs.first().map_or(0, Vec::len);
        if seqs.iter().any(|s| s.len() != len) || len == 0 {
            return Err(ModelError::RaggedBatch);
        }
        if len > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_len,
            });
        }
        let vocab = self.vocab_size();
        let mut flat = Vec::with_capacity(seqs.len() * len);
        for &t in seqs.iter().flatten() {
            if t as usize >= vocab {
                return Err(ModelError::TokenOutOfVocab { token: t, vocab });
            }
            flat.push(t as usize);
        }
        let n_rows = flat.len();
        let d = self.config.hidden;

        let emb = tape.gather_rows(bound[self.embed.0], flat);
        let pe = Mat::from_shape_fn((n_rows, d), |(r, c)| self.pos[[r % len, c]]);
        let pe = tape.constant(pe);
        let mut x = tape.add(emb, pe);

        let mut router = Vec::new();
        for b in &self.blocks {
            let n = tape.layer_norm(x);
            let lora = |i: usize| b.attn.as_ref().map(|a| a[i]);
            let q = adapted_linear(tape, bound, n, b.wq, lora(0).as_ref());
            let k = adapted_linear(tape, bound, n, b.wk, lora(1).as_ref());
            let v = adapted_linear(tape, bound, n, b.wv, lora(2).as_ref());
            let a = tape.causal_attention(q, k, v, len, self.config.heads);
            let o = adapted_linear(tape, bound, a, b.wo, lora(3).as_ref());
            x = tape.add(x, o);

            let n = tape.layer_norm(x);
            let y = match &b.ffn {
                Ffn::Moe(m) => {
                    let out = moe_forward(tape, bound, m, n);
                    router.push(RouterTrace {
                        probs: out.probs,
                        stats: out.stats,
                        evals: out.evals,
                    });
                    out.y
                }
                Ffn::Dense { w_up, w_down, lora } => dense_forward(tape, bound, *w_up, *w_down, Some(lora), n),
            };
            x = tape.add(x, y);
        }
        let x = tape.layer_norm(x);
        let rows = picks.iter().map(|&(s, p)| s * len + p).collect();
        let sel = tape.gather_rows(x, rows);
        let logits = tape.matmul(sel, bound[self.head.0]);
        Ok(ForwardOut { logits, router })
    }

    /// Logits and Q-values over the vocabulary for the dimension following
    /// `prefix`.
    pub fn forward_q(&self, obs: &[u32], instr: &[u32], prefix: &[u32]) -> Result<QOut, ModelError> {
        if prefix.len() >= self.n_dims() {
            return Err(ModelError::PrefixTooLong {
                len: prefix.len(),
                dims: self.n_dims(),
            });
        }
        let seq: Vec<u32> = obs.iter().chain(instr).chain(prefix).copied().collect();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, &[seq.clone()], &[(0, seq.len() - 1)])?;
        let logits: Vec<f64> = tape.value(out.logits).row(0).to_vec();
        let q = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok(QOut { logits, q })
    }

    /// Per-dimension argmax decoding restricted to valid tokens.
    pub fn greedy_action(&self, obs: &[u32], instr: &[u32]) -> Result<ActionTokens, ModelError> {
        let mut prefix = Vec::with_capacity(self.n_dims());
        for dim in 0..self.n_dims() {
            let out = self.forward_q(obs, instr, &prefix)?;
            prefix.push(greedy_token(&out.q, dim, &self.bins));
        }
        Ok(ActionTokens(prefix))
    }

    /// Greedy decoding for many contexts at once: `d_A` batched forward
    /// passes. Contexts must share one length.
    pub fn greedy_batch(&self, contexts: &[Vec<u32>]) -> Result<Vec<ActionTokens>, ModelError> {
        let mut seqs = contexts.to_vec();
        let len = seqs.first().map_or(0, Vec::len);
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        for dim in 0..self.n_dims() {
            let picks: Vec<(usize, usize)> = (0..seqs.len()).map(|b| (b, len + dim - 1)).collect();
            let out = self.forward(&mut tape, &bound, &seqs, &picks)?;
            let logits = tape.value(out.logits).clone();
            for (b, s) in seqs.iter_mut().enumerate() {
                let q: Vec<f64> = logits.row(b).iter().map(|&l| sigmoid(l)).collect();
                s.push(greedy_token(&q, dim, &self.bins));
            }
        }
        Ok(seqs.into_iter().map(|s| ActionTokens(s[len..].to_vec())).collect())
    }

    /// Action-token logits for a whole batch of `[obs; instr; a^1..a^{d-1}]`
    /// sequences: row `b·d_A + i` holds the logits for dimension `i` of item `b`.
    pub fn action_logits(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        seqs: &[Vec<u32>],
        context_len: usize,
    ) -> Result<ForwardOut, ModelError> {
        let d_a = self.n_dims();
        let picks: Vec<(usize, usize)> = (0..seqs.len())
            .flat_map(|b| (0..d_a).map(move |i| (b, context_len + i - 1)))
            .collect();
        self.forward(tape, bound, seqs, &picks)
    }

    /// Current value of a named parameter.
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.find(name).map(|id| self.params.get(id))
    }
}

/// Highest-Q valid token of dimension `dim`; ties go to the lowest index.
pub fn greedy_token(q: &[f64], dim: usize, bins: &BinSpec) -> u32 {
    let mask = valid_token_mask(dim, q.len(), bins);
    let mut best: Option<usize> = None;
    for (t, (&v, &ok)) in q.iter().zip(&mask).enumerate() {
        if ok && best.map_or(true, |b| v > q[b]) {
            best = Some(t);
        }
    }
    best.expect("every dimension has at least one valid token") as u32
}

/// Max over valid tokens of `dim` of one row of Q-values.
pub fn masked_max(q: &[f64], dim: usize, bins: &BinSpec) -> f64 {
    let block = bins.block(dim);
    q[block.start as usize..block.end as usize]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Rows of a `n × V` logits matrix mapped through the sigmoid.
pub fn q_values(logits: &Mat) -> Mat {
    logits.mapv(sigmoid)
}
