//! The configurable decoder-only transformer.

mod layers;
mod params;

use serde::{Deserialize, Serialize};

use crate::bytepool::{self, BytePoolConfig, BytePoolIds, ChunkedBatch};
use crate::error::{config_err, Error, Result};
use crate::numerics::{Real, Tape, Var};

pub use layers::{sincos_table, ForwardCtx};
pub use params::{Component, ParamEntry, ParamId, ParamStore};

pub(crate) use layers::{
    block_forward, build_block, ffn_matrix_dims, BlockDims, BlockIds, BlockPlan, SeqLayout, INIT_STD,
};
pub(crate) use params::Init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnType {
    Swiglu,
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosScheme {
    Rope,
    Sincos,
    Learned,
}

/// Weight-sharing scheme. Every option except `None` also ties the output
/// head to the token embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    None,
    EmbedHead,
    /// One FFN shared by all layers (optionally with per-layer LoRA deltas).
    FfnShared,
    /// Attention and FFN weights of every block alias block 0; norms stay per layer.
    FfnAttnShared,
}

impl Tying {
    pub fn ties_head(self) -> bool {
        self != Tying::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    BpeLookup,
    BytePool,
}

/// Architecture hyperparameters. Defaults reproduce the 8-layer baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    /// Query heads per key/value head.
    pub group_size: usize,
    pub ffn_type: FfnType,
    pub ffn_dim: usize,
    pub pos_scheme: PosScheme,
    pub vocab_size: usize,
    pub max_context: usize,
    pub dropout: f64,
    pub tying: Tying,
    pub lora_rank: usize,
    pub embedder: EmbedderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            hidden_dim: 512,
            n_heads: 16,
            group_size: 4,
            ffn_type: FfnType::Swiglu,
            ffn_dim: 1536,
            pos_scheme: PosScheme::Rope,
            vocab_size: 50257,
            max_context: 512,
            dropout: 0.1,
            tying: Tying::EmbedHead,
            lora_rank: 0,
            embedder: EmbedderKind::BpeLookup,
        }
    }
}

impl ModelConfig {
    pub fn n_kv_heads(&self) -> usize {
        self.n_heads / self.group_size
    }

    pub fn d_head(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("group_size", self.group_size),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err(format!("model.{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "model.hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.group_size) {
            return Err(config_err(format!(
                "model.n_heads {} not divisible by group_size {}",
                self.n_heads, self.group_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lora_rank > 0 && self.tying != Tying::FfnShared {
            return Err(config_err("model.lora_rank > 0 requires tying = ffn_shared"));
        }
        if self.pos_scheme == PosScheme::Rope && !self.d_head().is_multiple_of(2) {
            return Err(config_err(format!("rope needs an even head dim, got {}", self.d_head())));
        }
        Ok(())
    }

    pub(crate) fn block_dims(&self) -> BlockDims {
        BlockDims {
            hidden: self.hidden_dim,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads(),
            ffn_type: self.ffn_type,
            ffn_dim: self.ffn_dim,
        }
    }
}

/// Next-token batch: `inputs[s·T + t]` predicts `targets[s·T + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub n_seq: usize,
    pub seq_len: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl TokenBatch {
    /// Each window holds `seq_len + 1` ids.
    pub fn from_windows(windows: &[&[u32]]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        if first.len() < 2 {
            return Err(Error::Data("windows need at least two tokens".into()));
        }
        let seq_len = first.len() - 1;
        let mut inputs = Vec::with_capacity(windows.len() * seq_len);
        let mut targets = Vec::with_capacity(windows.len() * seq_len);
        for w in windows {
            if w.len() != seq_len + 1 {
                return Err(Error::Data("ragged batch windows".into()));
            }
            inputs.extend_from_slice(&w[..seq_len]);
            targets.extend_from_slice(&w[1..]);
        }
        Ok(Self {
            n_seq: windows.len(),
            seq_len,
            inputs,
            targets,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Tokens(TokenBatch),
    Chunks(ChunkedBatch),
}

impl Batch {
    pub fn n_seq(&self) -> usize {
        match self {
            Batch::Tokens(b) => b.n_seq,
            Batch::Chunks(b) => b.n_seq,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Batch::Tokens(b) => b.seq_len,
            Batch::Chunks(b) => b.n_tokens,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ModelIds {
    pub tok_emb: Option<ParamId>,
    pub pos_emb: Option<ParamId>,
    pub head: Option<ParamId>,
    pub blocks: Vec<BlockIds>,
    pub final_norm: ParamId,
    pub bytepool: Option<BytePoolIds>,
}

/// A transformer together with its parameters.
#[derive(Debug, Clone)]
pub struct LanguageModel<T: Real = f32> {
    config: ModelConfig,
    bytepool: Option<BytePoolConfig>,
    params: ParamStore<T>,
    ids: ModelIds,
}

impl<T: Real> LanguageModel<T> {
    /// Builds and initializes a model. `bytepool` is required exactly when
    /// `config.embedder` is `byte_pool`.
    pub fn new(config: ModelConfig, bytepool: Option<BytePoolConfig>, seed: u64) -> Result<Self> {
        config.validate()?;
        let bytepool = match (config.embedder, bytepool) {
            (EmbedderKind::BytePool, Some(bp)) => {
                bp.validate(&config)?;
                Some(bp)
            }
            (EmbedderKind::BytePool, None) => {
                return Err(config_err("byte_pool embedder needs a bytepool config"))
            }
            (EmbedderKind::BpeLookup, _) => None,
        };
        let mut init = Init::new(seed);
        let mut store = ParamStore::new();
        let h = config.hidden_dim;

        let tok_emb = match config.embedder {
            EmbedderKind::BpeLookup => Some(store.insert(
                "tok_emb",
                init.normal(vec![config.vocab_size, h], INIT_STD),
                Component::Embedding,
                false,
            )?),
            EmbedderKind::BytePool => None,
        };
        let pos_emb = match config.pos_scheme {
            PosScheme::Learned => Some(store.insert(
                "pos_emb",
                init.normal(vec![config.max_context, h], INIT_STD),
                Component::Positional,
                false,
            )?),
            _ => None,
        };

        let dims = config.block_dims();
        let mut blocks: Vec<BlockIds> = Vec::with_capacity(config.n_layers);
        for layer in 0..config.n_layers {
            let prefix = format!("layer.{layer}");
            let first = blocks.first().cloned();
            let (share_attn, share_ffn) = match (config.tying, &first) {
                (Tying::FfnShared, Some(b0)) => (None, Some(b0.ffn.clone())),
                (Tying::FfnAttnShared, Some(b0)) => (Some(b0.attn.clone()), Some(b0.ffn.clone())),
                _ => (None, None),
            };
            let plan = BlockPlan {
                prefix: &prefix,
                dims,
                depth: config.n_layers,
                attn_component: Component::Attention,
                ffn_component: Component::Ffn,
                norm_component: Component::Norms,
                share_attn: share_attn.as_ref(),
                share_ffn: share_ffn.as_ref(),
                lora_rank: config.lora_rank,
            };
            blocks.push(build_block(&mut store, &mut init, &plan)?);
        }
        let final_norm = store.insert(
            "final_norm",
            crate::numerics::DiffTensor::filled(vec![h], T::one()),
            Component::Norms,
            false,
        )?;

        let head = match (config.embedder, tok_emb) {
            (EmbedderKind::BpeLookup, Some(emb)) if config.tying.ties_head() => {
                store.alias("lm_head", emb)?;
                Some(emb)
            }
            (EmbedderKind::BpeLookup, _) => Some(store.insert(
                "lm_head",
                init.normal(vec![config.vocab_size, h], INIT_STD),
                Component::Head,
                true,
            )?),
            (EmbedderKind::BytePool, _) => None,
        };

        let bytepool_ids = match &bytepool {
            Some(bp) => Some(bytepool::build_params(&mut store, &mut init, bp, &config)?),
            None => None,
        };

        Ok(Self {
            config,
            bytepool,
            params: store,
            ids: ModelIds {
                tok_emb,
                pos_emb,
                head,
                blocks,
                final_norm,
                bytepool: bytepool_ids,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn bytepool_config(&self) -> Option<&BytePoolConfig> {
        self.bytepool.as_ref()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub(crate) fn ids(&self) -> &ModelIds {
        &self.ids
    }

    fn check_length(&self, seq_len: usize) -> Result<()> {
        if seq_len == 0 || seq_len > self.config.max_context {
            return Err(Error::Length(format!(
                "sequence length {seq_len} outside 1..={}",
                self.config.max_context
            )));
        }
        Ok(())
    }

    fn positions(n_seq: usize, seq_len: usize) -> Vec<usize> {
        (0..n_seq).flat_map(|_| 0..seq_len).collect()
    }

    /// Adds absolute position information for sin-cos or learned schemes.
    /// Rotary embeddings are applied inside attention instead.
    pub fn add_positions<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        n_seq: usize,
        seq_len: usize,
    ) -> Result<Var> {
        self.check_length(seq_len)?;
        let h = self.config.hidden_dim;
        match self.config.pos_scheme {
            PosScheme::Rope => Ok(x),
            PosScheme::Sincos => {
                let table = sincos_table(seq_len, h);
                let mut values = Vec::with_capacity(n_seq * seq_len * h);
                for _ in 0..n_seq {
                    values.extend(table.iter().map(|&v| T::from_f64(v)));
                }
                let pe = tape.constant(vec![n_seq * seq_len, h], values)?;
                tape.add(x, pe)
            }
            PosScheme::Learned => {
                let table = self.params.var(tape, self.ids.pos_emb.expect("learned scheme has a table"))?;
                let pe = tape.gather(table, &Self::positions(n_seq, seq_len))?;
                tape.add(x, pe)
            }
        }
    }

    /// Token lookup plus positional information: `[n_seq·seq_len × hidden]`.
    pub fn embed_tokens<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        ids: &[u32],
        n_seq: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let table = self
            .ids
            .tok_emb
            .ok_or_else(|| config_err("embed_tokens needs the bpe_lookup embedder"))?;
        if ids.len() != n_seq * seq_len {
            return Err(Error::Shape(format!("{} ids for {n_seq}×{seq_len}", ids.len())));
        }
        self.check_length(seq_len)?;
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = self.params.var(tape, table)?;
        let x = tape.gather(table, &rows)?;
        self.add_positions(tape, x, n_seq, seq_len)
    }

    fn layout(&self, n_seq: usize, seq_len: usize) -> SeqLayout {
        SeqLayout {
            n_seq,
            seq_len,
            causal: true,
            key_lens: None,
            rope_positions: (self.config.pos_scheme == PosScheme::Rope)
                .then(|| Self::positions(n_seq, seq_len)),
        }
    }

    fn block_ids(&self, layer: usize) -> Result<&BlockIds> {
        self.ids
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Index(format!("layer {layer} of {}", self.config.n_layers)))
    }

    /// Grouped-query causal self-attention of one layer (without its norm or residual).
    pub fn attention_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        layer: usize,
        x: Var,
        n_seq: usize,
        seq_len: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let ids = self.block_ids(layer)?;
        let layout = self.layout(n_seq, seq_len);
        layers::attention_sublayer(
            tape,
            &self.params,
            &self.config.block_dims(),
            &ids.attn,
            x,
            &layout,
            self.config.dropout,
            ctx,
        )
    }

    /// Feed-forward sublayer of one layer (without its norm or residual).
    pub fn ffn_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        layer: usize,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let h = self.config.hidden_dim;
        if tape.shape(x).last() != Some(&h) {
            return Err(Error::Dimension {
                op: "ffn_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![h],
            });
        }
        let ids = self.block_ids(layer)?;
        layers::ffn_sublayer(tape, &self.params, &ids.ffn, ids.lora.as_ref(), x, self.config.dropout, ctx)
    }

    pub fn block_forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        layer: usize,
        x: Var,
        n_seq: usize,
        seq_len: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let ids = self.block_ids(layer)?;
        let layout = self.layout(n_seq, seq_len);
        block_forward(
            tape,
            &self.params,
            &self.config.block_dims(),
            ids,
            x,
            &layout,
            self.config.dropout,
            ctx,
        )
    }

    /// Embedding dropout, every block, then the final norm.
    pub fn hidden_states<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        x: Var,
        n_seq: usize,
        seq_len: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let mut x = ctx.dropout(tape, x, self.config.dropout)?;
        for layer in 0..self.config.n_layers {
            x = self.block_forward(tape, layer, x, n_seq, seq_len, ctx)?;
        }
        let g = self.params.var(tape, self.ids.final_norm)?;
        tape.rms_norm(x, g)
    }

    /// `logits = h · W_headᵀ`; with a tied head `W_head` is the embedding.
    pub fn lm_head<'a>(&'a self, tape: &mut Tape<'a, T>, h: Var) -> Result<Var> {
        let head = self
            .ids
            .head
            .ok_or_else(|| config_err("lm_head is replaced by the byte decoder for byte_pool models"))?;
        let w = self.params.var(tape, head)?;
        tape.matmul_t(h, w)
    }

    /// Core representations for a batch, before any output head.
    pub fn encode_batch<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (n_seq, seq_len) = (batch.n_seq(), batch.seq_len());
        let x = match batch {
            Batch::Tokens(b) => self.embed_tokens(tape, &b.inputs, n_seq, seq_len)?,
            Batch::Chunks(b) => {
                let pooled = bytepool::pool_chunks(self, tape, b, ctx)?;
                self.add_positions(tape, pooled, n_seq, seq_len)?
            }
        };
        self.hidden_states(tape, x, n_seq, seq_len, ctx)
    }

    /// Mean next-unit cross-entropy (per token, or per byte for byte_pool).
    pub fn loss<'a>(&'a self, tape: &mut Tape<'a, T>, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Var> {
        self.check_batch(batch)?;
        let h = self.encode_batch(tape, batch, ctx)?;
        match batch {
            Batch::Tokens(b) => {
                let logits = self.lm_head(tape, h)?;
                let targets: Vec<usize> = b.targets.iter().map(|&t| t as usize).collect();
                tape.cross_entropy(logits, &targets, None)
            }
            Batch::Chunks(b) => bytepool::byte_decode_loss(self, tape, h, b, ctx),
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        match (self.config.embedder, batch) {
            (EmbedderKind::BpeLookup, Batch::Tokens(_)) | (EmbedderKind::BytePool, Batch::Chunks(_)) => Ok(()),
            _ => Err(config_err("batch kind does not match the model's embedder")),
        }
    }

    /// Natural-log probability of every target unit, in batch order, with
    /// dropout disabled. For byte_pool models a unit is one token's bytes plus
    /// its end-of-token symbol.
    pub fn target_log_probs(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let h = self.encode_batch(&mut tape, batch, &mut ctx)?;
        match batch {
            Batch::Tokens(b) => {
                let logits = self.lm_head(&mut tape, h)?;
                let v = *tape.shape(logits).last().expect("matrix");
                Ok(tape
                    .value(logits)
                    .chunks(v)
                    .zip(&b.targets)
                    .map(|(row, &t)| log_softmax_at(row, t as usize))
                    .collect())
            }
            Batch::Chunks(b) => bytepool::chunk_log_probs(self, &mut tape, h, b, &mut ctx),
        }
    }

    /// Final hidden states (after the last norm) for one sequence, eval mode.
    pub fn final_hidden(&self, batch: &Batch) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let h = self.encode_batch(&mut tape, batch, &mut ctx)?;
        let d = self.config.hidden_dim;
        Ok(tape.value(h).chunks(d).map(<[T]>::to_vec).collect())
    }

    /// Logits for every position of one token sequence, eval mode.
    pub fn token_logits(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let x = self.embed_tokens(&mut tape, ids, 1, ids.len())?;
        let h = self.hidden_states(&mut tape, x, 1, ids.len(), &mut ForwardCtx::eval())?;
        let logits = self.lm_head(&mut tape, h)?;
        let v = *tape.shape(logits).last().expect("matrix");
        Ok(tape
            .value(logits)
            .chunks(v)
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect())
    }

    /// Largest finite-difference disagreement with the analytic gradient of
    /// [`LanguageModel::loss`] (eval mode), over every `stride`-th entry of
    /// every trainable tensor. Error per entry is `|a − n| / max(1, |a|)`.
    pub fn gradient_check(&self, batch: &Batch, epsilon: f64, stride: usize) -> Result<f64> {
        if !(1e-6..=1e-2).contains(&epsilon) {
            return Err(config_err(format!("epsilon {epsilon} outside [1e-6, 1e-2]")));
        }
        let eval_loss = |m: &LanguageModel<T>| -> Result<f64> {
            let mut tape = Tape::new();
            let l = m.loss(&mut tape, batch, &mut ForwardCtx::eval())?;
            Ok(tape.value(l)[0].as_f64())
        };
        let analytic: Vec<(usize, Vec<f64>)> = {
            let mut tape = Tape::new();
            let l = self.loss(&mut tape, batch, &mut ForwardCtx::eval())?;
            let grads = tape.backward(l)?;
            grads
                .slot_grads()
                .map(|(slot, g)| (slot, g.iter().map(|v| v.as_f64()).collect()))
                .collect()
        };
        let mut probe = self.clone();
        let mut worst = 0f64;
        for (slot, grad) in analytic {
            for e in (0..grad.len()).step_by(stride.max(1)) {
                let values = probe.params.tensor_mut(ParamId(slot)).values_mut();
                let orig = values[e];
                let plus = orig + T::from_f64(epsilon);
                let minus = orig - T::from_f64(epsilon);
                values[e] = plus;
                let fp = eval_loss(&probe)?;
                probe.params.tensor_mut(ParamId(slot)).values_mut()[e] = minus;
                let fm = eval_loss(&probe)?;
                probe.params.tensor_mut(ParamId(slot)).values_mut()[e] = orig;
                let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
                worst = worst.max((grad[e] - numeric).abs() / grad[e].abs().max(1.0));
            }
        }
        Ok(worst)
    }

    /// Copies of all parameter values keyed by canonical name.
    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        let mut store = ParamStore::new();
        let mut remap = std::collections::HashMap::new();
        for (name, id) in self.params.names() {
            if let Some(&new) = remap.get(id) {
                store.alias(name.clone(), new).expect("names are unique");
            } else {
                let e = self.params.entry(*id);
                let new = store
                    .insert(name.clone(), e.tensor.cast::<U>(), e.component, e.decay)
                    .expect("names are unique");
                remap.insert(*id, new);
            }
        }
        LanguageModel {
            config: self.config.clone(),
            bytepool: self.bytepool.clone(),
            params: store,
            ids: self.ids.clone(),
        }
    }
}

/// `log softmax(row)[index]`, computed in f64.
pub fn log_softmax_at<T: Real>(row: &[T], index: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row[index].as_f64() - lse
}
