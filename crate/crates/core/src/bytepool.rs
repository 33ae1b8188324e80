//! Tokenizer-free embedding: each BPE token's bytes are embedded with a tiny
//! byte table, pooled into one vector by a small transformer, and the core
//! model's output is decoded back into the next token's bytes.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Error, Result};
use crate::generate::{sample, Sampling};
use crate::model::{
    block_forward, build_block, BlockDims, BlockIds, BlockPlan, Component, FfnType, ForwardCtx, Init,
    LanguageModel, ModelConfig, ParamId, ParamStore, SeqLayout, INIT_STD,
};
use crate::numerics::{DiffTensor, Real, Tape, Var};
use crate::tokenizer::MergeTable;

/// End of a token's byte chunk.
pub const EOT: u16 = 256;
/// Decoder start symbol; also the whole input chunk of a document separator.
pub const BOS: u16 = 257;
/// Filler for unused byte slots. Never attended to and never scored.
pub const PAD: u16 = 258;
/// 256 data bytes plus the three control symbols.
pub const BYTE_SYMBOLS: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Read out a learned symbol prepended to every chunk.
    Aggregate,
    /// Average the byte positions' outputs.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BytePoolConfig {
    pub byte_dim: usize,
    pub pool_layers: usize,
    pub pool_heads: usize,
    /// Hidden width of the SwiGLU layers inside the pooling and decoding transformers.
    pub ffn_dim: usize,
    pub max_token_bytes: usize,
    pub decoder_layers: usize,
    pub aggregation: Aggregation,
}

impl Default for BytePoolConfig {
    fn default() -> Self {
        Self {
            byte_dim: 64,
            pool_layers: 2,
            pool_heads: 4,
            ffn_dim: 256,
            max_token_bytes: 16,
            decoder_layers: 2,
            aggregation: Aggregation::Aggregate,
        }
    }
}

impl BytePoolConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        for (name, v) in [
            ("byte_dim", self.byte_dim),
            ("pool_heads", self.pool_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_token_bytes", self.max_token_bytes),
        ] {
            if v == 0 {
                return Err(config_err(format!("bytepool.{name} must be positive")));
            }
        }
        if self.byte_dim > model.hidden_dim {
            return Err(config_err(format!(
                "bytepool.byte_dim {} exceeds model.hidden_dim {}",
                self.byte_dim, model.hidden_dim
            )));
        }
        if !self.byte_dim.is_multiple_of(self.pool_heads) {
            return Err(config_err(format!(
                "bytepool.byte_dim {} not divisible by pool_heads {}",
                self.byte_dim, self.pool_heads
            )));
        }
        Ok(())
    }

    pub(crate) fn block_dims(&self) -> BlockDims {
        BlockDims {
            hidden: self.byte_dim,
            n_heads: self.pool_heads,
            n_kv_heads: self.pool_heads,
            ffn_type: FfnType::Swiglu,
            ffn_dim: self.ffn_dim,
        }
    }

    /// Rows per pooling sequence (the aggregate slot plus the byte slots).
    fn pool_len(&self) -> usize {
        match self.aggregation {
            Aggregation::Aggregate => self.max_token_bytes + 1,
            Aggregation::Mean => self.max_token_bytes,
        }
    }

    /// Rows per decoder sequence: conditioning, BOS, then up to `max_token_bytes` bytes.
    fn decoder_len(&self) -> usize {
        self.max_token_bytes + 2
    }
}

/// Token positions expressed as byte chunks.
///
/// Position `i` (flattened over `n_seq × n_tokens`) has input bytes
/// `bytes[i·M .. i·M + lens[i]]` and target symbols `targets[i·(M+1) ..]`:
/// the next token's bytes followed by [`EOT`], padded with [`PAD`].
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedBatch {
    pub n_seq: usize,
    pub n_tokens: usize,
    pub max_token_bytes: usize,
    pub bytes: Vec<u16>,
    pub lens: Vec<usize>,
    pub targets: Vec<u16>,
}

/// Input chunk and EOT-terminated target symbols of one token id. The
/// separator id (`merges.vocab_size()`) reads as `[BOS]` and predicts `[EOT]`.
pub fn token_symbols(merges: &MergeTable, id: u32) -> Result<(Vec<u16>, Vec<u16>)> {
    if id as usize == merges.vocab_size() {
        return Ok((vec![BOS], vec![EOT]));
    }
    let bytes = merges
        .token_bytes(id)
        .ok_or_else(|| Error::Index(format!("token {id} outside vocabulary of {}", merges.vocab_size() + 1)))?;
    let input: Vec<u16> = bytes.iter().map(|&b| b as u16).collect();
    let mut target = input.clone();
    target.push(EOT);
    Ok((input, target))
}

impl ChunkedBatch {
    fn empty(n_seq: usize, n_tokens: usize, max_token_bytes: usize) -> Self {
        let n = n_seq * n_tokens;
        Self {
            n_seq,
            n_tokens,
            max_token_bytes,
            bytes: vec![PAD; n * max_token_bytes],
            lens: vec![0; n],
            targets: vec![PAD; n * (max_token_bytes + 1)],
        }
    }

    fn set(&mut self, pos: usize, input: &[u16], target: Option<&[u16]>) -> Result<()> {
        let m = self.max_token_bytes;
        if input.is_empty() {
            return Err(data_err(format!("empty byte chunk at position {pos}")));
        }
        if input.len() > m {
            return Err(data_err(format!("chunk of {} bytes exceeds max_token_bytes {m}", input.len())));
        }
        if let Some(&bad) = input.iter().find(|&&s| s as usize >= BYTE_SYMBOLS) {
            return Err(Error::Index(format!("byte symbol {bad} out of range")));
        }
        self.bytes[pos * m..pos * m + input.len()].copy_from_slice(input);
        self.lens[pos] = input.len();
        if let Some(target) = target {
            if target.len() > m + 1 {
                return Err(data_err(format!(
                    "target of {} symbols exceeds max_token_bytes + 1 = {}",
                    target.len(),
                    m + 1
                )));
            }
            let t = &mut self.targets[pos * (m + 1)..(pos + 1) * (m + 1)];
            t[..target.len()].copy_from_slice(target);
        }
        Ok(())
    }

    /// Each window holds `n_tokens + 1` ids; position `i` reads token `i` and
    /// predicts token `i + 1`.
    pub fn from_token_windows(windows: &[&[u32]], merges: &MergeTable, max_token_bytes: usize) -> Result<Self> {
        let first = windows.first().ok_or_else(|| data_err("empty batch"))?;
        if first.len() < 2 {
            return Err(data_err("windows need at least two tokens"));
        }
        let n_tokens = first.len() - 1;
        let mut batch = Self::empty(windows.len(), n_tokens, max_token_bytes);
        for (s, w) in windows.iter().enumerate() {
            if w.len() != n_tokens + 1 {
                return Err(data_err("ragged batch windows"));
            }
            for t in 0..n_tokens {
                let (input, _) = token_symbols(merges, w[t])?;
                let (_, target) = token_symbols(merges, w[t + 1])?;
                batch.set(s * n_tokens + t, &input, Some(&target))?;
            }
        }
        Ok(batch)
    }

    /// A single sequence with inputs only (targets all PAD), for generation.
    pub fn inputs_only(ids: &[u32], merges: &MergeTable, max_token_bytes: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(data_err("empty token sequence"));
        }
        let mut batch = Self::empty(1, ids.len(), max_token_bytes);
        for (t, &id) in ids.iter().enumerate() {
            let (input, _) = token_symbols(merges, id)?;
            batch.set(t, &input, None)?;
        }
        Ok(batch)
    }

    /// Builds a batch from explicit chunks: `inputs[i]` and EOT-terminated `targets[i]`.
    pub fn from_chunks(
        n_seq: usize,
        inputs: &[Vec<u16>],
        targets: &[Vec<u16>],
        max_token_bytes: usize,
    ) -> Result<Self> {
        if n_seq == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(n_seq) || targets.len() != inputs.len() {
            return Err(data_err("chunk counts do not form a batch"));
        }
        let mut batch = Self::empty(n_seq, inputs.len() / n_seq, max_token_bytes);
        for (i, (input, target)) in inputs.iter().zip(targets).enumerate() {
            batch.set(i, input, Some(target))?;
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }

    /// Number of scored symbols (target bytes plus EOTs).
    pub fn target_count(&self) -> usize {
        self.targets.iter().filter(|&&s| s != PAD).count()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BytePoolIds {
    pub table: ParamId,
    pub byte_pos: ParamId,
    pub aggregate: Option<ParamId>,
    pub pool_blocks: Vec<BlockIds>,
    pub pool_norm: ParamId,
    pub pool_proj: ParamId,
    pub dec_proj: ParamId,
    pub dec_pos: ParamId,
    pub dec_blocks: Vec<BlockIds>,
    pub dec_norm: ParamId,
}

pub(crate) fn build_params<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    bp: &BytePoolConfig,
    model: &ModelConfig,
) -> Result<BytePoolIds> {
    let d = bp.byte_dim;
    let h = model.hidden_dim;
    let m = bp.max_token_bytes;
    let emb = Component::BytepoolEmbedder;
    let dec = Component::BytepoolDecoder;
    let dims = bp.block_dims();

    let table = store.insert("bytepool.byte_table", init.normal(vec![BYTE_SYMBOLS, d], INIT_STD), emb, false)?;
    let byte_pos = store.insert("bytepool.byte_pos", init.normal(vec![m, d], INIT_STD), emb, false)?;
    let aggregate = match bp.aggregation {
        Aggregation::Aggregate => {
            Some(store.insert("bytepool.aggregate", init.normal(vec![1, d], INIT_STD), emb, false)?)
        }
        Aggregation::Mean => None,
    };
    let blocks = |store: &mut ParamStore<T>, init: &mut Init, prefix: &str, n: usize, c: Component| {
        (0..n)
            .map(|i| {
                let p = format!("{prefix}.layer.{i}");
                let plan = BlockPlan {
                    prefix: &p,
                    dims,
                    depth: n,
                    attn_component: c,
                    ffn_component: c,
                    norm_component: c,
                    share_attn: None,
                    share_ffn: None,
                    lora_rank: 0,
                };
                build_block(store, init, &plan)
            })
            .collect::<Result<Vec<_>>>()
    };
    let pool_blocks = blocks(store, init, "bytepool.pool", bp.pool_layers, emb)?;
    let pool_norm = store.insert("bytepool.pool_norm", DiffTensor::filled(vec![d], T::one()), emb, false)?;
    let pool_proj = store.insert("bytepool.pool_proj", init.normal(vec![d, h], INIT_STD), emb, true)?;

    let dec_proj = store.insert("bytepool.decoder.proj", init.normal(vec![h, d], INIT_STD), dec, true)?;
    let dec_pos = store.insert(
        "bytepool.decoder.pos",
        init.normal(vec![bp.decoder_len(), d], INIT_STD),
        dec,
        false,
    )?;
    let dec_blocks = blocks(store, init, "bytepool.decoder", bp.decoder_layers, dec)?;
    let dec_norm = store.insert("bytepool.decoder.norm", DiffTensor::filled(vec![d], T::one()), dec, false)?;
    store.alias("bytepool.decoder.head", table)?;

    Ok(BytePoolIds {
        table,
        byte_pos,
        aggregate,
        pool_blocks,
        pool_norm,
        pool_proj,
        dec_proj,
        dec_pos,
        dec_blocks,
        dec_norm,
    })
}

fn parts<T: Real>(model: &LanguageModel<T>) -> Result<(&BytePoolConfig, &BytePoolIds)> {
    match (model.bytepool_config(), model.ids().bytepool.as_ref()) {
        (Some(c), Some(ids)) => Ok((c, ids)),
        _ => Err(config_err("model has no byte_pool embedder")),
    }
}

/// Byte-table lookup plus within-chunk position for `ids` laid out as
/// consecutive chunks of `max_token_bytes`: returns `[ids.len() × byte_dim]`.
pub fn embed_bytes<'a, T: Real>(model: &'a LanguageModel<T>, tape: &mut Tape<'a, T>, ids: &[u16]) -> Result<Var> {
    let (bp, ids_p) = parts(model)?;
    let m = bp.max_token_bytes;
    if ids.is_empty() || !ids.len().is_multiple_of(m) {
        return Err(Error::Shape(format!("{} byte ids are not whole chunks of {m}", ids.len())));
    }
    let rows: Vec<usize> = ids.iter().map(|&s| s as usize).collect();
    let table = model.params().var(tape, ids_p.table)?;
    let x = tape.gather(table, &rows)?;
    let pos_rows: Vec<usize> = (0..ids.len()).map(|i| i % m).collect();
    let pos = model.params().var(tape, ids_p.byte_pos)?;
    let p = tape.gather(pos, &pos_rows)?;
    tape.add(x, p)
}

fn run_blocks<'a, T: Real>(
    model: &'a LanguageModel<T>,
    tape: &mut Tape<'a, T>,
    blocks: &[BlockIds],
    mut x: Var,
    layout: &SeqLayout,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (bp, _) = parts(model)?;
    let dims = bp.block_dims();
    for ids in blocks {
        x = block_forward(tape, model.params(), &dims, ids, x, layout, model.config().dropout, ctx)?;
    }
    Ok(x)
}

/// One `hidden`-wide representation per chunk: `[n_seq·n_tokens × hidden]`.
pub(crate) fn pool_chunks<'a, T: Real>(
    model: &'a LanguageModel<T>,
    tape: &mut Tape<'a, T>,
    b: &ChunkedBatch,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (bp, ids) = parts(model)?;
    let m = bp.max_token_bytes;
    if b.max_token_bytes != m {
        return Err(data_err(format!(
            "batch chunk width {} differs from max_token_bytes {m}",
            b.max_token_bytes
        )));
    }
    if let Some(pos) = b.lens.iter().position(|&l| l == 0) {
        return Err(data_err(format!("zero-length span at position {pos}")));
    }
    let n = b.len();
    let bytes = embed_bytes(model, tape, &b.bytes)?;
    let len = bp.pool_len();
    let (x, key_lens) = match ids.aggregate {
        Some(agg) => {
            // Interleave one aggregate row ahead of each chunk's byte rows.
            let agg = model.params().var(tape, agg)?;
            let aggs = tape.gather(agg, &vec![0; n])?;
            let stacked = tape.concat_rows(aggs, bytes)?;
            let order: Vec<usize> = (0..n)
                .flat_map(|c| std::iter::once(c).chain((0..m).map(move |j| n + c * m + j)))
                .collect();
            let x = tape.gather(stacked, &order)?;
            (x, b.lens.iter().map(|&l| l + 1).collect::<Vec<_>>())
        }
        None => (bytes, b.lens.clone()),
    };
    let layout = SeqLayout {
        n_seq: n,
        seq_len: len,
        causal: false,
        key_lens: Some(key_lens),
        rope_positions: None,
    };
    let x = run_blocks(model, tape, &ids.pool_blocks, x, &layout, ctx)?;
    let g = model.params().var(tape, ids.pool_norm)?;
    let x = tape.rms_norm(x, g)?;
    let pooled = match ids.aggregate {
        Some(_) => {
            let rows: Vec<usize> = (0..n).map(|c| c * len).collect();
            tape.gather(x, &rows)?
        }
        None => {
            let groups: Vec<Vec<usize>> = (0..n).map(|c| (c * len..c * len + b.lens[c]).collect()).collect();
            tape.segment_mean(x, &groups)?
        }
    };
    let w = model.params().var(tape, ids.pool_proj)?;
    tape.matmul(pooled, w)
}

/// Decoder logits `[n·(M+2) × 259]` for conditioning states `h [n × hidden]`
/// and teacher-forced symbols `forced [n × (M+1)]` (BOS is prepended here).
fn decoder_logits<'a, T: Real>(
    model: &'a LanguageModel<T>,
    tape: &mut Tape<'a, T>,
    h: Var,
    forced: &[u16],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let (bp, ids) = parts(model)?;
    let m = bp.max_token_bytes;
    let len = bp.decoder_len();
    let n = tape.shape(h)[0];
    if forced.len() != n * (m + 1) {
        return Err(Error::Shape(format!("{} forced symbols for {n} chunks", forced.len())));
    }
    let w = model.params().var(tape, ids.dec_proj)?;
    let cond = tape.matmul(h, w)?;
    let mut rows = Vec::with_capacity(n * (m + 1));
    for chunk in forced.chunks(m + 1) {
        rows.push(BOS as usize);
        rows.extend(chunk[..m].iter().map(|&s| s as usize));
    }
    let table = model.params().var(tape, ids.table)?;
    let emb = tape.gather(table, &rows)?;
    let stacked = tape.concat_rows(cond, emb)?;
    let order: Vec<usize> = (0..n)
        .flat_map(|c| std::iter::once(c).chain((0..m + 1).map(move |j| n + c * (m + 1) + j)))
        .collect();
    let x = tape.gather(stacked, &order)?;
    let pos = model.params().var(tape, ids.dec_pos)?;
    let pos_rows: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
    let p = tape.gather(pos, &pos_rows)?;
    let x = tape.add(x, p)?;
    let layout = SeqLayout {
        n_seq: n,
        seq_len: len,
        causal: true,
        key_lens: None,
        rope_positions: None,
    };
    let x = run_blocks(model, tape, &ids.dec_blocks, x, &layout, ctx)?;
    let g = model.params().var(tape, ids.dec_norm)?;
    let x = tape.rms_norm(x, g)?;
    tape.matmul_t(x, table)
}

/// Per-row targets aligned with [`decoder_logits`]: row `1 + j` of a chunk predicts symbol `j`.
fn aligned_targets(targets: &[u16], m: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(targets.len() / (m + 1) * (m + 2));
    for chunk in targets.chunks(m + 1) {
        out.push(PAD as usize);
        out.extend(chunk.iter().map(|&s| s as usize));
    }
    out
}

fn check_targets(b: &ChunkedBatch, n: usize) -> Result<()> {
    let m = b.max_token_bytes;
    if b.targets.len() != n * (m + 1) {
        return Err(data_err(format!(
            "target symbols {} do not match {n} chunks of {}",
            b.targets.len(),
            m + 1
        )));
    }
    Ok(())
}

/// Mean cross-entropy over every non-PAD target symbol.
pub(crate) fn byte_decode_loss<'a, T: Real>(
    model: &'a LanguageModel<T>,
    tape: &mut Tape<'a, T>,
    h: Var,
    b: &ChunkedBatch,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    check_targets(b, tape.shape(h)[0])?;
    let logits = decoder_logits(model, tape, h, &b.targets, ctx)?;
    let targets = aligned_targets(&b.targets, b.max_token_bytes);
    tape.cross_entropy(logits, &targets, Some(PAD as usize))
}

/// Natural-log probability of each position's full target (bytes plus EOT).
pub(crate) fn chunk_log_probs<'a, T: Real>(
    model: &'a LanguageModel<T>,
    tape: &mut Tape<'a, T>,
    h: Var,
    b: &ChunkedBatch,
    ctx: &mut ForwardCtx,
) -> Result<Vec<f64>> {
    let n = tape.shape(h)[0];
    check_targets(b, n)?;
    let logits = decoder_logits(model, tape, h, &b.targets, ctx)?;
    let targets = aligned_targets(&b.targets, b.max_token_bytes);
    let rows = b.max_token_bytes + 2;
    let values = tape.value(logits);
    let mut out = vec![0.0; n];
    for (r, (row, &t)) in values.chunks(BYTE_SYMBOLS).zip(&targets).enumerate() {
        if t != PAD as usize {
            out[r / rows] += crate::model::log_softmax_at(row, t);
        }
    }
    Ok(out)
}

/// Samples one token's bytes from the decoder conditioned on `h [hidden]`.
/// Stops at EOT or after `max_token_bytes` bytes; an immediate EOT yields an
/// empty vector. Control symbols other than EOT are never emitted.
pub fn generate_token_bytes<T: Real>(
    model: &LanguageModel<T>,
    h: &[T],
    sampling: Sampling,
    rng: &mut dyn RngCore,
) -> Result<Vec<u8>> {
    let (bp, _) = parts(model)?;
    let m = bp.max_token_bytes;
    let hidden = model.config().hidden_dim;
    if h.len() != hidden {
        return Err(Error::Dimension {
            op: "generate_token_bytes",
            lhs: vec![h.len()],
            rhs: vec![hidden],
        });
    }
    let mut out: Vec<u8> = Vec::new();
    while out.len() < m {
        let mut forced = vec![PAD; m + 1];
        for (slot, &b) in forced.iter_mut().zip(&out) {
            *slot = b as u16;
        }
        let mut tape = Tape::new();
        let hv = tape.constant(vec![1, hidden], h.to_vec())?;
        let logits = decoder_logits(model, &mut tape, hv, &forced, &mut ForwardCtx::eval())?;
        let row_index = 1 + out.len();
        let row = &tape.value(logits)[row_index * BYTE_SYMBOLS..(row_index + 1) * BYTE_SYMBOLS];
        let mut scores: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        scores[BOS as usize] = f64::NEG_INFINITY;
        scores[PAD as usize] = f64::NEG_INFINITY;
        let symbol = sample(&scores, sampling, rng)?;
        if symbol == EOT as usize {
            break;
        }
        out.push(symbol as u8);
    }
    Ok(out)
}
