//! Transformer building blocks shared by the core model and the byte-level
//! pooling/decoding transformers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Component, Init, ParamId, ParamStore};
use super::FfnType;
use crate::error::Result;
use crate::numerics::{AttentionSpec, DiffTensor, Real, Tape, Var};

pub(crate) const INIT_STD: f64 = 0.02;

/// Training/evaluation switch plus the dropout random stream.
pub struct ForwardCtx {
    train: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    /// Deterministic forward: dropout disabled.
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training mode; dropout masks are drawn from a stream seeded by `seed`.
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub(crate) fn dropout<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var, p: f64) -> Result<Var> {
        if self.train && p > 0.0 {
            tape.dropout(x, p, &mut self.rng)
        } else {
            Ok(x)
        }
    }

    pub(crate) fn attention<T: Real>(
        &mut self,
        tape: &mut Tape<'_, T>,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        p: f64,
    ) -> Result<Var> {
        if self.train && p > 0.0 {
            tape.attention(q, k, v, spec, Some((p, &mut self.rng)))
        } else {
            tape.attention(q, k, v, spec, None)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockDims {
    pub hidden: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_type: FfnType,
    pub ffn_dim: usize,
}

impl BlockDims {
    pub fn d_head(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum FfnIds {
    SwiGlu {
        gate: ParamId,
        up: ParamId,
        down: ParamId,
    },
    Simple {
        w_in: ParamId,
        b_in: ParamId,
        w_out: ParamId,
        b_out: ParamId,
    },
}

/// Low-rank `(A, B)` pairs, one per FFN weight matrix in forward order.
pub(crate) type LoraIds = Vec<(ParamId, ParamId)>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockIds {
    pub attn_norm: ParamId,
    pub attn: AttnIds,
    pub ffn_norm: ParamId,
    pub ffn: FfnIds,
    pub lora: Option<LoraIds>,
}

/// How a block's parameters are realized.
pub(crate) struct BlockPlan<'s> {
    pub prefix: &'s str,
    pub dims: BlockDims,
    /// Depth of the stack, used for output-projection init scaling.
    pub depth: usize,
    pub attn_component: Component,
    pub ffn_component: Component,
    pub norm_component: Component,
    pub share_attn: Option<&'s AttnIds>,
    pub share_ffn: Option<&'s FfnIds>,
    pub lora_rank: usize,
}

fn ffn_names(ffn: &FfnIds) -> Vec<(&'static str, ParamId)> {
    match ffn {
        FfnIds::SwiGlu { gate, up, down } => vec![("w_gate", *gate), ("w_up", *up), ("w_down", *down)],
        FfnIds::Simple {
            w_in,
            b_in,
            w_out,
            b_out,
        } => vec![("w_in", *w_in), ("b_in", *b_in), ("w_out", *w_out), ("b_out", *b_out)],
    }
}

/// `(in, out)` of each FFN weight matrix, forward order.
pub(crate) fn ffn_matrix_dims(dims: &BlockDims) -> Vec<(&'static str, usize, usize)> {
    match dims.ffn_type {
        FfnType::Swiglu => vec![
            ("w_gate", dims.hidden, dims.ffn_dim),
            ("w_up", dims.hidden, dims.ffn_dim),
            ("w_down", dims.ffn_dim, dims.hidden),
        ],
        FfnType::Simple => vec![("w_in", dims.hidden, dims.ffn_dim), ("w_out", dims.ffn_dim, dims.hidden)],
    }
}

pub(crate) fn build_block<T: Real>(
    store: &mut ParamStore<T>,
    init: &mut Init,
    plan: &BlockPlan<'_>,
) -> Result<BlockIds> {
    let p = plan.prefix;
    let d = plan.dims;
    let out_std = INIT_STD / ((2 * plan.depth.max(1)) as f64).sqrt();
    let attn_norm = store.insert(
        format!("{p}.attn_norm"),
        DiffTensor::filled(vec![d.hidden], T::one()),
        plan.norm_component,
        false,
    )?;
    let attn = match plan.share_attn {
        Some(shared) => {
            store.alias(format!("{p}.attn.wq"), shared.wq)?;
            store.alias(format!("{p}.attn.wk"), shared.wk)?;
            store.alias(format!("{p}.attn.wv"), shared.wv)?;
            store.alias(format!("{p}.attn.wo"), shared.wo)?;
            shared.clone()
        }
        None => {
            let c = plan.attn_component;
            AttnIds {
                wq: store.insert(format!("{p}.attn.wq"), init.normal(vec![d.hidden, d.hidden], INIT_STD), c, true)?,
                wk: store.insert(format!("{p}.attn.wk"), init.normal(vec![d.hidden, d.kv_width()], INIT_STD), c, true)?,
                wv: store.insert(format!("{p}.attn.wv"), init.normal(vec![d.hidden, d.kv_width()], INIT_STD), c, true)?,
                wo: store.insert(format!("{p}.attn.wo"), init.normal(vec![d.hidden, d.hidden], out_std), c, true)?,
            }
        }
    };
    let ffn_norm = store.insert(
        format!("{p}.ffn_norm"),
        DiffTensor::filled(vec![d.hidden], T::one()),
        plan.norm_component,
        false,
    )?;
    let ffn = match plan.share_ffn {
        Some(shared) => {
            for (name, id) in ffn_names(shared) {
                store.alias(format!("{p}.ffn.{name}"), id)?;
            }
            shared.clone()
        }
        None => {
            let c = plan.ffn_component;
            match d.ffn_type {
                FfnType::Swiglu => FfnIds::SwiGlu {
                    gate: store.insert(format!("{p}.ffn.w_gate"), init.normal(vec![d.hidden, d.ffn_dim], INIT_STD), c, true)?,
                    up: store.insert(format!("{p}.ffn.w_up"), init.normal(vec![d.hidden, d.ffn_dim], INIT_STD), c, true)?,
                    down: store.insert(format!("{p}.ffn.w_down"), init.normal(vec![d.ffn_dim, d.hidden], out_std), c, true)?,
                },
                FfnType::Simple => FfnIds::Simple {
                    w_in: store.insert(format!("{p}.ffn.w_in"), init.normal(vec![d.hidden, d.ffn_dim], INIT_STD), c, true)?,
                    b_in: store.insert(format!("{p}.ffn.b_in"), DiffTensor::zeros(vec![d.ffn_dim]), c, false)?,
                    w_out: store.insert(format!("{p}.ffn.w_out"), init.normal(vec![d.ffn_dim, d.hidden], out_std), c, true)?,
                    b_out: store.insert(format!("{p}.ffn.b_out"), DiffTensor::zeros(vec![d.hidden]), c, false)?,
                },
            }
        }
    };
    let lora = if plan.lora_rank > 0 {
        let r = plan.lora_rank;
        let mut pairs = Vec::new();
        for (name, fan_in, fan_out) in ffn_matrix_dims(&d) {
            let a = store.insert(
                format!("{p}.ffn.lora.{name}.a"),
                init.normal(vec![fan_in, r], INIT_STD),
                plan.ffn_component,
                true,
            )?;
            let b = store.insert(
                format!("{p}.ffn.lora.{name}.b"),
                DiffTensor::zeros(vec![r, fan_out]),
                plan.ffn_component,
                true,
            )?;
            pairs.push((a, b));
        }
        Some(pairs)
    } else {
        None
    };
    Ok(BlockIds {
        attn_norm,
        attn,
        ffn_norm,
        ffn,
        lora,
    })
}

/// Sequence layout for one block call.
#[derive(Debug, Clone)]
pub(crate) struct SeqLayout {
    pub n_seq: usize,
    pub seq_len: usize,
    pub causal: bool,
    pub key_lens: Option<Vec<usize>>,
    /// Absolute position per row when rotary embedding is active.
    pub rope_positions: Option<Vec<usize>>,
}

fn linear<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    x: Var,
    w: ParamId,
    lora: Option<(ParamId, ParamId)>,
) -> Result<Var> {
    let wv = store.var(tape, w)?;
    let y = tape.matmul(x, wv)?;
    match lora {
        Some((a, b)) => {
            let av = store.var(tape, a)?;
            let bv = store.var(tape, b)?;
            let xa = tape.matmul(x, av)?;
            let delta = tape.matmul(xa, bv)?;
            tape.add(y, delta)
        }
        None => Ok(y),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_sublayer<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    dims: &BlockDims,
    ids: &AttnIds,
    x: Var,
    layout: &SeqLayout,
    dropout: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let mut q = linear(tape, store, x, ids.wq, None)?;
    let mut k = linear(tape, store, x, ids.wk, None)?;
    let v = linear(tape, store, x, ids.wv, None)?;
    if let Some(pos) = &layout.rope_positions {
        q = tape.rope(q, pos, dims.d_head())?;
        k = tape.rope(k, pos, dims.d_head())?;
    }
    let spec = AttentionSpec {
        n_seq: layout.n_seq,
        seq_len: layout.seq_len,
        n_heads: dims.n_heads,
        n_kv_heads: dims.n_kv_heads,
        d_head: dims.d_head(),
        causal: layout.causal,
        key_lens: layout.key_lens.clone(),
    };
    let a = ctx.attention(tape, q, k, v, &spec, dropout)?;
    let o = linear(tape, store, a, ids.wo, None)?;
    ctx.dropout(tape, o, dropout)
}

pub(crate) fn ffn_sublayer<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    ids: &FfnIds,
    lora: Option<&LoraIds>,
    x: Var,
    dropout: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let pair = |i: usize| lora.map(|l| l[i]);
    let out = match ids {
        FfnIds::SwiGlu { gate, up, down } => {
            let g = linear(tape, store, x, *gate, pair(0))?;
            let u = linear(tape, store, x, *up, pair(1))?;
            let g = tape.silu(g)?;
            let m = tape.mul(g, u)?;
            linear(tape, store, m, *down, pair(2))?
        }
        FfnIds::Simple {
            w_in,
            b_in,
            w_out,
            b_out,
        } => {
            let h = linear(tape, store, x, *w_in, pair(0))?;
            let bi = store.var(tape, *b_in)?;
            let h = tape.add_bias(h, bi)?;
            let h = tape.gelu(h)?;
            let o = linear(tape, store, h, *w_out, pair(1))?;
            let bo = store.var(tape, *b_out)?;
            tape.add_bias(o, bo)?
        }
    };
    ctx.dropout(tape, out, dropout)
}

/// Pre-norm residual block: `x + Attn(Norm(x))`, then `+ FFN(Norm(x))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_forward<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    store: &'a ParamStore<T>,
    dims: &BlockDims,
    ids: &BlockIds,
    x: Var,
    layout: &SeqLayout,
    dropout: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let g = store.var(tape, ids.attn_norm)?;
    let h = tape.rms_norm(x, g)?;
    let a = attention_sublayer(tape, store, dims, &ids.attn, h, layout, dropout, ctx)?;
    let x = tape.add(x, a)?;
    let g = store.var(tape, ids.ffn_norm)?;
    let h = tape.rms_norm(x, g)?;
    let f = ffn_sublayer(tape, store, &ids.ffn, ids.lora.as_ref(), h, dropout, ctx)?;
    tape.add(x, f)
}

/// Fixed sinusoidal table: even columns `sin(t·ω_i)`, odd columns `cos(t·ω_i)`.
pub fn sincos_table(positions: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; positions * dim];
    for t in 0..positions {
        for c in 0..dim {
            let i = c / 2;
            let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
            let angle = t as f64 * freq;
            out[t * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}
