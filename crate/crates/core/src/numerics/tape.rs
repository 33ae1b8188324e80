use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use super::{check_shape, ensure_finite, DiffTensor, Real};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout and masking of a fused multi-head attention call.
///
/// Rows of `q`, `k` and `v` are laid out as `n_seq` sequences of `seq_len`
/// positions. Query head `h` reads key/value head `h / (n_heads / n_kv_heads)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSpec {
    pub n_seq: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    /// Position `i` may only attend to `j <= i`.
    pub causal: bool,
    /// Per-sequence count of valid keys; keys at or beyond it are masked.
    pub key_lens: Option<Vec<usize>>,
}

impl AttentionSpec {
    fn key_limit(&self, seq: usize, query: usize) -> usize {
        let mut limit = if self.causal { query + 1 } else { self.seq_len };
        if let Some(lens) = &self.key_lens {
            limit = limit.min(lens[seq]);
        }
        limit
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Gather {
        table: Var,
        rows: Vec<usize>,
        width: usize,
    },
    ConcatRows(Var, Var),
    SegmentMean {
        x: Var,
        groups: Vec<Vec<usize>>,
        width: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
        width: usize,
    },
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        d_head: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order so gradients can be replayed in
/// reverse. Inputs always precede the nodes that consume them.
///
/// Leaves may borrow their values (parameters stay in their store; the tape
/// only keeps slices), hence the lifetime.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    slots: HashMap<usize, Var>,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    visits: Vec<u32>,
    slots: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of leaves registered with [`Tape::param_leaf`], by slot.
    pub fn slot_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.slots
            .iter()
            .filter_map(move |&(slot, v)| self.get(v).map(|g| (slot, g)))
    }

    /// How many times each node's backward rule ran.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub(crate) const RMS_EPS: f64 = 1e-5;

fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Rotary angle frequency for pair `i` of a `d_head`-wide head.
pub(crate) fn rope_theta(i: usize, d_head: usize) -> f64 {
    10000f64.powf(-2.0 * i as f64 / d_head as f64)
}

fn rope_apply<T: Real>(
    values: &[T],
    width: usize,
    positions: &[usize],
    d_head: usize,
    inverse: bool,
) -> Vec<T> {
    let mut out = values.to_vec();
    let half = d_head / 2;
    let thetas: Vec<f64> = (0..half).map(|i| rope_theta(i, d_head)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut out[r * width..(r + 1) * width];
        for (i, &theta) in thetas.iter().enumerate() {
            let angle = pos as f64 * theta;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::from_f64(if inverse { -s } else { s }), T::from_f64(c));
            for head in row.chunks_mut(d_head) {
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are never empty")
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            slots: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        ensure_finite(op_name, &value)?;
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<'a, T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> DiffTensor<T> {
        DiffTensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape nodes hold consistent shapes")
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn leaf(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [T]>,
        needs_grad: bool,
    ) -> Result<Var> {
        check_shape(&shape, value.len())?;
        ensure_finite("leaf", &value)?;
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        self.leaf(shape, Cow::Owned(values), false)
    }

    /// A differentiable input owned by the tape.
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        self.leaf(shape, Cow::Owned(values), true)
    }

    pub fn tensor(&mut self, t: &DiffTensor<T>) -> Result<Var> {
        self.leaf(
            t.shape().to_vec(),
            Cow::Owned(t.values().to_vec()),
            t.requires_grad(),
        )
    }

    /// Registers a borrowed parameter under `slot`. Registering the same slot
    /// twice returns the first handle, so aliased storage shares one node.
    pub fn param_leaf(
        &mut self,
        slot: usize,
        shape: &[usize],
        values: &'a [T],
        trainable: bool,
    ) -> Result<Var> {
        if let Some(&v) = self.slots.get(&slot) {
            return Ok(v);
        }
        let v = self.leaf(shape.to_vec(), Cow::Borrowed(values), trainable)?;
        self.slots.insert(slot, v);
        Ok(v)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    /// Matrix product `a [m×k] · b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_nn(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: false,
            },
            ng,
        )
    }

    /// `a [m×k] · bᵀ` with `b` stored as `[n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul_t")?;
        let (n, k2) = self.mat_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(dim_err("matmul_t", self.shape(a), self.shape(b)));
        }
        let out = matmul_nt(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "matmul_t",
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: true,
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), ng)
    }

    /// Adds a `[D]` bias to every last-dim slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(bias) != [d] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let ng = self.needs(x) || self.needs(bias);
        self.push("add_bias", self.shape(x).to_vec(), out, Op::AddBias { x, bias }, ng)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        self.push("scale", self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    /// Row lookup: `table [V×D]`, returns `[rows.len() × D]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = self.mat_dims(table, "gather")?;
        if rows.is_empty() {
            return Err(Error::Shape("gather with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::Index(format!("row {bad} out of range for table of {v} rows")));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let ng = self.needs(table);
        self.push(
            "gather",
            vec![rows.len(), d],
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
                width: d,
            },
            ng,
        )
    }

    /// Stacks `a [r₁×D]` on top of `b [r₂×D]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, da) = self.mat_dims(a, "concat_rows")?;
        let (rb, db) = self.mat_dims(b, "concat_rows")?;
        if da != db {
            return Err(dim_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push("concat_rows", vec![ra + rb, da], out, Op::ConcatRows(a, b), ng)
    }

    /// Mean of selected rows of `x [R×D]`, one output row per group.
    pub fn segment_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, d) = self.mat_dims(x, "segment_mean")?;
        if groups.is_empty() || groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Shape("segment_mean needs non-empty groups".into()));
        }
        if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); groups.len() * d];
        for (gi, g) in groups.iter().enumerate() {
            let inv = T::one() / T::from_usize(g.len());
            let dst = &mut out[gi * d..(gi + 1) * d];
            for &row in g {
                axpy(inv, &src[row * d..(row + 1) * d], dst);
            }
        }
        let ng = self.needs(x);
        self.push(
            "segment_mean",
            vec![groups.len(), d],
            out,
            Op::SegmentMean {
                x,
                groups: groups.to_vec(),
                width: d,
            },
            ng,
        )
    }

    /// Root-mean-square normalization over the last dim with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gain) != [d] {
            return Err(dim_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::from_f64(RMS_EPS);
        let g = self.value(gain);
        let src = self.value(x);
        let mut inv_rms = Vec::with_capacity(src.len() / d);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::from_usize(d);
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(g).map(|(&v, &gv)| v * inv * gv));
        }
        let ng = self.needs(x) || self.needs(gain);
        self.push(
            "rms_norm",
            self.shape(x).to_vec(),
            out,
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                width: d,
            },
            ng,
        )
    }

    /// Swish / SiLU: `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let ng = self.needs(x);
        self.push("silu", self.shape(x).to_vec(), out, Op::Silu(x), ng)
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.needs(x);
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu(x), ng)
    }

    /// Softmax over the last dimension, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if n == 0 {
            return Err(dim_err("softmax_rows", self.shape(x), &[]));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let ng = self.needs(x);
        self.push("softmax_rows", self.shape(x).to_vec(), out, Op::Softmax(x), ng)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// Positions whose target equals `ignore` are skipped; if every position is
    /// skipped the loss is zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (t, v) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let mut kept = Vec::with_capacity(t);
        for &target in targets {
            if Some(target) == ignore {
                kept.push(None);
            } else if target >= v {
                return Err(Error::Index(format!("target {target} out of range for {v} classes")));
            } else {
                kept.push(Some(target));
            }
        }
        let count = kept.iter().flatten().count();
        let mut probs = self.value(logits).to_vec();
        let mut total = 0f64;
        for (row, target) in probs.chunks_mut(v).zip(&kept) {
            if let Some(target) = *target {
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                total += (lse - row[target]).as_f64();
                softmax_in_place(row);
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![T::from_f64(loss)],
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            ng,
        )
    }

    /// Rotary position embedding over `x [R × H·d_head]`; row `r` sits at
    /// absolute position `positions[r]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], d_head: usize) -> Result<Var> {
        if d_head == 0 || !d_head.is_multiple_of(2) {
            return Err(Error::Config(format!("rope needs an even head dim, got {d_head}")));
        }
        let (r, w) = self.mat_dims(x, "rope")?;
        if positions.len() != r || w % d_head != 0 {
            return Err(dim_err("rope", self.shape(x), &[positions.len(), d_head]));
        }
        let out = rope_apply(self.value(x), w, positions, d_head, false);
        let ng = self.needs(x);
        self.push(
            "rope",
            vec![r, w],
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                d_head,
            },
            ng,
        )
    }

    /// Scaled dot-product attention with grouped key/value heads.
    ///
    /// `dropout` is `(p, seed)`: attention weights are zeroed with
    /// probability `p` and survivors rescaled by `1/(1-p)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        dropout: Option<(f64, &mut dyn rand::RngCore)>,
    ) -> Result<Var> {
        let AttentionSpec {
            n_seq,
            seq_len,
            n_heads,
            n_kv_heads,
            d_head,
            ..
        } = *spec;
        if n_kv_heads == 0 || n_heads % n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{n_heads} query heads cannot share {n_kv_heads} kv heads"
            )));
        }
        let rows = n_seq * seq_len;
        let qw = n_heads * d_head;
        let kw = n_kv_heads * d_head;
        if self.shape(q) != [rows, qw] {
            return Err(dim_err("attention.q", self.shape(q), &[rows, qw]));
        }
        if self.shape(k) != [rows, kw] || self.shape(v) != [rows, kw] {
            return Err(dim_err("attention.kv", self.shape(k), self.shape(v)));
        }
        if let Some(lens) = &spec.key_lens {
            if lens.len() != n_seq || lens.iter().any(|&l| l == 0 || l > seq_len) {
                return Err(Error::Shape(format!(
                    "key_lens must hold {n_seq} values in 1..={seq_len}"
                )));
            }
        }
        let group = n_heads / n_kv_heads;
        let scale = T::one() / T::from_usize(d_head).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); n_seq * n_heads * seq_len * seq_len];
        let mut out = vec![T::zero(); rows * qw];
        let mut keep = dropout.map(|(p, rng)| {
            let scale = T::from_f64(1.0 / (1.0 - p));
            (0..probs.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
                .collect::<Vec<T>>()
        });
        for n in 0..n_seq {
            for h in 0..n_heads {
                let kvh = h / group;
                for i in 0..seq_len {
                    let row = n * seq_len + i;
                    let qi = &qv[row * qw + h * d_head..][..d_head];
                    let limit = spec.key_limit(n, i);
                    let base = ((n * n_heads + h) * seq_len + i) * seq_len;
                    let p = &mut probs[base..base + limit];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kv[(n * seq_len + j) * kw + kvh * d_head..][..d_head];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(p);
                    let oi = &mut out[row * qw + h * d_head..][..d_head];
                    for (j, &pj) in p.iter().enumerate() {
                        let w = match keep.as_mut() {
                            Some(kp) => pj * kp[base + j],
                            None => pj,
                        };
                        let vj = &vv[(n * seq_len + j) * kw + kvh * d_head..][..d_head];
                        axpy(w, vj, oi);
                    }
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            vec![rows, qw],
            out,
            Op::Attention {
                q,
                k,
                v,
                spec: spec.clone(),
                probs,
                keep,
            },
            ng,
        )
    }

    /// Inverted dropout. Returns `x` itself when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::Config(format!("dropout must be < 1, got {p}")));
        }
        let scale = T::from_f64(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| v * k)
            .collect();
        let ng = self.needs(x);
        self.push("dropout", self.shape(x).to_vec(), out, Op::Dropout { x, keep }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push("sum", vec![1], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.value(x).iter().copied().sum::<T>() / T::from_usize(n);
        let ng = self.needs(x);
        self.push("mean", vec![1], vec![s], Op::Mean(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape(&shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        let ng = self.needs(x);
        self.push("reshape", shape, out, Op::Reshape(x), ng)
    }

    /// Reverse pass from a single-element `loss`. Every node that needs a
    /// gradient is visited at most once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        let mut visits = vec![0u32; n];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visits[idx] += 1;
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                ensure_finite("backward", g).map_err(|e| match e {
                    Error::Numeric { detail, .. } => Error::Numeric {
                        op: "backward",
                        detail: format!("gradient of node {i}: {detail}"),
                    },
                    other => other,
                })?;
            }
        }
        let mut slots: Vec<(usize, Var)> = self.slots.iter().map(|(&s, &v)| (s, v)).collect();
        slots.sort_unstable();
        Ok(Gradients {
            grads,
            visits,
            slots,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, d) in existing.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let da = if trans_b {
                        matmul_nn(g, bv, m, n, k)
                    } else {
                        matmul_nt(g, bv, m, n, k)
                    };
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = if trans_b {
                        matmul_tn(g, av, m, n, k)
                    } else {
                        matmul_tn(av, g, m, k, n)
                    };
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::AddBias { x, bias } => {
                self.accumulate(grads, x, g.to_vec());
                if self.needs(bias) {
                    let d = self.value(bias).len();
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let da = g.iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = g.iter().zip(self.value(a)).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Scale(x, c) => {
                self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            Op::Gather { table, rows, width } => {
                if self.needs(*table) {
                    let mut dt = vec![T::zero(); self.value(*table).len()];
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &g[i * width..(i + 1) * width];
                        for (acc, &v) in dt[r * width..(r + 1) * width].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *table, dt);
                }
            }
            &Op::ConcatRows(a, b) => {
                let split = self.value(a).len();
                self.accumulate(grads, a, g[..split].to_vec());
                self.accumulate(grads, b, g[split..].to_vec());
            }
            Op::SegmentMean { x, groups, width } => {
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    for (gi, group) in groups.iter().enumerate() {
                        let inv = T::one() / T::from_usize(group.len());
                        let src = &g[gi * width..(gi + 1) * width];
                        for &row in group {
                            axpy(inv, src, &mut dx[row * width..(row + 1) * width]);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::RmsNorm {
                x,
                gain,
                inv_rms,
                width,
            } => {
                let d = *width;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); d];
                let inv_d = T::one() / T::from_usize(d);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut proj = T::zero();
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dgain[j] += gr[j] * xhat;
                        proj += gr[j] * gv[j] * xhat;
                    }
                    proj *= inv_d;
                    let dxr = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        dxr[j] = inv * (gr[j] * gv[j] - xhat * proj);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
            }
            &Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(&gv, &v)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Gelu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(&gv, &v)| gv * gelu_grad(v))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Softmax(x) => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(n).zip(g.chunks(n)) {
                    let s = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - s)));
                }
                self.accumulate(grads, x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count > 0 && self.needs(*logits) {
                    let v = last_dim(self.shape(*logits));
                    let coef = g[0] / T::from_usize(*count);
                    let mut dl = vec![T::zero(); probs.len()];
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(t) = *target {
                            let row = &mut dl[r * v..(r + 1) * v];
                            for (dst, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                                *dst = p * coef;
                            }
                            row[t] -= coef;
                        }
                    }
                    self.accumulate(grads, *logits, dl);
                }
            }
            Op::Rope {
                x,
                positions,
                d_head,
            } => {
                let w = last_dim(&node.shape);
                let dx = rope_apply(g, w, positions, *d_head, true);
                self.accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                keep,
            } => self.attention_backward(*q, *k, *v, spec, probs, keep.as_deref(), g, grads),
            Op::Dropout { x, keep } => {
                let dx = g.iter().zip(keep).map(|(&gv, &k)| gv * k).collect();
                self.accumulate(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                self.accumulate(grads, x, vec![g[0] / T::from_usize(n); n]);
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[T],
        keep: Option<&[T]>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n_seq, seq_len, n_heads, d_head) =
            (spec.n_seq, spec.seq_len, spec.n_heads, spec.d_head);
        let group = n_heads / spec.n_kv_heads;
        let qw = n_heads * d_head;
        let kw = spec.n_kv_heads * d_head;
        let scale = T::one() / T::from_usize(d_head).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); seq_len];
        for n in 0..n_seq {
            for h in 0..n_heads {
                let kvh = h / group;
                for i in 0..seq_len {
                    let row = n * seq_len + i;
                    let limit = spec.key_limit(n, i);
                    let base = ((n * n_heads + h) * seq_len + i) * seq_len;
                    let p = &probs[base..base + limit];
                    let gi = &g[row * qw + h * d_head..][..d_head];
                    for j in 0..limit {
                        let voff = (n * seq_len + j) * kw + kvh * d_head;
                        let kf = keep.map_or(T::one(), |kp| kp[base + j]);
                        dp[j] = dot(gi, &vv[voff..voff + d_head]) * kf;
                        axpy(p[j] * kf, gi, &mut dv[voff..voff + d_head]);
                    }
                    let s = dot(p, &dp[..limit]);
                    let qoff = row * qw + h * d_head;
                    for j in 0..limit {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let koff = (n * seq_len + j) * kw + kvh * d_head;
                        axpy(ds, &kv[koff..koff + d_head], &mut dq[qoff..qoff + d_head]);
                        axpy(ds, &qv[qoff..qoff + d_head], &mut dk[koff..koff + d_head]);
                    }
                }
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

/// Rotates one `[T × d_head]` head in place using absolute positions
/// `offset..offset+T`; a convenience for inspection and tests.
pub fn rope_rotate_head<T: Real>(rows: &[T], d_head: usize, offset: usize) -> Result<Vec<T>> {
    if d_head == 0 || !d_head.is_multiple_of(2) {
        return Err(Error::Config(format!("rope needs an even head dim, got {d_head}")));
    }
    if !rows.len().is_multiple_of(d_head) {
        return Err(Error::Shape(format!("{} values do not tile d_head {d_head}", rows.len())));
    }
    let positions: Vec<usize> = (0..rows.len() / d_head).map(|t| offset + t).collect();
    Ok(rope_apply(rows, d_head, &positions, d_head, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut t = Tape::<f32>::new();
        let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn selector_row() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![5.0, 7.0]).unwrap();
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.value(out), &[5.0]);
        assert_eq!(t.shape(out), &[1, 1]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y), &[0.25; 4]);
        let x = t.constant(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y)[0], 1.0);
        assert!(t.value(y)[1] < 1e-30);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        for v in [2usize, 256, 50257] {
            let mut t = Tape::<f64>::new();
            let x = t.constant(vec![3, v], vec![0.0; 3 * v]).unwrap();
            let l = t.cross_entropy(x, &[0, 1, v - 1], None).unwrap();
            assert!((t.value(l)[0] - (v as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_confident_and_ignored() {
        let mut t = Tape::<f32>::new();
        let mut logits = vec![0.0f32; 2 * 5];
        logits[3] = 1e4;
        logits[5 + 1] = 1e4;
        let x = t.constant(vec![2, 5], logits).unwrap();
        let l = t.cross_entropy(x, &[3, 1], None).unwrap();
        assert!(t.value(l)[0].abs() < 1e-6);
        let l = t.cross_entropy(x, &[3, 4], Some(4)).unwrap();
        assert!(t.value(l)[0].abs() < 1e-6);
        assert!(matches!(t.cross_entropy(x, &[3, 5], None), Err(Error::Index(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(vec![1, 1], vec![f32::MAX]).unwrap();
        let err = t.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::Numeric { op: "scale", .. }));
        assert!(t.constant(vec![1], vec![f32::NAN]).is_err());
    }

    #[test]
    fn rope_planar_rotation() {
        let out = rope_rotate_head(&[0.0f64, 0.0, 1.0, 0.0], 2, 0).unwrap();
        assert!((out[0]).abs() < 1e-15 && (out[1]).abs() < 1e-15);
        assert!((out[2] - 1f64.cos()).abs() < 1e-15);
        assert!((out[3] - 1f64.sin()).abs() < 1e-15);
        let id = rope_rotate_head(&[0.3f64, -0.7, 1.1, 2.0], 4, 0).unwrap();
        assert_eq!(id, vec![0.3, -0.7, 1.1, 2.0]);
        assert!(matches!(rope_rotate_head(&[1.0f32; 3], 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn single_position_attention_copies_value() {
        let mut t = Tape::<f64>::new();
        let q = t.constant(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let k = t.constant(vec![1, 2], vec![1.5, 0.1]).unwrap();
        let v = t.constant(vec![1, 2], vec![4.0, -5.0]).unwrap();
        let spec = AttentionSpec {
            n_seq: 1,
            seq_len: 1,
            n_heads: 1,
            n_kv_heads: 1,
            d_head: 2,
            causal: true,
            key_lens: None,
        };
        let o = t.attention(q, k, v, &spec, None).unwrap();
        assert_eq!(t.value(o), &[4.0, -5.0]);
    }

    #[test]
    fn param_leaf_deduplicates_slots() {
        let store = [1.0f32, 2.0];
        let mut t = Tape::new();
        let a = t.param_leaf(7, &[2], &store, true).unwrap();
        let b = t.param_leaf(7, &[2], &store, true).unwrap();
        assert_eq!(a, b);
        let s = t.add(a, b).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        let slots: Vec<_> = g.slot_grads().collect();
        assert_eq!(slots, vec![(7, &[2.0f32, 2.0][..])]);
        assert!(g.visit_counts().iter().all(|&c| c <= 1));
    }
}
