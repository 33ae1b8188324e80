//! Batching, the optimizer step with gradient accumulation, and validation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::TokenStream;
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::lr_at;
use crate::bytepool::ChunkedBatch;
use crate::error::{config_err, data_err, file_err, Error, Result};
use crate::model::{Batch, EmbedderKind, ForwardCtx, LanguageModel, ModelConfig, TokenBatch};
use crate::numerics::Tape;
use crate::tokenizer::MergeTable;

/// Optimization and data settings. Defaults follow the 8-layer baseline recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub peak_lr: f64,
    pub min_lr_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub checkpoint_every: usize,
    /// Tokens per training window; at most the model's context.
    pub seq_len: usize,
    /// Validation cadence in optimizer steps (0 disables).
    pub eval_every: usize,
    /// Validation batches per evaluation (0 means the whole split).
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 24,
            grad_accum_steps: 20,
            total_iters: 25000,
            warmup_iters: 5000,
            peak_lr: 6e-4,
            min_lr_ratio: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 1337,
            val_fraction: 0.05,
            checkpoint_every: 1000,
            seq_len: 512,
            eval_every: 500,
            eval_batches: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.warmup_iters >= self.total_iters {
            return Err(config_err(format!(
                "train.warmup_iters {} must be below train.total_iters {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(config_err(format!("train.val_fraction {} outside (0, 0.5)", self.val_fraction)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(config_err(format!("train.{name} must be positive")));
            }
        }
        if self.seq_len > model.max_context {
            return Err(config_err(format!(
                "train.seq_len {} exceeds model.max_context {}",
                self.seq_len, model.max_context
            )));
        }
        if self.peak_lr.is_nan() || self.peak_lr <= 0.0 || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(config_err("train.peak_lr must be positive and min_lr_ratio in [0, 1]"));
        }
        Ok(())
    }

    /// Tokens consumed by one optimizer step.
    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.grad_accum_steps * self.seq_len
    }
}

/// Deterministic data order: each epoch walks contiguous windows of
/// `seq_len + 1` tokens with stride `seq_len`, starting at a seeded random
/// offset. Window `g` is a pure function of `(seed, g)`.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    seq_len: usize,
    seed: u64,
    max_offset: usize,
    per_epoch: usize,
}

impl WindowSampler {
    pub fn new(stream_len: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if stream_len < seq_len + 1 {
            return Err(data_err(format!(
                "stream of {stream_len} tokens is shorter than one window of {}",
                seq_len + 1
            )));
        }
        let max_offset = seq_len.min(stream_len - seq_len);
        let per_epoch = (stream_len - max_offset) / seq_len;
        Ok(Self {
            seq_len,
            seed,
            max_offset,
            per_epoch,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.per_epoch
    }

    pub fn window_start(&self, g: u64) -> usize {
        let epoch = g / self.per_epoch as u64;
        let j = (g % self.per_epoch as u64) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let offset = rng.random_range(0..self.max_offset);
        offset + j * self.seq_len
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Turns token windows into the batch kind the model's embedder consumes.
pub fn make_batch(model: &LanguageModel<impl crate::numerics::Real>, merges: &MergeTable, windows: &[&[u32]]) -> Result<Batch> {
    match model.config().embedder {
        EmbedderKind::BpeLookup => Ok(Batch::Tokens(TokenBatch::from_windows(windows)?)),
        EmbedderKind::BytePool => {
            let m = model
                .bytepool_config()
                .ok_or_else(|| config_err("byte_pool model without bytepool config"))?
                .max_token_bytes;
            Ok(Batch::Chunks(ChunkedBatch::from_token_windows(windows, merges, m)?))
        }
    }
}

/// Byte-normalized perplexity over non-overlapping windows of `stream`:
/// `exp(−Σ ln p(target) / bytes covered by the targets)`.
pub fn stream_byte_perplexity(
    model: &LanguageModel<f32>,
    merges: &MergeTable,
    stream: &TokenStream,
    seq_len: usize,
    max_windows: Option<usize>,
) -> Result<f64> {
    let seq_len = seq_len.min(stream.len().saturating_sub(1));
    if seq_len == 0 {
        return Err(data_err("validation stream needs at least two tokens"));
    }
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * seq_len)
        .take_while(|&s| s + seq_len < stream.len())
        .collect();
    if let Some(n) = max_windows {
        starts.truncate(n.max(1));
    }
    let parts: Vec<(f64, usize)> = starts
        .par_chunks(8)
        .map(|chunk| -> Result<(f64, usize)> {
            let windows: Vec<&[u32]> = chunk.iter().map(|&s| &stream.ids[s..s + seq_len + 1]).collect();
            let batch = make_batch(model, merges, &windows)?;
            let lp: f64 = model.target_log_probs(&batch)?.iter().sum();
            let bytes: usize = chunk
                .iter()
                .flat_map(|&s| stream.spans[s + 1..s + seq_len + 1].iter().map(|sp| sp.len()))
                .sum();
            Ok((lp, bytes))
        })
        .collect::<Result<_>>()?;
    let (lp, bytes) = parts.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if bytes == 0 {
        return Err(data_err("validation targets cover no bytes"));
    }
    Ok((-lp / bytes as f64).exp())
}

/// One optimizer step's record in the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_byte_ppl: Option<f64>,
}

/// JSON-lines metrics sink.
pub struct MetricsLogger {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsLogger {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(Self {
            out: std::io::BufWriter::new(std::fs::File::create(path).map_err(file_err(path))?),
        })
    }

    /// Appends to an existing log (used when resuming).
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(file_err(path))?;
        Ok(Self {
            out: std::io::BufWriter::new(file),
        })
    }

    pub fn log(&mut self, m: &StepMetrics) -> Result<()> {
        serde_json::to_writer(&mut self.out, m)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Single-writer training state: model, optimizer moments and step count.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: LanguageModel<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    pub merges: MergeTable,
    /// Optimizer steps completed.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(model: LanguageModel<f32>, merges: MergeTable, config: TrainConfig) -> Result<Self> {
        config.validate(model.config())?;
        if model.config().vocab_size != merges.vocab_size() + 1 {
            return Err(config_err(format!(
                "model.vocab_size {} must equal merge vocabulary {} plus the separator",
                model.config().vocab_size,
                merges.vocab_size()
            )));
        }
        if let Some(bp) = model.bytepool_config() {
            if merges.max_token_bytes() > bp.max_token_bytes {
                return Err(config_err(format!(
                    "merge table has {}-byte tokens, bytepool.max_token_bytes is {}",
                    merges.max_token_bytes(),
                    bp.max_token_bytes
                )));
            }
        }
        let optimizer = AdamW::new(
            model.params(),
            config.beta1,
            config.beta2,
            config.adam_eps,
            config.weight_decay,
        );
        Ok(Self {
            model,
            optimizer,
            config,
            merges,
            iteration: 0,
        })
    }

    /// Runs one optimizer step (all micro-batches) on windows drawn from `data`.
    pub fn step(&mut self, data: &TokenStream) -> Result<StepMetrics> {
        let started = Instant::now();
        let cfg = &self.config;
        let iter = self.iteration + 1;
        let sampler = WindowSampler::new(data.len(), cfg.seq_len, cfg.seed)?;
        let lr = lr_at(cfg, iter);
        let (b, accum, t) = (cfg.batch_size, cfg.grad_accum_steps, cfg.seq_len);
        self.model.params_mut().zero_grads();
        let mut loss_sum = 0.0;
        for micro in 0..accum {
            let base = (((iter - 1) * accum + micro) * b) as u64;
            let windows: Vec<&[u32]> = (0..b as u64)
                .map(|k| {
                    let s = sampler.window_start(base + k);
                    &data.ids[s..s + t + 1]
                })
                .collect();
            let batch = make_batch(&self.model, &self.merges, &windows)?;
            let grads = {
                let mut tape = Tape::new();
                let mut ctx = ForwardCtx::train(mix(cfg.seed, iter as u64, micro as u64));
                let loss = self.model.loss(&mut tape, &batch, &mut ctx)?;
                let value = tape.value(loss)[0] as f64;
                if !value.is_finite() {
                    return Err(Error::Numeric {
                        op: "train_step",
                        detail: format!("loss {value} at iteration {iter}, micro-batch {micro}"),
                    });
                }
                loss_sum += value;
                tape.backward(loss)?
            };
            self.model.params_mut().accumulate_grads(&grads, 1.0 / accum as f32)?;
        }
        let grad_norm = clip_grad_norm(self.model.params_mut(), self.config.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric {
                op: "train_step",
                detail: format!("gradient norm {grad_norm} at iteration {iter}"),
            });
        }
        self.optimizer.update(self.model.params_mut(), lr)?;
        self.iteration = iter;
        Ok(StepMetrics {
            iter,
            loss: loss_sum / accum as f64,
            lr,
            grad_norm,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            val_byte_ppl: None,
        })
    }

    /// Validation byte-perplexity using the configured window budget.
    pub fn evaluate(&self, val: &TokenStream) -> Result<f64> {
        let windows = match self.config.eval_batches {
            0 => None,
            n => Some(n * self.config.batch_size),
        };
        stream_byte_perplexity(&self.model, &self.merges, val, self.config.seq_len, windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PosScheme, Tying};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            hidden_dim: 16,
            n_heads: 2,
            group_size: 1,
            ffn_dim: 32,
            vocab_size: 257,
            max_context: 16,
            dropout: 0.0,
            tying: Tying::EmbedHead,
            pos_scheme: PosScheme::Rope,
            ..ModelConfig::default()
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            grad_accum_steps: 1,
            total_iters: 20,
            warmup_iters: 2,
            peak_lr: 1e-2,
            seq_len: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sampler_is_pure_and_in_range() {
        let s = WindowSampler::new(100, 8, 3).unwrap();
        for g in 0..500 {
            let a = s.window_start(g);
            assert_eq!(a, s.window_start(g));
            assert!(a + 9 <= 100);
        }
        assert!(WindowSampler::new(8, 8, 0).is_err());
        assert_eq!(WindowSampler::new(9, 8, 0).unwrap().window_start(5), 0);
    }

    #[test]
    fn baseline_tokens_per_step() {
        assert_eq!(TrainConfig::default().tokens_per_step(), 245_760);
    }

    #[test]
    fn invalid_train_configs() {
        let m = ModelConfig::default();
        let bad = TrainConfig {
            warmup_iters: 30000,
            ..TrainConfig::default()
        };
        assert!(bad.validate(&m).is_err());
        let bad = TrainConfig {
            seq_len: 1024,
            ..TrainConfig::default()
        };
        assert!(bad.validate(&m).is_err());
    }

    #[test]
    fn accumulation_matches_one_large_batch() {
        let text: Vec<u8> = (0..400u32).map(|i| b'a' + ((i * 7 + i / 3) % 26) as u8).collect();
        let merges = MergeTable::byte_level();
        let stream = crate::data::encode_segments(&merges, &text, &[]);
        let model = LanguageModel::<f32>::new(tiny_model(), None, 1).unwrap();
        let run = |b, k| {
            let cfg = TrainConfig {
                batch_size: b,
                grad_accum_steps: k,
                ..tiny_train()
            };
            let mut t = Trainer::new(model.clone(), merges.clone(), cfg).unwrap();
            t.step(&stream).unwrap()
        };
        let big = run(4, 1);
        let small = run(1, 4);
        assert!((big.loss - small.loss).abs() / big.loss < 1e-5);
        assert!((big.grad_norm - small.grad_norm).abs() / big.grad_norm < 1e-4);
    }

    #[test]
    fn seeded_runs_repeat_and_loss_falls() {
        let text = b"the quick brown fox jumps over the lazy dog. ".repeat(20);
        let merges = MergeTable::byte_level();
        let stream = crate::data::encode_segments(&merges, &text, &[]);
        let run = || {
            let model = LanguageModel::<f32>::new(tiny_model(), None, 5).unwrap();
            let mut t = Trainer::new(model, merges.clone(), tiny_train()).unwrap();
            (0..20).map(|_| t.step(&stream).unwrap().loss).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a[19] < a[0] - 1.0, "{a:?}");
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let model = LanguageModel::<f32>::new(ModelConfig { vocab_size: 300, ..tiny_model() }, None, 0).unwrap();
        assert!(Trainer::new(model, MergeTable::byte_level(), tiny_train()).is_err());
    }
}
