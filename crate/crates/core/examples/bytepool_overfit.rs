//! Memorize a 1 KB document with both embedders, then regenerate it greedily.
//!
//! ```text
//! cargo run --release --example bytepool_overfit [bpe_lookup|byte_pool]
//! ```

use std::time::Instant;

use stlm::bytepool::BytePoolConfig;
use stlm::data::{encode_segments, english_like, stream_byte_perplexity, TrainConfig, Trainer};
use stlm::generate::{generate, Sampling};
use stlm::model::{EmbedderKind, LanguageModel, ModelConfig};
use stlm::tokenizer::train_bpe;

fn run(embedder: EmbedderKind) -> stlm::Result<()> {
    let doc = english_like(7, 1024);
    let merges = train_bpe(&doc, 320)?;
    let copies = 4;
    let text = doc.repeat(copies);
    let bounds: Vec<usize> = (1..copies).map(|k| k * doc.len()).collect();
    let train = encode_segments(&merges, &text, &bounds);
    let single = encode_segments(&merges, &doc, &[]);

    let model_cfg = ModelConfig {
        n_layers: 2,
        hidden_dim: 64,
        n_heads: 4,
        group_size: 2,
        ffn_dim: 128,
        vocab_size: merges.vocab_size() + 1,
        max_context: 64,
        dropout: 0.0,
        embedder,
        ..ModelConfig::default()
    };
    let bytepool = (embedder == EmbedderKind::BytePool).then(|| BytePoolConfig {
        byte_dim: 32,
        pool_layers: 1,
        pool_heads: 4,
        ffn_dim: 64,
        max_token_bytes: merges.max_token_bytes(),
        decoder_layers: 1,
        ..BytePoolConfig::default()
    });
    let train_cfg = TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        total_iters: 2000,
        warmup_iters: 100,
        peak_lr: 3e-3,
        weight_decay: 0.0,
        seq_len: 64,
        ..TrainConfig::default()
    };
    let model = LanguageModel::new(model_cfg, bytepool, 1)?;
    let mut trainer = Trainer::new(model, merges.clone(), train_cfg)?;

    let start = Instant::now();
    let mut loss = f64::INFINITY;
    let mut exact = false;
    while trainer.iteration < trainer.config.total_iters {
        trainer.step(&train)?;
        if trainer.iteration % 100 == 0 {
            loss = stream_byte_perplexity(&trainer.model, &merges, &single, 64, None)?.ln();
            let mut agree = 0;
            if loss < 0.1 {
                let out = generate(&trainer.model, &merges, b"", doc.len(), Sampling::Greedy, 0)?;
                agree = out.iter().zip(&doc).take_while(|(a, b)| a == b).count();
                exact = out == doc;
            }
            println!(
                "{embedder:?} step {:5}  per-byte loss {loss:.4}  greedy prefix {agree}/{}  ({:.1}s)",
                trainer.iteration,
                doc.len(),
                start.elapsed().as_secs_f64()
            );
            if exact {
                break;
            }
        }
    }
    println!(
        "{embedder:?}: loss {loss:.4} after {} steps in {:.1}s; greedy reproduction exact: {exact}",
        trainer.iteration,
        start.elapsed().as_secs_f64(),
    );
    Ok(())
}

fn main() -> stlm::Result<()> {
    let which = std::env::args().nth(1);
    for embedder in [EmbedderKind::BpeLookup, EmbedderKind::BytePool] {
        let name = match embedder {
            EmbedderKind::BpeLookup => "bpe_lookup",
            EmbedderKind::BytePool => "byte_pool",
        };
        if which.as_deref().is_none_or(|w| w == name) {
            run(embedder)?;
        }
    }
    Ok(())
}
