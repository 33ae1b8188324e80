//! Train a small model for a few hundred steps and sample continuations
//! greedily and at two temperatures.
//!
//! ```text
//! cargo run --release --example generate
//! ```

use stlm::data::{encode_segments, english_like, TrainConfig, Trainer};
use stlm::generate::{generate, Sampling};
use stlm::model::{LanguageModel, ModelConfig};
use stlm::tokenizer::train_bpe;

fn main() -> stlm::Result<()> {
    let text = english_like(5, 100_000);
    let merges = train_bpe(&text, 512)?;
    let stream = encode_segments(&merges, &text, &[]);
    let model = ModelConfig {
        n_layers: 2,
        hidden_dim: 64,
        n_heads: 4,
        group_size: 2,
        ffn_dim: 128,
        vocab_size: merges.vocab_size() + 1,
        max_context: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        total_iters: 300,
        warmup_iters: 30,
        peak_lr: 3e-3,
        seq_len: 64,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(LanguageModel::new(model, None, 1)?, merges.clone(), train)?;
    while trainer.iteration < 300 {
        trainer.step(&stream)?;
    }

    let prompt = b"The ";
    for (label, sampling, seed) in [
        ("greedy", Sampling::Greedy, 0),
        ("t=0.7", Sampling::Temperature(0.7), 1),
        ("t=1.2", Sampling::Temperature(1.2), 1),
    ] {
        let out = generate(&trainer.model, &merges, prompt, 160, sampling, seed)?;
        println!("{label:>7}: The {}", String::from_utf8_lossy(&out).replace('\n', " "));
    }
    Ok(())
}
