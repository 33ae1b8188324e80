//! Train a 2-layer byte-vocabulary model on generated prose and watch the
//! validation byte-perplexity fall from about 256.
//!
//! ```text
//! cargo run --release --example train_byte_model [steps]
//! ```

use std::time::Instant;

use stlm::data::{build_corpus, english_like, TrainConfig, Trainer};
use stlm::model::{LanguageModel, ModelConfig};
use stlm::tokenizer::MergeTable;

fn main() -> stlm::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let merges = MergeTable::byte_level();
    let docs: Vec<Vec<u8>> = (0..16).map(|seed| english_like(seed, 64 * 1024)).collect();
    let corpus = build_corpus(&docs, &merges, 0.05)?;
    println!("train {} tokens, validation {} tokens", corpus.train.len(), corpus.val.len());

    let model = ModelConfig {
        n_layers: 2,
        hidden_dim: 64,
        n_heads: 4,
        group_size: 2,
        ffn_dim: 256,
        vocab_size: merges.vocab_size() + 1,
        max_context: 128,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 8,
        grad_accum_steps: 1,
        total_iters: steps,
        warmup_iters: steps / 10,
        peak_lr: 3e-3,
        seq_len: 128,
        eval_batches: 8,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(LanguageModel::new(model, None, 42)?, merges, train)?;
    println!("step     0  val byte-ppl {:.2}", trainer.evaluate(&corpus.val)?);
    let start = Instant::now();
    while trainer.iteration < steps {
        let m = trainer.step(&corpus.train)?;
        if m.iter % 50 == 0 || m.iter == steps {
            println!(
                "step {:5}  loss {:.4}  lr {:.2e}  val byte-ppl {:.2}  ({:.1}s)",
                m.iter,
                m.loss,
                m.lr,
                trainer.evaluate(&corpus.val)?,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
