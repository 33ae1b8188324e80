//! Interrupt training halfway, save a checkpoint, reload it and show that the
//! resumed run continues with exactly the losses of the uninterrupted one.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use stlm::data::{encode_segments, english_like, Checkpoint, TrainConfig, Trainer};
use stlm::model::{LanguageModel, ModelConfig};
use stlm::tokenizer::MergeTable;

fn trainer() -> stlm::Result<Trainer> {
    let merges = MergeTable::byte_level();
    let model = ModelConfig {
        n_layers: 1,
        hidden_dim: 32,
        n_heads: 4,
        group_size: 2,
        ffn_dim: 64,
        vocab_size: merges.vocab_size() + 1,
        max_context: 32,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        batch_size: 4,
        grad_accum_steps: 2,
        total_iters: 40,
        warmup_iters: 5,
        seq_len: 32,
        ..TrainConfig::default()
    };
    Trainer::new(LanguageModel::new(model, None, 9)?, merges, train)
}

fn main() -> stlm::Result<()> {
    let stream = encode_segments(&MergeTable::byte_level(), &english_like(2, 50_000), &[]);

    let mut straight = trainer()?;
    let reference: Vec<f64> = (0..40).map(|_| straight.step(&stream).map(|m| m.loss)).collect::<stlm::Result<_>>()?;

    let mut first = trainer()?;
    for _ in 0..20 {
        first.step(&stream)?;
    }
    let path = std::env::temp_dir().join("stlm-resume-demo.stlm");
    Checkpoint::from_trainer(&first).save(&path)?;
    let mut resumed = Checkpoint::load(&path)?.into_trainer()?;
    let tail: Vec<f64> = (0..20).map(|_| resumed.step(&stream).map(|m| m.loss)).collect::<stlm::Result<_>>()?;
    std::fs::remove_file(&path)?;

    for (i, (a, b)) in reference[20..].iter().zip(&tail).enumerate() {
        println!("step {:2}  uninterrupted {a:.6}  resumed {b:.6}", i + 21);
    }
    let identical = reference[20..].iter().zip(&tail).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("bitwise identical: {identical}");
    Ok(())
}
