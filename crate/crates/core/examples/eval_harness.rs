//! The evaluation harness on reference scorers: a uniform byte model, an
//! oracle that knows every correct answer, and an untrained transformer.
//!
//! ```text
//! cargo run --release --example eval_harness
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stlm::eval::{byte_perplexity, score_mc, MCItem, ModelScorer, OracleModel, UniformByteModel};
use stlm::model::{LanguageModel, ModelConfig};
use stlm::tokenizer::MergeTable;

/// Four same-length options per item, the gold one placed at random.
fn synthetic_items(n: usize, seed: u64) -> Vec<MCItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let gold = rng.random_range(0..4);
            let options = (0..4).map(|k| format!(" answer {:03}-{k}", rng.random_range(0..1000))).collect();
            MCItem {
                context: format!("Question {i}:"),
                options,
                gold,
            }
        })
        .collect()
}

fn main() -> stlm::Result<()> {
    let items = synthetic_items(1000, 11);
    let text = "Byte-normalized perplexity compares models across tokenizers.".as_bytes();

    let uniform = UniformByteModel::default();
    println!("uniform byte model: perplexity {}", byte_perplexity(&uniform, text)?);
    let r = score_mc(&uniform, &items)?;
    println!("uniform byte model: accuracy {:.3} (chance 0.25)", r.accuracy);

    let oracle = OracleModel::new(
        items
            .iter()
            .map(|it| [it.context.as_bytes(), it.options[it.gold].as_bytes()].concat())
            .chain([text.to_vec()]),
    );
    println!("oracle: perplexity {}", byte_perplexity(&oracle, text)?);
    println!("oracle: accuracy {:.3}", score_mc(&oracle, &items)?.accuracy);

    let merges = MergeTable::byte_level();
    let config = ModelConfig {
        n_layers: 2,
        hidden_dim: 32,
        n_heads: 4,
        group_size: 2,
        ffn_dim: 64,
        vocab_size: merges.vocab_size() + 1,
        max_context: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = LanguageModel::new(config, None, 5)?;
    let scorer = ModelScorer::new(&model, &merges)?;
    println!("untrained transformer: perplexity {:.1}", byte_perplexity(&scorer, text)?);
    let r = score_mc(&scorer, &items[..100])?;
    println!(
        "untrained transformer: accuracy {:.3}, length-normalized {:.3}",
        r.accuracy, r.accuracy_normalized
    );
    Ok(())
}
