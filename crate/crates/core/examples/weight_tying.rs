//! How each tying mode changes the parameter budget of the baseline, and how
//! LoRA deltas on a shared FFN add per-layer freedom for few parameters
//! (they are counted under the FFN component).
//!
//! ```text
//! cargo run --release --example weight_tying
//! ```

use stlm::audit::count_params;
use stlm::model::{Component, ModelConfig, Tying};

fn main() -> stlm::Result<()> {
    println!("{:<18} {:>6} {:>12} {:>12} {:>12} {:>12}", "tying", "lora", "total", "attention", "ffn", "head");
    for (tying, lora_rank) in [
        (Tying::None, 0),
        (Tying::EmbedHead, 0),
        (Tying::FfnShared, 0),
        (Tying::FfnShared, 8),
        (Tying::FfnShared, 32),
        (Tying::FfnAttnShared, 0),
    ] {
        let config = ModelConfig {
            tying,
            lora_rank,
            ..ModelConfig::default()
        };
        let r = count_params(&config, None)?;
        println!(
            "{:<18} {:>6} {:>12} {:>12} {:>12} {:>12}",
            format!("{tying:?}"),
            lora_rank,
            r.total,
            r.subtotal(Component::Attention),
            r.subtotal(Component::Ffn),
            r.subtotal(Component::Head)
        );
    }
    Ok(())
}
