//! Parameter accounting for the 8-layer baseline and its byte-pooling variant,
//! computed in closed form without allocating any weights.
//!
//! ```text
//! cargo run --release --example audit_baseline
//! ```

use stlm::audit::{count_params, render_report, ReportFormat};
use stlm::bytepool::BytePoolConfig;
use stlm::model::{Component, EmbedderKind, ModelConfig};

fn main() -> stlm::Result<()> {
    let baseline = ModelConfig::default();
    let report = count_params(&baseline, None)?;
    println!("{}", render_report(&report, ReportFormat::Text));
    println!(
        "token embedding {} of {} parameters ({:.2}%)\n",
        report.subtotal(Component::Embedding),
        report.total,
        100.0 * report.embedding_share
    );

    let pooled = ModelConfig {
        embedder: EmbedderKind::BytePool,
        ..baseline.clone()
    };
    let report = count_params(&pooled, Some(&BytePoolConfig::default()))?;
    let vocab_hidden = baseline.vocab_size * baseline.hidden_dim;
    println!(
        "byte-pool embedder {} + decoder {} = {:.2}% of vocab x hidden ({vocab_hidden})",
        report.subtotal(Component::BytepoolEmbedder),
        report.subtotal(Component::BytepoolDecoder),
        100.0 * report.bytepool_ratio.unwrap_or(0.0)
    );
    println!(
        "reduction vs tied embedding: {:.2}%, vs untied embedding + head: {:.2}%",
        100.0 * report.reduction_vs_tied.unwrap_or(0.0),
        100.0 * report.reduction_vs_untied.unwrap_or(0.0)
    );
    println!("total with byte pooling: {}", report.total);
    Ok(())
}
