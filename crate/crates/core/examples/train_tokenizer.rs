//! Train a byte-level BPE merge table, inspect token spans and round-trip it
//! through its text serialization.
//!
//! ```text
//! cargo run --release --example train_tokenizer
//! ```

use stlm::data::english_like;
use stlm::tokenizer::{train_bpe, MergeTable};

fn main() -> stlm::Result<()> {
    let corpus = english_like(1, 200_000);
    let merges = train_bpe(&corpus, 1024)?;
    println!(
        "{} merges, vocabulary {}, longest token {} bytes",
        merges.merges().len(),
        merges.vocab_size(),
        merges.max_token_bytes()
    );

    let text = "The tokenizer reports where every token came from: naïve ✓".as_bytes();
    let spans = merges.encode_with_spans(text);
    for s in spans.iter().take(12) {
        println!(
            "token {:5}  bytes {:3}..{:<3} {:?}",
            s.token_id,
            s.start,
            s.end,
            String::from_utf8_lossy(&text[s.start..s.end])
        );
    }
    println!("{} bytes -> {} tokens", text.len(), spans.len());

    let ids = merges.encode(text);
    assert_eq!(merges.decode(&ids)?, text);
    let reloaded = MergeTable::from_text(&merges.to_text())?;
    assert_eq!(reloaded, merges);
    println!("decode and serialization round-trips are exact");
    Ok(())
}
