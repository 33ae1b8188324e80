//! Seeded English-like prose for offline experiments: a fixed lexicon of
//! pronounceable words drawn with Zipfian frequencies, assembled into
//! capitalized sentences and paragraphs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "a", "to", "in", "is", "was", "that", "for", "it", "with", "as", "on", "by", "at", "from",
    "his", "her", "they", "this", "had", "not", "but", "which", "one", "were", "all", "their", "there",
];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "dr", "gr", "pl", "st",
    "tr", "sh", "th", "ch",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "oo", "ie"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck", "ng", "rd"];

/// Deterministic lexicon: function words first (most frequent), then content
/// words of one to three syllables.
fn lexicon(rng: &mut ChaCha8Rng, size: usize) -> Vec<String> {
    let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    while words.len() < size {
        let syllables = rng.random_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

/// Exactly `n_bytes` of ASCII prose determined by `seed`.
pub fn english_like(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = lexicon(&mut rng, 2000);
    let zipf = Zipf::new(words.len() as f64, 1.1).expect("valid Zipf parameters");
    let mut out = String::with_capacity(n_bytes + 64);
    let mut sentences_in_paragraph = 0;
    while out.len() < n_bytes {
        let len = rng.random_range(5..=18);
        for i in 0..len {
            let w = &words[zipf.sample(&mut rng) as usize - 1];
            if i == 0 {
                let mut c = w.chars();
                let first = c.next().map(|f| f.to_ascii_uppercase()).unwrap_or(' ');
                out.push(first);
                out.push_str(c.as_str());
            } else {
                out.push_str(w);
            }
            if i + 1 < len {
                out.push_str(if rng.random_bool(0.08) { ", " } else { " " });
            }
        }
        out.push(match rng.random_range(0..10) {
            0 => '?',
            1 => '!',
            _ => '.',
        });
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 4 && rng.random_bool(0.3) {
            out.push_str("\n\n");
            sentences_in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_length_ascii_and_seeded() {
        let a = english_like(3, 5000);
        assert_eq!(a.len(), 5000);
        assert!(a.is_ascii());
        assert_eq!(a, english_like(3, 5000));
        assert_ne!(a, english_like(4, 5000));
        assert!(a.starts_with(&english_like(3, 100)));
    }
}
