//! Text continuation from a trained model, for either embedder.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bytepool::{generate_token_bytes, ChunkedBatch};
use crate::error::{config_err, Error, Result};
use crate::model::{Batch, EmbedderKind, LanguageModel};
use crate::numerics::Real;
use crate::tokenizer::MergeTable;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Highest score; ties go to the lowest index.
    Greedy,
    /// Sample from `softmax(scores / t)`.
    Temperature(f64),
}

impl Sampling {
    /// `0` selects greedy decoding.
    pub fn from_temperature(t: f64) -> Result<Self> {
        if t == 0.0 {
            Ok(Sampling::Greedy)
        } else if t > 0.0 && t.is_finite() {
            Ok(Sampling::Temperature(t))
        } else {
            Err(config_err(format!("temperature {t} must be a finite value >= 0")))
        }
    }
}

/// Picks an index from unnormalized log-scores. `-inf` entries are never chosen.
pub fn sample(scores: &[f64], sampling: Sampling, rng: &mut dyn RngCore) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Shape("sampling from no scores".into()));
    }
    let argmax = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best });
    match sampling {
        Sampling::Greedy => Ok(argmax),
        Sampling::Temperature(t) => {
            if t.is_nan() || t <= 0.0 {
                return Err(config_err(format!("temperature {t} must be positive")));
            }
            let max = scores[argmax];
            let weights: Vec<f64> = scores.iter().map(|&s| ((s - max) / t).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 && u < w {
                    return Ok(i);
                }
                u -= w;
            }
            Ok(argmax)
        }
    }
}

/// Continues `prompt` by up to `max_new_bytes` bytes and returns only the new
/// bytes. The context always starts with the document separator, so an empty
/// prompt is valid. Generation stops early when the model emits the separator
/// (or, for byte_pool models, an empty token).
pub fn generate<T: Real>(
    model: &LanguageModel<T>,
    merges: &MergeTable,
    prompt: &[u8],
    max_new_bytes: usize,
    sampling: Sampling,
    seed: u64,
) -> Result<Vec<u8>> {
    let separator = merges.vocab_size() as u32;
    if model.config().vocab_size != merges.vocab_size() + 1 {
        return Err(config_err(format!(
            "model vocab_size {} does not match merge table ({} tokens + separator)",
            model.config().vocab_size,
            merges.vocab_size()
        )));
    }
    let max_context = model.config().max_context;
    let mut ids = vec![separator];
    ids.extend(merges.encode(prompt));
    if ids.len() > max_context {
        return Err(Error::Length(format!(
            "prompt is {} tokens (with separator), context holds {max_context}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < max_new_bytes {
        let window = &ids[ids.len().saturating_sub(max_context)..];
        let new_bytes = match model.config().embedder {
            EmbedderKind::BpeLookup => {
                let logits = model.token_logits(window)?;
                let last = logits.last().expect("window is non-empty");
                let id = sample(last, sampling, &mut rng)? as u32;
                if id == separator {
                    break;
                }
                ids.push(id);
                merges.decode(&[id])?
            }
            EmbedderKind::BytePool => {
                let bp = model.bytepool_config().expect("byte_pool model has a bytepool config");
                let batch = ChunkedBatch::inputs_only(window, merges, bp.max_token_bytes)?;
                let hidden = model.final_hidden(&Batch::Chunks(batch))?;
                let h = hidden.last().expect("window is non-empty");
                let bytes = generate_token_bytes(model, h, sampling, &mut rng)?;
                if bytes.is_empty() {
                    break;
                }
                ids.extend(merges.encode(&bytes));
                bytes
            }
        };
        out.extend_from_slice(&new_bytes);
    }
    out.truncate(max_new_bytes);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_prefers_lowest_index_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[1.0, 3.0, 3.0], Sampling::Greedy, &mut rng).unwrap(), 1);
    }

    #[test]
    fn temperature_sampling_is_seeded_and_skips_masked() {
        let scores = [0.0, f64::NEG_INFINITY, 0.5, 0.2];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample(&scores, Sampling::Temperature(1.0), &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert!(draw(7).iter().all(|&i| i != 1));
    }

    #[test]
    fn temperature_zero_means_greedy() {
        assert_eq!(Sampling::from_temperature(0.0).unwrap(), Sampling::Greedy);
        assert!(Sampling::from_temperature(-1.0).is_err());
    }
}
