//! Byte-normalized perplexity and multiple-choice scoring by path probability.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::make_batch;
use crate::error::{data_err, file_err, Error, Result};
use crate::model::LanguageModel;
use crate::tokenizer::MergeTable;

/// Anything that assigns probabilities to byte strings.
pub trait Scorer: Sync {
    /// `log₂ P(continuation | context)`, summed over every predicted unit of
    /// the continuation. The context is implicitly preceded by a
    /// beginning-of-sequence unit, so an empty context is valid.
    fn log2_prob(&self, context: &[u8], continuation: &[u8]) -> Result<f64>;
}

/// `2^(−log₂ P(text) / N)` with `N` the UTF-8 byte length of `text`.
pub fn byte_perplexity(scorer: &dyn Scorer, text: &[u8]) -> Result<f64> {
    if text.is_empty() {
        return Err(data_err("byte perplexity of empty text"));
    }
    let lp = scorer.log2_prob(&[], text)?;
    Ok((-lp / text.len() as f64).exp2())
}

/// Every byte equally likely, whatever the tokenization: a token spanning
/// `k` bytes gets probability `256^−k`.
#[derive(Debug, Clone, Default)]
pub struct UniformByteModel {
    merges: MergeTable,
}

impl UniformByteModel {
    pub fn new(merges: MergeTable) -> Self {
        Self { merges }
    }
}

impl Scorer for UniformByteModel {
    fn log2_prob(&self, _context: &[u8], continuation: &[u8]) -> Result<f64> {
        Ok(self
            .merges
            .encode_with_spans(continuation)
            .iter()
            .map(|s| -8.0 * s.len() as f64)
            .sum())
    }
}

/// Puts all probability on continuations that extend the context along one
/// of the known strings.
#[derive(Debug, Clone, Default)]
pub struct OracleModel {
    truths: HashSet<Vec<u8>>,
}

impl OracleModel {
    /// Log-probability charged per byte off every known string.
    pub const MISS_LOG2: f64 = -64.0;

    pub fn new<I: IntoIterator<Item = Vec<u8>>>(truths: I) -> Self {
        Self {
            truths: truths.into_iter().collect(),
        }
    }
}

impl Scorer for OracleModel {
    fn log2_prob(&self, context: &[u8], continuation: &[u8]) -> Result<f64> {
        let mut full = context.to_vec();
        full.extend_from_slice(continuation);
        let hit = self.truths.iter().any(|t| t.starts_with(&full));
        Ok(if hit { 0.0 } else { Self::MISS_LOG2 * continuation.len() as f64 })
    }
}

/// Scores with a trained model. Context and continuation are tokenized
/// separately, so the continuation always starts on a token boundary.
pub struct ModelScorer<'m> {
    model: &'m LanguageModel<f32>,
    merges: &'m MergeTable,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m LanguageModel<f32>, merges: &'m MergeTable) -> Result<Self> {
        if model.config().vocab_size != merges.vocab_size() + 1 {
            return Err(crate::error::config_err(format!(
                "model vocab_size {} does not match merge table ({} tokens + separator)",
                model.config().vocab_size,
                merges.vocab_size()
            )));
        }
        Ok(Self { model, merges })
    }

    /// Natural-log probability of each window's targets.
    fn window_log_probs(&self, window: &[u32]) -> Result<Vec<f64>> {
        let batch = make_batch(self.model, self.merges, &[window])?;
        self.model.target_log_probs(&batch)
    }

    /// `ln P(ids[i] | ids[..i])` for every `i >= from`. Long sequences keep as
    /// much left context as fits; predictions longer than the context window
    /// are scored in consecutive windows.
    fn suffix_log_probs(&self, ids: &[u32], from: usize) -> Result<Vec<f64>> {
        let t = self.model.config().max_context;
        let predicted = ids.len() - from;
        if ids.len() <= t + 1 {
            let lp = self.window_log_probs(ids)?;
            return Ok(lp[from - 1..].to_vec());
        }
        if predicted <= t {
            let window = &ids[ids.len() - (t + 1)..];
            let lp = self.window_log_probs(window)?;
            return Ok(lp[t - predicted..].to_vec());
        }
        let mut out = Vec::with_capacity(predicted);
        let mut start = 0;
        while start + 1 < ids.len() {
            let end = (start + t + 1).min(ids.len());
            let lp = self.window_log_probs(&ids[start..end])?;
            for (k, v) in lp.into_iter().enumerate() {
                if start + 1 + k >= from {
                    out.push(v);
                }
            }
            start += t;
        }
        Ok(out)
    }
}

impl Scorer for ModelScorer<'_> {
    fn log2_prob(&self, context: &[u8], continuation: &[u8]) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let mut ids = vec![self.merges.vocab_size() as u32];
        ids.extend(self.merges.encode(context));
        let from = ids.len();
        ids.extend(self.merges.encode(continuation));
        let lp = self.suffix_log_probs(&ids, from)?;
        Ok(lp.iter().sum::<f64>() / std::f64::consts::LN_2)
    }
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCItem {
    pub context: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl MCItem {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(data_err(format!("item needs at least 2 options, has {}", self.options.len())));
        }
        if self.gold >= self.options.len() {
            return Err(data_err(format!(
                "gold index {} out of range for {} options",
                self.gold,
                self.options.len()
            )));
        }
        Ok(())
    }
}

/// Reads JSON-lines items `{context, options, gold}`; blank lines are skipped.
pub fn load_mc_items(path: impl AsRef<Path>) -> Result<Vec<MCItem>> {
    let path = path.as_ref();
    let file = std::io::BufReader::new(std::fs::File::open(path).map_err(file_err(path))?);
    let mut items = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: MCItem =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("items line {}: {e}", i + 1)))?;
        item.validate().map_err(|e| Error::Data(format!("items line {}: {e}", i + 1)))?;
        items.push(item);
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCResult {
    /// Headline: option with the largest total log-probability.
    pub accuracy: f64,
    /// Secondary: total log-probability divided by option byte length.
    pub accuracy_normalized: f64,
    pub chosen: Vec<usize>,
    pub chosen_normalized: Vec<usize>,
    pub n_items: usize,
}

/// First index of the maximum; ties resolve to the lowest index.
fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s > scores[best] { i } else { best })
}

pub fn score_mc(scorer: &dyn Scorer, items: &[MCItem]) -> Result<MCResult> {
    let picks: Vec<(usize, usize)> = items
        .par_iter()
        .map(|item| -> Result<(usize, usize)> {
            item.validate()?;
            let ctx = item.context.as_bytes();
            let raw = item
                .options
                .iter()
                .map(|o| scorer.log2_prob(ctx, o.as_bytes()))
                .collect::<Result<Vec<f64>>>()?;
            let norm: Vec<f64> = raw
                .iter()
                .zip(&item.options)
                .map(|(s, o)| s / o.len().max(1) as f64)
                .collect();
            Ok((argmax(&raw), argmax(&norm)))
        })
        .collect::<Result<_>>()?;
    let n = items.len();
    let frac = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let hits = picks.iter().zip(items).filter(|((c, _), it)| *c == it.gold).count();
    let hits_norm = picks.iter().zip(items).filter(|((_, c), it)| *c == it.gold).count();
    Ok(MCResult {
        accuracy: frac(hits),
        accuracy_normalized: frac(hits_norm),
        chosen: picks.iter().map(|p| p.0).collect(),
        chosen_normalized: picks.iter().map(|p| p.1).collect(),
        n_items: n,
    })
}

/// Combined evaluation output written by the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub byte_perplexity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_bytes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_normalized: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_items: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PosScheme, Tying};

    #[test]
    fn uniform_byte_model_has_perplexity_256() {
        let text = "Plain text, with UTF-8: é and ✓.".as_bytes();
        assert_eq!(byte_perplexity(&UniformByteModel::default(), text).unwrap(), 256.0);
        let merges = crate::tokenizer::train_bpe(&text.repeat(5), 300).unwrap();
        assert_eq!(byte_perplexity(&UniformByteModel::new(merges), text).unwrap(), 256.0);
        assert!(byte_perplexity(&UniformByteModel::default(), b"").is_err());
    }

    #[test]
    fn oracle_has_perplexity_one() {
        let oracle = OracleModel::new([b"the end".to_vec()]);
        assert_eq!(byte_perplexity(&oracle, b"the end").unwrap(), 1.0);
    }

    fn item(gold: usize) -> MCItem {
        MCItem {
            context: "Q: 2+2? A:".into(),
            options: vec![" 3".into(), " 4".into(), " 5".into(), " 22".into()],
            gold,
        }
    }

    #[test]
    fn rigged_oracle_is_always_right() {
        let items: Vec<MCItem> = (0..8)
            .map(|i| MCItem {
                context: format!("item {i}:"),
                gold: i % 4,
                ..item(0)
            })
            .collect();
        let truths = items
            .iter()
            .map(|it| format!("{}{}", it.context, it.options[it.gold]).into_bytes());
        let r = score_mc(&OracleModel::new(truths), &items).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.accuracy_normalized, 1.0);
    }

    #[test]
    fn identical_options_pick_first() {
        let it = MCItem {
            context: "x".into(),
            options: vec!["same".into(), "same".into()],
            gold: 1,
        };
        let r = score_mc(&UniformByteModel::default(), &[it]).unwrap();
        assert_eq!(r.chosen, vec![0]);
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn invalid_items_are_rejected() {
        assert!(MCItem { gold: 4, ..item(0) }.validate().is_err());
        let one = MCItem {
            options: vec!["a".into()],
            ..item(0)
        };
        assert!(score_mc(&UniformByteModel::default(), &[one]).is_err());
    }

    #[test]
    fn model_scorer_matches_direct_evaluation_across_windows() {
        let c = ModelConfig {
            n_layers: 1,
            hidden_dim: 16,
            n_heads: 2,
            group_size: 1,
            ffn_dim: 16,
            vocab_size: 257,
            max_context: 6,
            dropout: 0.0,
            tying: Tying::EmbedHead,
            pos_scheme: PosScheme::Rope,
            ..ModelConfig::default()
        };
        let m = LanguageModel::<f32>::new(c, None, 2).unwrap();
        let merges = MergeTable::byte_level();
        let s = ModelScorer::new(&m, &merges).unwrap();
        // Short text: one window, compare against token logits.
        let lp = s.log2_prob(b"ab", b"c").unwrap();
        let logits = m.token_logits(&[256, 97, 98]).unwrap();
        let direct = crate::model::log_softmax_at(&logits[2], 99) / std::f64::consts::LN_2;
        assert!((lp - direct).abs() < 1e-9);
        // Text longer than the context is scored in consecutive windows.
        let long = b"abcdefghijklmnopq";
        let total = s.log2_prob(b"", long).unwrap();
        let first = s.log2_prob(b"", &long[..6]).unwrap();
        assert!(total < first);
        assert!(byte_perplexity(&s, long).unwrap() > 1.0);
    }
}
