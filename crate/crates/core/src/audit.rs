//! Exact parameter accounting by closed-form shape enumeration.
//!
//! The enumeration mirrors model construction name for name, so the report
//! can be checked against a realized [`ParamStore`] entry by entry.

use std::fmt::Write as _;

use serde::Serialize;

use crate::bytepool::{Aggregation, BytePoolConfig, BYTE_SYMBOLS};
use crate::error::{config_err, Result};
use crate::model::{ffn_matrix_dims, BlockDims, Component, EmbedderKind, FfnType, ModelConfig, ParamStore, PosScheme, Tying};
use crate::numerics::Real;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Zero for aliases: their storage is counted under `alias_of`.
    pub count: usize,
    pub component: Component,
    pub alias_of: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    /// One subtotal per [`Component`], in declaration order.
    pub subtotals: Vec<(Component, usize)>,
    pub total: usize,
    /// Fraction of all parameters that map input units to vectors
    /// (token embedding, or the byte-pooling embedder).
    pub embedding_share: f64,
    /// `(bytepool embedder + decoder) / (vocab · hidden)`.
    pub bytepool_ratio: Option<f64>,
    /// `1 − (bytepool embedder + decoder) / (vocab · hidden)`.
    pub reduction_vs_tied: Option<f64>,
    /// `1 − (bytepool embedder + decoder) / (2 · vocab · hidden)`.
    pub reduction_vs_untied: Option<f64>,
}

impl AuditReport {
    pub fn subtotal(&self, c: Component) -> usize {
        self.subtotals.iter().find(|(k, _)| *k == c).map_or(0, |(_, n)| *n)
    }

    fn from_entries(entries: Vec<AuditEntry>, vocab_hidden: Option<usize>) -> Self {
        let subtotals: Vec<(Component, usize)> = Component::ALL
            .iter()
            .map(|&c| (c, entries.iter().filter(|e| e.component == c).map(|e| e.count).sum()))
            .collect();
        let total: usize = subtotals.iter().map(|(_, n)| n).sum();
        let sub = |c: Component| subtotals.iter().find(|(k, _)| *k == c).map_or(0, |(_, n)| *n);
        let input_side = sub(Component::Embedding) + sub(Component::BytepoolEmbedder);
        let embedding_share = if total == 0 { 0.0 } else { input_side as f64 / total as f64 };
        let bytepool = sub(Component::BytepoolEmbedder) + sub(Component::BytepoolDecoder);
        let (ratio, tied, untied) = match vocab_hidden {
            Some(vh) if bytepool > 0 => {
                let r = bytepool as f64 / vh as f64;
                (Some(r), Some(1.0 - r), Some(1.0 - r / 2.0))
            }
            _ => (None, None, None),
        };
        Self {
            entries,
            subtotals,
            total,
            embedding_share,
            bytepool_ratio: ratio,
            reduction_vs_tied: tied,
            reduction_vs_untied: untied,
        }
    }

    /// Counts the realized storage of a constructed store.
    pub fn from_store<T: Real>(store: &ParamStore<T>, vocab_hidden: Option<usize>) -> Self {
        let entries = store
            .names()
            .iter()
            .map(|(name, id)| {
                let e = store.entry(*id);
                let canonical = e.name != *name;
                AuditEntry {
                    name: name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    count: if canonical { 0 } else { e.tensor.len() },
                    component: e.component,
                    alias_of: canonical.then(|| e.name.clone()),
                }
            })
            .collect();
        Self::from_entries(entries, vocab_hidden)
    }
}

#[derive(Default)]
struct Enumerator {
    entries: Vec<AuditEntry>,
}

impl Enumerator {
    fn add(&mut self, name: String, shape: Vec<usize>, component: Component) {
        let count = shape.iter().product();
        self.entries.push(AuditEntry {
            name,
            shape,
            count,
            component,
            alias_of: None,
        });
    }

    fn alias(&mut self, name: String, target: &str) {
        let t = self
            .entries
            .iter()
            .find(|e| e.name == target)
            .expect("alias target enumerated earlier");
        let (shape, component) = (t.shape.clone(), t.component);
        self.entries.push(AuditEntry {
            name,
            shape,
            count: 0,
            component,
            alias_of: Some(target.to_string()),
        });
    }

    fn block(
        &mut self,
        prefix: &str,
        dims: &BlockDims,
        components: (Component, Component, Component),
        share: Option<(&str, bool, bool)>,
        lora_rank: usize,
    ) {
        let (attn_c, ffn_c, norm_c) = components;
        let h = dims.hidden;
        let kv = dims.kv_width();
        self.add(format!("{prefix}.attn_norm"), vec![h], norm_c);
        let attn = [("wq", h, h), ("wk", h, kv), ("wv", h, kv), ("wo", h, h)];
        for (n, r, c) in attn {
            match share {
                Some((base, true, _)) => self.alias(format!("{prefix}.attn.{n}"), &format!("{base}.attn.{n}")),
                _ => self.add(format!("{prefix}.attn.{n}"), vec![r, c], attn_c),
            }
        }
        self.add(format!("{prefix}.ffn_norm"), vec![h], norm_c);
        let f = dims.ffn_dim;
        let ffn: Vec<(&str, Vec<usize>)> = match dims.ffn_type {
            FfnType::Swiglu => vec![("w_gate", vec![h, f]), ("w_up", vec![h, f]), ("w_down", vec![f, h])],
            FfnType::Simple => vec![("w_in", vec![h, f]), ("b_in", vec![f]), ("w_out", vec![f, h]), ("b_out", vec![h])],
        };
        for (n, shape) in ffn {
            match share {
                Some((base, _, true)) => self.alias(format!("{prefix}.ffn.{n}"), &format!("{base}.ffn.{n}")),
                _ => self.add(format!("{prefix}.ffn.{n}"), shape, ffn_c),
            }
        }
        if lora_rank > 0 {
            for (n, fan_in, fan_out) in ffn_matrix_dims(dims) {
                self.add(format!("{prefix}.ffn.lora.{n}.a"), vec![fan_in, lora_rank], ffn_c);
                self.add(format!("{prefix}.ffn.lora.{n}.b"), vec![lora_rank, fan_out], ffn_c);
            }
        }
    }
}

/// Closed-form parameter report for a configuration. `bytepool` is required
/// exactly when the config selects the byte_pool embedder.
pub fn count_params(config: &ModelConfig, bytepool: Option<&BytePoolConfig>) -> Result<AuditReport> {
    config.validate()?;
    let bp = match (config.embedder, bytepool) {
        (EmbedderKind::BytePool, Some(bp)) => {
            bp.validate(config)?;
            Some(bp)
        }
        (EmbedderKind::BytePool, None) => return Err(config_err("byte_pool embedder needs a bytepool config")),
        (EmbedderKind::BpeLookup, _) => None,
    };
    let h = config.hidden_dim;
    let v = config.vocab_size;
    let mut en = Enumerator::default();
    if config.embedder == EmbedderKind::BpeLookup {
        en.add("tok_emb".into(), vec![v, h], Component::Embedding);
    }
    if config.pos_scheme == PosScheme::Learned {
        en.add("pos_emb".into(), vec![config.max_context, h], Component::Positional);
    }
    let dims = BlockDims {
        hidden: h,
        n_heads: config.n_heads,
        n_kv_heads: config.n_kv_heads(),
        ffn_type: config.ffn_type,
        ffn_dim: config.ffn_dim,
    };
    for layer in 0..config.n_layers {
        let share = match config.tying {
            Tying::FfnShared if layer > 0 => Some(("layer.0", false, true)),
            Tying::FfnAttnShared if layer > 0 => Some(("layer.0", true, true)),
            _ => None,
        };
        en.block(
            &format!("layer.{layer}"),
            &dims,
            (Component::Attention, Component::Ffn, Component::Norms),
            share,
            config.lora_rank,
        );
    }
    en.add("final_norm".into(), vec![h], Component::Norms);
    if config.embedder == EmbedderKind::BpeLookup {
        if config.tying.ties_head() {
            en.alias("lm_head".into(), "tok_emb");
        } else {
            en.add("lm_head".into(), vec![v, h], Component::Head);
        }
    }
    if let Some(bp) = bp {
        let d = bp.byte_dim;
        let m = bp.max_token_bytes;
        let emb = Component::BytepoolEmbedder;
        let dec = Component::BytepoolDecoder;
        let bdims = bp.block_dims();
        en.add("bytepool.byte_table".into(), vec![BYTE_SYMBOLS, d], emb);
        en.add("bytepool.byte_pos".into(), vec![m, d], emb);
        if bp.aggregation == Aggregation::Aggregate {
            en.add("bytepool.aggregate".into(), vec![1, d], emb);
        }
        for i in 0..bp.pool_layers {
            en.block(&format!("bytepool.pool.layer.{i}"), &bdims, (emb, emb, emb), None, 0);
        }
        en.add("bytepool.pool_norm".into(), vec![d], emb);
        en.add("bytepool.pool_proj".into(), vec![d, h], emb);
        en.add("bytepool.decoder.proj".into(), vec![h, d], dec);
        en.add("bytepool.decoder.pos".into(), vec![m + 2, d], dec);
        for i in 0..bp.decoder_layers {
            en.block(&format!("bytepool.decoder.layer.{i}"), &bdims, (dec, dec, dec), None, 0);
        }
        en.add("bytepool.decoder.norm".into(), vec![d], dec);
        en.alias("bytepool.decoder.head".into(), "bytepool.byte_table");
    }
    Ok(AuditReport::from_entries(en.entries, Some(v * h)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

fn pct(x: f64) -> f64 {
    (x * 10000.0).round() / 100.0
}

#[derive(Serialize)]
struct JsonEntry<'a> {
    name: &'a str,
    shape: &'a [usize],
    count: usize,
    component: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    alias_of: Option<&'a str>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    total: usize,
    subtotals: Vec<(&'static str, usize)>,
    embedding_share_pct: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bytepool_ratio_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reduction_vs_tied_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reduction_vs_untied_pct: Option<f64>,
    entries: Vec<JsonEntry<'a>>,
}

/// Renders a report with stable field order and percentages to two decimals.
pub fn render_report(report: &AuditReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let doc = JsonReport {
                total: report.total,
                subtotals: report.subtotals.iter().map(|(c, n)| (c.name(), *n)).collect(),
                embedding_share_pct: pct(report.embedding_share),
                bytepool_ratio_pct: report.bytepool_ratio.map(pct),
                reduction_vs_tied_pct: report.reduction_vs_tied.map(pct),
                reduction_vs_untied_pct: report.reduction_vs_untied.map(pct),
                entries: report
                    .entries
                    .iter()
                    .map(|e| JsonEntry {
                        name: &e.name,
                        shape: &e.shape,
                        count: e.count,
                        component: e.component.name(),
                        alias_of: e.alias_of.as_deref(),
                    })
                    .collect(),
            };
            serde_json::to_string_pretty(&doc).expect("report serializes")
        }
        ReportFormat::Text => {
            let mut s = String::new();
            let width = report.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(9);
            for e in &report.entries {
                let shape = e.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
                match &e.alias_of {
                    Some(t) => writeln!(s, "{:<width$}  {:>12}  {:>12}  -> {t}", e.name, shape, 0),
                    None => writeln!(s, "{:<width$}  {:>12}  {:>12}  {}", e.name, shape, e.count, e.component.name()),
                }
                .expect("writing to a String");
            }
            s.push('\n');
            for (c, n) in &report.subtotals {
                let share = if report.total == 0 { 0.0 } else { *n as f64 / report.total as f64 };
                writeln!(s, "{:<18} {:>12}  {:>6.2}%", c.name(), n, 100.0 * share).expect("writing to a String");
            }
            writeln!(s, "{:<18} {:>12}", "total", report.total).expect("writing to a String");
            writeln!(s, "embedding_share     {:.2}%", 100.0 * report.embedding_share).expect("writing to a String");
            if let (Some(r), Some(t), Some(u)) =
                (report.bytepool_ratio, report.reduction_vs_tied, report.reduction_vs_untied)
            {
                writeln!(s, "bytepool_ratio      {:.2}%", 100.0 * r).expect("writing to a String");
                writeln!(s, "reduction_vs_tied   {:.2}%", 100.0 * t).expect("writing to a String");
                writeln!(s, "reduction_vs_untied {:.2}%", 100.0 * u).expect("writing to a String");
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LanguageModel;

    #[test]
    fn baseline_counts() {
        let r = count_params(&ModelConfig::default(), None).unwrap();
        assert_eq!(r.subtotal(Component::Embedding), 50257 * 512);
        assert_eq!(r.subtotal(Component::Attention), 8 * (2 * 512 * 512 + 2 * 512 * 128));
        assert_eq!(r.subtotal(Component::Ffn), 8 * 3 * 512 * 1536);
        assert_eq!(r.subtotal(Component::Norms), 8 * 2 * 512 + 512);
        assert_eq!(r.subtotal(Component::Head), 0);
        assert_eq!(r.total, 49_857_536);
        assert!(r.embedding_share > 0.5);
        assert!(r.bytepool_ratio.is_none());
    }

    #[test]
    fn untying_adds_one_matrix() {
        let tied = count_params(&ModelConfig::default(), None).unwrap();
        let c = ModelConfig {
            tying: Tying::None,
            ..ModelConfig::default()
        };
        let untied = count_params(&c, None).unwrap();
        assert_eq!(untied.total - tied.total, 25_731_584);
    }

    #[test]
    fn full_sharing_keeps_one_block_plus_norms() {
        let base = count_params(&ModelConfig::default(), None).unwrap();
        let c = ModelConfig {
            tying: Tying::FfnAttnShared,
            ..ModelConfig::default()
        };
        let shared = count_params(&c, None).unwrap();
        let blocks = |r: &AuditReport| r.subtotal(Component::Attention) + r.subtotal(Component::Ffn);
        assert_eq!(blocks(&shared) * 8, blocks(&base));
        assert_eq!(shared.subtotal(Component::Norms), base.subtotal(Component::Norms));
    }

    #[test]
    fn bytepool_baseline_reductions() {
        let c = ModelConfig {
            embedder: EmbedderKind::BytePool,
            ..ModelConfig::default()
        };
        let r = count_params(&c, Some(&BytePoolConfig::default())).unwrap();
        assert_eq!(r.subtotal(Component::BytepoolEmbedder), 181_824);
        assert_eq!(r.subtotal(Component::BytepoolDecoder), 165_312);
        assert!(r.bytepool_ratio.unwrap() <= 0.10);
        assert!(r.reduction_vs_untied.unwrap() >= 0.95);
        assert!(r.reduction_vs_tied.unwrap() >= 0.90);
    }

    #[test]
    fn zero_layers_is_embedding_norm_and_head() {
        let c = ModelConfig {
            n_layers: 0,
            tying: Tying::None,
            ..ModelConfig::default()
        };
        let r = count_params(&c, None).unwrap();
        assert_eq!(r.total, 2 * 50257 * 512 + 512);
    }

    #[test]
    fn closed_form_matches_constructed_store() {
        let c = ModelConfig {
            n_layers: 3,
            hidden_dim: 32,
            n_heads: 4,
            group_size: 2,
            ffn_dim: 40,
            vocab_size: 300,
            tying: Tying::FfnShared,
            lora_rank: 3,
            pos_scheme: PosScheme::Learned,
            ..ModelConfig::default()
        };
        let closed = count_params(&c, None).unwrap();
        let m = LanguageModel::<f32>::new(c, None, 0).unwrap();
        let real = AuditReport::from_store(m.params(), Some(300 * 32));
        assert_eq!(closed, real);
    }

    #[test]
    fn rendering_is_stable_and_rounded() {
        let r = count_params(&ModelConfig::default(), None).unwrap();
        let text = render_report(&r, ReportFormat::Text);
        assert!(text.contains("embedding_share     51.61%"));
        let json = render_report(&r, ReportFormat::Json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["embedding_share_pct"], serde_json::json!(51.61));
        assert_eq!(v["total"], serde_json::json!(49_857_536));
        assert_eq!(json, render_report(&r, ReportFormat::Json));
    }
}
