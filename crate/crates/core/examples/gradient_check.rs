//! Finite-difference verification of the autodiff tape, op by op and through
//! a whole micro model with each embedder.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use stlm::bytepool::BytePoolConfig;
use stlm::data::make_batch;
use stlm::numerics::{grad_check, AttentionSpec, DiffTensor, Tape, Var};
use stlm::model::{EmbedderKind, LanguageModel, ModelConfig};
use stlm::tokenizer::MergeTable;

fn ramp(shape: &[usize], phase: f64) -> DiffTensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|i| ((i as f64 + phase) * 0.731).sin() * 0.8).collect();
    DiffTensor::new(shape.to_vec(), values).expect("shape matches values")
}

type Op = for<'t> fn(&mut Tape<'t, f64>, &[Var]) -> stlm::Result<Var>;

fn main() -> stlm::Result<()> {
    let spec = AttentionSpec {
        n_seq: 1,
        seq_len: 3,
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 2,
        causal: true,
        key_lens: None,
    };
    let cases: Vec<(&str, Op, Vec<DiffTensor<f64>>)> = vec![
        ("matmul", |t, v| t.matmul(v[0], v[1]), vec![ramp(&[3, 4], 0.0), ramp(&[4, 2], 1.0)]),
        ("rms_norm", |t, v| t.rms_norm(v[0], v[1]), vec![ramp(&[3, 4], 0.5), ramp(&[4], 2.0)]),
        ("silu", |t, v| t.silu(v[0]), vec![ramp(&[2, 5], 0.2)]),
        ("gelu", |t, v| t.gelu(v[0]), vec![ramp(&[2, 5], 0.9)]),
        ("softmax_rows", |t, v| t.softmax_rows(v[0]), vec![ramp(&[3, 4], 1.3)]),
        ("rope", |t, v| t.rope(v[0], &[0, 1, 2], 2), vec![ramp(&[3, 4], 0.4)]),
        ("cross_entropy", |t, v| t.cross_entropy(v[0], &[1, 0, 3], None), vec![ramp(&[3, 4], 0.7)]),
    ];
    for (name, op, inputs) in cases {
        let err = grad_check(op, &inputs, 1e-5)?;
        println!("{name:<14} f64 relative error {err:.2e}");
    }
    let err = grad_check(
        move |t, v| t.attention(v[0], v[1], v[2], &spec, None),
        &[ramp(&[3, 4], 0.1), ramp(&[3, 2], 0.6), ramp(&[3, 2], 1.1)],
        1e-5,
    )?;
    println!("{:<14} f64 relative error {err:.2e}", "attention");

    let merges = MergeTable::byte_level();
    let separator = merges.vocab_size() as u32;
    let window: Vec<u32> = std::iter::once(separator).chain(merges.encode(b"tiny model")).collect();
    for embedder in [EmbedderKind::BpeLookup, EmbedderKind::BytePool] {
        let config = ModelConfig {
            n_layers: 2,
            hidden_dim: 16,
            n_heads: 4,
            group_size: 2,
            ffn_dim: 24,
            vocab_size: merges.vocab_size() + 1,
            max_context: 16,
            dropout: 0.0,
            embedder,
            ..ModelConfig::default()
        };
        let bytepool = (embedder == EmbedderKind::BytePool).then(|| BytePoolConfig {
            byte_dim: 8,
            pool_heads: 2,
            ffn_dim: 16,
            max_token_bytes: 4,
            pool_layers: 1,
            decoder_layers: 1,
            ..BytePoolConfig::default()
        });
        let model = LanguageModel::<f64>::new(config, bytepool, 3)?;
        let batch = make_batch(&model, &merges, &[&window])?;
        let f64_err = model.gradient_check(&batch, 1e-5, 7)?;
        let f32_err = model.cast::<f32>().gradient_check(&batch, 1e-3, 7)?;
        println!("full model {embedder:?}: f64 {f64_err:.2e}, f32 {f32_err:.2e}");
    }
    Ok(())
}
