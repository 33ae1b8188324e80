//! Corpus ingestion, batching, optimization and checkpointing.

mod checkpoint;
mod corpus;
mod optim;
mod schedule;
mod synthetic;
mod train;

pub use checkpoint::{Checkpoint, OptimizerState, TensorRecord, CHECKPOINT_MAGIC};
pub use corpus::{build_corpus, encode_segments, load_corpus, load_documents, Corpus, TokenStream};
pub use optim::{clip_grad_norm, AdamW};
pub use schedule::{lr_at, lr_at_fractional};
pub use synthetic::english_like;
pub use train::{
    make_batch, stream_byte_perplexity, MetricsLogger, StepMetrics, TrainConfig, Trainer, WindowSampler,
};
