//! Few-shot classification over precomputed image and text embeddings:
//! a zero-shot cosine head, a cache-model baseline and a gated
//! cross-attention adapter that refines class embeddings from support shots.

pub mod adapter;
pub mod embx;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod store;
pub mod tensor;
pub mod tip;
pub mod train;
pub mod zeroshot;

pub use adapter::{AdapterConfig, AdapterParams, GateMode};
pub use error::{Error, Result};
pub use eval::{emit_report, eval_cross_category, eval_method, harmonic_mean, Artifacts, EvalReport, Method, ReportFormat};
pub use store::{load_task, save_task, ClassView, Pool, Side, SplitLabel, Task, TaskManifest};
pub use tensor::{Accumulation, FeatureMatrix, Matrix, RngSeed, SeededRng};
pub use tip::{CacheModel, TipGrid, TipParams};
pub use train::{train, TrainConfig, TrainLog};
pub use zeroshot::{zeroshot_logits, LogitsMatrix};
