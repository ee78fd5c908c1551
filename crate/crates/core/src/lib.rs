//! Debiased prompt initialization over an abstract embedding space.
//!
//! The pipeline fits a class-conditioned diagonal Gaussian mixture to example
//! representations ([`gmm`]), transports the examples toward that mixture with
//! Stein variational gradient descent ([`svgd`]), draws latent knowledge from
//! the transported particles to build label and type prompt embeddings
//! ([`prompt_synthesis`]), and trains a masked-verbalizer scorer on top of
//! them ([`trainer_eval`]). [`pipeline`] wires the stages together under a
//! single seed.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding_store;
pub mod error;
pub mod gmm;
pub mod pipeline;
pub mod prompt_synthesis;
pub mod seed;
mod serde_matrix;
pub mod svgd;
pub mod trainer_eval;

pub use embedding_store::{
    generate_synthetic_set, kshot_sample, load_embedding_set, save_embedding_set, EmbeddingSet,
    SynthConfig, TokenRecord,
};
pub use error::{Error, Result};
pub use gmm::{fit_gmm, EmConfig, GmmFit, GmmInit, GmmParams};
pub use pipeline::{run_pipeline_seed, run_seeded_protocol, PipelineConfig, ProtocolResult};
pub use prompt_synthesis::{
    build_template, disassemble_label, estimate_word_distribution, synthesize_prompts, PromptPack,
    SemanticWordSet, TypePromptInit, WordEmbeddingTable,
};
pub use svgd::{svgd_run, svgd_step, Bandwidth, ParticleSet, StepMode, SvgdConfig, SvgdRun};
pub use trainer_eval::{
    evaluate_f1, train, Metrics, ScorerParams, TrainConfig, TrainedPromptModel,
};
