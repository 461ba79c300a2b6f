//! Continuous-time long-term memory for streams of frame embeddings.
//!
//! Each chunk of frames is pooled and folded into a fixed-size basis
//! representation of everything seen so far; query tokens attend both to the
//! current chunk (discrete softmax) and to that memory (a Gibbs density over
//! `[0, 1]`), and the blended result is averaged across chunks.

pub mod attention;
pub mod basis;
pub mod error;
pub mod harness;
pub mod io;
pub mod memory;
pub mod numerics;
pub mod pipeline;
pub mod selftest;
pub mod signal;

pub use attention::{
    continuous_scores, gibbs_density, ltm_attention, stm_attention, ContinuousAttention,
    DensityProfile, HeadQueryTable, Projection, ProjectionSet, QuerySet,
};
pub use basis::BasisFamily;
pub use error::{Error, Result};
pub use harness::{
    evaluate_retrieval, full_attention_oracle, generate_stream, run_scenario, GroundTruth,
    NeedleScenario, RetrievalReport, ScenarioReport, SyntheticStreamSpec,
};
pub use memory::{density_histogram, top_density_intervals, MemoryConfig, MemoryState, Sampling};
pub use numerics::{integrate, inverse_cdf_sample, normalized_exp, QuadratureGrid, SampleMode};
pub use pipeline::{ChunkDiagnostics, Pipeline, PipelineConfig, StreamResult, StreamState};
pub use signal::{fit, frame_times, pool_patches, ContinuousSignal, FrameChunk};
