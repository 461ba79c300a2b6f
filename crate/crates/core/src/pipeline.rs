//! Single-pass stream processing: per-chunk short-term attention, long-term
//! memory consolidation and attention, α-blend, token projection and a running
//! average of the per-chunk token embeddings.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{
    stm_attention, ContinuousAttention, DensityProfile, ProjectionSet, QuerySet,
};
use crate::basis::BasisFamily;
use crate::error::{shape, Error, Result};
use crate::memory::{MemoryConfig, MemoryState, Sampling};
use crate::numerics::{QuadratureGrid, SampleMode, DEFAULT_GRID_POINTS};
use crate::signal::{pool_patches, FrameChunk, DEFAULT_RIDGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    #[default]
    Rectangular,
    Gaussian,
}

/// Which layers' densities feed the sticky-memory histogram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HistogramLayers {
    #[default]
    Last,
    All,
}

/// Every knob of the stream processor. Unknown JSON keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Frames per chunk `M`.
    pub frames_per_chunk: usize,
    /// Patch embeddings per frame `P`.
    pub patches: usize,
    /// Embedding width `e`.
    pub dim: usize,
    /// Query tokens `R`.
    pub queries: usize,
    pub heads: usize,
    /// Basis functions `N`.
    pub basis_size: usize,
    pub basis: BasisKind,
    /// Gaussian width; `None` means `1 / N`.
    pub rbf_width: Option<f64>,
    pub ridge: f64,
    pub tau: f64,
    /// Weight of the short-term context in the blend.
    pub alpha: f64,
    /// Past samples `T`; `None` means `M`.
    pub past_samples: Option<usize>,
    /// Histogram bins `D`.
    pub bins: usize,
    /// Quadrature points `G`.
    pub grid_points: usize,
    pub sampling: Sampling,
    pub sample_mode: SampleMode,
    /// Number of cross-attention layers.
    pub depth: usize,
    pub histogram_layers: HistogramLayers,
    /// Residual self-attention among the queries before each cross-attention.
    pub query_self_attention: bool,
    /// Use only the short-term context on the first chunk.
    pub ltm_from_second_chunk: bool,
    /// Width of the emitted tokens; `None` means `e`.
    pub output_dim: Option<usize>,
    /// Nominal chunk count of a stream.
    pub chunks: usize,
    /// Seed for projections and query seeds.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            frames_per_chunk: 256,
            patches: 32,
            dim: 768,
            queries: 32,
            heads: 12,
            basis_size: 1024,
            basis: BasisKind::Rectangular,
            rbf_width: None,
            ridge: DEFAULT_RIDGE,
            tau: 0.75,
            alpha: 0.9,
            past_samples: None,
            bins: 64,
            grid_points: DEFAULT_GRID_POINTS,
            sampling: Sampling::Sticky,
            sample_mode: SampleMode::Stratified,
            depth: 1,
            histogram_layers: HistogramLayers::Last,
            query_self_attention: false,
            ltm_from_second_chunk: false,
            output_dim: None,
            chunks: 8,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames_per_chunk", self.frames_per_chunk),
            ("patches", self.patches),
            ("dim", self.dim),
            ("queries", self.queries),
            ("heads", self.heads),
            ("basis_size", self.basis_size),
            ("bins", self.bins),
            ("depth", self.depth),
            ("chunks", self.chunks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid_points must be at least 2".into()));
        }
        if self.past_samples == Some(0) || self.output_dim == Some(0) {
            return Err(Error::Config(
                "past_samples and output_dim must be positive".into(),
            ));
        }
        self.memory_config()?.validate()
    }

    pub fn basis_family(&self) -> Result<BasisFamily> {
        let b = match self.basis {
            BasisKind::Rectangular => BasisFamily::rectangular(self.basis_size),
            BasisKind::Gaussian => BasisFamily::gaussian(self.basis_size, self.rbf_width),
        };
        b.map_err(|e| Error::Config(e.to_string()))
    }

    pub fn memory_config(&self) -> Result<MemoryConfig> {
        Ok(MemoryConfig {
            tau: self.tau,
            past_samples: self.past_samples.unwrap_or(self.frames_per_chunk),
            sampling: self.sampling,
            bins: self.bins,
            basis: self.basis_family()?,
            ridge: self.ridge,
            sample_mode: self.sample_mode,
        })
    }

    pub fn effective_output_dim(&self) -> usize {
        self.output_dim.unwrap_or(self.dim)
    }

    /// Seeded orthogonal projections, one set per layer.
    pub fn seeded_projections(&self) -> Result<Vec<ProjectionSet>> {
        (0..self.depth)
            .map(|l| {
                ProjectionSet::seeded_orthogonal(
                    self.dim,
                    self.heads,
                    self.effective_output_dim(),
                    self.seed.wrapping_add(1 + l as u64),
                )
            })
            .collect()
    }

    pub fn seeded_queries(&self) -> Result<QuerySet> {
        QuerySet::seeded(self.queries, self.dim, self.seed)
    }
}

/// Per-chunk bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkDiagnostics {
    pub chunk_index: usize,
    pub chunks_seen: usize,
    pub frames: usize,
    /// Histogram recorded after this chunk's attention.
    pub histogram: Vec<f64>,
    #[serde(with = "duration_secs")]
    pub elapsed: Duration,
    /// Last layer's density profile, if retained.
    #[serde(skip)]
    pub profile: Option<DensityProfile>,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

/// What the processor carries from one chunk to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub memory: MemoryState,
    /// Running mean of the per-chunk token embeddings, `R × e_out`.
    pub running: Option<DMatrix<f64>>,
}

/// Everything produced by one chunk.
#[derive(Debug, Clone)]
pub struct ChunkOutput {
    pub state: StreamState,
    /// Short-term context of the last layer.
    pub stm: DMatrix<f64>,
    /// Long-term context of the last layer.
    pub ltm: DMatrix<f64>,
    /// Blended context `Z`.
    pub context: DMatrix<f64>,
    /// `E_c = Z W_proj`.
    pub embedding: DMatrix<f64>,
    pub diagnostics: ChunkDiagnostics,
}

/// Final tokens plus per-chunk diagnostics.
#[derive(Debug, Clone)]
pub struct StreamResult {
    pub tokens: DMatrix<f64>,
    pub diagnostics: Vec<ChunkDiagnostics>,
}

/// `α·stm + (1 − α)·ltm`, with the endpoints returned exactly.
pub fn blend(alpha: f64, stm: &DMatrix<f64>, ltm: &DMatrix<f64>) -> DMatrix<f64> {
    if alpha == 1.0 {
        stm.clone()
    } else if alpha == 0.0 {
        ltm.clone()
    } else {
        stm * alpha + ltm * (1.0 - alpha)
    }
}

/// `((C − 1)/C)·running + (1/C)·embedding`; `count` includes the new chunk.
pub fn update_running(
    running: Option<&DMatrix<f64>>,
    embedding: &DMatrix<f64>,
    count: usize,
) -> DMatrix<f64> {
    match running {
        None => embedding.clone(),
        Some(prev) => {
            let c = count as f64;
            prev * ((c - 1.0) / c) + embedding * (1.0 / c)
        }
    }
}

/// A configured stream processor.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    layers: Vec<ProjectionSet>,
    queries: QuerySet,
    attention: ContinuousAttention,
}

impl Pipeline {
    /// Processor with seeded projections and queries.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let layers = config.seeded_projections()?;
        let queries = config.seeded_queries()?;
        Self::with_parts(config, layers, queries)
    }

    pub fn with_parts(
        config: PipelineConfig,
        layers: Vec<ProjectionSet>,
        queries: QuerySet,
    ) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.depth {
            return Err(Error::Config(format!(
                "{} projection sets for depth {}",
                layers.len(),
                config.depth
            )));
        }
        for p in &layers {
            if p.dim() != config.dim
                || p.heads() != config.heads
                || p.out_dim() != config.effective_output_dim()
            {
                return Err(Error::Config(
                    "projection shapes do not match the configuration".into(),
                ));
            }
        }
        if queries.dim() != config.dim || queries.len() != config.queries {
            return Err(Error::Config(
                "query set does not match the configuration".into(),
            ));
        }
        let grid = QuadratureGrid::unit(config.grid_points)?;
        let attention = ContinuousAttention::new(config.basis_family()?, grid)?;
        Ok(Self {
            config,
            layers,
            queries,
            attention,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ProjectionSet] {
        &self.layers
    }

    pub fn queries(&self) -> &QuerySet {
        &self.queries
    }

    pub fn grid(&self) -> &QuadratureGrid {
        self.attention.grid()
    }

    pub fn initial_state(&self) -> Result<StreamState> {
        Ok(StreamState {
            memory: MemoryState::init(self.config.memory_config()?)?,
            running: None,
        })
    }

    /// Reals held between chunks (memory coefficients, histogram, running
    /// token average) plus the one density profile alive during a chunk.
    pub fn state_footprint(&self, state: &StreamState) -> usize {
        let cfg = &self.config;
        let running = state.running.as_ref().map_or(0, DMatrix::len);
        let profile = cfg.grid_points * cfg.heads * cfg.queries;
        state.memory.footprint() + running + profile
    }

    fn check_chunk(&self, chunk: &FrameChunk) -> Result<()> {
        if chunk.patches() != self.config.patches || chunk.dim() != self.config.dim {
            return Err(shape(format!(
                "chunk is {}x{}x{}, configuration expects Mx{}x{}",
                chunk.frames(),
                chunk.patches(),
                chunk.dim(),
                self.config.patches,
                self.config.dim
            )));
        }
        Ok(())
    }

    /// Runs one chunk through consolidation, both attentions, the blend and
    /// the running average.
    pub fn process_chunk(&self, state: &StreamState, chunk: &FrameChunk) -> Result<ChunkOutput> {
        self.check_chunk(chunk)?;
        let start = Instant::now();
        let cfg = &self.config;

        let pooled = pool_patches(chunk);
        let memory = state.memory.consolidate(&pooled)?;
        let signal = memory.signal().ok_or(Error::EmptyMemory)?;
        let tokens = chunk.tokens();
        let stm_only = cfg.ltm_from_second_chunk && memory.chunks_seen() == 1;

        let mut seeds = self.queries.clone();
        let mut profiles = Vec::with_capacity(self.layers.len());
        let mut last = None;
        for proj in &self.layers {
            if cfg.query_self_attention {
                let mixed = seeds.seeds() + stm_attention(&seeds, seeds.seeds(), proj)?;
                seeds = QuerySet::new(mixed)?;
            }
            let stm = stm_attention(&seeds, &tokens, proj)?;
            let (ltm, profile) = self.attention.attend(&seeds, signal, proj)?;
            let context = if stm_only {
                stm.clone()
            } else {
                blend(cfg.alpha, &stm, &ltm)
            };
            profiles.push(profile);
            if self.layers.len() > 1 {
                seeds = QuerySet::new(seeds.seeds() + &context)?;
            }
            last = Some((stm, ltm, context));
        }
        let (stm, ltm, context) = last.expect("depth is at least 1");

        let memory = match cfg.histogram_layers {
            HistogramLayers::Last => {
                memory.record_density(profiles.last().expect("one profile per layer"), cfg.bins)?
            }
            HistogramLayers::All => {
                memory.record_densities(&profiles.iter().collect::<Vec<_>>(), cfg.bins)?
            }
        };
        let token_proj = self.layers.last().expect("depth is at least 1").token();
        let embedding = &context * token_proj;
        let count = memory.chunks_seen();
        let running = update_running(state.running.as_ref(), &embedding, count);

        let diagnostics = ChunkDiagnostics {
            chunk_index: chunk.chunk_index(),
            chunks_seen: count,
            frames: chunk.frames(),
            histogram: memory.histogram().map(<[f64]>::to_vec).unwrap_or_default(),
            elapsed: start.elapsed(),
            profile: profiles.pop(),
        };
        Ok(ChunkOutput {
            state: StreamState {
                memory,
                running: Some(running),
            },
            stm,
            ltm,
            context,
            embedding,
            diagnostics,
        })
    }

    /// Folds `process_chunk` over the stream, handing each chunk's diagnostics
    /// to `sink`; the returned diagnostics drop their density profiles unless
    /// `keep_profiles` is set.
    pub fn run_stream_with<I, F>(
        &self,
        chunks: I,
        keep_profiles: bool,
        mut sink: F,
    ) -> Result<StreamResult>
    where
        I: IntoIterator<Item = Result<FrameChunk>>,
        F: FnMut(&ChunkDiagnostics) -> Result<()>,
    {
        let mut state = self.initial_state()?;
        let mut diagnostics = Vec::new();
        for chunk in chunks {
            let out = self.process_chunk(&state, &chunk?)?;
            sink(&out.diagnostics)?;
            let mut diag = out.diagnostics;
            if !keep_profiles {
                diag.profile = None;
            }
            diagnostics.push(diag);
            state = out.state;
        }
        let tokens = state
            .running
            .ok_or_else(|| Error::InvalidArgument("stream has no chunks".into()))?;
        Ok(StreamResult {
            tokens,
            diagnostics,
        })
    }

    /// Processes a whole stream, keeping every density profile.
    pub fn run_stream<I>(&self, chunks: I) -> Result<StreamResult>
    where
        I: IntoIterator<Item = FrameChunk>,
    {
        self.run_stream_with(chunks.into_iter().map(Ok), true, |_| Ok(()))
    }
}
