//! Synthetic streams with a planted needle, brute-force attention oracles and
//! retrieval scoring of attention densities.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{ContinuousAttention, DensityProfile, Projection, ProjectionSet, QuerySet};
use crate::error::{shape, Error, Result};
use crate::memory::Sampling;
use crate::numerics::{integrate_between, interpolate, QuadratureGrid};
use crate::pipeline::{Pipeline, PipelineConfig, StreamState};
use crate::signal::{pool_patches, FrameChunk};

/// A direction added to a contiguous run of frames in one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Needle {
    pub chunk: usize,
    /// First frame of the span within the chunk.
    pub start: usize,
    /// One past the last frame.
    pub end: usize,
    /// Unit-norm direction of length `dim`.
    pub direction: Vec<f64>,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticStreamSpec {
    pub chunks: usize,
    pub frames_per_chunk: usize,
    pub patches: usize,
    pub dim: usize,
    /// Standard deviation of the Gaussian background.
    pub noise: f64,
    pub needle: Needle,
    pub seed: u64,
}

/// Where the needle was planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub chunks: usize,
    pub frames_per_chunk: usize,
    pub chunk: usize,
    pub start: usize,
    pub end: usize,
    pub amplitude: f64,
    pub direction: Vec<f64>,
}

impl GroundTruth {
    pub fn total_frames(&self) -> usize {
        self.chunks * self.frames_per_chunk
    }

    pub fn span_len(&self) -> usize {
        self.end - self.start
    }

    /// Whether global frame `f` lies in the needle.
    pub fn contains(&self, f: usize) -> bool {
        let lo = self.chunk * self.frames_per_chunk;
        (lo + self.start..lo + self.end).contains(&f)
    }
}

/// A unit vector drawn from `seed`.
pub fn random_direction(dim: usize, seed: u64) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "direction needs a positive dimension".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return Ok(v.into_iter().map(|x| x / norm).collect());
        }
    }
}

impl SyntheticStreamSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.chunks == 0 || self.frames_per_chunk == 0 || self.patches == 0 || self.dim == 0 {
            return bad("stream dimensions must be positive".into());
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!(
                "noise must be a nonnegative number, got {}",
                self.noise
            ));
        }
        let n = &self.needle;
        if n.chunk >= self.chunks || n.start >= n.end || n.end > self.frames_per_chunk {
            return bad(format!(
                "needle chunk {} frames {}..{} out of range for {} chunks of {} frames",
                n.chunk, n.start, n.end, self.chunks, self.frames_per_chunk
            ));
        }
        if n.direction.len() != self.dim {
            return bad(format!(
                "needle direction has {} entries, dim is {}",
                n.direction.len(),
                self.dim
            ));
        }
        let norm = n.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return bad(format!("needle direction norm is {norm}, not 1"));
        }
        if !n.amplitude.is_finite() {
            return bad("needle amplitude must be finite".into());
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            chunks: self.chunks,
            frames_per_chunk: self.frames_per_chunk,
            chunk: self.needle.chunk,
            start: self.needle.start,
            end: self.needle.end,
            amplitude: self.needle.amplitude,
            direction: self.needle.direction.clone(),
        }
    }
}

/// Lazily generated chunks of a synthetic stream.
pub struct SyntheticStream {
    spec: SyntheticStreamSpec,
    rng: ChaCha8Rng,
    next: usize,
}

impl Iterator for SyntheticStream {
    type Item = FrameChunk;

    fn next(&mut self) -> Option<FrameChunk> {
        let s = &self.spec;
        if self.next == s.chunks {
            return None;
        }
        let c = self.next;
        self.next += 1;
        let mut data = Vec::with_capacity(s.frames_per_chunk * s.patches * s.dim);
        for m in 0..s.frames_per_chunk {
            let planted = c == s.needle.chunk && (s.needle.start..s.needle.end).contains(&m);
            for _ in 0..s.patches {
                for d in 0..s.dim {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    let mut v = s.noise * z;
                    if planted {
                        v += s.needle.amplitude * s.needle.direction[d];
                    }
                    data.push(v);
                }
            }
        }
        Some(
            FrameChunk::new(s.frames_per_chunk, s.patches, s.dim, data, c)
                .expect("generator shapes are consistent"),
        )
    }
}

/// The chunks of `spec`, generated on demand, plus the needle's location.
pub fn generate_stream(spec: &SyntheticStreamSpec) -> Result<(SyntheticStream, GroundTruth)> {
    spec.validate()?;
    let stream = SyntheticStream {
        spec: spec.clone(),
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        next: 0,
    };
    Ok((stream, spec.ground_truth()))
}

/// Head-averaged discrete softmax weights, `R × S`, computed with plain loops.
pub fn attention_weights(
    queries: &QuerySet,
    tokens: &DMatrix<f64>,
    proj: &ProjectionSet,
) -> Result<DMatrix<f64>> {
    check_tokens(queries, tokens, proj)?;
    let (r, s, heads) = (queries.len(), tokens.nrows(), proj.heads());
    let mut out = DMatrix::zeros(r, s);
    for h in 0..heads {
        let w = head_weights(queries, tokens, proj, h);
        out += w / heads as f64;
    }
    Ok(out)
}

fn check_tokens(queries: &QuerySet, tokens: &DMatrix<f64>, proj: &ProjectionSet) -> Result<()> {
    if tokens.nrows() == 0 {
        return Err(Error::EmptyMemory);
    }
    if tokens.ncols() != proj.dim() || queries.dim() != proj.dim() {
        return Err(shape(format!(
            "queries width {} and token width {} must both equal {}",
            queries.dim(),
            tokens.ncols(),
            proj.dim()
        )));
    }
    Ok(())
}

fn head_weights(
    queries: &QuerySet,
    tokens: &DMatrix<f64>,
    proj: &ProjectionSet,
    h: usize,
) -> DMatrix<f64> {
    let wq = proj.head(Projection::Query, h);
    let wk = proj.head(Projection::Key, h);
    let d = proj.head_dim();
    let lift = |x: &DMatrix<f64>, row: usize, w: &DMatrix<f64>| -> Vec<f64> {
        (0..d)
            .map(|j| (0..x.ncols()).map(|c| x[(row, c)] * w[(c, j)]).sum())
            .collect()
    };
    let keys: Vec<Vec<f64>> = (0..tokens.nrows()).map(|s| lift(tokens, s, wk)).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = DMatrix::zeros(queries.len(), tokens.nrows());
    for i in 0..queries.len() {
        let q = lift(queries.seeds(), i, wq);
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out[(i, j)] = e / total;
        }
    }
    out
}

/// Brute-force multi-head softmax attention of `queries` over every frame.
pub fn full_attention_oracle(
    all_frames: &DMatrix<f64>,
    queries: &QuerySet,
    proj: &ProjectionSet,
) -> Result<DMatrix<f64>> {
    check_tokens(queries, all_frames, proj)?;
    let (r, e, d) = (queries.len(), proj.dim(), proj.head_dim());
    let mut concat = DMatrix::zeros(r, e);
    for h in 0..proj.heads() {
        let w = head_weights(queries, all_frames, proj, h);
        let wv = proj.head(Projection::Value, h);
        for i in 0..r {
            for j in 0..d {
                let mut acc = 0.0;
                for s in 0..all_frames.nrows() {
                    let v: f64 = (0..e).map(|c| all_frames[(s, c)] * wv[(c, j)]).sum();
                    acc += w[(i, s)] * v;
                }
                concat[(i, h * d + j)] = acc;
            }
        }
    }
    let wz = proj.output();
    Ok(DMatrix::from_fn(r, e, |i, j| {
        (0..e).map(|c| concat[(i, c)] * wz[(c, j)]).sum()
    }))
}

/// Image of `[lo, hi]` from chunk `chunk`'s own frame coordinates in the final
/// memory after `chunks` consolidations with contraction `tau`.
pub fn map_to_final_memory(lo: f64, hi: f64, chunk: usize, chunks: usize, tau: f64) -> (f64, f64) {
    let place = |u: f64| if chunk == 0 { u } else { tau + (1.0 - tau) * u };
    let shrink = tau.powi((chunks - 1 - chunk) as i32);
    (place(lo) * shrink, place(hi) * shrink)
}

/// Final-memory position of every frame's midpoint, in stream order.
pub fn frame_positions(truth: &GroundTruth, tau: f64) -> Vec<f64> {
    let m = truth.frames_per_chunk as f64;
    (0..truth.chunks)
        .flat_map(|c| (0..truth.frames_per_chunk).map(move |f| (c, (f as f64 + 0.5) / m)))
        .map(|(c, u)| map_to_final_memory(u, u, c, truth.chunks, tau).0)
        .collect()
}

/// Retrieval quality of a density over the final memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// Mapped needle interval in final-memory coordinates.
    pub interval: (f64, f64),
    /// The mapped interval is shorter than one basis function.
    pub below_resolution: bool,
    /// Fraction of the total mass on the needle interval.
    pub needle_mass: f64,
    pub background_mass_per_length: f64,
    /// Needle density per unit length over background density per unit length.
    pub ratio: Option<f64>,
    /// Fraction of the top-k frames (k = needle length) that are needle frames.
    pub hit_rate: f64,
}

/// Scores `density` (over `grid`) against the needle, after mapping the span
/// through the nested contraction with `tau`; spans narrower than `1 / basis_size`
/// are flagged as below resolution and get no ratio.
pub fn evaluate_density(
    density: &[f64],
    grid: &QuadratureGrid,
    truth: &GroundTruth,
    tau: f64,
    basis_size: usize,
) -> Result<RetrievalReport> {
    if density.len() != grid.len() {
        return Err(shape(format!(
            "density has {} values for a {}-point grid",
            density.len(),
            grid.len()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) || basis_size == 0 {
        return Err(Error::InvalidArgument(
            "tau must lie in (0, 1) and basis_size be positive".into(),
        ));
    }
    let m = truth.frames_per_chunk as f64;
    let (lo, hi) = map_to_final_memory(
        truth.start as f64 / m,
        truth.end as f64 / m,
        truth.chunk,
        truth.chunks,
        tau,
    );
    let total = integrate_between(density, grid, grid.start(), grid.end());
    if !(total > 0.0) {
        return Err(Error::DegenerateDensity);
    }
    let needle_mass = (integrate_between(density, grid, lo, hi) / total).clamp(0.0, 1.0);
    let background = 1.0 - needle_mass;
    let len = hi - lo;
    let background_len = (grid.end() - grid.start()) - len;
    let background_mass_per_length = if background_len > 0.0 {
        background / background_len
    } else {
        0.0
    };
    let below_resolution = len < 1.0 / basis_size as f64;
    let ratio = (!below_resolution && background_mass_per_length > 0.0)
        .then(|| (needle_mass / len) / background_mass_per_length);

    let k = truth.span_len();
    let mut ranked: Vec<(usize, f64)> = frame_positions(truth, tau)
        .into_iter()
        .enumerate()
        .map(|(f, t)| (f, interpolate(density, grid, t)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let hits = ranked
        .iter()
        .take(k)
        .filter(|(f, _)| truth.contains(*f))
        .count();

    Ok(RetrievalReport {
        interval: (lo, hi),
        below_resolution,
        needle_mass,
        background_mass_per_length,
        ratio,
        hit_rate: hits as f64 / k as f64,
    })
}

/// [`evaluate_density`] on the density aggregated over every head and query.
pub fn evaluate_retrieval(
    profile: &DensityProfile,
    truth: &GroundTruth,
    tau: f64,
    basis_size: usize,
) -> Result<RetrievalReport> {
    evaluate_density(
        &profile.aggregated(),
        profile.grid(),
        truth,
        tau,
        basis_size,
    )
}

/// Needle-to-background ratio of discrete per-frame weights over `frames`
/// frames of which the needle covers `needle_frames` (given as global indices
/// into `weights`).
fn discrete_ratio(
    weights: &[f64],
    needle: impl Iterator<Item = usize>,
    frames: usize,
    span: usize,
) -> f64 {
    let mass: f64 = needle.map(|f| weights.get(f).copied().unwrap_or(0.0)).sum();
    let total: f64 = weights.iter().sum();
    let background = (total - mass).max(0.0) / (frames - span) as f64;
    if background > 0.0 {
        (mass / span as f64) / background
    } else {
        f64::INFINITY
    }
}

/// A needle stream together with the processor that reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleScenario {
    pub stream: SyntheticStreamSpec,
    pub pipeline: PipelineConfig,
    /// Random unit queries added after the aligned one.
    pub control_queries: usize,
    /// Grid size for the fine-quadrature reference ratio.
    pub oracle_grid_points: usize,
}

impl NeedleScenario {
    /// Eight chunks of 32 single-patch 16-dimensional frames with an
    /// amplitude-4 needle over frames 8..24 of chunk 3.
    pub fn default_scenario() -> Self {
        let (chunks, frames, dim) = (8, 32, 16);
        let stream = SyntheticStreamSpec {
            chunks,
            frames_per_chunk: frames,
            patches: 1,
            dim,
            noise: 1.0,
            needle: Needle {
                chunk: 3,
                start: 8,
                end: 24,
                direction: random_direction(dim, 7).expect("positive dimension"),
                amplitude: 4.0,
            },
            seed: 2024,
        };
        let pipeline = PipelineConfig {
            frames_per_chunk: frames,
            patches: 1,
            dim,
            queries: 4,
            heads: 2,
            basis_size: 64,
            past_samples: Some(128),
            bins: 64,
            chunks,
            seed: 11,
            ..PipelineConfig::default()
        };
        Self {
            stream,
            pipeline,
            control_queries: 3,
            oracle_grid_points: 100_001,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.stream.needle.amplitude = amplitude;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.stream.validate()?;
        self.pipeline.validate()?;
        let (s, p) = (&self.stream, &self.pipeline);
        if s.frames_per_chunk != p.frames_per_chunk || s.patches != p.patches || s.dim != p.dim {
            return Err(Error::Config("stream and pipeline shapes differ".into()));
        }
        if p.queries != 1 + self.control_queries {
            return Err(Error::Config(format!(
                "pipeline needs {} queries",
                1 + self.control_queries
            )));
        }
        if p.depth != 1 {
            return Err(Error::Config("needle scenarios use a single layer".into()));
        }
        if self.oracle_grid_points < 2 {
            return Err(Error::Config(
                "oracle_grid_points must be at least 2".into(),
            ));
        }
        Ok(())
    }

    /// Aligned query first, then the controls.
    pub fn queries(&self) -> Result<QuerySet> {
        let dim = self.stream.dim;
        let controls = QuerySet::seeded(
            self.control_queries.max(1),
            dim,
            self.pipeline.seed.wrapping_add(1000),
        )?;
        let seeds = DMatrix::from_fn(1 + self.control_queries, dim, |i, j| {
            if i == 0 {
                self.stream.needle.direction[j]
            } else {
                controls.seeds()[(i - 1, j)]
            }
        });
        QuerySet::new(seeds)
    }

    /// Tied projections so the aligned query scores the needle positively.
    pub fn projections(&self) -> Result<ProjectionSet> {
        let p = &self.pipeline;
        ProjectionSet::seeded_tied(p.dim, p.heads, p.effective_output_dim(), p.seed)
    }
}

/// Retrieval of one pipeline variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub retrieval: RetrievalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub amplitude: f64,
    /// Short-term attention only: the needle is visible only if it lies in the
    /// last chunk.
    pub no_ltm_ratio: f64,
    pub uniform: VariantReport,
    pub sticky: VariantReport,
    /// Sticky ratio of the same final memory at `oracle_grid_points`.
    pub sticky_oracle_ratio: Option<f64>,
    /// Discrete softmax over every frame at once.
    pub full_attention_ratio: f64,
}

impl ScenarioReport {
    pub fn sticky_ratio(&self) -> Option<f64> {
        self.sticky.retrieval.ratio
    }

    pub fn uniform_ratio(&self) -> Option<f64> {
        self.uniform.retrieval.ratio
    }
}

fn run_variant(
    scenario: &NeedleScenario,
    sampling: Sampling,
    queries: &QuerySet,
    proj: &ProjectionSet,
) -> Result<(StreamState, DensityProfile, Pipeline)> {
    let cfg = PipelineConfig {
        sampling,
        ..scenario.pipeline.clone()
    };
    let pipeline = Pipeline::with_parts(cfg, vec![proj.clone()], queries.clone())?;
    let (stream, _) = generate_stream(&scenario.stream)?;
    let mut state = pipeline.initial_state()?;
    let mut last = None;
    for chunk in stream {
        let out = pipeline.process_chunk(&state, &chunk)?;
        state = out.state;
        last = out.diagnostics.profile;
    }
    let profile = last.ok_or_else(|| Error::InvalidArgument("scenario has no chunks".into()))?;
    Ok((state, profile, pipeline))
}

/// Runs the uniform and sticky variants, the short-term-only baseline, the
/// fine-grid reference and the all-frames discrete baseline.
pub fn run_scenario(scenario: &NeedleScenario) -> Result<ScenarioReport> {
    scenario.validate()?;
    let queries = scenario.queries()?;
    let proj = scenario.projections()?;
    let truth = scenario.stream.ground_truth();
    let cfg = &scenario.pipeline;
    let aligned = [0usize];

    let mut variants = Vec::new();
    let mut sticky_state = None;
    for (name, sampling) in [("uniform", Sampling::Uniform), ("sticky", Sampling::Sticky)] {
        let (state, profile, _) = run_variant(scenario, sampling, &queries, &proj)?;
        let density = profile.aggregated_over(aligned);
        let retrieval =
            evaluate_density(&density, profile.grid(), &truth, cfg.tau, cfg.basis_size)?;
        variants.push(VariantReport {
            name: name.into(),
            retrieval,
        });
        if sampling == Sampling::Sticky {
            sticky_state = Some(state);
        }
    }
    let sticky = variants.pop().expect("two variants");
    let uniform = variants.pop().expect("two variants");

    let fine = QuadratureGrid::unit(scenario.oracle_grid_points)?;
    let attention = ContinuousAttention::new(cfg.basis_family()?, fine)?;
    let memory = sticky_state.expect("sticky variant ran").memory;
    let signal = memory.signal().ok_or(Error::EmptyMemory)?;
    let (_, fine_profile) = attention.attend(&queries, signal, &proj)?;
    let sticky_oracle_ratio = evaluate_density(
        &fine_profile.aggregated_over(aligned),
        fine_profile.grid(),
        &truth,
        cfg.tau,
        cfg.basis_size,
    )?
    .ratio;

    let aligned_query = QuerySet::new(queries.seeds().rows(0, 1).into_owned())?;
    let (stream, _) = generate_stream(&scenario.stream)?;
    let chunks: Vec<DMatrix<f64>> = stream.map(|c| pool_patches(&c)).collect();
    let m = truth.frames_per_chunk;
    let total = truth.total_frames();
    let span = truth.span_len();
    let needle_frames = || truth.chunk * m + truth.start..truth.chunk * m + truth.end;

    let last = chunks.last().expect("validated stream has chunks");
    let recent = attention_weights(&aligned_query, last, &proj)?;
    let mut recent_weights = vec![0.0; total];
    for (f, w) in recent.row(0).iter().enumerate() {
        recent_weights[(truth.chunks - 1) * m + f] = *w;
    }
    let no_ltm_ratio = discrete_ratio(&recent_weights, needle_frames(), total, span);

    let mut all = DMatrix::zeros(total, truth_dim(&chunks));
    for (c, x) in chunks.iter().enumerate() {
        all.rows_mut(c * m, m).copy_from(x);
    }
    let full = attention_weights(&aligned_query, &all, &proj)?;
    let full_weights: Vec<f64> = full.row(0).iter().copied().collect();
    let full_attention_ratio = discrete_ratio(&full_weights, needle_frames(), total, span);

    Ok(ScenarioReport {
        amplitude: scenario.stream.needle.amplitude,
        no_ltm_ratio,
        uniform,
        sticky,
        sticky_oracle_ratio,
        full_attention_ratio,
    })
}

fn truth_dim(chunks: &[DMatrix<f64>]) -> usize {
    chunks.first().map_or(0, |c| c.ncols())
}
