//! The long-term memory consolidation state machine.
//!
//! Each new chunk contracts the stored signal into `[0, τ]`, samples `T`
//! locations from it (uniformly, or following the attention histogram recorded
//! after the previous chunk), places the new chunk in `(τ, 1]` and refits.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::DensityProfile;
use crate::basis::BasisFamily;
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{self, PiecewiseCdf, SampleMode};
use crate::signal::{self, frame_times, ContinuousSignal};

/// How past locations are chosen during consolidation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Uniform,
    /// Proportional to the attention histogram of the previous chunk.
    #[default]
    Sticky,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Contraction factor, in `(0, 1)`.
    pub tau: f64,
    /// Number of past locations `T` resampled at each consolidation.
    pub past_samples: usize,
    pub sampling: Sampling,
    /// Histogram bins `D`.
    pub bins: usize,
    pub basis: BasisFamily,
    pub ridge: f64,
    pub sample_mode: SampleMode,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            tau: 0.75,
            past_samples: 256,
            sampling: Sampling::Sticky,
            bins: 64,
            basis: BasisFamily::default(),
            ridge: signal::DEFAULT_RIDGE,
            sample_mode: SampleMode::Stratified,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.past_samples == 0 {
            return Err(Error::Config("past sample count must be at least 1".into()));
        }
        if self.bins == 0 {
            return Err(Error::Config("histogram needs at least 1 bin".into()));
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(Error::Config(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        self.basis
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Past values drawn from the memory, with their source and target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PastSamples {
    /// Locations `u_i` in the current memory's `[0, 1]`.
    pub sources: Vec<f64>,
    /// Positions `τ·u_i` in the consolidated memory.
    pub targets: Vec<f64>,
    /// `x(u_i)` as rows of a `T × e` matrix.
    pub values: DMatrix<f64>,
}

/// Memory contents plus the bookkeeping needed for the next consolidation.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    config: MemoryConfig,
    signal: Option<ContinuousSignal>,
    histogram: Option<Vec<f64>>,
    chunks_seen: usize,
}

impl MemoryState {
    /// Empty memory.
    pub fn init(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            signal: None,
            histogram: None,
            chunks_seen: 0,
        })
    }

    /// Memory that already holds `signal` after `chunks_seen` chunks.
    pub fn with_signal(
        config: MemoryConfig,
        signal: ContinuousSignal,
        chunks_seen: usize,
    ) -> Result<Self> {
        config.validate()?;
        if chunks_seen == 0 {
            return Err(invalid(
                "a non-empty memory must have seen at least one chunk",
            ));
        }
        if signal.basis() != &config.basis {
            return Err(invalid("signal basis differs from the configured basis"));
        }
        Ok(Self {
            config,
            signal: Some(signal),
            histogram: None,
            chunks_seen,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn signal(&self) -> Option<&ContinuousSignal> {
        self.signal.as_ref()
    }

    pub fn histogram(&self) -> Option<&[f64]> {
        self.histogram.as_deref()
    }

    pub fn chunks_seen(&self) -> usize {
        self.chunks_seen
    }

    /// Replaces the stored histogram; masses are renormalized.
    pub fn with_histogram(mut self, masses: Vec<f64>) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if masses.is_empty()
            || masses.iter().any(|&m| !(m >= 0.0) || !m.is_finite())
            || !(total > 0.0)
        {
            return Err(invalid("histogram must be nonnegative with positive mass"));
        }
        self.histogram = Some(masses.into_iter().map(|m| m / total).collect());
        Ok(self)
    }

    /// Number of reals held by the state.
    pub fn footprint(&self) -> usize {
        let coefficients = self.signal.as_ref().map_or(0, |s| s.coefficients().len());
        coefficients + self.histogram.as_ref().map_or(0, Vec::len)
    }

    /// Samples `T` past locations and the signal values there.
    pub fn sample_past(&self) -> Result<PastSamples> {
        let signal = self.signal.as_ref().ok_or(Error::EmptyMemory)?;
        let count = self.config.past_samples;
        let mode = self.config.sample_mode.salted(self.chunks_seen as u64);
        let sources = match (self.config.sampling, &self.histogram) {
            (Sampling::Sticky, Some(hist)) => {
                PiecewiseCdf::from_histogram(hist, 0.0, 1.0)?.sample(count, mode)
            }
            // no attention recorded yet: fall back to uniform
            _ => mode.levels(count),
        };
        let values = signal.evaluate_many(&sources)?;
        let targets = sources.iter().map(|u| self.config.tau * u).collect();
        Ok(PastSamples {
            sources,
            targets,
            values,
        })
    }

    /// Folds a pooled chunk (`M × e`) into the memory.
    pub fn consolidate(&self, new_frames: &DMatrix<f64>) -> Result<MemoryState> {
        let m = new_frames.nrows();
        if m == 0 || new_frames.ncols() == 0 {
            return Err(invalid("new chunk has no frames"));
        }
        if new_frames.iter().any(|v| !v.is_finite()) {
            return Err(invalid("new chunk contains non-finite values"));
        }
        let cfg = &self.config;
        let signal = match &self.signal {
            None => signal::fit(new_frames, &frame_times(m), &cfg.basis, cfg.ridge)?,
            Some(current) => {
                if current.dim() != new_frames.ncols() {
                    return Err(shape(format!(
                        "memory width {} differs from chunk width {}",
                        current.dim(),
                        new_frames.ncols()
                    )));
                }
                let past = self.sample_past()?;
                let t = past.targets.len();
                let mut x = DMatrix::zeros(t + m, new_frames.ncols());
                x.rows_mut(0, t).copy_from(&past.values);
                x.rows_mut(t, m).copy_from(new_frames);
                let mut times = past.targets;
                times.extend(
                    frame_times(m)
                        .into_iter()
                        .map(|s| cfg.tau + (1.0 - cfg.tau) * s),
                );
                signal::fit(&x, &times, &cfg.basis, cfg.ridge)?
            }
        };
        Ok(MemoryState {
            config: self.config.clone(),
            signal: Some(signal),
            histogram: None,
            chunks_seen: self.chunks_seen + 1,
        })
    }

    /// Stores the per-bin attention mass of `profile` for the next consolidation.
    pub fn record_density(&self, profile: &DensityProfile, bins: usize) -> Result<MemoryState> {
        self.record_densities(&[profile], bins)
    }

    /// Like [`record_density`](Self::record_density), summing several profiles.
    pub fn record_densities(
        &self,
        profiles: &[&DensityProfile],
        bins: usize,
    ) -> Result<MemoryState> {
        let hist = density_histogram(profiles, bins)?;
        Ok(MemoryState {
            histogram: Some(hist),
            ..self.clone()
        })
    }
}

/// `p(d_j) ∝ Σ_h Σ_i ∫_{d_j} p_iʰ(t) dt` over `bins` equal bins of `[0, 1]`.
pub fn density_histogram(profiles: &[&DensityProfile], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(invalid("histogram needs at least 1 bin"));
    }
    if profiles.is_empty() {
        return Err(invalid("no density profiles to record"));
    }
    let mut hist = vec![0.0; bins];
    for profile in profiles {
        let grid = profile.grid();
        for h in 0..profile.heads() {
            for i in 0..profile.queries() {
                let p = profile.slice(h, i);
                for (j, mass) in hist.iter_mut().enumerate() {
                    let lo = j as f64 / bins as f64;
                    let hi = (j + 1) as f64 / bins as f64;
                    *mass += numerics::integrate_between(p, grid, lo, hi);
                }
            }
        }
    }
    let total: f64 = hist.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateDensity);
    }
    hist.iter_mut().for_each(|m| *m /= total);
    Ok(hist)
}

/// Frames ranked by aggregated attention density, highest first.
///
/// Frame `m` of `frame_count` sits at `(m + 0.5) / frame_count`; ties go to the
/// lower index.
pub fn top_density_intervals(
    profile: &DensityProfile,
    k: usize,
    frame_count: usize,
) -> Result<Vec<(usize, f64)>> {
    if k == 0 || k > frame_count {
        return Err(invalid(format!(
            "cannot select {k} of {frame_count} frames"
        )));
    }
    let agg = profile.aggregated();
    let mut ranked: Vec<(usize, f64)> = frame_times(frame_count)
        .into_iter()
        .enumerate()
        .map(|(m, t)| (m, numerics::interpolate(&agg, profile.grid(), t)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}
