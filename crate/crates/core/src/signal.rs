//! Continuous signals `x(t) = Bᵀψ(t)` fitted to discrete frame embeddings by
//! multivariate ridge regression, plus the frame-level helpers that feed them.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{check_domain, BasisFamily};
use crate::error::{invalid, shape, Error, Result};

/// Default ridge penalty.
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// One chunk of the stream: `M` frames of `P` patch embeddings of width `e`.
///
/// Stored row-major as frame × patch × channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameChunk {
    frames: usize,
    patches: usize,
    dim: usize,
    data: Vec<f64>,
    chunk_index: usize,
}

impl FrameChunk {
    pub fn new(
        frames: usize,
        patches: usize,
        dim: usize,
        data: Vec<f64>,
        chunk_index: usize,
    ) -> Result<Self> {
        if frames == 0 || patches == 0 || dim == 0 {
            return Err(invalid(format!(
                "chunk dimensions must be positive, got {frames}x{patches}x{dim}"
            )));
        }
        if data.len() != frames * patches * dim {
            return Err(shape(format!(
                "chunk of {frames}x{patches}x{dim} needs {} values, got {}",
                frames * patches * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("chunk has non-finite embeddings"));
        }
        Ok(Self {
            frames,
            patches,
            dim,
            data,
            chunk_index,
        })
    }

    /// Chunk with one patch per frame, from an `M × e` matrix.
    pub fn from_frames(frames: &DMatrix<f64>, chunk_index: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(frames.len());
        for row in frames.row_iter() {
            data.extend(row.iter());
        }
        Self::new(frames.nrows(), 1, frames.ncols(), data, chunk_index)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patches(&self) -> usize {
        self.patches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunk_index(&self) -> usize {
        self.chunk_index
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Embedding of patch `p` in frame `m`.
    pub fn patch(&self, m: usize, p: usize) -> &[f64] {
        let start = (m * self.patches + p) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All `M·P` patch embeddings as rows of a matrix.
    pub fn tokens(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.frames * self.patches, self.dim, &self.data)
    }
}

/// Mean over the `P` patches of each frame: an `M × e` matrix.
pub fn pool_patches(chunk: &FrameChunk) -> DMatrix<f64> {
    let (m, p, e) = (chunk.frames, chunk.patches, chunk.dim);
    let mut out = DMatrix::zeros(m, e);
    for frame in 0..m {
        for patch in 0..p {
            for (c, v) in chunk.patch(frame, patch).iter().enumerate() {
                out[(frame, c)] += v;
            }
        }
    }
    if p > 1 {
        out /= p as f64;
    }
    out
}

/// Box midpoints `(m + 0.5) / M`.
pub fn frame_times(count: usize) -> Vec<f64> {
    (0..count)
        .map(|m| (m as f64 + 0.5) / count as f64)
        .collect()
}

/// A vector-valued function on `[0, 1]` given by basis coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSignal {
    coefficients: DMatrix<f64>,
    basis: BasisFamily,
    ridge: f64,
}

impl ContinuousSignal {
    pub fn new(coefficients: DMatrix<f64>, basis: BasisFamily, ridge: f64) -> Result<Self> {
        basis.validate()?;
        if coefficients.nrows() != basis.size() {
            return Err(shape(format!(
                "coefficient rows {} differ from basis size {}",
                coefficients.nrows(),
                basis.size()
            )));
        }
        if coefficients.iter().any(|v| !v.is_finite()) {
            return Err(invalid("coefficients contain non-finite values"));
        }
        Ok(Self {
            coefficients,
            basis,
            ridge,
        })
    }

    /// `B`, an `N × e` matrix.
    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn basis(&self) -> &BasisFamily {
        &self.basis
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.coefficients.ncols()
    }

    /// `x(t) = Bᵀψ(t)`.
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let psi = self.basis.eval_psi(t)?;
        let mut out = vec![0.0; self.dim()];
        for (j, w) in psi.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.coefficients[(j, c)];
            }
        }
        Ok(out)
    }

    /// Evaluations at each time as rows of an `L × e` matrix.
    pub fn evaluate_many(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let f = self.basis.design_matrix(times)?;
        Ok(f.transpose() * &self.coefficients)
    }
}

/// Ridge fit `Bᵀ = XᵀFᵀ(FFᵀ + λI)⁻¹` of the rows of `x` placed at `times`.
///
/// When `N > S` the equivalent `S × S` system `B = F(FᵀF + λI)⁻¹X` is solved.
/// Rectangular bases have a diagonal `FFᵀ` and are solved in closed form.
pub fn fit(
    x: &DMatrix<f64>,
    times: &[f64],
    basis: &BasisFamily,
    ridge: f64,
) -> Result<ContinuousSignal> {
    basis.validate()?;
    let samples = x.nrows();
    if samples == 0 {
        return Err(invalid("cannot fit an empty sequence"));
    }
    if times.len() != samples {
        return Err(shape(format!("{} rows but {} times", samples, times.len())));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(invalid(format!(
            "ridge penalty must be finite and >= 0, got {ridge}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(invalid("inputs contain non-finite values"));
    }
    for w in times.windows(2) {
        if w[1] < w[0] {
            return Err(invalid("times must be nondecreasing"));
        }
    }
    for &t in times {
        check_domain(t)?;
    }

    let b = match *basis {
        BasisFamily::Rectangular { size } => fit_boxes(x, times, size, ridge)?,
        _ => {
            let f = basis.design_matrix(times)?;
            if basis.size() > samples {
                if ridge == 0.0 {
                    return Err(Error::Singular(format!(
                        "FFᵀ has rank at most {samples} < {} without a ridge penalty",
                        basis.size()
                    )));
                }
                solve_dual(&f, x, ridge)?
            } else {
                solve_primal(&f, x, ridge)?
            }
        }
    };
    ContinuousSignal::new(b, *basis, ridge)
}

fn fit_boxes(x: &DMatrix<f64>, times: &[f64], size: usize, ridge: f64) -> Result<DMatrix<f64>> {
    let mut sums = DMatrix::zeros(size, x.ncols());
    let mut counts = vec![0usize; size];
    for (l, &t) in times.iter().enumerate() {
        let j = BasisFamily::box_index(size, t);
        counts[j] += 1;
        for c in 0..x.ncols() {
            sums[(j, c)] += x[(l, c)];
        }
    }
    if ridge == 0.0 {
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Singular(format!(
                "box {j} is empty and the ridge penalty is 0"
            )));
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        let denom = n as f64 + ridge;
        if n > 0 || ridge > 0.0 {
            sums.row_mut(j).scale_mut(1.0 / denom);
        }
    }
    Ok(sums)
}

/// `(FFᵀ + λI)⁻¹ F X`.
pub(crate) fn solve_primal(f: &DMatrix<f64>, x: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let mut gram = f * f.transpose();
    for j in 0..gram.nrows() {
        gram[(j, j)] += ridge;
    }
    solve_spd(gram, f * x)
}

/// `F (FᵀF + λI)⁻¹ X`.
pub(crate) fn solve_dual(f: &DMatrix<f64>, x: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let mut gram = f.transpose() * f;
    for j in 0..gram.nrows() {
        gram[(j, j)] += ridge;
    }
    let a = solve_spd(gram, x.clone())?;
    Ok(f * a)
}

/// Cholesky solve with a pivoted-LU fallback.
fn solve_spd(a: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        let sol = chol.solve(&rhs);
        if sol.iter().all(|v| v.is_finite()) {
            return Ok(sol);
        }
    }
    let lu = a.full_piv_lu();
    lu.solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular("normal equations are not invertible".into()))
}
