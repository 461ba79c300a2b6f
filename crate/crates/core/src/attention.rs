//! Discrete multi-head cross-attention (short-term memory) and continuous
//! Gibbs-density attention over a [`ContinuousSignal`] (long-term memory).
//!
//! Both paths share one [`ProjectionSet`]. For the continuous path the basis
//! is tabulated once on the quadrature grid ([`PsiTable`]) and reused by every
//! head and query, so scores are `Qʰ (W_Kʰ)ᵀ Bᵀ Ψ` and the context is
//! `(W_Vʰ)ᵀ Bᵀ ∫ p ψ dt` with the integral taken componentwise on the grid.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisFamily;
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{self, QuadratureGrid};
use crate::signal::ContinuousSignal;

/// Per-head query/key/value projections plus output and token projections.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    heads: usize,
    query: Vec<DMatrix<f64>>,
    key: Vec<DMatrix<f64>>,
    value: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
    token: DMatrix<f64>,
}

/// Which per-head projection to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

fn split_heads(full: &DMatrix<f64>, heads: usize) -> Vec<DMatrix<f64>> {
    let d = full.ncols() / heads;
    (0..heads)
        .map(|h| full.columns(h * d, d).into_owned())
        .collect()
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    // fix column signs so the draw is unique given the Gaussian matrix
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl ProjectionSet {
    /// Builds a set from full `e × e` query/key/value matrices whose column
    /// blocks of width `e / H` are the per-head projections.
    pub fn from_full(
        heads: usize,
        query: &DMatrix<f64>,
        key: &DMatrix<f64>,
        value: &DMatrix<f64>,
        output: DMatrix<f64>,
        token: DMatrix<f64>,
    ) -> Result<Self> {
        let e = query.nrows();
        if heads == 0 || e == 0 || e % heads != 0 {
            return Err(invalid(format!(
                "dimension {e} is not divisible by {heads} heads"
            )));
        }
        for (name, m) in [
            ("query", query),
            ("key", key),
            ("value", value),
            ("output", &output),
        ] {
            if m.nrows() != e || m.ncols() != e {
                return Err(shape(format!("{name} projection must be {e}x{e}")));
            }
        }
        if token.nrows() != e || token.ncols() == 0 {
            return Err(shape(format!("token projection must have {e} rows")));
        }
        let all = [query, key, value, &output, &token];
        if all.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(invalid("projection weights contain non-finite values"));
        }
        Ok(Self {
            heads,
            query: split_heads(query, heads),
            key: split_heads(key, heads),
            value: split_heads(value, heads),
            output,
            token,
        })
    }

    /// Single head, every projection the identity.
    pub fn identity(dim: usize) -> Self {
        let i = DMatrix::identity(dim, dim);
        Self::from_full(1, &i, &i, &i, i.clone(), i.clone())
            .expect("identity projections are valid")
    }

    /// Independent random orthogonal matrices drawn from `seed`.
    pub fn seeded_orthogonal(dim: usize, heads: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Self::seeded(dim, heads, out_dim, seed, false)
    }

    /// Like [`seeded_orthogonal`](Self::seeded_orthogonal) but with `W_K = W_Q`,
    /// so a query seed aligned with an embedding scores it positively.
    pub fn seeded_tied(dim: usize, heads: usize, out_dim: usize, seed: u64) -> Result<Self> {
        Self::seeded(dim, heads, out_dim, seed, true)
    }

    fn seeded(dim: usize, heads: usize, out_dim: usize, seed: u64, tied: bool) -> Result<Self> {
        if dim == 0 || out_dim == 0 {
            return Err(invalid("projection dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(dim, &mut rng);
        let k = if tied {
            q.clone()
        } else {
            random_orthogonal(dim, &mut rng)
        };
        let v = random_orthogonal(dim, &mut rng);
        let z = random_orthogonal(dim, &mut rng);
        let big = random_orthogonal(dim.max(out_dim), &mut rng);
        let token = big.view((0, 0), (dim, out_dim)).into_owned();
        Self::from_full(heads, &q, &k, &v, z, token)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.output.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn out_dim(&self) -> usize {
        self.token.ncols()
    }

    pub fn head(&self, which: Projection, h: usize) -> &DMatrix<f64> {
        match which {
            Projection::Query => &self.query[h],
            Projection::Key => &self.key[h],
            Projection::Value => &self.value[h],
        }
    }

    /// The per-head blocks of one projection reassembled into an `e × e` matrix.
    pub fn full(&self, which: Projection) -> DMatrix<f64> {
        let parts = match which {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        };
        let d = self.head_dim();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (h, p) in parts.iter().enumerate() {
            out.columns_mut(h * d, d).copy_from(p);
        }
        out
    }

    /// `W_Z`.
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }

    /// `W_proj`.
    pub fn token(&self) -> &DMatrix<f64> {
        &self.token
    }

    /// Number of stored weights.
    pub fn parameter_count(&self) -> usize {
        4 * self.dim() * self.dim() + self.token.len()
    }
}

/// `R` query seeds as rows of an `R × e` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet(DMatrix<f64>);

impl QuerySet {
    pub fn new(seeds: DMatrix<f64>) -> Result<Self> {
        if seeds.nrows() == 0 || seeds.ncols() == 0 {
            return Err(invalid("query set needs at least one non-empty row"));
        }
        if seeds.iter().any(|v| !v.is_finite()) {
            return Err(invalid("query seeds contain non-finite values"));
        }
        Ok(Self(seeds))
    }

    /// Gaussian seeds scaled to unit row norm.
    pub fn seeded(count: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: DMatrix<f64> =
            DMatrix::from_fn(count, dim, |_, _| StandardNormal.sample(&mut rng));
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        Self::new(m)
    }

    pub fn seeds(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Right-multiplies `x` by head `h`'s query, key or value matrix.
pub fn project(
    x: &DMatrix<f64>,
    which: Projection,
    h: usize,
    proj: &ProjectionSet,
) -> Result<DMatrix<f64>> {
    if x.ncols() != proj.dim() {
        return Err(shape(format!(
            "input width {} differs from model width {}",
            x.ncols(),
            proj.dim()
        )));
    }
    if h >= proj.heads() {
        return Err(invalid(format!(
            "head {h} out of range for {} heads",
            proj.heads()
        )));
    }
    Ok(x * proj.head(which, h))
}

fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row /= sum;
    }
}

/// Discrete softmax cross-attention of the query seeds over `tokens` (`S × e`).
pub fn stm_attention(
    queries: &QuerySet,
    tokens: &DMatrix<f64>,
    proj: &ProjectionSet,
) -> Result<DMatrix<f64>> {
    if tokens.nrows() == 0 {
        return Err(Error::EmptyMemory);
    }
    check_width(queries, proj)?;
    if tokens.ncols() != proj.dim() {
        return Err(shape(format!(
            "token width {} differs from model width {}",
            tokens.ncols(),
            proj.dim()
        )));
    }
    let d = proj.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut concat = DMatrix::zeros(queries.len(), proj.dim());
    for h in 0..proj.heads() {
        let q = queries.seeds() * proj.head(Projection::Query, h);
        let k = tokens * proj.head(Projection::Key, h);
        let v = tokens * proj.head(Projection::Value, h);
        let mut a = (q * k.transpose()) * scale;
        softmax_rows(&mut a);
        concat.columns_mut(h * d, d).copy_from(&(a * v));
    }
    Ok(concat * proj.output())
}

fn check_width(queries: &QuerySet, proj: &ProjectionSet) -> Result<()> {
    if queries.dim() != proj.dim() {
        return Err(shape(format!(
            "query width {} differs from model width {}",
            queries.dim(),
            proj.dim()
        )));
    }
    Ok(())
}

/// Values indexed by head, query and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadQueryTable {
    heads: usize,
    queries: usize,
    points: usize,
    data: Vec<f64>,
}

impl HeadQueryTable {
    pub fn zeros(heads: usize, queries: usize, points: usize) -> Self {
        Self {
            heads,
            queries,
            points,
            data: vec![0.0; heads * queries * points],
        }
    }

    pub fn from_vec(heads: usize, queries: usize, points: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * queries * points {
            return Err(shape(format!(
                "table {heads}x{queries}x{points} needs {} values, got {}",
                heads * queries * points,
                data.len()
            )));
        }
        Ok(Self {
            heads,
            queries,
            points,
            data,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slice(&self, h: usize, i: usize) -> &[f64] {
        let start = (h * self.queries + i) * self.points;
        &self.data[start..start + self.points]
    }

    pub fn slice_mut(&mut self, h: usize, i: usize) -> &mut [f64] {
        let start = (h * self.queries + i) * self.points;
        &mut self.data[start..start + self.points]
    }

    fn set_head(&mut self, h: usize, rows: &DMatrix<f64>) {
        for i in 0..self.queries {
            for (k, v) in self.slice_mut(h, i).iter_mut().enumerate() {
                *v = rows[(i, k)];
            }
        }
    }

    fn head_matrix(&self, h: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.queries, self.points, |i, k| self.slice(h, i)[k])
    }
}

/// Gibbs densities `p_iʰ(t)` sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityProfile {
    grid: QuadratureGrid,
    densities: HeadQueryTable,
}

impl DensityProfile {
    /// Wraps already-normalized densities, checking each slice integrates to 1.
    pub fn new(grid: QuadratureGrid, densities: HeadQueryTable) -> Result<Self> {
        if densities.points() != grid.len() {
            return Err(shape("density table and grid lengths differ"));
        }
        for h in 0..densities.heads() {
            for i in 0..densities.queries() {
                let s = densities.slice(h, i);
                if s.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(invalid(format!(
                        "density slice ({h},{i}) has invalid entries"
                    )));
                }
                let mass = numerics::integrate(s, &grid)?;
                if (mass - 1.0).abs() > 1e-6 {
                    return Err(invalid(format!(
                        "density slice ({h},{i}) integrates to {mass}"
                    )));
                }
            }
        }
        Ok(Self { grid, densities })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    pub fn table(&self) -> &HeadQueryTable {
        &self.densities
    }

    pub fn heads(&self) -> usize {
        self.densities.heads()
    }

    pub fn queries(&self) -> usize {
        self.densities.queries()
    }

    pub fn slice(&self, h: usize, i: usize) -> &[f64] {
        self.densities.slice(h, i)
    }

    /// Mean over queries of head `h`.
    pub fn head_mean(&self, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for i in 0..self.queries() {
            for (o, p) in out.iter_mut().zip(self.slice(h, i)) {
                *o += p;
            }
        }
        let n = self.queries() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Mean over heads and queries; itself a density.
    pub fn aggregated(&self) -> Vec<f64> {
        self.aggregated_over(0..self.queries())
    }

    /// Mean over heads and the given subset of queries.
    pub fn aggregated_over(&self, queries: impl IntoIterator<Item = usize> + Clone) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        let mut n = 0usize;
        for h in 0..self.heads() {
            for i in queries.clone() {
                for (o, p) in out.iter_mut().zip(self.slice(h, i)) {
                    *o += p;
                }
                n += 1;
            }
        }
        out.iter_mut().for_each(|o| *o /= n.max(1) as f64);
        out
    }

    /// Number of stored density samples.
    pub fn sample_count(&self) -> usize {
        self.densities.data().len()
    }
}

/// ψ tabulated on a quadrature grid.
#[derive(Debug, Clone)]
pub struct PsiTable {
    basis: BasisFamily,
    grid: QuadratureGrid,
    kind: PsiKind,
}

#[derive(Debug, Clone)]
enum PsiKind {
    /// Box index of each grid point.
    Boxes(Vec<usize>),
    /// Dense `N × G` matrix.
    Dense(DMatrix<f64>),
}

impl PsiTable {
    pub fn new(basis: BasisFamily, grid: QuadratureGrid) -> Result<Self> {
        basis.validate()?;
        if grid.start() < 0.0 || grid.end() > 1.0 {
            return Err(invalid("attention grid must lie within [0, 1]"));
        }
        let kind = match basis {
            BasisFamily::Rectangular { size } => PsiKind::Boxes(
                grid.points()
                    .iter()
                    .map(|&t| BasisFamily::box_index(size, t))
                    .collect(),
            ),
            _ => PsiKind::Dense(basis.design_matrix(grid.points())?),
        };
        Ok(Self { basis, grid, kind })
    }

    pub fn basis(&self) -> &BasisFamily {
        &self.basis
    }

    pub fn grid(&self) -> &QuadratureGrid {
        &self.grid
    }

    /// `C Ψ` for `C` of shape `R × N`, giving `R × G`.
    fn expand(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            PsiKind::Boxes(idx) => DMatrix::from_fn(c.nrows(), idx.len(), |i, k| c[(i, idx[k])]),
            PsiKind::Dense(psi) => c * psi,
        }
    }

    /// `W Ψᵀ` for `W` of shape `R × G`, giving `R × N`.
    fn contract(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.kind {
            PsiKind::Boxes(idx) => {
                let mut out = DMatrix::zeros(w.nrows(), self.basis.size());
                for (k, &j) in idx.iter().enumerate() {
                    for i in 0..w.nrows() {
                        out[(i, j)] += w[(i, k)];
                    }
                }
                out
            }
            PsiKind::Dense(psi) => w * psi.transpose(),
        }
    }
}

/// Continuous attention with a cached [`PsiTable`].
#[derive(Debug, Clone)]
pub struct ContinuousAttention {
    psi: PsiTable,
}

impl ContinuousAttention {
    pub fn new(basis: BasisFamily, grid: QuadratureGrid) -> Result<Self> {
        Ok(Self {
            psi: PsiTable::new(basis, grid)?,
        })
    }

    pub fn grid(&self) -> &QuadratureGrid {
        self.psi.grid()
    }

    fn check(
        &self,
        queries: &QuerySet,
        signal: &ContinuousSignal,
        proj: &ProjectionSet,
    ) -> Result<()> {
        check_width(queries, proj)?;
        if signal.dim() != proj.dim() {
            return Err(shape(format!(
                "signal width {} differs from model width {}",
                signal.dim(),
                proj.dim()
            )));
        }
        if signal.basis() != self.psi.basis() {
            return Err(invalid("signal basis differs from the tabulated basis"));
        }
        Ok(())
    }

    /// `s_iʰ(t_k) = q_iᵀ (W_Kʰ)ᵀ Bᵀ ψ(t_k)`.
    pub fn scores(
        &self,
        queries: &QuerySet,
        signal: &ContinuousSignal,
        proj: &ProjectionSet,
    ) -> Result<HeadQueryTable> {
        self.check(queries, signal, proj)?;
        let mut table = HeadQueryTable::zeros(proj.heads(), queries.len(), self.grid().len());
        let bt = signal.coefficients().transpose();
        for h in 0..proj.heads() {
            let q = queries.seeds() * proj.head(Projection::Query, h);
            let c = (q * proj.head(Projection::Key, h).transpose()) * &bt;
            table.set_head(h, &self.psi.expand(&c));
        }
        Ok(table)
    }

    /// LTM context from precomputed scores; returns `Z_LTM` (`R × e`) and the densities.
    pub fn context_from_scores(
        &self,
        scores: &HeadQueryTable,
        signal: &ContinuousSignal,
        proj: &ProjectionSet,
    ) -> Result<(DMatrix<f64>, DensityProfile)> {
        if scores.heads() != proj.heads() || scores.points() != self.grid().len() {
            return Err(shape("score table does not match heads or grid"));
        }
        let profile = gibbs_density(scores, self.grid())?;
        let d = proj.head_dim();
        let weights = DVector::from_column_slice(self.grid().weights());
        let mut concat = DMatrix::zeros(scores.queries(), proj.dim());
        for h in 0..proj.heads() {
            let mut pw = profile.table().head_matrix(h);
            for mut row in pw.row_iter_mut() {
                row.component_mul_assign(&weights.transpose());
            }
            // m_iʰ = ∫ p_iʰ ψ dt for every query, as rows
            let moments = self.psi.contract(&pw);
            let z = moments * signal.coefficients() * proj.head(Projection::Value, h);
            concat.columns_mut(h * d, d).copy_from(&z);
        }
        Ok((concat * proj.output(), profile))
    }

    /// Gibbs-density attention of the query seeds over the signal.
    pub fn attend(
        &self,
        queries: &QuerySet,
        signal: &ContinuousSignal,
        proj: &ProjectionSet,
    ) -> Result<(DMatrix<f64>, DensityProfile)> {
        let scores = self.scores(queries, signal, proj)?;
        self.context_from_scores(&scores, signal, proj)
    }
}

/// Free-function form of [`ContinuousAttention::scores`].
pub fn continuous_scores(
    queries: &QuerySet,
    signal: &ContinuousSignal,
    proj: &ProjectionSet,
    grid: &QuadratureGrid,
) -> Result<HeadQueryTable> {
    ContinuousAttention::new(*signal.basis(), grid.clone())?.scores(queries, signal, proj)
}

/// Normalizes every `(h, i)` slice of `scores` into a Gibbs density.
pub fn gibbs_density(scores: &HeadQueryTable, grid: &QuadratureGrid) -> Result<DensityProfile> {
    if scores.points() != grid.len() {
        return Err(shape("score table and grid lengths differ"));
    }
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("scores contain non-finite values"));
    }
    let mut out = HeadQueryTable::zeros(scores.heads(), scores.queries(), scores.points());
    for h in 0..scores.heads() {
        for i in 0..scores.queries() {
            numerics::normalized_exp_into(scores.slice(h, i), grid.weights(), out.slice_mut(h, i))?;
        }
    }
    Ok(DensityProfile {
        grid: grid.clone(),
        densities: out,
    })
}

/// Free-function form of [`ContinuousAttention::attend`].
pub fn ltm_attention(
    queries: &QuerySet,
    signal: &ContinuousSignal,
    proj: &ProjectionSet,
    grid: &QuadratureGrid,
) -> Result<(DMatrix<f64>, DensityProfile)> {
    ContinuousAttention::new(*signal.basis(), grid.clone())?.attend(queries, signal, proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::uniform_grid;
    use crate::signal::{fit, frame_times};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(a.nrows(), b.ncols());
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                let mut acc = 0.0;
                for k in 0..a.ncols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn projection_examples() {
        let id = ProjectionSet::identity(3);
        let x = random(4, 3, 1);
        assert_eq!(project(&x, Projection::Key, 0, &id).unwrap(), x);

        let mut wq = DMatrix::zeros(3, 3);
        wq[(0, 1)] = 1.0;
        wq[(1, 1)] = 2.0;
        wq[(2, 1)] = -1.0;
        let i = DMatrix::identity(3, 3);
        let p = ProjectionSet::from_full(1, &wq, &i, &i, i.clone(), i.clone()).unwrap();
        let y = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let out = project(&y, Projection::Query, 0, &p).unwrap();
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(out[(0, 1)], 1.0 + 4.0 - 3.0);

        let p = ProjectionSet::seeded_orthogonal(8, 2, 8, 3).unwrap();
        let x = random(5, 8, 4);
        for h in 0..2 {
            for which in [Projection::Query, Projection::Key, Projection::Value] {
                let got = project(&x, which, h, &p).unwrap();
                let want = naive_matmul(&x, p.head(which, h));
                assert!((got - want).amax() < 1e-12);
            }
        }
        assert!(project(&random(2, 5, 1), Projection::Query, 0, &p).is_err());
        assert!(project(&x, Projection::Query, 2, &p).is_err());
    }

    #[test]
    fn seeded_projections_are_orthogonal_and_reproducible() {
        let a = ProjectionSet::seeded_orthogonal(6, 3, 4, 11).unwrap();
        let b = ProjectionSet::seeded_orthogonal(6, 3, 4, 11).unwrap();
        assert_eq!(a, b);
        let q = a.full(Projection::Query);
        assert!((q.transpose() * &q - DMatrix::identity(6, 6)).amax() < 1e-12);
        assert_eq!(a.token().shape(), (6, 4));
        let t = ProjectionSet::seeded_tied(6, 3, 6, 11).unwrap();
        assert_eq!(t.full(Projection::Query), t.full(Projection::Key));
    }

    #[test]
    fn projection_validation() {
        let i = DMatrix::identity(4, 4);
        assert!(ProjectionSet::from_full(3, &i, &i, &i, i.clone(), i.clone()).is_err());
        let mut bad = i.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(ProjectionSet::from_full(2, &i, &bad, &i, i.clone(), i.clone()).is_err());
        assert!(
            ProjectionSet::from_full(2, &i, &i, &i, DMatrix::identity(3, 3), i.clone()).is_err()
        );
    }

    #[test]
    fn stm_single_key_returns_projected_value() {
        let p = ProjectionSet::seeded_orthogonal(4, 2, 4, 5).unwrap();
        let x = random(1, 4, 6);
        let want = (&x * p.full(Projection::Value)) * p.output();
        for seed in 0..3 {
            let q = QuerySet::new(random(3, 4, seed)).unwrap();
            let z = stm_attention(&q, &x, &p).unwrap();
            for i in 0..3 {
                for c in 0..4 {
                    assert_abs_diff_eq!(z[(i, c)], want[(0, c)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn stm_identical_keys_average_values() {
        let i = DMatrix::identity(2, 2);
        // keys only see the first channel, which is constant across tokens
        let key = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let p = ProjectionSet::from_full(1, &i, &key, &i, i.clone(), i.clone()).unwrap();
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 3.0, 1.0, 6.0]);
        let q = QuerySet::new(random(2, 2, 7)).unwrap();
        let z = stm_attention(&q, &x, &p).unwrap();
        for r in 0..2 {
            assert_abs_diff_eq!(z[(r, 0)], 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(z[(r, 1)], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn stm_rejects_empty_memory() {
        let p = ProjectionSet::identity(2);
        let q = QuerySet::new(random(1, 2, 1)).unwrap();
        assert!(matches!(
            stm_attention(&q, &DMatrix::zeros(0, 2), &p),
            Err(Error::EmptyMemory)
        ));
    }

    fn signal(n: usize, e: usize, seed: u64, basis: BasisFamily) -> ContinuousSignal {
        ContinuousSignal::new(random(n, e, seed), basis, 1e-3).unwrap()
    }

    #[test]
    fn zero_signal_scores_vanish() {
        let basis = BasisFamily::rectangular(5).unwrap();
        let sig = ContinuousSignal::new(DMatrix::zeros(5, 4), basis, 1e-3).unwrap();
        let p = ProjectionSet::seeded_orthogonal(4, 2, 4, 1).unwrap();
        let q = QuerySet::seeded(3, 4, 2).unwrap();
        let grid = uniform_grid(0.0, 1.0, 101).unwrap();
        let s = continuous_scores(&q, &sig, &p, &grid).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rectangular_scores_are_piecewise_constant() {
        let basis = BasisFamily::rectangular(4).unwrap();
        let sig = signal(4, 4, 3, basis);
        let p = ProjectionSet::seeded_orthogonal(4, 2, 4, 1).unwrap();
        let q = QuerySet::seeded(2, 4, 2).unwrap();
        let grid = uniform_grid(0.0, 1.0, 401).unwrap();
        let s = continuous_scores(&q, &sig, &p, &grid).unwrap();
        for h in 0..2 {
            for i in 0..2 {
                let mut distinct: Vec<f64> = s.slice(h, i).to_vec();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup();
                assert!(distinct.len() <= 4);
            }
        }
    }

    #[test]
    fn scores_match_pointwise_oracle() {
        for basis in [
            BasisFamily::rectangular(7).unwrap(),
            BasisFamily::gaussian(7, None).unwrap(),
        ] {
            let sig = signal(7, 6, 4, basis);
            let p = ProjectionSet::seeded_orthogonal(6, 3, 6, 5).unwrap();
            let q = QuerySet::seeded(4, 6, 6).unwrap();
            let grid = uniform_grid(0.0, 1.0, 257).unwrap();
            let s = continuous_scores(&q, &sig, &p, &grid).unwrap();
            for h in 0..3 {
                let qh = q.seeds() * p.head(Projection::Query, h);
                for (k, &t) in grid.points().iter().enumerate() {
                    let x = DMatrix::from_row_slice(1, 6, &sig.evaluate(t).unwrap());
                    let key = x * p.head(Projection::Key, h);
                    for i in 0..4 {
                        let want = qh.row(i).dot(&key.row(0));
                        assert_abs_diff_eq!(s.slice(h, i)[k], want, epsilon = 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn gibbs_examples() {
        let grid = uniform_grid(0.0, 1.0, 1000).unwrap();
        let zero = HeadQueryTable::zeros(2, 3, 1000);
        let prof = gibbs_density(&zero, &grid).unwrap();
        assert!(prof.table().data().iter().all(|&p| (p - 1.0).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2 * 3 * 1000)
            .map(|_| rng.gen_range(-4.0..4.0))
            .collect();
        let s = HeadQueryTable::from_vec(2, 3, 1000, data).unwrap();
        let mut shifted = s.clone();
        for h in 0..2 {
            for i in 0..3 {
                let c = (h * 3 + i) as f64 * 17.0 - 40.0;
                shifted.slice_mut(h, i).iter_mut().for_each(|v| *v += c);
            }
        }
        let a = gibbs_density(&s, &grid).unwrap();
        let b = gibbs_density(&shifted, &grid).unwrap();
        for (x, y) in a.table().data().iter().zip(b.table().data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        let mut lin = HeadQueryTable::zeros(1, 1, 1000);
        lin.slice_mut(0, 0).copy_from_slice(grid.points());
        let p = gibbs_density(&lin, &grid).unwrap();
        let e1 = std::f64::consts::E - 1.0;
        for (v, t) in p.slice(0, 0).iter().zip(grid.points()) {
            assert_abs_diff_eq!(*v, t.exp() / e1, epsilon = 1e-5);
        }
    }

    #[test]
    fn uniform_density_gives_mean_of_boxes() {
        let basis = BasisFamily::rectangular(4).unwrap();
        let sig = signal(4, 4, 8, basis);
        let p = ProjectionSet::seeded_orthogonal(4, 2, 4, 9).unwrap();
        let att = ContinuousAttention::new(basis, uniform_grid(0.0, 1.0, 4001).unwrap()).unwrap();
        let q = QuerySet::seeded(2, 4, 10).unwrap();
        let (z, _) = att
            .context_from_scores(&HeadQueryTable::zeros(2, 2, 4001), &sig, &p)
            .unwrap();
        let mean = DMatrix::from_fn(1, 4, |_, c| sig.coefficients().column(c).mean());
        let want = mean * p.full(Projection::Value) * p.output();
        for i in 0..q.len() {
            for c in 0..4 {
                // grid points on box edges are split between neighbours
                assert_abs_diff_eq!(z[(i, c)], want[(0, c)], epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn peaked_scores_recover_the_peak_value() {
        let basis = BasisFamily::rectangular(8).unwrap();
        let sig = signal(8, 4, 11, basis);
        let p = ProjectionSet::seeded_orthogonal(4, 1, 4, 12).unwrap();
        let grid = uniform_grid(0.0, 1.0, 1000).unwrap();
        let att = ContinuousAttention::new(basis, grid.clone()).unwrap();
        let mut s = HeadQueryTable::zeros(1, 1, 1000);
        for (k, &t) in grid.points().iter().enumerate() {
            if BasisFamily::box_index(8, t) == 5 {
                s.slice_mut(0, 0)[k] = 50.0;
            }
        }
        let (z, _) = att.context_from_scores(&s, &sig, &p).unwrap();
        let x = DMatrix::from_row_slice(1, 4, &sig.evaluate(5.5 / 8.0).unwrap());
        let want = x * p.full(Projection::Value) * p.output();
        for c in 0..4 {
            assert_abs_diff_eq!(z[(0, c)], want[(0, c)], epsilon = 1e-3);
        }
    }

    #[test]
    fn context_is_convex_combination_of_values() {
        let basis = BasisFamily::gaussian(9, None).unwrap();
        let sig = signal(9, 4, 13, basis);
        let i4 = DMatrix::identity(4, 4);
        // identity output projection exposes the per-head contexts directly
        let base = ProjectionSet::seeded_orthogonal(4, 2, 4, 14).unwrap();
        let p = ProjectionSet::from_full(
            2,
            &base.full(Projection::Query),
            &base.full(Projection::Key),
            &base.full(Projection::Value),
            i4.clone(),
            i4,
        )
        .unwrap();
        let q = QuerySet::seeded(3, 4, 15).unwrap();
        let grid = uniform_grid(0.0, 1.0, 500).unwrap();
        let (z, _) = ltm_attention(&q, &sig, &p, &grid).unwrap();
        let values = sig.evaluate_many(grid.points()).unwrap() * p.full(Projection::Value);
        for c in 0..4 {
            let lo = values.column(c).min();
            let hi = values.column(c).max();
            for i in 0..3 {
                assert!(z[(i, c)] >= lo - 1e-8 && z[(i, c)] <= hi + 1e-8);
            }
        }
    }

    #[test]
    fn context_is_shift_invariant() {
        let basis = BasisFamily::rectangular(16).unwrap();
        let sig = signal(16, 8, 16, basis);
        let p = ProjectionSet::seeded_orthogonal(8, 4, 8, 17).unwrap();
        let q = QuerySet::seeded(3, 8, 18).unwrap();
        let att = ContinuousAttention::new(basis, uniform_grid(0.0, 1.0, 1000).unwrap()).unwrap();
        let s = att.scores(&q, &sig, &p).unwrap();
        let mut shifted = s.clone();
        shifted.slice_mut(2, 1).iter_mut().for_each(|v| *v += 123.0);
        shifted.slice_mut(0, 0).iter_mut().for_each(|v| *v -= 7.5);
        let (a, _) = att.context_from_scores(&s, &sig, &p).unwrap();
        let (b, _) = att.context_from_scores(&shifted, &sig, &p).unwrap();
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn profile_slices_are_normalized() {
        let basis = BasisFamily::rectangular(32).unwrap();
        let x = random(64, 8, 19) * 3.0;
        let sig = fit(&x, &frame_times(64), &basis, 1e-3).unwrap();
        let p = ProjectionSet::seeded_orthogonal(8, 2, 8, 20).unwrap();
        let q = QuerySet::seeded(4, 8, 21).unwrap();
        let grid = uniform_grid(0.0, 1.0, 1000).unwrap();
        let (_, prof) = ltm_attention(&q, &sig, &p, &grid).unwrap();
        for h in 0..2 {
            for i in 0..4 {
                let m = numerics::integrate(prof.slice(h, i), &grid).unwrap();
                assert!((m - 1.0).abs() < 1e-6);
            }
        }
        let agg = prof.aggregated();
        assert!((numerics::integrate(&agg, &grid).unwrap() - 1.0).abs() < 1e-9);
        assert!(DensityProfile::new(grid.clone(), prof.table().clone()).is_ok());
        assert!(DensityProfile::new(grid, HeadQueryTable::zeros(1, 1, 1000)).is_err());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let basis = BasisFamily::rectangular(4).unwrap();
        let sig = signal(4, 4, 1, basis);
        let p = ProjectionSet::identity(6);
        let q = QuerySet::seeded(2, 6, 1).unwrap();
        let grid = uniform_grid(0.0, 1.0, 10).unwrap();
        assert!(matches!(
            ltm_attention(&q, &sig, &p, &grid),
            Err(Error::ShapeMismatch(_))
        ));
        let other = ContinuousAttention::new(BasisFamily::rectangular(5).unwrap(), grid).unwrap();
        assert!(other
            .attend(
                &QuerySet::seeded(2, 4, 1).unwrap(),
                &sig,
                &ProjectionSet::identity(4)
            )
            .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn brute_stm(y: &DMatrix<f64>, x: &DMatrix<f64>, proj: &ProjectionSet) -> DMatrix<f64> {
            let d = proj.head_dim();
            let mut concat = DMatrix::zeros(y.nrows(), proj.dim());
            for h in 0..proj.heads() {
                let q = naive_matmul(y, proj.head(Projection::Query, h));
                let k = naive_matmul(x, proj.head(Projection::Key, h));
                let v = naive_matmul(x, proj.head(Projection::Value, h));
                for i in 0..y.nrows() {
                    let s: Vec<f64> = (0..x.nrows())
                        .map(|j| {
                            (0..d).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() / (d as f64).sqrt()
                        })
                        .collect();
                    let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = s.iter().map(|v| (v - top).exp()).collect();
                    let z: f64 = w.iter().sum();
                    for c in 0..d {
                        concat[(i, h * d + c)] =
                            (0..x.nrows()).map(|j| w[j] * v[(j, c)]).sum::<f64>() / z;
                    }
                }
            }
            naive_matmul(&concat, proj.output())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn stm_matches_brute_force(seed in any::<u64>(), s in 1usize..=8, r in 1usize..=4, heads in 1usize..=2, half in 1usize..=4) {
                let e = heads * half;
                let y = random(r, e, seed);
                let x = random(s, e, seed ^ 0x5eed);
                let proj = ProjectionSet::seeded_orthogonal(e, heads, e, seed).unwrap();
                let got = stm_attention(&QuerySet::new(y.clone()).unwrap(), &x, &proj).unwrap();
                let want = brute_stm(&y, &x, &proj);
                prop_assert!((got - want).amax() <= 1e-10);
            }

            #[test]
            fn densities_integrate_to_one(seed in any::<u64>(), n in 2usize..40, heads in 1usize..3, r in 1usize..4, gaussian in any::<bool>()) {
                let e = 2 * heads;
                let basis = if gaussian { BasisFamily::gaussian(n, None).unwrap() } else { BasisFamily::rectangular(n).unwrap() };
                let sig = signal(n, e, seed, basis);
                let grid = uniform_grid(0.0, 1.0, 257).unwrap();
                let q = QuerySet::new(random(r, e, seed ^ 1).scale(5.0)).unwrap();
                let proj = ProjectionSet::seeded_orthogonal(e, heads, e, seed).unwrap();
                let (_, prof) = ltm_attention(&q, &sig, &proj, &grid).unwrap();
                for h in 0..heads {
                    for i in 0..r {
                        prop_assert!((crate::numerics::integrate(prof.slice(h, i), &grid).unwrap() - 1.0).abs() <= 1e-6);
                    }
                }
            }

            #[test]
            fn gibbs_ignores_slice_constants(seed in any::<u64>(), shift in -500.0f64..500.0, heads in 1usize..3, r in 1usize..3) {
                let grid = uniform_grid(0.0, 1.0, 101).unwrap();
                let base = random(heads * r, 101, seed);
                let scores = HeadQueryTable::from_vec(heads, r, 101, base.transpose().as_slice().to_vec()).unwrap();
                let mut shifted = scores.clone();
                for h in 0..heads {
                    for i in 0..r {
                        let c = shift * (1 + h + i) as f64;
                        shifted.slice_mut(h, i).iter_mut().for_each(|v| *v += c);
                    }
                }
                let a = gibbs_density(&scores, &grid).unwrap();
                let b = gibbs_density(&shifted, &grid).unwrap();
                for h in 0..heads {
                    for i in 0..r {
                        for (x, y) in a.slice(h, i).iter().zip(b.slice(h, i)) {
                            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
                        }
                    }
                }
            }
        }
    }
}
