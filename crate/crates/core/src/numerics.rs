//! Trapezoidal quadrature, Gibbs normalization and inverse-CDF sampling.
//!
//! Everything here is a pure function of its inputs. Densities are stored as
//! samples on a [`QuadratureGrid`] and are treated as piecewise linear between
//! grid points, which is exactly the function the trapezoidal rule integrates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};

/// Default number of quadrature points.
pub const DEFAULT_GRID_POINTS: usize = 1000;

/// Ordered integration points with trapezoidal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Evenly spaced grid on `[a, b]` with both endpoints included.
    pub fn uniform(a: f64, b: f64, count: usize) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(invalid(format!(
                "grid bounds must be finite, got [{a}, {b}]"
            )));
        }
        if a >= b {
            return Err(invalid(format!("grid requires a < b, got [{a}, {b}]")));
        }
        if count < 2 {
            return Err(invalid(format!(
                "grid needs at least 2 points, got {count}"
            )));
        }
        let last = count - 1;
        let step = (b - a) / last as f64;
        let points = (0..count)
            .map(|k| if k == last { b } else { a + step * k as f64 })
            .collect();
        let mut weights = vec![step; count];
        weights[0] = step / 2.0;
        weights[last] = step / 2.0;
        Ok(Self { points, weights })
    }

    /// The default `[0, 1]` grid used for continuous attention.
    pub fn unit(count: usize) -> Result<Self> {
        Self::uniform(0.0, 1.0, count)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(shape(format!(
                "expected {} grid values, got {}",
                self.len(),
                values.len()
            )));
        }
        Ok(())
    }
}

/// Free-function form of [`QuadratureGrid::uniform`].
pub fn uniform_grid(a: f64, b: f64, count: usize) -> Result<QuadratureGrid> {
    QuadratureGrid::uniform(a, b, count)
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!(
            "{what} has a non-finite entry at index {pos}"
        )));
    }
    Ok(())
}

/// Trapezoidal integral `Σ_k w_k · values_k`.
pub fn integrate(values: &[f64], grid: &QuadratureGrid) -> Result<f64> {
    grid.check_len(values)?;
    check_finite(values, "integrand")?;
    Ok(weighted_sum(values, grid.weights()))
}

pub(crate) fn weighted_sum(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

/// Gibbs density `exp(s) / ∫ exp(s)` sampled on the grid.
///
/// The maximum score is subtracted before exponentiation, so any finite score
/// vector is safe and the result is invariant to constant shifts.
pub fn normalized_exp(scores: &[f64], grid: &QuadratureGrid) -> Result<Vec<f64>> {
    grid.check_len(scores)?;
    check_finite(scores, "scores")?;
    let mut out = vec![0.0; scores.len()];
    normalized_exp_into(scores, grid.weights(), &mut out)?;
    Ok(out)
}

/// Unchecked core of [`normalized_exp`]; writes into `out`.
pub(crate) fn normalized_exp_into(scores: &[f64], weights: &[f64], out: &mut [f64]) -> Result<()> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
    }
    let z = weighted_sum(out, weights);
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::DegenerateDensity);
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}

/// Linear interpolation of grid samples at `t`; clamps outside the grid.
pub fn interpolate(values: &[f64], grid: &QuadratureGrid, t: f64) -> f64 {
    let pts = grid.points();
    if t <= pts[0] {
        return values[0];
    }
    let last = pts.len() - 1;
    if t >= pts[last] {
        return values[last];
    }
    let hi = pts.partition_point(|&p| p <= t).min(last);
    let lo = hi - 1;
    let frac = (t - pts[lo]) / (pts[hi] - pts[lo]);
    values[lo] + frac * (values[hi] - values[lo])
}

/// Exact integral over `[lo, hi]` of the piecewise-linear interpolant of
/// `values`. Over the whole grid this equals [`integrate`].
pub fn integrate_between(values: &[f64], grid: &QuadratureGrid, lo: f64, hi: f64) -> f64 {
    let pts = grid.points();
    let lo = lo.max(grid.start());
    let hi = hi.min(grid.end());
    if hi <= lo {
        return 0.0;
    }
    // first segment whose right end lies beyond lo
    let mut k = pts.partition_point(|&p| p <= lo).saturating_sub(1);
    let mut total = 0.0;
    while k + 1 < pts.len() && pts[k] < hi {
        let (a, b) = (pts[k], pts[k + 1]);
        let left = a.max(lo);
        let right = b.min(hi);
        if right > left {
            let slope = (values[k + 1] - values[k]) / (b - a);
            let fl = values[k] + slope * (left - a);
            let fr = values[k] + slope * (right - a);
            total += 0.5 * (fl + fr) * (right - left);
        }
        k += 1;
    }
    total
}

/// How quantile levels are chosen when sampling from a density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Levels `(i + 0.5) / count`; deterministic.
    #[default]
    Stratified,
    /// Levels drawn from a seeded uniform generator.
    Random { seed: u64 },
}

impl SampleMode {
    /// Quantile levels in `[0, 1)`, ascending.
    pub fn levels(&self, count: usize) -> Vec<f64> {
        match *self {
            SampleMode::Stratified => (0..count)
                .map(|i| (i as f64 + 0.5) / count as f64)
                .collect(),
            SampleMode::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut levels: Vec<f64> = (0..count).map(|_| rng.gen::<f64>()).collect();
                levels.sort_by(f64::total_cmp);
                levels
            }
        }
    }

    /// Same mode with the random stream advanced by `salt`.
    pub fn salted(&self, salt: u64) -> Self {
        match *self {
            SampleMode::Stratified => SampleMode::Stratified,
            SampleMode::Random { seed } => SampleMode::Random {
                seed: seed.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            },
        }
    }
}

/// Piecewise-linear CDF through `(knots[k], values[k])`, normalized to end at 1.
#[derive(Debug, Clone)]
pub struct PiecewiseCdf {
    knots: Vec<f64>,
    cdf: Vec<f64>,
    identity: bool,
}

impl PiecewiseCdf {
    /// CDF of a grid density under the trapezoidal rule.
    pub fn from_grid_density(density: &[f64], grid: &QuadratureGrid) -> Result<Self> {
        grid.check_len(density)?;
        check_finite(density, "density")?;
        if density.iter().any(|&p| p < 0.0) {
            return Err(invalid("density has negative entries"));
        }
        let pts = grid.points();
        let mut cdf = Vec::with_capacity(pts.len());
        cdf.push(0.0);
        let mut acc = 0.0;
        for k in 1..pts.len() {
            acc += 0.5 * (density[k - 1] + density[k]) * (pts[k] - pts[k - 1]);
            cdf.push(acc);
        }
        Self::normalize(pts.to_vec(), cdf, false)
    }

    /// CDF of a piecewise-constant density with the given bin masses over
    /// equal-width bins spanning `[lo, hi]`.
    pub fn from_histogram(masses: &[f64], lo: f64, hi: f64) -> Result<Self> {
        if masses.is_empty() {
            return Err(invalid("histogram has no bins"));
        }
        check_finite(masses, "histogram")?;
        if masses.iter().any(|&m| m < 0.0) {
            return Err(invalid("histogram has negative mass"));
        }
        let bins = masses.len();
        let width = (hi - lo) / bins as f64;
        let knots = (0..=bins)
            .map(|j| if j == bins { hi } else { lo + width * j as f64 })
            .collect();
        let mut cdf = Vec::with_capacity(bins + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for &m in masses {
            acc += m;
            cdf.push(acc);
        }
        // Equal masses give the identity map; keep it exact.
        let identity = masses.iter().all(|&m| m == masses[0]);
        Self::normalize(knots, cdf, identity)
    }

    fn normalize(knots: Vec<f64>, mut cdf: Vec<f64>, identity: bool) -> Result<Self> {
        let total = *cdf.last().expect("non-empty cdf");
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateDensity);
        }
        for c in cdf.iter_mut() {
            *c /= total;
        }
        *cdf.last_mut().expect("non-empty cdf") = 1.0;
        Ok(Self {
            knots,
            cdf,
            identity,
        })
    }

    /// Smallest location whose CDF reaches `q`, by linear interpolation.
    pub fn quantile(&self, q: f64) -> f64 {
        let lo = self.knots[0];
        let hi = self.knots[self.knots.len() - 1];
        if self.identity {
            return lo + q.clamp(0.0, 1.0) * (hi - lo);
        }
        let q = q.clamp(0.0, 1.0);
        // First knot with cdf >= q and a strictly positive increment behind it.
        let mut k = self.cdf.partition_point(|&c| c < q).max(1);
        while k + 1 < self.cdf.len() && self.cdf[k] <= self.cdf[k - 1] {
            k += 1;
        }
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let (x0, x1) = (self.knots[k - 1], self.knots[k]);
        let frac = if c1 > c0 { (q - c0) / (c1 - c0) } else { 0.0 };
        (x0 + frac.clamp(0.0, 1.0) * (x1 - x0)).clamp(lo, hi)
    }

    /// `count` ascending locations drawn according to `mode`.
    pub fn sample(&self, count: usize, mode: SampleMode) -> Vec<f64> {
        mode.levels(count)
            .into_iter()
            .map(|q| self.quantile(q))
            .collect()
    }
}

/// Inverse-transform sampling of a grid density.
pub fn inverse_cdf_sample(
    density: &[f64],
    grid: &QuadratureGrid,
    count: usize,
    mode: SampleMode,
) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(invalid("sample count must be positive"));
    }
    Ok(PiecewiseCdf::from_grid_density(density, grid)?.sample(count, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn grid_examples() {
        let g = uniform_grid(0.0, 1.0, 1000).unwrap();
        assert_eq!(g.len(), 1000);
        assert_abs_diff_eq!(g.points()[1], 1.0 / 999.0, epsilon = 1e-15);
        assert_eq!(g.end(), 1.0);

        let g = uniform_grid(0.0, 1.0, 2).unwrap();
        assert_eq!(g.points(), &[0.0, 1.0]);
        assert_eq!(g.weights(), &[0.5, 0.5]);

        let g = uniform_grid(0.0, 0.75, 4).unwrap();
        assert_eq!(g.points(), &[0.0, 0.25, 0.5, 0.75]);
        assert_eq!(g.weights(), &[0.125, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(uniform_grid(0.0, 1.0, 1).is_err());
        assert!(uniform_grid(1.0, 0.0, 10).is_err());
        assert!(uniform_grid(f64::NAN, 1.0, 10).is_err());
        assert!(uniform_grid(0.0, f64::INFINITY, 10).is_err());
    }

    #[test]
    fn weights_sum_to_length() {
        for &(a, b, n) in &[(0.0, 1.0, 1000), (-2.0, 3.5, 17), (0.1, 0.2, 2)] {
            let g = uniform_grid(a, b, n).unwrap();
            let s: f64 = g.weights().iter().sum();
            assert!(((s - (b - a)) / (b - a)).abs() < 1e-12);
            assert!(g.weights().iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn integrate_examples() {
        let g = uniform_grid(0.0, 1.0, 1000).unwrap();
        assert_abs_diff_eq!(
            integrate(&vec![1.0; 1000], &g).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let lin: Vec<f64> = g.points().to_vec();
        assert_abs_diff_eq!(integrate(&lin, &g).unwrap(), 0.5, epsilon = 1e-9);
        let exp: Vec<f64> = g.points().iter().map(|t| t.exp()).collect();
        assert_abs_diff_eq!(
            integrate(&exp, &g).unwrap(),
            std::f64::consts::E - 1.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn integrate_rejects_bad_values() {
        let g = uniform_grid(0.0, 1.0, 3).unwrap();
        assert!(matches!(
            integrate(&[1.0, 2.0], &g),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(integrate(&[1.0, f64::NAN, 2.0], &g).is_err());
    }

    #[test]
    fn second_order_convergence() {
        let exact = std::f64::consts::E - 1.0;
        let err = |n: usize| {
            let g = uniform_grid(0.0, 1.0, n).unwrap();
            let v: Vec<f64> = g.points().iter().map(|t| t.exp()).collect();
            (integrate(&v, &g).unwrap() - exact).abs()
        };
        for &n in &[11, 51, 101] {
            // 2n - 1 points halves the step
            assert!(err(n) / err(2 * n - 1) >= 3.5);
        }
    }

    #[test]
    fn gibbs_examples() {
        let g = uniform_grid(0.0, 1.0, 1000).unwrap();
        let p = normalized_exp(&vec![3.0; 1000], &g).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0).abs() < 1e-12));

        let s: Vec<f64> = g.points().iter().map(|t| (7.0 * t).sin()).collect();
        let shifted: Vec<f64> = s.iter().map(|x| x + 1000.0).collect();
        let a = normalized_exp(&s, &g).unwrap();
        let b = normalized_exp(&shifted, &g).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        let lin = normalized_exp(g.points(), &g).unwrap();
        let e1 = std::f64::consts::E - 1.0;
        for (p, t) in lin.iter().zip(g.points()) {
            assert_abs_diff_eq!(*p, t.exp() / e1, epsilon = 1e-5);
        }
        assert_abs_diff_eq!(integrate(&lin, &g).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn gibbs_survives_huge_scores() {
        let g = uniform_grid(0.0, 1.0, 50).unwrap();
        let s: Vec<f64> = (0..50).map(|k| 1e300 * (k as f64 / 49.0)).collect();
        let p = normalized_exp(&s, &g).unwrap();
        assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn sampling_uniform_quantiles() {
        let g = uniform_grid(0.0, 1.0, 1000).unwrap();
        let p = vec![1.0; 1000];
        let s = inverse_cdf_sample(&p, &g, 4, SampleMode::Stratified).unwrap();
        for (x, want) in s.iter().zip([0.125, 0.375, 0.625, 0.875]) {
            assert_abs_diff_eq!(*x, want, epsilon = 1e-12);
        }
        let s = inverse_cdf_sample(&p, &g, 1, SampleMode::Stratified).unwrap();
        assert_abs_diff_eq!(s[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sampling_stays_in_bump_support() {
        // triangle on [0.4, 0.6] with apex at 0.5
        let g = uniform_grid(0.0, 1.0, 1001).unwrap();
        let p: Vec<f64> = g
            .points()
            .iter()
            .map(|&t| (1.0 - (t - 0.5).abs() / 0.1).max(0.0) * 10.0)
            .collect();
        let s = inverse_cdf_sample(&p, &g, 8, SampleMode::Stratified).unwrap();
        assert_eq!(s.len(), 8);
        for x in &s {
            assert!((0.4..=0.6).contains(x), "{x} outside bump");
        }
        // Quantile (i-0.5)/8 of the triangle, from its closed-form CDF.
        for (i, x) in s.iter().enumerate() {
            let q = (i as f64 + 0.5) / 8.0;
            let want = if q <= 0.5 {
                0.4 + 0.1 * (2.0 * q).sqrt()
            } else {
                0.6 - 0.1 * (2.0 * (1.0 - q)).sqrt()
            };
            assert_abs_diff_eq!(*x, want, epsilon = 1e-5);
        }
    }

    #[test]
    fn sampling_rejects_zero_density() {
        let g = uniform_grid(0.0, 1.0, 10).unwrap();
        assert!(matches!(
            inverse_cdf_sample(&[0.0; 10], &g, 3, SampleMode::Stratified),
            Err(Error::DegenerateDensity)
        ));
    }

    #[test]
    fn random_mode_is_seeded_and_sorted() {
        let g = uniform_grid(0.0, 1.0, 100).unwrap();
        let p = vec![1.0; 100];
        let a = inverse_cdf_sample(&p, &g, 20, SampleMode::Random { seed: 9 }).unwrap();
        let b = inverse_cdf_sample(&p, &g, 20, SampleMode::Random { seed: 9 }).unwrap();
        let c = inverse_cdf_sample(&p, &g, 20, SampleMode::Random { seed: 10 }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn histogram_quantiles() {
        let cdf = PiecewiseCdf::from_histogram(&[0.7, 0.3], 0.0, 1.0).unwrap();
        let s = cdf.sample(10, SampleMode::Stratified);
        assert_eq!(s.iter().filter(|&&u| u < 0.5).count(), 7);
        assert_eq!(s.iter().filter(|&&u| u >= 0.5).count(), 3);

        let cdf = PiecewiseCdf::from_histogram(&[0.0, 0.0, 1.0, 0.0], 0.0, 1.0).unwrap();
        for u in cdf.sample(9, SampleMode::Stratified) {
            assert!((0.5..=0.75).contains(&u));
        }

        let flat = PiecewiseCdf::from_histogram(&[0.25; 4], 0.0, 1.0).unwrap();
        assert_eq!(
            flat.sample(5, SampleMode::Stratified),
            SampleMode::Stratified.levels(5)
        );
    }

    #[test]
    fn integrate_between_matches_full_integral() {
        let g = uniform_grid(0.0, 1.0, 37).unwrap();
        let v: Vec<f64> = g.points().iter().map(|t| 1.0 + (5.0 * t).cos()).collect();
        let full = integrate(&v, &g).unwrap();
        let parts: f64 = (0..7)
            .map(|j| integrate_between(&v, &g, j as f64 / 7.0, (j + 1) as f64 / 7.0))
            .sum();
        assert_abs_diff_eq!(full, parts, epsilon = 1e-13);
        assert_abs_diff_eq!(integrate_between(&v, &g, 0.0, 1.0), full, epsilon = 1e-13);
        assert_eq!(integrate_between(&v, &g, 0.6, 0.6), 0.0);
    }

    #[test]
    fn interpolate_hits_knots() {
        let g = uniform_grid(0.0, 1.0, 5).unwrap();
        let v = [0.0, 1.0, 4.0, 9.0, 16.0];
        assert_eq!(interpolate(&v, &g, 0.5), 4.0);
        assert_abs_diff_eq!(interpolate(&v, &g, 0.125), 0.5, epsilon = 1e-15);
        assert_eq!(interpolate(&v, &g, 1.0), 16.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn affine_integrands_are_exact(
                a in -5.0f64..5.0, len in 0.01f64..10.0, n in 2usize..200,
                slope in -100.0f64..100.0, offset in -100.0f64..100.0,
            ) {
                let g = uniform_grid(a, a + len, n).unwrap();
                let v: Vec<f64> = g.points().iter().map(|t| slope * t + offset).collect();
                let b = a + len;
                let exact = slope * (b * b - a * a) / 2.0 + offset * len;
                let got = integrate(&v, &g).unwrap();
                let scale = exact.abs().max(slope.abs() * (a.abs() + b.abs()) * len).max(1e-300);
                prop_assert!(((got - exact) / scale).abs() <= 1e-12);
            }

            #[test]
            fn gibbs_normalized_and_shift_invariant(
                scores in proptest::collection::vec(-50.0f64..50.0, 2..300),
                shift in -1e3f64..1e3,
            ) {
                let g = uniform_grid(0.0, 1.0, scores.len()).unwrap();
                let p = normalized_exp(&scores, &g).unwrap();
                prop_assert!(p.iter().all(|&x| x >= 0.0));
                prop_assert!((integrate(&p, &g).unwrap() - 1.0).abs() <= 1e-9);
                let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
                let q = normalized_exp(&shifted, &g).unwrap();
                for (x, y) in p.iter().zip(&q) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }

            #[test]
            fn stratified_sampling_is_pure(
                density in proptest::collection::vec(0.0f64..5.0, 2..200),
                count in 1usize..40,
            ) {
                prop_assume!(density.iter().any(|&d| d > 0.0));
                let g = uniform_grid(0.0, 1.0, density.len()).unwrap();
                let a = inverse_cdf_sample(&density, &g, count, SampleMode::Stratified).unwrap();
                let b = inverse_cdf_sample(&density, &g, count, SampleMode::Stratified).unwrap();
                prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
                prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
