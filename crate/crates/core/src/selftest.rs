//! Runtime property suite: each check rebuilds a small instance, compares it
//! with an independent reference and reports pass/fail with a short detail.

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{ltm_attention, stm_attention, ProjectionSet, QuerySet};
use crate::basis::BasisFamily;
use crate::harness::{full_attention_oracle, run_scenario, NeedleScenario};
use crate::io::{read_profile, write_profile, write_stream, StreamHeader, StreamReader};
use crate::memory::{density_histogram, MemoryConfig, MemoryState, Sampling};
use crate::numerics::{integrate, inverse_cdf_sample, normalized_exp, QuadratureGrid, SampleMode};
use crate::pipeline::{blend, Pipeline, PipelineConfig};
use crate::signal::{fit, frame_times, FrameChunk};

type Outcome = std::result::Result<String, String>;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// One aligned `PASS`/`FAIL` line per check.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "{mark}  {:width$}  {:>7.3}s  {}\n",
                c.name, c.seconds, c.detail
            ));
        }
        let passed = self.checks.iter().filter(|c| c.passed).count();
        out.push_str(&format!(
            "{passed}/{} checks passed in {:.2}s\n",
            self.checks.len(),
            self.seconds
        ));
        out
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn trapezoid_affine() -> Outcome {
    let grid = QuadratureGrid::unit(1000).map_err(err)?;
    let vals: Vec<f64> = grid.points().iter().map(|t| 3.0 * t + 2.0).collect();
    let got = integrate(&vals, &grid).map_err(err)?;
    ensure((got - 3.5).abs() <= 1e-12, || format!("integral {got}"))?;
    Ok(format!("|err| = {:.1e}", (got - 3.5).abs()))
}

fn trapezoid_order() -> Outcome {
    let error = |g: usize| -> std::result::Result<f64, String> {
        let grid = QuadratureGrid::unit(g).map_err(err)?;
        let vals: Vec<f64> = grid
            .points()
            .iter()
            .map(|t| (std::f64::consts::PI * t).sin())
            .collect();
        Ok((integrate(&vals, &grid).map_err(err)? - 2.0 / std::f64::consts::PI).abs())
    };
    let ratio = error(101)? / error(201)?;
    ensure(ratio >= 3.5, || format!("halving ratio {ratio:.3}"))?;
    Ok(format!("halving ratio {ratio:.3}"))
}

fn gibbs_normalized() -> Outcome {
    let grid = QuadratureGrid::unit(1000).map_err(err)?;
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let scores: Vec<f64> = (0..1000).map(|_| r.gen_range(-20.0..20.0)).collect();
        let p = normalized_exp(&scores, &grid).map_err(err)?;
        worst = worst.max((integrate(&p, &grid).map_err(err)? - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("mass error {worst:.1e}"))?;
    Ok(format!("max mass error {worst:.1e}"))
}

fn gibbs_linear() -> Outcome {
    let grid = QuadratureGrid::unit(1000).map_err(err)?;
    let p = normalized_exp(grid.points(), &grid).map_err(err)?;
    let e = std::f64::consts::E;
    let worst = grid
        .points()
        .iter()
        .zip(&p)
        .map(|(t, v)| (t.exp() / (e - 1.0) - v).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-5, || format!("max error {worst:.1e}"))?;
    Ok(format!("max error {worst:.1e}"))
}

fn gibbs_shift() -> Outcome {
    let grid = QuadratureGrid::unit(500).map_err(err)?;
    let mut r = rng(2);
    let scores: Vec<f64> = (0..500).map(|_| r.gen_range(-5.0..5.0)).collect();
    let shifted: Vec<f64> = scores.iter().map(|s| s + 123.0).collect();
    let a = normalized_exp(&scores, &grid).map_err(err)?;
    let b = normalized_exp(&shifted, &grid).map_err(err)?;
    let worst = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-12, || format!("max change {worst:.1e}"))?;
    Ok(format!("max change {worst:.1e}"))
}

fn sampling_pure() -> Outcome {
    let grid = QuadratureGrid::unit(400).map_err(err)?;
    let density: Vec<f64> = grid.points().iter().map(|t| 2.0 * t).collect();
    let a = inverse_cdf_sample(&density, &grid, 64, SampleMode::Stratified).map_err(err)?;
    let b = inverse_cdf_sample(&density, &grid, 64, SampleMode::Stratified).map_err(err)?;
    ensure(a == b, || "repeated draws differ".into())?;
    // density 2t has quantile sqrt(q)
    let worst = a
        .iter()
        .enumerate()
        .map(|(i, x)| (x - ((i as f64 + 0.5) / 64.0).sqrt()).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-3, || format!("quantile error {worst:.1e}"))?;
    Ok(format!("bit-identical, quantile error {worst:.1e}"))
}

fn partition_of_unity() -> Outcome {
    let b = BasisFamily::rectangular(37).map_err(err)?;
    let mut r = rng(3);
    for _ in 0..200 {
        let t: f64 = r.gen_range(0.0..=1.0);
        let s: f64 = b.eval_psi(t).map_err(err)?.iter().sum();
        ensure(s == 1.0, || format!("sum {s} at t = {t}"))?;
    }
    Ok("200 points".into())
}

fn design_columns() -> Outcome {
    let b = BasisFamily::gaussian(12, None).map_err(err)?;
    let times = frame_times(9);
    let f = b.design_matrix(&times).map_err(err)?;
    for (l, &t) in times.iter().enumerate() {
        let psi = b.eval_psi(t).map_err(err)?;
        ensure(f.column(l).iter().zip(&psi).all(|(a, b)| a == b), || {
            format!("column {l} differs")
        })?;
    }
    Ok("9 columns bit-equal".into())
}

fn ridge_normal_equations() -> Outcome {
    let b = BasisFamily::gaussian(10, Some(0.08)).map_err(err)?;
    let times = frame_times(25);
    let x = random(25, 3, &mut rng(4));
    let lambda = 1e-2;
    let sig = fit(&x, &times, &b, lambda).map_err(err)?;
    let f = b.design_matrix(&times).map_err(err)?;
    let a = &f * f.transpose() + DMatrix::identity(10, 10) * lambda;
    let want = a.try_inverse().ok_or("reference inverse failed")? * &f * &x;
    let diff = (sig.coefficients() - want).amax();
    ensure(diff <= 1e-9, || format!("max diff {diff:.1e}"))?;
    Ok(format!("max diff {diff:.1e}"))
}

fn dual_equals_primal() -> Outcome {
    let b = BasisFamily::gaussian(40, None).map_err(err)?;
    let times = frame_times(12);
    let x = random(12, 2, &mut rng(5));
    let lambda = 1e-3;
    let sig = fit(&x, &times, &b, lambda).map_err(err)?;
    let f = b.design_matrix(&times).map_err(err)?;
    let a = &f * f.transpose() + DMatrix::identity(40, 40) * lambda;
    let want = a.try_inverse().ok_or("reference inverse failed")? * &f * &x;
    let diff = (sig.coefficients() - want).amax();
    ensure(diff <= 1e-6, || format!("max diff {diff:.1e}"))?;
    Ok(format!("max diff {diff:.1e}"))
}

fn interpolation() -> Outcome {
    let b = BasisFamily::rectangular(16).map_err(err)?;
    let times = frame_times(16);
    let x = random(16, 4, &mut rng(6));
    let sig = fit(&x, &times, &b, 1e-8).map_err(err)?;
    let back = sig.evaluate_many(&times).map_err(err)?;
    let diff = (back - &x).amax();
    ensure(diff <= 1e-6, || format!("max diff {diff:.1e}"))?;
    Ok(format!("max diff {diff:.1e}"))
}

fn ridge_linearity() -> Outcome {
    let b = BasisFamily::gaussian(8, None).map_err(err)?;
    let times = frame_times(20);
    let mut r = rng(7);
    let (x, y) = (random(20, 3, &mut r), random(20, 3, &mut r));
    let fx = fit(&x, &times, &b, 1e-3).map_err(err)?;
    let fy = fit(&y, &times, &b, 1e-3).map_err(err)?;
    let fxy = fit(&(&x * 2.0 - &y), &times, &b, 1e-3).map_err(err)?;
    let diff = (fxy.coefficients() - (fx.coefficients() * 2.0 - fy.coefficients())).amax();
    ensure(diff <= 1e-8, || format!("max diff {diff:.1e}"))?;
    Ok(format!("max diff {diff:.1e}"))
}

fn stm_brute_force() -> Outcome {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let heads = [1, 2, 4][case % 3];
        let dim = 4 * heads;
        let proj = ProjectionSet::seeded_orthogonal(dim, heads, dim, case as u64).map_err(err)?;
        let q = QuerySet::new(random(3, dim, &mut r)).map_err(err)?;
        let tokens = random(1 + case, dim, &mut r);
        let a = stm_attention(&q, &tokens, &proj).map_err(err)?;
        let b = full_attention_oracle(&tokens, &q, &proj).map_err(err)?;
        worst = worst.max((a - b).amax());
    }
    ensure(worst <= 1e-10, || format!("max diff {worst:.1e}"))?;
    Ok(format!("20 instances, max diff {worst:.1e}"))
}

fn ltm_quadrature() -> Outcome {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    let coarse = QuadratureGrid::unit(1000).map_err(err)?;
    let fine = QuadratureGrid::unit(20_001).map_err(err)?;
    for case in 0..4u64 {
        let basis = BasisFamily::gaussian(16, None).map_err(err)?;
        let times = frame_times(24);
        let sig = fit(&random(24, 8, &mut r), &times, &basis, 1e-3).map_err(err)?;
        let proj = ProjectionSet::seeded_orthogonal(8, 2, 8, case).map_err(err)?;
        let q = QuerySet::new(random(3, 8, &mut r)).map_err(err)?;
        let (a, _) = ltm_attention(&q, &sig, &proj, &coarse).map_err(err)?;
        let (b, _) = ltm_attention(&q, &sig, &proj, &fine).map_err(err)?;
        worst = worst.max((&a - &b).norm() / b.norm());
    }
    ensure(worst <= 1e-4, || format!("relative error {worst:.1e}"))?;
    Ok(format!("relative error {worst:.1e}"))
}

fn discrete_limit() -> Outcome {
    let s = 8;
    let basis = BasisFamily::rectangular(s).map_err(err)?;
    let values = random(s, s, &mut rng(10));
    let sig = fit(&values, &frame_times(s), &basis, 1e-8).map_err(err)?;
    let grid = QuadratureGrid::unit(1000).map_err(err)?;
    let proj = ProjectionSet::identity(s);
    let mut worst: f64 = 0.0;
    for k in 0..s {
        // a query far along value row k's direction puts almost all mass on box k
        let dir = values.row(k).into_owned();
        let others = (0..s)
            .filter(|&j| j != k)
            .map(|j| values.row(j).dot(&dir))
            .fold(f64::MIN, f64::max);
        let own = dir.dot(&dir);
        if own - others < 0.05 {
            continue;
        }
        let beta = 60.0 / (own - others);
        let q =
            QuerySet::new(DMatrix::from_row_slice(1, s, (dir * beta).as_slice())).map_err(err)?;
        let (z, _) = ltm_attention(&q, &sig, &proj, &grid).map_err(err)?;
        worst = worst.max((z.row(0) - values.row(k)).amax());
    }
    ensure(worst <= 1e-3, || format!("max diff {worst:.1e}"))?;
    Ok(format!("max diff {worst:.1e}"))
}

fn densities_normalized() -> Outcome {
    let basis = BasisFamily::rectangular(32).map_err(err)?;
    let sig = fit(&random(40, 8, &mut rng(11)), &frame_times(40), &basis, 1e-3).map_err(err)?;
    let proj = ProjectionSet::seeded_orthogonal(8, 4, 8, 3).map_err(err)?;
    let q = QuerySet::seeded(5, 8, 4).map_err(err)?;
    let grid = QuadratureGrid::unit(1000).map_err(err)?;
    let (_, profile) = ltm_attention(&q, &sig, &proj, &grid).map_err(err)?;
    let mut worst: f64 = 0.0;
    for h in 0..4 {
        for i in 0..5 {
            worst = worst.max((integrate(profile.slice(h, i), &grid).map_err(err)? - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("mass error {worst:.1e}"))?;
    Ok(format!("mass error {worst:.1e}"))
}

fn memory_config(
    tau: f64,
    sampling: Sampling,
    n: usize,
    ridge: f64,
    t: usize,
) -> std::result::Result<MemoryConfig, String> {
    Ok(MemoryConfig {
        tau,
        past_samples: t,
        sampling,
        bins: 16,
        basis: BasisFamily::rectangular(n).map_err(err)?,
        ridge,
        sample_mode: SampleMode::Stratified,
    })
}

fn histogram_distribution() -> Outcome {
    let basis = BasisFamily::rectangular(16).map_err(err)?;
    let sig = fit(&random(20, 4, &mut rng(12)), &frame_times(20), &basis, 1e-3).map_err(err)?;
    let proj = ProjectionSet::seeded_orthogonal(4, 2, 4, 5).map_err(err)?;
    let q = QuerySet::seeded(3, 4, 6).map_err(err)?;
    let (_, profile) =
        ltm_attention(&q, &sig, &proj, &QuadratureGrid::unit(777).map_err(err)?).map_err(err)?;
    let hist = density_histogram(&[&profile], 10).map_err(err)?;
    let total: f64 = hist.iter().sum();
    ensure(hist.iter().all(|&m| m >= 0.0), || "negative bin".into())?;
    ensure((total - 1.0).abs() <= 1e-9, || format!("sum {total}"))?;
    Ok(format!("sum error {:.1e}", (total - 1.0).abs()))
}

fn uniform_sticky_identical() -> Outcome {
    let basis = BasisFamily::rectangular(16).map_err(err)?;
    let sig = fit(&random(16, 2, &mut rng(13)), &frame_times(16), &basis, 1e-3).map_err(err)?;
    let uniform = MemoryState::with_signal(
        memory_config(0.75, Sampling::Uniform, 16, 1e-3, 13)?,
        sig.clone(),
        1,
    )
    .map_err(err)?;
    let sticky =
        MemoryState::with_signal(memory_config(0.75, Sampling::Sticky, 16, 1e-3, 13)?, sig, 1)
            .map_err(err)?
            .with_histogram(vec![1.0 / 16.0; 16])
            .map_err(err)?;
    let a = uniform.sample_past().map_err(err)?;
    let b = sticky.sample_past().map_err(err)?;
    ensure(a.sources == b.sources && a.targets == b.targets, || {
        "locations differ".into()
    })?;
    Ok("13 locations bit-equal".into())
}

fn contraction_bound() -> Outcome {
    let (n, lambda) = (64, 1e-6);
    let bound = 5.0 / n as f64 + 10.0 * lambda;
    let mut details = Vec::new();
    for tau in [0.5, 0.75] {
        let cfg = memory_config(tau, Sampling::Uniform, n, lambda, 64)?;
        let times = frame_times(4096);
        let ramp = fit(
            &DMatrix::from_column_slice(4096, 1, &times),
            &times,
            &cfg.basis,
            lambda,
        )
        .map_err(err)?;
        let old = MemoryState::with_signal(cfg, ramp, 1).map_err(err)?;
        let new = old
            .consolidate(&DMatrix::from_element(32, 1, 0.3))
            .map_err(err)?;
        let (before, after) = (old.signal().expect("set"), new.signal().expect("set"));
        let mut total = 0.0;
        for k in 1..=9 {
            let t = k as f64 / 10.0;
            total += (after.evaluate(tau * t).map_err(err)?[0]
                - before.evaluate(t).map_err(err)?[0])
                .abs();
        }
        let mean = total / 9.0;
        ensure(mean <= bound, || {
            format!("tau {tau}: mean error {mean:.4} > {bound:.4}")
        })?;
        details.push(format!("tau {tau}: {mean:.4}"));
    }
    Ok(format!("{} (bound {bound:.4})", details.join(", ")))
}

fn consolidate_deterministic() -> Outcome {
    let cfg = PipelineConfig {
        frames_per_chunk: 8,
        patches: 1,
        dim: 4,
        queries: 2,
        heads: 2,
        basis_size: 16,
        grid_points: 200,
        bins: 8,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(cfg).map_err(err)?;
    let mut r = rng(14);
    let chunks: Vec<FrameChunk> = (0..3)
        .map(|c| FrameChunk::from_frames(&random(8, 4, &mut r), c))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let run = || -> std::result::Result<_, String> {
        let mut s = p.initial_state().map_err(err)?;
        for c in &chunks {
            s = p.process_chunk(&s, c).map_err(err)?.state;
        }
        Ok(s)
    };
    ensure(run()? == run()?, || "states differ".into())?;
    Ok("3-chunk cycle repeated bit-exactly".into())
}

fn small_pipeline(alpha: f64) -> std::result::Result<Pipeline, String> {
    Pipeline::new(PipelineConfig {
        frames_per_chunk: 8,
        patches: 2,
        dim: 8,
        queries: 3,
        heads: 2,
        basis_size: 16,
        grid_points: 200,
        bins: 16,
        alpha,
        ..PipelineConfig::default()
    })
    .map_err(err)
}

fn small_chunks(count: usize, seed: u64) -> std::result::Result<Vec<FrameChunk>, String> {
    let mut r = rng(seed);
    (0..count)
        .map(|c| {
            FrameChunk::new(
                8,
                2,
                8,
                (0..128).map(|_| r.gen_range(-1.0..1.0)).collect(),
                c,
            )
            .map_err(err)
        })
        .collect()
}

fn blend_identities() -> Outcome {
    let chunks = small_chunks(2, 15)?;
    let p = small_pipeline(0.9)?;
    let s = p
        .process_chunk(&p.initial_state().map_err(err)?, &chunks[0])
        .map_err(err)?
        .state;
    let out = p.process_chunk(&s, &chunks[1]).map_err(err)?;
    let one = blend(1.0, &out.stm, &out.ltm);
    ensure(one == out.stm, || {
        "alpha = 1 differs from the short-term path".into()
    })?;
    let mid = blend(0.5, &out.stm, &out.ltm);
    let want = (blend(0.0, &out.stm, &out.ltm) + one) * 0.5;
    let diff = (mid - want).amax();
    ensure(diff <= 1e-12, || format!("midpoint diff {diff:.1e}"))?;
    Ok(format!("bit-exact endpoint, midpoint diff {diff:.1e}"))
}

fn running_mean() -> Outcome {
    let p = small_pipeline(0.9)?;
    let chunks = small_chunks(8, 16)?;
    let mut s = p.initial_state().map_err(err)?;
    let mut sum = DMatrix::zeros(3, 8);
    for c in &chunks {
        let out = p.process_chunk(&s, c).map_err(err)?;
        sum += &out.embedding;
        s = out.state;
    }
    let diff = (s.running.ok_or("no tokens")? - sum / 8.0).amax();
    ensure(diff <= 1e-12, || format!("diff {diff:.1e}"))?;
    Ok(format!("C = 8, diff {diff:.1e}"))
}

fn constant_state() -> Outcome {
    let p = small_pipeline(0.9)?;
    let chunks = small_chunks(64, 17)?;
    let mut s = p.initial_state().map_err(err)?;
    let mut sizes = Vec::new();
    for c in &chunks {
        s = p.process_chunk(&s, c).map_err(err)?.state;
        sizes.push(p.state_footprint(&s));
    }
    ensure(sizes[1] == sizes[63], || {
        format!("footprint {} at C = 2, {} at C = 64", sizes[1], sizes[63])
    })?;
    Ok(format!("{} reals at C = 2 and C = 64", sizes[63]))
}

fn one_pass() -> Outcome {
    let header = StreamHeader::new(20, 2, 8, 8);
    let chunks = {
        let mut r = rng(18);
        let mut out = Vec::new();
        for (c, m) in [8, 8, 4].into_iter().enumerate() {
            let data = (0..m * 16)
                .map(|_| r.gen_range(-1.0f32..1.0) as f64)
                .collect();
            out.push(FrameChunk::new(m, 2, 8, data, c).map_err(err)?);
        }
        out
    };
    let mut bytes = Vec::new();
    write_stream(&mut bytes, &header, chunks.clone()).map_err(err)?;
    let total = bytes.len() as u64;
    let reader = StreamReader::new(std::io::BufReader::new(crate::io::CountingReader::new(
        Cursor::new(bytes),
    )))
    .map_err(err)?;
    let mut seen = Vec::new();
    let mut reader = reader;
    for c in reader.by_ref() {
        seen.push(c.map_err(err)?);
    }
    let counted = reader.into_inner().into_inner().bytes_read();
    ensure(seen == chunks, || "round trip differs".into())?;
    ensure(counted == total, || {
        format!("read {counted} of {total} bytes")
    })?;
    Ok(format!("3 chunks, {counted} bytes read once"))
}

fn oracle_agreement() -> Outcome {
    let p = small_pipeline(1.0)?;
    let chunk = &small_chunks(1, 19)?[0];
    let out = p
        .process_chunk(&p.initial_state().map_err(err)?, chunk)
        .map_err(err)?;
    let oracle =
        full_attention_oracle(&chunk.tokens(), p.queries(), &p.layers()[0]).map_err(err)?;
    let diff = (out.context - oracle).amax();
    ensure(diff <= 1e-10, || format!("diff {diff:.1e}"))?;
    Ok(format!("diff {diff:.1e}"))
}

fn needle_retrieval() -> Outcome {
    let report = run_scenario(&NeedleScenario::default_scenario()).map_err(err)?;
    let sticky = report
        .sticky_ratio()
        .ok_or("sticky needle below resolution")?;
    let uniform = report
        .uniform_ratio()
        .ok_or("uniform needle below resolution")?;
    let oracle = report
        .sticky_oracle_ratio
        .ok_or("oracle needle below resolution")?;
    ensure(sticky > 1.5, || format!("sticky ratio {sticky:.3}"))?;
    ensure(sticky > uniform, || {
        format!("sticky {sticky:.3} <= uniform {uniform:.3}")
    })?;
    let rel = (sticky - oracle).abs() / oracle;
    ensure(rel <= 0.02, || {
        format!("sticky {sticky:.3} vs fine-grid {oracle:.3}")
    })?;
    Ok(format!(
        "sticky {sticky:.3}, uniform {uniform:.3}, fine-grid {oracle:.3}"
    ))
}

fn needle_monotone() -> Outcome {
    let mut ratios = Vec::new();
    for amp in [0.0, 2.0, 4.0] {
        let r =
            run_scenario(&NeedleScenario::default_scenario().with_amplitude(amp)).map_err(err)?;
        ratios.push(r.sticky_ratio().ok_or("below resolution")?);
    }
    ensure(ratios.windows(2).all(|w| w[1] >= w[0]), || {
        format!("ratios {ratios:?}")
    })?;
    Ok(format!(
        "{:.3} -> {:.3} -> {:.3}",
        ratios[0], ratios[1], ratios[2]
    ))
}

fn profile_round_trip() -> Outcome {
    let p = small_pipeline(0.9)?;
    let out = p
        .process_chunk(&p.initial_state().map_err(err)?, &small_chunks(1, 20)?[0])
        .map_err(err)?;
    let profile = out.diagnostics.profile.ok_or("no profile")?;
    let mut buf = Vec::new();
    write_profile(&mut buf, &profile).map_err(err)?;
    let back = read_profile(Cursor::new(buf)).map_err(err)?;
    ensure(back == profile, || "profile changed".into())?;
    Ok(format!("{} samples exact", profile.sample_count()))
}

fn weights_pipeline(layers: &[ProjectionSet]) -> Outcome {
    let first = layers.first().ok_or("no layers")?;
    let cfg = PipelineConfig {
        frames_per_chunk: 8,
        patches: 1,
        dim: first.dim(),
        heads: first.heads(),
        queries: 4,
        basis_size: 16,
        grid_points: 200,
        bins: 16,
        depth: layers.len(),
        output_dim: Some(first.out_dim()),
        ..PipelineConfig::default()
    };
    let queries = QuerySet::seeded(4, first.dim(), 1).map_err(err)?;
    let p = Pipeline::with_parts(cfg, layers.to_vec(), queries).map_err(err)?;
    let mut r = rng(21);
    let chunks: Vec<FrameChunk> = (0..3)
        .map(|c| FrameChunk::from_frames(&random(8, first.dim(), &mut r), c))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let out = p.run_stream(chunks).map_err(err)?;
    ensure(out.tokens.iter().all(|v| v.is_finite()), || {
        "non-finite tokens".into()
    })?;
    Ok(format!(
        "{} layers, tokens {}x{}",
        layers.len(),
        out.tokens.nrows(),
        out.tokens.ncols()
    ))
}

fn timed(name: &str, f: impl FnOnce() -> Outcome) -> Check {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Check {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every property plus the default needle scenario; with `weights`, also
/// runs a stream through the supplied projections.
pub fn run_selftest(weights: Option<&[ProjectionSet]>) -> SelftestReport {
    let start = Instant::now();
    let suite: Vec<(&str, fn() -> Outcome)> = vec![
        ("numerics.trapezoid_affine_exact", trapezoid_affine),
        ("numerics.trapezoid_second_order", trapezoid_order),
        ("numerics.gibbs_normalized", gibbs_normalized),
        ("numerics.gibbs_linear_closed_form", gibbs_linear),
        ("numerics.gibbs_shift_invariant", gibbs_shift),
        ("numerics.stratified_sampling_pure", sampling_pure),
        ("basis.partition_of_unity", partition_of_unity),
        ("basis.design_columns_match_psi", design_columns),
        ("signal.ridge_normal_equations", ridge_normal_equations),
        ("signal.dual_equals_primal", dual_equals_primal),
        ("signal.interpolation", interpolation),
        ("signal.linearity", ridge_linearity),
        ("attention.stm_brute_force", stm_brute_force),
        ("attention.ltm_quadrature_fidelity", ltm_quadrature),
        ("attention.discrete_limit", discrete_limit),
        ("attention.densities_normalized", densities_normalized),
        ("memory.histogram_distribution", histogram_distribution),
        ("memory.uniform_sticky_identical", uniform_sticky_identical),
        ("memory.contraction_bound", contraction_bound),
        ("memory.cycle_deterministic", consolidate_deterministic),
        ("pipeline.blend_identities", blend_identities),
        ("pipeline.running_mean", running_mean),
        ("pipeline.constant_state", constant_state),
        ("pipeline.one_pass_reader", one_pass),
        ("harness.oracle_agreement", oracle_agreement),
        ("harness.needle_sticky_retrieval", needle_retrieval),
        ("harness.needle_monotone", needle_monotone),
        ("io.profile_round_trip", profile_round_trip),
    ];
    let mut checks: Vec<Check> = suite.into_iter().map(|(name, f)| timed(name, f)).collect();
    if let Some(layers) = weights {
        checks.push(timed("weights.pipeline_finite", || {
            weights_pipeline(layers)
        }));
    }
    SelftestReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
