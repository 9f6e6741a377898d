//! Browser front end. Each export returns a JSON string; the plain Rust
//! functions behind them are what the tests exercise.

use covrecon::field::{brownian_oracle, EigenSequence};
use covrecon::mercer::{build_kernel, ErrorReport, MercerKernel, Provenance};
use covrecon::stats::{loglog_slope, mean};
use covrecon::study::{reconstruct, ExactSetup};
use covrecon::{AnalyticField, Calibration, EstimatorKind, FieldKind, SamplingMode};
use covrecon::{DiscreteSpectrum, FeSpace};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Keeps a page interaction under a second in the browser.
const MAX_N: usize = 256;
const MAX_M: usize = 20_000;
const GRID: usize = 101;
const S: f64 = 0.499;

fn check(n: usize, m: usize, l: usize) -> Result<(), String> {
    if !(2..=MAX_N).contains(&n) {
        return Err(format!("n must lie in 2..={MAX_N}, got {n}"));
    }
    if !(2..=MAX_M).contains(&m) {
        return Err(format!("M must lie in 2..={MAX_M}, got {m}"));
    }
    if l == 0 || l > n + 1 {
        return Err(format!("L must lie in 1..={}, got {l}", n + 1));
    }
    Ok(())
}

fn grid() -> Vec<f64> {
    (0..GRID).map(|i| i as f64 / (GRID - 1) as f64).collect()
}

fn setup(n: usize) -> Result<ExactSetup, String> {
    ExactSetup::new(AnalyticField::new(FieldKind::BrownianMotion1D), n).map_err(|e| e.to_string())
}

fn sampled_spectrum(
    setup: &ExactSetup,
    m: usize,
    estimator: EstimatorKind,
    seed: u64,
    l: usize,
) -> Result<(DiscreteSpectrum, ErrorReport, Option<usize>), String> {
    let cov = covrecon::field::draw_batch(&setup.field, &setup.space, m, SamplingMode::NodalInterpolation, seed)
        .and_then(|b| covrecon::estimator::estimate(&b.coeffs, estimator, 1.0))
        .map_err(|e| e.to_string())?;
    let ts = covrecon::spectral::transform(&cov.matrix, setup.space.mass(), covrecon::StiffnessSource::Estimated)
        .map_err(|e| e.to_string())?;
    let spec = covrecon::spectral::eigensolve(&ts).map_err(|e| e.to_string())?;
    let rec = reconstruct(setup, Some(m), estimator, 1.0, SamplingMode::NodalInterpolation, seed, &[l], 2, &Calibration::default(), S)
        .map_err(|e| e.to_string())?;
    Ok((spec, rec[0].report.clone(), cov.tau))
}

fn kernel_of(spec: &DiscreteSpectrum, l: usize, space: &FeSpace) -> Result<MercerKernel, String> {
    build_kernel(spec, l, space, Provenance::ExactDiscrete { h: space.h() }).map_err(|e| e.to_string())
}

/// One kernel section `x ↦ R(x, anchor)` four ways.
#[derive(Debug, Clone, Serialize)]
pub struct KernelView {
    pub grid: Vec<f64>,
    pub anchor: f64,
    /// `min(x, anchor)`.
    pub exact: Vec<f64>,
    /// Rank-`L` Mercer sum of the exact pairs.
    pub truncated: Vec<f64>,
    /// Rank-`L` Galerkin kernel.
    pub discrete: Vec<f64>,
    /// Rank-`L` kernel from `M` samples.
    pub estimated: Vec<f64>,
    pub report: ErrorReport,
    pub tau: Option<usize>,
}

pub fn kernel_view(n: usize, m: usize, l: usize, estimator: &str, seed: u64, anchor: f64) -> Result<KernelView, String> {
    check(n, m, l)?;
    if !(0.0..=1.0).contains(&anchor) {
        return Err(format!("anchor must lie in [0, 1], got {anchor}"));
    }
    let kind: EstimatorKind = estimator.parse().map_err(|e: covrecon::Error| e.to_string())?;
    let setup = setup(n)?;
    let (spec, report, tau) = sampled_spectrum(&setup, m, kind, seed, l)?;
    let oracle = brownian_oracle(1);
    let discrete = kernel_of(&setup.spectrum, l, &setup.space)?;
    let estimated = kernel_of(&spec, l, &setup.space)?;
    let g = grid();
    let section = |k: &MercerKernel| -> Result<Vec<f64>, String> {
        g.iter().map(|x| k.eval(&[*x], &[anchor]).map_err(|e| e.to_string())).collect()
    };
    Ok(KernelView {
        exact: g.iter().map(|x| x.min(anchor)).collect(),
        truncated: g.iter().map(|x| oracle.truncated_kernel(l, &[*x], &[anchor])).collect(),
        discrete: section(&discrete)?,
        estimated: section(&estimated)?,
        grid: g,
        anchor,
        report,
        tau,
    })
}

/// One eigenpair: exact, Galerkin and sampled.
#[derive(Debug, Clone, Serialize)]
pub struct ModeView {
    pub index: usize,
    pub lambda_exact: f64,
    pub lambda_discrete: f64,
    pub lambda_estimated: f64,
    pub exact: Vec<f64>,
    pub discrete: Vec<f64>,
    pub estimated: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenView {
    pub grid: Vec<f64>,
    pub modes: Vec<ModeView>,
}

fn aligned(reference: &[f64], v: Vec<f64>) -> Vec<f64> {
    let dot: f64 = reference.iter().zip(&v).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        v.into_iter().map(|x| -x).collect()
    } else {
        v
    }
}

pub fn eigen_view(n: usize, m: usize, l: usize, seed: u64) -> Result<EigenView, String> {
    check(n, m, l)?;
    let setup = setup(n)?;
    let (spec, _, _) = sampled_spectrum(&setup, m, EstimatorKind::Mle, seed, l)?;
    let oracle = brownian_oracle(1);
    let discrete = kernel_of(&setup.spectrum, l, &setup.space)?;
    let estimated = kernel_of(&spec, l, &setup.space)?;
    let g = grid();
    let values = |k: &MercerKernel| -> Result<Vec<Vec<f64>>, String> {
        g.iter().map(|x| k.modes_at(&[*x]).map_err(|e| e.to_string())).collect()
    };
    let (dv, ev) = (values(&discrete)?, values(&estimated)?);
    let modes = (0..l)
        .map(|i| {
            let exact: Vec<f64> = g.iter().map(|x| oracle.eigenfunction(i + 1, &[*x])).collect();
            let d = aligned(&exact, dv.iter().map(|row| row[i]).collect());
            let e = aligned(&exact, ev.iter().map(|row| row[i]).collect());
            ModeView {
                index: i + 1,
                lambda_exact: oracle.eigenvalue(i + 1),
                lambda_discrete: discrete.eigenvalues[i],
                lambda_estimated: estimated.eigenvalues[i],
                exact,
                discrete: d,
                estimated: e,
            }
        })
        .collect();
    Ok(EigenView { grid: g, modes })
}

/// Error curves with their fitted log-log slopes.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceView {
    pub h: Vec<f64>,
    /// `|λ_ℓ − λ_ℓ^h|` for `ℓ = 1..=5`, one curve per mode.
    pub eigen_errors: Vec<Vec<f64>>,
    pub eigen_orders: Vec<f64>,
    pub l: Vec<usize>,
    pub e1: Vec<f64>,
    pub e1_slope: f64,
    pub m: Vec<usize>,
    /// Mean sampling error at `n = 32`, `L = 3`.
    pub e3: Vec<f64>,
    pub e3_slope: f64,
}

pub fn convergence_view(reps: usize, seed: u64) -> Result<ConvergenceView, String> {
    if !(1..=50).contains(&reps) {
        return Err(format!("replications must lie in 1..=50, got {reps}"));
    }
    let oracle = brownian_oracle(1);
    let ns = [4usize, 8, 16, 32, 64, 128];
    let h: Vec<f64> = ns.iter().map(|n| 1.0 / *n as f64).collect();
    let setups: Vec<ExactSetup> = ns.iter().map(|&n| setup(n)).collect::<Result<_, _>>()?;
    let eigen_errors: Vec<Vec<f64>> = (1..=5)
        .map(|l| setups.iter().map(|s| (s.spectrum.eigenvalues[l - 1] - oracle.eigenvalue(l)).abs()).collect())
        .collect();
    let eigen_orders = eigen_errors.iter().map(|e| loglog_slope(&h, e)).collect();

    let l: Vec<usize> = vec![1, 2, 4, 8, 16, 32, 64];
    let e1: Vec<f64> = l.iter().map(|&k| oracle.tail_sq_sum(k).sqrt()).collect();
    let lf: Vec<f64> = l.iter().map(|k| *k as f64).collect();

    let m: Vec<usize> = vec![100, 400, 1600, 6400];
    let s32 = &setups[3];
    let mut e3 = Vec::with_capacity(m.len());
    for &mm in &m {
        let mut vals = Vec::with_capacity(reps);
        for r in 0..reps as u64 {
            let rec = reconstruct(
                s32,
                Some(mm),
                EstimatorKind::Mle,
                1.0,
                SamplingMode::NodalInterpolation,
                covrecon::rng::derive_seed(seed, &[mm as u64, r]),
                &[3],
                2,
                &Calibration::default(),
                S,
            )
            .map_err(|e| e.to_string())?;
            vals.push(rec[0].report.e3);
        }
        e3.push(mean(&vals));
    }
    let mf: Vec<f64> = m.iter().map(|x| *x as f64).collect();
    Ok(ConvergenceView {
        e1_slope: loglog_slope(&lf, &e1),
        e3_slope: loglog_slope(&mf, &e3),
        h,
        eigen_errors,
        eigen_orders,
        l,
        e1,
        m,
        e3,
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

/// JSON [`KernelView`]; `estimator` is `"mle"` or `"tapered"`.
#[wasm_bindgen]
pub fn kernel(n: usize, m: usize, l: usize, estimator: &str, seed: u32, anchor: f64) -> Result<String, JsValue> {
    to_js(kernel_view(n, m, l, estimator, seed.into(), anchor))
}

/// JSON [`EigenView`].
#[wasm_bindgen]
pub fn eigenfunctions(n: usize, m: usize, l: usize, seed: u32) -> Result<String, JsValue> {
    to_js(eigen_view(n, m, l, seed.into()))
}

/// JSON [`ConvergenceView`].
#[wasm_bindgen]
pub fn convergence(reps: usize, seed: u32) -> Result<String, JsValue> {
    to_js(convergence_view(reps, seed.into()))
}

#[wasm_bindgen]
pub fn version() -> String {
    covrecon::VERSION.to_string()
}
