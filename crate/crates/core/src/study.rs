//! Monte Carlo studies of the expected reconstruction error over an
//! `(n, M, L)` grid.
//!
//! A cell is one `(n, M)` pair; every replication of a cell draws one batch
//! and evaluates all truncations on it. Replication seeds depend on
//! `(seed, n, M, rep)` only, so adding a truncation or a cell never changes
//! existing rows.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorKind};
use crate::fem::FeSpace;
use crate::field::{draw_batch, exact_discrete_covariance, AnalyticField, EigenSequence, FieldKind, SamplingMode};
use crate::mercer::{error_decomposition, ErrorReport};
use crate::planner::{h_of_l, p0_bound};
use crate::rng::derive_seed;
use crate::spectral::{self, DiscreteSpectrum, SpectralDiagnostics, StiffnessSource};
use crate::stats;

fn default_s() -> f64 {
    0.5 - 1e-3
}
fn default_alpha() -> f64 {
    1.0
}
fn default_q() -> usize {
    2
}
fn default_n_rep() -> usize {
    20
}

/// Grid, estimator and calibration for a study or a single reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub field: FieldKind,
    pub dim: usize,
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Elements per axis.
    pub meshes: Vec<usize>,
    /// Sample counts.
    pub samples: Vec<usize>,
    pub truncations: Vec<usize>,
    #[serde(default = "default_n_rep")]
    pub n_rep: usize,
    #[serde(default)]
    pub seed: u64,
    /// Gauss points per element per axis for kernel norms.
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default = "default_sampling")]
    pub sampling: SamplingMode,
    /// Use the exact nodal covariance in place of an estimate.
    #[serde(default)]
    pub exact_covariance: bool,
    /// Worker threads; all available cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::Mle
}
fn default_sampling() -> SamplingMode {
    SamplingMode::NodalInterpolation
}

impl StudyConfig {
    /// Checks every field and names the first offending one.
    pub fn validate(&self) -> Result<()> {
        if self.dim != self.field.dim() {
            return Err(Error::invalid(format!(
                "dim = {} does not match field {:?} of dimension {}",
                self.dim,
                self.field,
                self.field.dim()
            )));
        }
        for (name, list) in [("meshes", &self.meshes), ("samples", &self.samples), ("truncations", &self.truncations)] {
            if list.is_empty() {
                return Err(Error::invalid(format!("{name} must not be empty")));
            }
        }
        if let Some(n) = self.meshes.iter().find(|n| **n < 2) {
            return Err(Error::invalid(format!("meshes: {n} elements per axis is below the minimum 2")));
        }
        if !self.exact_covariance {
            if let Some(m) = self.samples.iter().find(|m| **m < 2) {
                return Err(Error::invalid(format!("samples: M = {m} is below the minimum 2")));
            }
        }
        if let Some(l) = self.truncations.iter().find(|l| **l == 0) {
            return Err(Error::invalid(format!("truncations: L = {l} must be at least 1")));
        }
        if self.n_rep == 0 {
            return Err(Error::invalid("n_rep must be at least 1"));
        }
        if !(2..=6).contains(&self.q) {
            return Err(Error::invalid(format!("q must lie in 2..=6, got {}", self.q)));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::invalid(format!("s must be positive, got {}", self.s)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.workers == Some(0) {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if let SamplingMode::L2ProjectionOfTruncatedKl { kl_trunc: 0 } = self.sampling {
            return Err(Error::invalid("sampling.kl_trunc must be at least 1"));
        }
        self.calibration.validate()?;
        let n_min = *self.meshes.iter().min().unwrap();
        let q_min = (n_min + 1).pow(self.dim as u32);
        if let Some(l) = self.truncations.iter().find(|l| **l > q_min) {
            return Err(Error::invalid(format!(
                "truncations: L = {l} exceeds Q_h = {q_min} of the coarsest mesh n = {n_min}"
            )));
        }
        Ok(())
    }

    pub fn analytic_field(&self) -> AnalyticField {
        AnalyticField::new(self.field)
    }
}

/// Failure of one pipeline stage.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

fn stage<T>(name: &'static str, r: Result<T>) -> std::result::Result<T, StageError> {
    r.map_err(|source| StageError { stage: name, source })
}

/// Everything that depends on the mesh but not on the samples.
#[derive(Debug, Clone)]
pub struct ExactSetup {
    pub field: AnalyticField,
    pub space: FeSpace,
    pub cov: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub spectrum: DiscreteSpectrum,
}

impl ExactSetup {
    pub fn new(field: AnalyticField, n: usize) -> std::result::Result<Self, StageError> {
        let space = stage("mesh", FeSpace::uniform(field.dim(), n))?;
        let cov = exact_discrete_covariance(&field, &space);
        let ts = stage("transform", spectral::transform(&cov, space.mass(), StiffnessSource::ExactDiscrete))?;
        let spectrum = stage("eigensolve", spectral::eigensolve(&ts))?;
        let stiffness = ts.matrix;
        Ok(ExactSetup { field, space, cov, stiffness, spectrum })
    }
}

/// Outcome of one reconstruction for one truncation.
#[derive(Debug, Clone, Serialize)]
pub struct Reconstruction {
    pub report: ErrorReport,
    pub diagnostics: SpectralDiagnostics,
    pub tau: Option<usize>,
    pub m: usize,
    pub seed: u64,
}

/// Runs draw, estimate, taper, transform, eigensolve, align and error split.
///
/// `m = None` bypasses sampling and uses the exact nodal covariance.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    setup: &ExactSetup,
    m: Option<usize>,
    estimator: EstimatorKind,
    alpha: f64,
    sampling: SamplingMode,
    seed: u64,
    truncations: &[usize],
    q: usize,
    calib: &Calibration,
    s: f64,
) -> std::result::Result<Vec<Reconstruction>, StageError> {
    let (cov, tau, m_used) = match m {
        None => (setup.cov.clone(), None, 0),
        Some(m) => {
            let batch = stage("draw", draw_batch(&setup.field, &setup.space, m, sampling, seed))?;
            let est = stage("estimate", estimator::estimate(&batch.coeffs, estimator, alpha))?;
            (est.matrix, est.tau, m)
        }
    };
    let mass = setup.space.mass();
    let source = if m.is_none() { StiffnessSource::ExactDiscrete } else { StiffnessSource::Estimated };
    let ts_est = stage("transform", spectral::transform(&cov, mass, source))?;
    let est_spec = stage("eigensolve", spectral::eigensolve(&ts_est))?;
    let ts_exact = spectral::TransformedStiffness {
        matrix: setup.stiffness.clone(),
        cov: setup.cov.clone(),
        source: StiffnessSource::ExactDiscrete,
        mass,
    };
    let oracle = setup.field.oracle();
    let h = setup.space.h();
    truncations
        .iter()
        .map(|&l| {
            let diagnostics = stage(
                "diagnostics",
                spectral::diagnostics(&setup.spectrum, &est_spec, &ts_exact, &ts_est, &oracle, l, calib, h, s),
            )?;
            let report = stage(
                "error_decomposition",
                error_decomposition(&setup.field, &oracle, &setup.space, &setup.spectrum, &est_spec, l, q),
            )?;
            Ok(Reconstruction { report, diagnostics, tau, m: m_used, seed })
        })
        .collect()
}

/// Seed of replication `rep` in cell `(n, m)`.
pub fn replication_seed(seed: u64, n: usize, m: usize, rep: usize) -> u64 {
    derive_seed(seed, &[n as u64, m as u64, rep as u64])
}

/// One row of the study table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub l: usize,
    pub h: f64,
    /// Sample count; 0 for the exact covariance.
    pub m: usize,
    pub mean_total: f64,
    pub mean_e3: f64,
    /// Standard error of `mean_total`.
    pub stderr: f64,
    /// Successful replications.
    pub n_rep: usize,
    pub n: usize,
    pub q_h: usize,
    pub mean_e1: f64,
    pub mean_e2: f64,
    pub stderr_e3: f64,
    pub max_triangle_slack: f64,
    /// Share of replications whose gap condition failed.
    pub gap_fail_fraction: f64,
    /// Probability bound of the gap event; absent when the spectrum has ties.
    pub p0: Option<f64>,
    pub tau: Option<usize>,
    pub status: String,
}

impl StudyRow {
    pub const HEADER: [&'static str; 17] = [
        "L",
        "h",
        "M",
        "mean_total",
        "mean_e3",
        "stderr",
        "n_rep",
        "n",
        "Q_h",
        "mean_e1",
        "mean_e2",
        "stderr_e3",
        "max_triangle_slack",
        "gap_fail_fraction",
        "p0",
        "tau",
        "status",
    ];

    pub fn record(&self) -> Vec<String> {
        let opt = |v: Option<String>| v.unwrap_or_default();
        vec![
            self.l.to_string(),
            self.h.to_string(),
            self.m.to_string(),
            self.mean_total.to_string(),
            self.mean_e3.to_string(),
            self.stderr.to_string(),
            self.n_rep.to_string(),
            self.n.to_string(),
            self.q_h.to_string(),
            self.mean_e1.to_string(),
            self.mean_e2.to_string(),
            self.stderr_e3.to_string(),
            self.max_triangle_slack.to_string(),
            self.gap_fail_fraction.to_string(),
            opt(self.p0.map(|v| v.to_string())),
            opt(self.tau.map(|v| v.to_string())),
            self.status.replace([',', '\n', '\r'], ";"),
        ]
    }

    pub fn parse(fields: &[&str]) -> Result<Self> {
        if fields.len() != Self::HEADER.len() {
            return Err(Error::Parse(format!("expected {} columns, found {}", Self::HEADER.len(), fields.len())));
        }
        fn num<T: std::str::FromStr>(col: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Parse(format!("column {col}: cannot parse `{v}`")))
        }
        fn opt<T: std::str::FromStr>(col: &str, v: &str) -> Result<Option<T>> {
            if v.trim().is_empty() {
                Ok(None)
            } else {
                num(col, v).map(Some)
            }
        }
        let h = &Self::HEADER;
        Ok(StudyRow {
            l: num(h[0], fields[0])?,
            h: num(h[1], fields[1])?,
            m: num(h[2], fields[2])?,
            mean_total: num(h[3], fields[3])?,
            mean_e3: num(h[4], fields[4])?,
            stderr: num(h[5], fields[5])?,
            n_rep: num(h[6], fields[6])?,
            n: num(h[7], fields[7])?,
            q_h: num(h[8], fields[8])?,
            mean_e1: num(h[9], fields[9])?,
            mean_e2: num(h[10], fields[10])?,
            stderr_e3: num(h[11], fields[11])?,
            max_triangle_slack: num(h[12], fields[12])?,
            gap_fail_fraction: num(h[13], fields[13])?,
            p0: opt(h[14], fields[14])?,
            tau: opt(h[15], fields[15])?,
            status: fields[16].to_string(),
        })
    }
}

/// Writes the header and rows; `#` lines are left to the caller.
pub fn write_rows<W: Write>(rows: &[StudyRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", StudyRow::HEADER.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.record().join(","))?;
    }
    Ok(())
}

/// Reads rows written by [`write_rows`], skipping `#` lines and blank lines.
pub fn read_rows<R: BufRead>(r: R) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in r.lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split(',').collect();
        if !seen_header {
            if fields != StudyRow::HEADER {
                return Err(Error::Parse(format!("unexpected header `{t}`")));
            }
            seen_header = true;
            continue;
        }
        rows.push(StudyRow::parse(&fields)?);
    }
    if !seen_header {
        return Err(Error::Parse("missing header".into()));
    }
    Ok(rows)
}

/// Bandwidth fed to the probability bound: the taper when one was applied,
/// otherwise the width at which every weight is 1.
fn effective_tau(tau: Option<usize>, q_h: usize) -> usize {
    tau.unwrap_or(2 * q_h.saturating_sub(1).max(1))
}

/// All rows of one `(n, m)` cell; `m = 0` with `exact_covariance`.
pub fn run_cell(cfg: &StudyConfig, setup: &ExactSetup, m: usize) -> Vec<StudyRow> {
    let n = setup.space.mesh().elements_per_axis();
    let q_h = setup.space.dof_count();
    let h = setup.space.h();
    let reps = if cfg.exact_covariance { 1 } else { cfg.n_rep };
    let outcomes = crate::par_map(reps, |rep| {
        let seed = replication_seed(cfg.seed, n, m, rep);
        let m_opt = (!cfg.exact_covariance).then_some(m);
        reconstruct(
            setup,
            m_opt,
            cfg.estimator,
            cfg.alpha,
            cfg.sampling,
            seed,
            &cfg.truncations,
            cfg.q,
            &cfg.calibration,
            cfg.s,
        )
    });
    let failures: Vec<String> = outcomes.iter().filter_map(|o| o.as_ref().err().map(|e| e.to_string())).collect();
    let ok: Vec<&Vec<Reconstruction>> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let oracle = setup.field.oracle();

    cfg.truncations
        .iter()
        .enumerate()
        .map(|(li, &l)| {
            let pick = |f: fn(&Reconstruction) -> f64| ok.iter().map(|r| f(&r[li])).collect::<Vec<f64>>();
            let totals = pick(|r| r.report.total);
            let e3s = pick(|r| r.report.e3);
            let tau = ok.first().and_then(|r| r[li].tau);
            let gap_fails = ok.iter().filter(|r| !r[li].diagnostics.gap_condition_ok).count();
            let p0 = (m > 0)
                .then(|| h_of_l(&oracle, l).ok())
                .flatten()
                .map(|hl| p0_bound(q_h, effective_tau(tau, q_h), m as f64, cfg.calibration.rho1, hl, 1.0));
            let status = match (ok.len(), failures.first()) {
                (_, None) => "ok".to_string(),
                (0, Some(e)) => format!("failed: {e}"),
                (_, Some(e)) => format!("partial: {} of {} failed; first: {e}", failures.len(), reps),
            };
            let nan_if_empty = |v: &[f64], f: fn(&[f64]) -> f64| if v.is_empty() { f64::NAN } else { f(v) };
            StudyRow {
                l,
                h,
                m,
                mean_total: nan_if_empty(&totals, stats::mean),
                mean_e3: nan_if_empty(&e3s, stats::mean),
                stderr: if totals.len() >= 2 { stats::std_error(&totals) } else { f64::NAN },
                n_rep: ok.len(),
                n,
                q_h,
                mean_e1: nan_if_empty(&pick(|r| r.report.e1), stats::mean),
                mean_e2: nan_if_empty(&pick(|r| r.report.e2), stats::mean),
                stderr_e3: if e3s.len() >= 2 { stats::std_error(&e3s) } else { f64::NAN },
                max_triangle_slack: pick(|r| r.report.triangle_slack).into_iter().fold(f64::NAN, f64::max),
                gap_fail_fraction: if ok.is_empty() { f64::NAN } else { gap_fails as f64 / ok.len() as f64 },
                p0,
                tau,
                status,
            }
        })
        .collect()
}

/// Cell keys in output order.
pub fn cells(cfg: &StudyConfig) -> Vec<(usize, usize)> {
    let ms: Vec<usize> = if cfg.exact_covariance { vec![0] } else { cfg.samples.clone() };
    let mut out = Vec::new();
    for &n in &cfg.meshes {
        for &m in &ms {
            out.push((n, m));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Fitted rates appended to a study table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    /// Log-log slope of `e1` against `L`.
    pub e1_vs_l: Option<f64>,
    /// Log-log slope of `|λ₁ − λ₁^h|` against `h`.
    pub eigenvalue_error_vs_h: Option<f64>,
    /// Log-log slope of `mean_e3` against `M`, one per `(n, L)` with two or more sample counts.
    pub e3_vs_m: Vec<(usize, usize, f64)>,
}

impl StudySummary {
    /// `# key=value` lines.
    pub fn comment_lines(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
        let mut out = vec![
            "# summary".to_string(),
            format!("# slope e1_vs_L={}", f(self.e1_vs_l)),
            format!("# slope eigenvalue_error_vs_h={}", f(self.eigenvalue_error_vs_h)),
        ];
        for (n, l, s) in &self.e3_vs_m {
            out.push(format!("# slope e3_vs_M n={n} L={l}={s}"));
        }
        out
    }
}

fn finite_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0 && y.is_finite()).map(|(x, y)| (*x, *y)).collect();
    if pts.len() < 2 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(stats::loglog_slope(&x, &y))
}

/// Regression slopes over a finished table; eigenvalue errors come from the
/// exact spectra `(h, |λ₁ − λ₁^h|)`.
pub fn summarize(rows: &[StudyRow], eigen_errors: &[(f64, f64)]) -> StudySummary {
    let mut ls: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if r.mean_e1.is_finite() && !ls.iter().any(|(l, _)| *l == r.l as f64) {
            ls.push((r.l as f64, r.mean_e1));
        }
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = ls.into_iter().unzip();
    let (hx, hy): (Vec<f64>, Vec<f64>) = eigen_errors.iter().copied().unzip();
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.n, r.l)).collect();
    keys.sort_unstable();
    keys.dedup();
    let e3_vs_m = keys
        .into_iter()
        .filter_map(|(n, l)| {
            let (mx, my): (Vec<f64>, Vec<f64>) =
                rows.iter().filter(|r| r.n == n && r.l == l && r.m > 0).map(|r| (r.m as f64, r.mean_e3)).unzip();
            finite_slope(&mx, &my).map(|s| (n, l, s))
        })
        .collect();
    StudySummary { e1_vs_l: finite_slope(&lx, &ly), eigenvalue_error_vs_h: finite_slope(&hx, &hy), e3_vs_m }
}

/// Rows of every cell plus fitted rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyOutput {
    pub rows: Vec<StudyRow>,
    pub summary: StudySummary,
}

/// `|λ₁ − λ₁^h|` from an exact setup.
pub fn leading_eigen_error(setup: &ExactSetup) -> (f64, f64) {
    let exact = setup.field.oracle().eigenvalue(1);
    (setup.space.h(), (exact - setup.spectrum.eigenvalues[0]).abs())
}

/// Runs every cell; a cell whose mesh setup fails yields rows marked failed.
pub fn expected_error_study(cfg: &StudyConfig) -> Result<StudyOutput> {
    cfg.validate()?;
    if !cfg.exact_covariance && cfg.n_rep < 2 {
        return Err(Error::invalid("n_rep must be at least 2 for a study"));
    }
    let mut rows = Vec::new();
    let mut eigen_errors = Vec::new();
    let mut meshes = cfg.meshes.clone();
    meshes.sort_unstable();
    meshes.dedup();
    for n in meshes {
        let setup = ExactSetup::new(cfg.analytic_field(), n);
        if let Ok(s) = &setup {
            eigen_errors.push(leading_eigen_error(s));
        }
        for (_, m) in cells(cfg).into_iter().filter(|(cn, _)| *cn == n) {
            match &setup {
                Ok(s) => rows.extend(run_cell(cfg, s, m)),
                Err(e) => rows.extend(failed_rows(cfg, n, m, e)),
            }
        }
    }
    let summary = summarize(&rows, &eigen_errors);
    Ok(StudyOutput { rows, summary })
}

/// Placeholder rows for a cell that could not run.
pub fn failed_rows(cfg: &StudyConfig, n: usize, m: usize, err: &StageError) -> Vec<StudyRow> {
    cfg.truncations
        .iter()
        .map(|&l| StudyRow {
            l,
            h: 1.0 / n as f64,
            m,
            mean_total: f64::NAN,
            mean_e3: f64::NAN,
            stderr: f64::NAN,
            n_rep: 0,
            n,
            q_h: (n + 1).pow(cfg.dim as u32),
            mean_e1: f64::NAN,
            mean_e2: f64::NAN,
            stderr_e3: f64::NAN,
            max_triangle_slack: f64::NAN,
            gap_fail_fraction: f64::NAN,
            p0: None,
            tau: None,
            status: format!("failed: {err}"),
        })
        .collect()
}
