use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use covrecon::estimator::{self, write_matrix, EstimatorKind};
use covrecon::field::{draw_batch, BatchMeta, SampleBatch};
use covrecon::mercer::{build_kernel, Provenance};
use covrecon::planner::{self, PlanResult, Regime, SpectralProfile};
use covrecon::study::{
    self, cells, failed_rows, leading_eigen_error, replication_seed, run_cell, summarize, ExactSetup, StudyRow,
};
use covrecon::{FeSpace, FieldKind, StudyConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{embedded_json, header, write_atomic, PlanConfig};
use crate::error::CliError;

/// Sidecar written next to each sample batch.
#[derive(Debug, Serialize, Deserialize)]
pub struct BatchSidecar {
    pub version: String,
    pub config: serde_json::Value,
    pub batch: BatchMeta,
}

fn sample_cells(cfg: &StudyConfig) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> =
        cfg.meshes.iter().flat_map(|&n| cfg.samples.iter().map(move |&m| (n, m))).collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn sample(cfg: &StudyConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let json = embedded_json(cfg)?;
    let field = cfg.analytic_field();
    let mut written = Vec::new();
    for (n, m) in sample_cells(cfg) {
        let space = FeSpace::uniform(cfg.dim, n)?;
        let batch = draw_batch(&field, &space, m, cfg.sampling, replication_seed(cfg.seed, n, m, 0))?;
        let mut body = header(&json).into_bytes();
        batch.write_csv(&mut body)?;
        let path = out.join(format!("samples_n{n}_M{m}.csv"));
        write_atomic(&path, &body)?;
        let side = BatchSidecar {
            version: covrecon::VERSION.to_string(),
            config: serde_json::from_str(&json)?,
            batch: batch.meta(),
        };
        let mut side_body = serde_json::to_vec_pretty(&side)?;
        side_body.push(b'\n');
        write_atomic(&path.with_extension("json"), &side_body)?;
        written.push(path);
    }
    Ok(written)
}

fn read_batch(path: &Path) -> Result<SampleBatch, CliError> {
    let side_path = path.with_extension("json");
    let side: BatchSidecar = serde_json::from_reader(BufReader::new(
        fs::File::open(&side_path).map_err(|e| CliError::Config(format!("{}: {e}", side_path.display())))?,
    ))
    .map_err(|e| CliError::Config(format!("{}: {e}", side_path.display())))?;
    let f = fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(SampleBatch::read_csv(BufReader::new(f), &side.batch)?)
}

fn write_estimate(
    samples: &SampleBatch,
    kind: EstimatorKind,
    alpha: f64,
    json: &str,
    path: &Path,
) -> Result<(), CliError> {
    let est = estimator::estimate(&samples.coeffs, kind, alpha)?;
    let mut body = header(json).into_bytes();
    write_matrix(&est, &mut body)?;
    write_atomic(path, &body)
}

/// Covariance estimates, from `input` when given, otherwise from the
/// batches `sample` would draw.
pub fn estimate(cfg: &StudyConfig, input: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let json = embedded_json(cfg)?;
    if let Some(p) = input {
        let batch = read_batch(p)?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
        let path = out.join(format!("cov_{}.txt", stem.trim_start_matches("samples_")));
        write_estimate(&batch, cfg.estimator, cfg.alpha, &json, &path)?;
        return Ok(vec![path]);
    }
    let field = cfg.analytic_field();
    let mut written = Vec::new();
    for (n, m) in sample_cells(cfg) {
        let space = FeSpace::uniform(cfg.dim, n)?;
        let batch = draw_batch(&field, &space, m, cfg.sampling, replication_seed(cfg.seed, n, m, 0))?;
        let path = out.join(format!("cov_n{n}_M{m}.txt"));
        write_estimate(&batch, cfg.estimator, cfg.alpha, &json, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    version: &'a str,
    config: serde_json::Value,
    n: usize,
    m: usize,
    seed: u64,
    results: Vec<study::Reconstruction>,
}

/// One reconstruction per `(n, M)` cell with replication 0's seed, plus a
/// kernel snapshot at the largest truncation.
pub fn reconstruct(cfg: &StudyConfig, out: &Path, snapshot: usize) -> Result<Vec<PathBuf>, CliError> {
    let json = embedded_json(cfg)?;
    let mut written = Vec::new();
    for (n, m) in cells(cfg) {
        let setup = ExactSetup::new(cfg.analytic_field(), n)?;
        let seed = replication_seed(cfg.seed, n, m, 0);
        let m_opt = (!cfg.exact_covariance).then_some(m);
        let results = study::reconstruct(
            &setup,
            m_opt,
            cfg.estimator,
            cfg.alpha,
            cfg.sampling,
            seed,
            &cfg.truncations,
            cfg.q,
            &cfg.calibration,
            cfg.s,
        )?;
        let file = ReportFile {
            version: covrecon::VERSION,
            config: serde_json::from_str(&json)?,
            n,
            m,
            seed,
            results,
        };
        let path = out.join(format!("report_n{n}_M{m}.json"));
        let mut body = serde_json::to_vec_pretty(&file)?;
        body.push(b'\n');
        write_atomic(&path, &body)?;
        written.push(path);

        let l = *cfg.truncations.iter().max().expect("validated nonempty");
        let spec = if cfg.exact_covariance {
            setup.spectrum.clone()
        } else {
            let batch = draw_batch(&setup.field, &setup.space, m, cfg.sampling, seed)?;
            let est = estimator::estimate(&batch.coeffs, cfg.estimator, cfg.alpha)?;
            let ts = covrecon::spectral::transform(&est.matrix, setup.space.mass(), covrecon::StiffnessSource::Estimated)?;
            covrecon::spectral::eigensolve(&ts)?
        };
        let prov = if cfg.exact_covariance {
            Provenance::ExactDiscrete { h: setup.space.h() }
        } else {
            Provenance::Estimated { h: setup.space.h(), m, tau: file.results[0].tau, seed }
        };
        let kernel = build_kernel(&spec, l, &setup.space, prov)?;
        let anchor = vec![0.5; cfg.dim];
        let grid = kernel.snapshot(snapshot, &anchor)?;
        let mut body = header(&json);
        body.push_str(&format!("# kernel L={l} grid={snapshot} anchor={anchor:?}\n"));
        for r in grid.row_iter() {
            let row: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            body.push_str(&row.join(","));
            body.push('\n');
        }
        let kpath = out.join(format!("kernel_n{n}_M{m}_L{l}.csv"));
        write_atomic(&kpath, body.as_bytes())?;
        written.push(kpath);
    }
    Ok(written)
}

/// Rows of a finished cell file, when its header matches `head`.
fn load_cell(path: &Path, head: &str) -> Option<Vec<StudyRow>> {
    let text = fs::read_to_string(path).ok()?;
    if !text.starts_with(head) {
        return None;
    }
    study::read_rows(text.as_bytes()).ok()
}

fn rows_body(head: &str, rows: &[StudyRow], trailer: &[String]) -> Result<Vec<u8>, CliError> {
    let mut body = head.as_bytes().to_vec();
    study::write_rows(rows, &mut body)?;
    for line in trailer {
        body.extend_from_slice(line.as_bytes());
        body.push(b'\n');
    }
    Ok(body)
}

/// Full grid; each `(n, M)` cell goes to `cells/` as soon as it finishes and
/// is reused by `resume` when its embedded config matches.
pub fn study(cfg: &StudyConfig, out: &Path, resume: bool) -> Result<PathBuf, CliError> {
    if !cfg.exact_covariance && cfg.n_rep < 2 {
        return Err(CliError::Config("n_rep must be at least 2 for a study".into()));
    }
    let json = embedded_json(cfg)?;
    let head = header(&json);
    let cell_dir = out.join("cells");
    let all = cells(cfg);
    let mut meshes: Vec<usize> = all.iter().map(|c| c.0).collect();
    meshes.dedup();
    let mut rows = Vec::new();
    let mut eigen_errors = Vec::new();
    for n in meshes {
        let setup = ExactSetup::new(cfg.analytic_field(), n);
        if let Ok(s) = &setup {
            eigen_errors.push(leading_eigen_error(s));
        }
        let ms: Vec<usize> = all.iter().filter(|c| c.0 == n).map(|c| c.1).collect();
        let done: Vec<Result<Vec<StudyRow>, CliError>> = ms
            .par_iter()
            .map(|&m| {
                let path = cell_dir.join(format!("n{n}_M{m}.csv"));
                if resume {
                    if let Some(r) = load_cell(&path, &head) {
                        return Ok(r);
                    }
                }
                let r = match &setup {
                    Ok(s) => run_cell(cfg, s, m),
                    Err(e) => failed_rows(cfg, n, m, e),
                };
                write_atomic(&path, &rows_body(&head, &r, &[])?)?;
                Ok(r)
            })
            .collect();
        for d in done {
            rows.extend(d?);
        }
    }
    let summary = summarize(&rows, &eigen_errors);
    let path = out.join("study.csv");
    write_atomic(&path, &rows_body(&head, &rows, &summary.comment_lines())?)?;
    Ok(path)
}

/// Caps for running a study at a plan's parameters.
pub struct VerifyCaps {
    pub max_n: usize,
    pub max_m: usize,
    pub reps: usize,
    pub seed: u64,
}

fn verify(
    plan: &PlanResult,
    profile: &SpectralProfile,
    caps: &VerifyCaps,
    out: &Path,
    json: &str,
) -> Result<PathBuf, CliError> {
    let dim = profile.dim;
    if !plan.feasible || !plan.m_eps.is_finite() {
        return Err(CliError::Infeasible(format!("cannot verify: {}", plan.reason)));
    }
    let n_min = ((plan.l_eps as f64).powf(1.0 / dim as f64).ceil() as usize).max(2);
    let n = ((1.0 / plan.h_eps).ceil() as usize).clamp(n_min, caps.max_n.max(n_min));
    let m = (plan.m_eps as usize).min(caps.max_m).max(2);
    let cfg = StudyConfig {
        field: FieldKind::for_dim(dim)?,
        dim,
        s: profile.s,
        alpha: profile.alpha,
        meshes: vec![n],
        samples: vec![m],
        truncations: vec![plan.l_eps],
        n_rep: caps.reps,
        seed: caps.seed,
        q: 2,
        calibration: profile.calibration,
        estimator: EstimatorKind::Mle,
        sampling: covrecon::SamplingMode::NodalInterpolation,
        exact_covariance: false,
        workers: None,
        out: None,
    };
    let res = covrecon::study::expected_error_study(&cfg)?;
    let check = planner::verify_plan(plan, &res.rows[0]);
    #[derive(Serialize)]
    struct CheckFile<'a> {
        version: &'a str,
        config: serde_json::Value,
        check: planner::PlanCheck,
        row: &'a StudyRow,
    }
    let file = CheckFile {
        version: covrecon::VERSION,
        config: serde_json::from_str(json)?,
        check,
        row: &res.rows[0],
    };
    let path = out.join("plan_check.json");
    let mut body = serde_json::to_vec_pretty(&file)?;
    body.push(b'\n');
    write_atomic(&path, &body)?;
    Ok(path)
}

/// Writes `plan.toml` and returns its text; infeasible plans are written
/// before the error is reported.
pub fn plan(
    cfg: &PlanConfig,
    epsilon: Option<f64>,
    regime: Option<u8>,
    out: &Path,
    verify_caps: Option<&VerifyCaps>,
) -> Result<String, CliError> {
    let eps = epsilon
        .or(cfg.epsilon)
        .ok_or_else(|| CliError::Config("epsilon is required (--epsilon or `epsilon` in the config)".into()))?;
    let regime = regime.or(cfg.regime).map(Regime::from_number).transpose()?;
    let resolved = PlanConfig { epsilon: Some(eps), regime: regime.map(Regime::number), profile: cfg.profile };
    let json = embedded_json(&resolved)?;
    let result = planner::plan(&cfg.profile, eps, regime)?;
    let text = toml::to_string(&result).map_err(|e| CliError::Io(e.to_string()))?;
    let body = format!("{}{text}", header(&json));
    write_atomic(&out.join("plan.toml"), body.as_bytes())?;
    if !result.feasible {
        return Err(CliError::Infeasible(format!(
            "case {} ({:?}): {}; binding: {}",
            result.regime.number(),
            result.regime,
            result.reason,
            result.binding.join(", ")
        )));
    }
    if let Some(caps) = verify_caps {
        verify(&result, &cfg.profile, caps, out, &json)?;
    }
    Ok(body)
}
