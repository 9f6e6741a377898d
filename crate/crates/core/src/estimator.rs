//! Sample covariance, tapering, and the decay-class diagnostics.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, moment_diagnostics, SampleBatch};
use crate::linalg;
use crate::rng::derive_seed;

/// Which covariance estimator produced a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Mle,
    Tapered,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Mle => "mle",
            EstimatorKind::Tapered => "tapered",
        })
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(EstimatorKind::Mle),
            "tapered" => Ok(EstimatorKind::Tapered),
            _ => Err(Error::Parse(format!("unknown estimator kind `{s}`"))),
        }
    }
}

/// A symmetric covariance estimate with its tapering metadata.
///
/// `tau` and `alpha` are `None` for an untapered matrix, including a tapering
/// request that fell back to the plain estimate because `Q_h` was too small.
#[derive(Debug, Clone, PartialEq)]
pub struct TaperedCovariance {
    pub matrix: DMatrix<f64>,
    pub kind: EstimatorKind,
    pub tau: Option<usize>,
    pub alpha: Option<f64>,
    pub m: usize,
}

/// Row mean of a samples-by-dofs matrix.
pub fn sample_mean(samples: &DMatrix<f64>) -> DVector<f64> {
    let m = samples.nrows() as f64;
    DVector::from_iterator(samples.ncols(), samples.column_iter().map(|c| c.sum() / m))
}

/// `(1/M) Σ_m (K_m − K̄)(K_m − K̄)ᵀ` with divisor `M`.
pub fn mle_covariance(samples: &DMatrix<f64>) -> Result<TaperedCovariance> {
    let m = samples.nrows();
    if m < 2 {
        return Err(Error::invalid(format!("covariance estimate needs M >= 2, got {m}")));
    }
    let mean = sample_mean(samples);
    let mut centered = samples.clone();
    for (mut col, mu) in centered.column_iter_mut().zip(mean.iter()) {
        col.add_scalar_mut(-mu);
    }
    // Explicit transpose routes through the blocked matrix product.
    let cov = centered.transpose() * &centered / m as f64;
    Ok(TaperedCovariance {
        matrix: linalg::symmetrize(&cov),
        kind: EstimatorKind::Mle,
        tau: None,
        alpha: None,
        m,
    })
}

/// Tapering weight for an even bandwidth `tau ≥ 2` and index distance `k`.
pub fn tapering_weight(tau: usize, k: usize) -> Result<f64> {
    if tau < 2 || tau % 2 != 0 {
        return Err(Error::invalid(format!("tapering width must be a positive even integer, got {tau}")));
    }
    Ok(weight_unchecked(tau, k))
}

fn weight_unchecked(tau: usize, k: usize) -> f64 {
    if 2 * k <= tau {
        1.0
    } else if k < tau {
        2.0 * (1.0 - k as f64 / tau as f64)
    } else {
        0.0
    }
}

/// `M^{1/(2α+1)}`, snapped to the nearest integer when within `1e-9` relative.
pub fn raw_tau(m: usize, alpha: f64) -> f64 {
    let r = (m as f64).powf(1.0 / (2.0 * alpha + 1.0));
    let near = r.round();
    if (r - near).abs() <= 1e-9 * r {
        near
    } else {
        r
    }
}

/// Rate-optimal bandwidth for `M` samples in dimension `q`: the smallest even
/// integer at least `M^{1/(2α+1)}`, at least 2 and at most the smallest even
/// integer at least `q`. `None` when `q < M^{1/(2α+1)}`, where tapering is skipped.
pub fn optimal_tau(m: usize, alpha: f64, q: usize) -> Option<usize> {
    let raw = raw_tau(m, alpha);
    if (q as f64) < raw {
        return None;
    }
    let mut tau = raw.ceil() as usize;
    tau += tau % 2;
    let cap = q + q % 2;
    Some(tau.clamp(2, cap.max(2)))
}

/// Entrywise tapering of a plain estimate with the rate-optimal bandwidth.
pub fn taper(cov: &TaperedCovariance, alpha: f64) -> Result<TaperedCovariance> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!("decay exponent alpha must be positive, got {alpha}")));
    }
    if cov.kind != EstimatorKind::Mle {
        return Err(Error::invalid("tapering applies to an untapered estimate"));
    }
    let q = cov.matrix.nrows();
    let Some(tau) = optimal_tau(cov.m, alpha, q) else {
        return Ok(cov.clone());
    };
    let matrix = DMatrix::from_fn(q, q, |i, j| weight_unchecked(tau, i.abs_diff(j)) * cov.matrix[(i, j)]);
    Ok(TaperedCovariance { matrix, kind: EstimatorKind::Tapered, tau: Some(tau), alpha: Some(alpha), m: cov.m })
}

/// Plain or tapered estimate from a samples-by-dofs matrix.
pub fn estimate(samples: &DMatrix<f64>, kind: EstimatorKind, alpha: f64) -> Result<TaperedCovariance> {
    let mle = mle_covariance(samples)?;
    match kind {
        EstimatorKind::Mle => Ok(mle),
        EstimatorKind::Tapered => taper(&mle, alpha),
    }
}

/// Branch of the rate function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateBranch {
    /// `Q_h ≥ M^{1/(2α+1)}`: `M^{−2α/(2α+1)} + d ln(1/h) / M`.
    LargeQ,
    /// `Q_h < M^{1/(2α+1)}`: `h^{−d} / M`.
    SmallQ,
}

/// The branch selected by `Q_h = (1/h + 1)^d` against `M^{1/(2α+1)}`.
pub fn rate_branch(h: f64, m: f64, alpha: f64, d: usize) -> RateBranch {
    let q = (1.0 / h + 1.0).powi(d as i32);
    if q >= m.powf(1.0 / (2.0 * alpha + 1.0)) {
        RateBranch::LargeQ
    } else {
        RateBranch::SmallQ
    }
}

/// Rate function evaluated on a fixed branch.
pub fn rho_tilde_branch(h: f64, m: f64, alpha: f64, d: usize, branch: RateBranch) -> f64 {
    match branch {
        RateBranch::LargeQ => m.powf(-2.0 * alpha / (2.0 * alpha + 1.0)) + d as f64 * (1.0 / h).ln() / m,
        RateBranch::SmallQ => h.powi(-(d as i32)) / m,
    }
}

/// Rate function on the branch chosen by [`rate_branch`].
pub fn rho_tilde(h: f64, m: f64, alpha: f64, d: usize) -> f64 {
    rho_tilde_branch(h, m, alpha, d, rate_branch(h, m, alpha, d))
}

/// Off-diagonal decay check against the class bounds `(C₁, C₂)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayClassCheck {
    pub alpha: f64,
    /// `max_c c^α · max_j Σ_{|j′−j|>c} |Σ_{jj′}|` over `1 ≤ c ≤ Q`.
    pub c1_est: f64,
    pub lambda_max: f64,
    pub passes: bool,
}

/// Worst-row tail sums `max_j Σ_{|j′−j|>c} |a_{jj′}|` for `c = 0..Q`.
pub fn tail_sums(a: &DMatrix<f64>) -> Vec<f64> {
    let q = a.nrows();
    let mut worst = vec![0.0_f64; q + 1];
    let mut by_dist = vec![0.0; q];
    for j in 0..q {
        by_dist.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..q {
            if k != j {
                by_dist[j.abs_diff(k)] += a[(j, k)].abs();
            }
        }
        let mut suffix = 0.0;
        for c in (0..q).rev() {
            // suffix = Σ_{dist > c}
            worst[c] = worst[c].max(suffix);
            suffix += by_dist[c];
        }
    }
    worst
}

pub fn decay_class_check(a: &DMatrix<f64>, alpha: f64, c1: f64, c2: f64) -> Result<DecayClassCheck> {
    if !a.is_square() {
        return Err(Error::invalid("decay check needs a square matrix"));
    }
    let tails = tail_sums(a);
    let q = a.nrows();
    let c1_est = (1..=q).map(|c| tails[c] * (c as f64).powf(alpha)).fold(0.0, f64::max);
    let ev = linalg::sym_eigenvalues(a);
    let lambda_max = ev.last().copied().unwrap_or(0.0);
    Ok(DecayClassCheck { alpha, c1_est, lambda_max, passes: c1_est <= c1 && lambda_max <= c2 })
}

/// Nodal sub-Gaussian proxy `4 ĉ_∞²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SubgaussianDiagnostic {
    pub rho_inv_nodal: f64,
}

pub fn subgaussian_diagnostic(batch: &SampleBatch) -> Result<SubgaussianDiagnostic> {
    let d = moment_diagnostics(batch)?;
    Ok(SubgaussianDiagnostic { rho_inv_nodal: 4.0 * d.c_inf_hat * d.c_inf_hat })
}

/// `Σ_jk = (1 + |j − k|)^{−α−1}`, a member of the decay class of exponent α.
pub fn synthetic_decay_covariance(q: usize, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(q, q, |i, j| (1.0 + i.abs_diff(j) as f64).powf(-alpha - 1.0))
}

/// One replication of the estimator-error experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub replication: usize,
    pub error: f64,
    pub error_sq: f64,
}

/// Operator-norm error of the estimator against `sigma` for every `M` in
/// `ms` and `reps` replications. Replication `r` at sample count `M` draws
/// from the seed derived from `(seed, M, r)`.
pub fn rate_study(
    sigma: &DMatrix<f64>,
    kind: EstimatorKind,
    alpha: f64,
    ms: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<RateRow>> {
    let cells: Vec<(usize, usize)> = ms.iter().flat_map(|&m| (0..reps).map(move |r| (m, r))).collect();
    let results = crate::par_map(cells.len(), |i| -> Result<RateRow> {
        let (m, r) = cells[i];
        let samples = field::draw_from_covariance(sigma, m, derive_seed(seed, &[m as u64, r as u64]))?;
        let est = estimate(&samples, kind, alpha)?;
        let error = linalg::opnorm_sym(&(est.matrix - sigma));
        Ok(RateRow { m, replication: r, error, error_sq: error * error })
    });
    results.into_iter().collect()
}

/// Writes `Q kind tau alpha` followed by one row per line; `-` marks an absent field.
pub fn write_matrix<W: Write>(cov: &TaperedCovariance, mut w: W) -> Result<()> {
    let tau = cov.tau.map_or("-".to_string(), |t| t.to_string());
    let alpha = cov.alpha.map_or("-".to_string(), |a| a.to_string());
    writeln!(w, "{} {} {} {} {}", cov.matrix.nrows(), cov.kind, tau, alpha, cov.m)?;
    for r in cov.matrix.row_iter() {
        let row: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Inverse of [`write_matrix`]; lines starting with `#` are skipped.
pub fn read_matrix<R: BufRead>(r: R) -> Result<TaperedCovariance> {
    let mut lines = r
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty() && !s.starts_with('#')));
    let header = lines.next().ok_or_else(|| Error::Parse("empty matrix file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(Error::Parse(format!("matrix header needs 5 fields, found `{header}`")));
    }
    let parse_err = |what: &str, s: &str| Error::Parse(format!("bad {what} `{s}` in matrix header"));
    let q: usize = fields[0].parse().map_err(|_| parse_err("size", fields[0]))?;
    let kind: EstimatorKind = fields[1].parse()?;
    let tau = match fields[2] {
        "-" => None,
        s => Some(s.parse().map_err(|_| parse_err("tau", s))?),
    };
    let alpha = match fields[3] {
        "-" => None,
        s => Some(s.parse().map_err(|_| parse_err("alpha", s))?),
    };
    let m: usize = fields[4].parse().map_err(|_| parse_err("sample count", fields[4]))?;
    let mut data = Vec::with_capacity(q * q);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let row = row.map_err(|e| Error::Parse(format!("matrix row {}: {e}", i + 1)))?;
        if row.len() != q {
            return Err(Error::Parse(format!("matrix row {} has {} entries, expected {q}", i + 1, row.len())));
        }
        data.extend(row);
    }
    if data.len() != q * q {
        return Err(Error::Parse(format!("expected {q} matrix rows, found {}", data.len() / q.max(1))));
    }
    Ok(TaperedCovariance { matrix: DMatrix::from_row_slice(q, q, &data), kind, tau, alpha, m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FeSpace;
    use crate::field::{draw_batch, exact_discrete_covariance, AnalyticField, FieldKind, SamplingMode};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mean_examples() {
        let one = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert_eq!(sample_mean(&one).as_slice(), &[1.0, 2.0, 3.0]);
        let two = DMatrix::from_row_slice(2, 2, &[1.5, -2.0, -1.5, 2.0]);
        assert_eq!(sample_mean(&two).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn brownian_mean_is_near_zero() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let s = FeSpace::uniform(1, 8).unwrap();
        let m = 100_000;
        let b = draw_batch(&f, &s, m, SamplingMode::NodalInterpolation, 21).unwrap();
        let mean = sample_mean(&b.coeffs);
        for (v, x) in mean.iter().zip(s.mesh().axis()) {
            assert!(v.abs() <= 3.0 * (x / m as f64).sqrt() + 1e-15, "{v} at {x}");
        }
    }

    #[test]
    fn mle_examples() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(mle_covariance(&same).unwrap().matrix, DMatrix::zeros(2, 2));
        let pm = DMatrix::from_row_slice(2, 2, &[1.0, 3.0, -1.0, -3.0]);
        let c = mle_covariance(&pm).unwrap().matrix;
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 9.0]));
        let single = DMatrix::from_row_slice(1, 2, &[1.0, 3.0]);
        assert!(matches!(mle_covariance(&single), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mle_error_scales_like_sqrt_q_over_m() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let s = FeSpace::uniform(1, 16).unwrap();
        let exact = exact_discrete_covariance(&f, &s);
        let err = |m: usize, seed: u64| {
            let b = draw_batch(&f, &s, m, SamplingMode::NodalInterpolation, seed).unwrap();
            linalg::opnorm_sym(&(mle_covariance(&b.coeffs).unwrap().matrix - &exact))
        };
        let small: f64 = (0..8).map(|r| err(1_000, r)).sum::<f64>() / 8.0;
        let large: f64 = (0..8).map(|r| err(100_000, 100 + r)).sum::<f64>() / 8.0;
        // Hundredfold more samples: tenfold smaller error, within a factor 2.
        let ratio = small / large;
        assert!((5.0..20.0).contains(&ratio), "{ratio}");
        assert!(large < 2.0 * (17.0f64 / 100_000.0).sqrt(), "{large}");
    }

    #[test]
    fn weight_examples() {
        assert_eq!(tapering_weight(4, 2).unwrap(), 1.0);
        assert_eq!(tapering_weight(4, 3).unwrap(), 0.5);
        assert_eq!(tapering_weight(4, 4).unwrap(), 0.0);
        assert!(tapering_weight(3, 0).is_err());
        assert!(tapering_weight(0, 0).is_err());
    }

    #[test]
    fn tau_examples() {
        assert_eq!(optimal_tau(1000, 1.0, 500), Some(10));
        assert_eq!(optimal_tau(100, 1.0, 500), Some(6));
        assert_eq!(optimal_tau(1_000_000, 1.0, 3), None);
        assert_eq!(optimal_tau(8, 1.0, 3), Some(2));
        assert_eq!(optimal_tau(27, 1.0, 3), Some(4));
        assert_eq!(optimal_tau(1, 1.0, 9), Some(2));
    }

    #[test]
    fn small_q_returns_mle_unchanged() {
        let samples = DMatrix::from_fn(1_000_000 / 1000, 3, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let mut mle = mle_covariance(&samples).unwrap();
        mle.m = 1_000_000;
        let t = taper(&mle, 1.0).unwrap();
        assert_eq!(t, mle);
    }

    #[test]
    fn rho_examples() {
        let v = rho_tilde_branch(1.0 / 64.0, 1e6, 1.0, 1, RateBranch::LargeQ);
        assert_relative_eq!(v, 1e-4 + 64f64.ln() / 1e6, max_relative = 1e-12);
        assert_relative_eq!(v, 1.0416e-4, max_relative = 1e-4);
        // Q_h = 65 < 100: the automatic rule picks the small-Q branch here.
        assert_eq!(rate_branch(1.0 / 64.0, 1e6, 1.0, 1), RateBranch::SmallQ);
        assert_relative_eq!(rho_tilde(0.5, 1e6, 1.0, 1), 2e-6, max_relative = 1e-12);
        assert_eq!(rate_branch(1.0 / 256.0, 1e6, 1.0, 1), RateBranch::LargeQ);
        let mut prev = f64::INFINITY;
        for m in [10.0, 100.0, 1e3, 1e4, 1e5, 1e6, 1e7] {
            let v = rho_tilde(1.0 / 64.0, m, 1.0, 1);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn decay_examples() {
        let id = DMatrix::<f64>::identity(6, 6);
        let c = decay_class_check(&id, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(c.c1_est, 0.0);
        assert!(c.passes);
        let tri = DMatrix::from_fn(6, 6, |i, j| if i.abs_diff(j) <= 1 { 1.0 } else { 0.0 });
        let tails = tail_sums(&tri);
        assert_eq!(tails[0], 2.0);
        assert!(tails[1..].iter().all(|t| *t == 0.0));
        assert_eq!(decay_class_check(&tri, 1.0, 1.0, 10.0).unwrap().c1_est, 0.0);
        let s = synthetic_decay_covariance(64, 1.0);
        let d = decay_class_check(&s, 1.0, 10.0, 10.0).unwrap();
        assert!(d.c1_est > 0.0 && d.c1_est < 3.0, "{}", d.c1_est);
        assert!(!decay_class_check(&s, 1.0, d.c1_est * 0.5, 10.0).unwrap().passes);
    }

    #[test]
    fn brownian_nodal_covariance_has_growing_decay_constant() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let est: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&n| {
                let s = FeSpace::uniform(1, n).unwrap();
                decay_class_check(&exact_discrete_covariance(&f, &s), 1.0, 1.0, 1.0).unwrap().c1_est
            })
            .collect();
        assert!(est[0] < est[1] && est[1] < est[2], "{est:?}");
    }

    #[test]
    fn subgaussian_examples() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let s = FeSpace::uniform(1, 8).unwrap();
        let b = draw_batch(&f, &s, 10_000, SamplingMode::NodalInterpolation, 2).unwrap();
        let r = subgaussian_diagnostic(&b).unwrap().rho_inv_nodal;
        assert!(r.is_finite() && r > 0.0);
        let mut b2 = b.clone();
        b2.coeffs *= 2.0;
        assert_relative_eq!(subgaussian_diagnostic(&b2).unwrap().rho_inv_nodal, 4.0 * r, max_relative = 1e-14);
        b2.coeffs.fill(0.0);
        assert_eq!(subgaussian_diagnostic(&b2).unwrap().rho_inv_nodal, 0.0);
    }

    #[test]
    fn matrix_text_round_trip() {
        let samples = DMatrix::from_fn(50, 5, |i, j| ((i * 13 + j * 5) % 7) as f64 - 3.0);
        let t = taper(&mle_covariance(&samples).unwrap(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_matrix(&t, &mut buf).unwrap();
        assert_eq!(read_matrix(&buf[..]).unwrap(), t);
        let m = mle_covariance(&samples).unwrap();
        let mut buf = Vec::new();
        write_matrix(&m, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("5 mle - - 50"));
        assert_eq!(read_matrix(&buf[..]).unwrap(), m);
        assert!(read_matrix(&b"3 mle - -\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn tapering_is_symmetric_banded_and_shrinking(
            vals in proptest::collection::vec(-5.0f64..5.0, 40 * 12), m in 2usize..5000
        ) {
            let samples = DMatrix::from_row_slice(40, 12, &vals);
            let mut mle = mle_covariance(&samples).unwrap();
            mle.m = m;
            let t = taper(&mle, 1.0).unwrap();
            prop_assert_eq!(&t.matrix, &t.matrix.transpose());
            prop_assert!(linalg::max_abs(&t.matrix) <= linalg::max_abs(&mle.matrix));
            if let Some(tau) = t.tau {
                prop_assert_eq!(tau % 2, 0);
                for i in 0..12usize {
                    for j in 0..12usize {
                        if i.abs_diff(j) >= tau {
                            prop_assert_eq!(t.matrix[(i, j)], 0.0);
                        }
                    }
                }
            }
        }

        #[test]
        fn weights_lie_in_unit_interval(half in 1usize..50, k in 0usize..200) {
            let w = tapering_weight(2 * half, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&w));
        }
    }
}
