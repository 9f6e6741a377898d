//! Transformed stiffness matrices, their eigenpairs, and perturbation diagnostics.
//!
//! With `G = L Lᵀ` the generalized problem `G Σ G Φ = λ G Φ` becomes the
//! symmetric problem `S̃ Φ̃ = λ Φ̃` for `S̃ = Lᵀ Σ L`, and `Φ = L^{−T} Φ̃`.

use std::path::PathBuf;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::calibration::Calibration;
use crate::error::{Error, Result};
use crate::fem::MassMatrix;
use crate::field::EigenSequence;
use crate::linalg;

/// Whether a stiffness matrix comes from the exact or an estimated covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StiffnessSource {
    ExactDiscrete,
    Estimated,
}

/// `S̃ = Lᵀ Σ L`, stored exactly symmetric, with the covariance it came from.
#[derive(Debug, Clone)]
pub struct TransformedStiffness<'a> {
    pub matrix: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub source: StiffnessSource,
    pub mass: &'a MassMatrix,
}

pub fn transform<'a>(
    cov: &DMatrix<f64>,
    mass: &'a MassMatrix,
    source: StiffnessSource,
) -> Result<TransformedStiffness<'a>> {
    let q = mass.matrix.nrows();
    if cov.shape() != (q, q) {
        return Err(Error::invalid(format!(
            "covariance is {}x{} but the mass matrix is {q}x{q}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    let l = &mass.chol;
    let s = l.tr_mul(cov) * l;
    Ok(TransformedStiffness { matrix: linalg::symmetrize(&s), cov: cov.clone(), source, mass })
}

/// Descending eigenpairs of a transformed stiffness matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors of `S̃`, one per column.
    pub tilde_vectors: DMatrix<f64>,
    /// `L^{−T} Φ̃`, `G`-orthonormal, one per column.
    pub gen_vectors: DMatrix<f64>,
    pub source: StiffnessSource,
}

impl DiscreteSpectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

#[cfg(not(target_arch = "wasm32"))]
fn dump_matrix(m: &DMatrix<f64>) -> Option<PathBuf> {
    use std::io::Write;
    let path = std::env::temp_dir().join(format!("covrecon-eigensolve-failure-{}.txt", m.nrows()));
    let mut f = std::fs::File::create(&path).ok()?;
    for r in m.row_iter() {
        let row: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(" ")).ok()?;
    }
    Some(path)
}

#[cfg(target_arch = "wasm32")]
fn dump_matrix(_: &DMatrix<f64>) -> Option<PathBuf> {
    None
}

/// Sign convention: the largest-magnitude component (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Full eigendecomposition, sorted descending with ties in solver order.
pub fn eigensolve(ts: &TransformedStiffness<'_>) -> Result<DiscreteSpectrum> {
    let (vals, vecs) = match linalg::sym_eigen(&ts.matrix) {
        Err(Error::Convergence { dim, .. }) => {
            return Err(Error::Convergence { dim, dump: dump_matrix(&ts.matrix) })
        }
        other => other?,
    };
    let q = vals.len();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut tilde = DMatrix::zeros(q, q);
    for (k, &i) in order.iter().enumerate() {
        let mut col: Vec<f64> = vecs.column(i).iter().copied().collect();
        canonical_sign(&mut col);
        tilde.column_mut(k).copy_from_slice(&col);
    }
    let gen = ts
        .mass
        .chol
        .tr_solve_lower_triangular(&tilde)
        .ok_or_else(|| Error::Internal("singular mass factor in back-transform".into()))?;
    Ok(DiscreteSpectrum {
        eigenvalues: order.iter().map(|&i| vals[i]).collect(),
        tilde_vectors: tilde,
        gen_vectors: gen,
        source: ts.source,
    })
}

/// Flips target vectors so that `Φ̃_ℓ^ref · Φ̃_ℓ^target ≥ 0`; a zero product is left as is.
pub fn align_signs(reference: &DiscreteSpectrum, target: &DiscreteSpectrum) -> Result<DiscreteSpectrum> {
    if reference.tilde_vectors.shape() != target.tilde_vectors.shape() {
        return Err(Error::invalid("spectra to align have different dimensions"));
    }
    let mut out = target.clone();
    for l in 0..target.len() {
        if reference.tilde_vectors.column(l).dot(&target.tilde_vectors.column(l)) < 0.0 {
            out.tilde_vectors.column_mut(l).neg_mut();
            out.gen_vectors.column_mut(l).neg_mut();
        }
    }
    Ok(out)
}

/// `[λ_min(G) v, λ_max(G) v]`, the range of `‖ΔS̃‖` given `‖ΔΣ‖ = v`.
pub fn opnorm_sandwich(mass: &MassMatrix, cov_diff_norm: f64) -> Result<(f64, f64)> {
    if !(cov_diff_norm >= 0.0) {
        return Err(Error::invalid(format!("norm must be nonnegative, got {cov_diff_norm}")));
    }
    Ok((mass.lambda_min * cov_diff_norm, mass.lambda_max * cov_diff_norm))
}

/// Comparison of an exact and an estimated spectrum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralDiagnostics {
    /// `‖S̃ − S̃^M‖₂`.
    pub weyl_bound: f64,
    /// `|λ_ℓ^h − λ_ℓ^{h;M}|` for `ℓ ≤ L`.
    pub eigenvalue_deviations: Vec<f64>,
    /// Eigenvalue pairs compared against the Weyl bound (all of them).
    pub weyl_comparisons: usize,
    pub weyl_violations: usize,
    /// Mixed discrete gaps `min{|λ^{h;M}_{ℓ−1} − λ^h_ℓ|, |λ^h_ℓ − λ^{h;M}_{ℓ+1}|}`.
    pub discrete_gaps: Vec<f64>,
    pub continuous_gaps: Vec<f64>,
    /// `δ_ℓ − 4 C₁ h^{2s} / λ_{ℓ+1} − 4 ‖S̃ − S̃^M‖`.
    pub gap_margins: Vec<f64>,
    /// Every margin is nonnegative.
    pub gap_condition_ok: bool,
    /// `δ^{h;M}_ℓ ≥ δ_ℓ / 4`, evaluated where that ℓ's margin is nonnegative.
    pub gap_bound_holds: Vec<Option<bool>>,
    pub gap_bound_violations: usize,
    /// `‖S̃ − S̃^M‖ / δ^{h;M}_ℓ`.
    pub davis_kahan_ratios: Vec<f64>,
    /// `‖Φ̃^h_ℓ − Φ̃^{h;M}_ℓ‖₂` after sign alignment.
    pub eigenvector_deviations: Vec<f64>,
    pub sandwich: (f64, f64),
    pub sandwich_ok: bool,
}

/// Perturbation diagnostics for the leading `l` modes.
#[allow(clippy::too_many_arguments)]
pub fn diagnostics(
    exact: &DiscreteSpectrum,
    estimated: &DiscreteSpectrum,
    s_exact: &TransformedStiffness<'_>,
    s_est: &TransformedStiffness<'_>,
    oracle: &dyn EigenSequence,
    l: usize,
    calib: &Calibration,
    h: f64,
    s: f64,
) -> Result<SpectralDiagnostics> {
    let q = exact.len();
    if l == 0 || l > q {
        return Err(Error::invalid(format!("truncation {l} must lie in 1..={q}")));
    }
    if estimated.len() != q || s_est.matrix.nrows() != q {
        return Err(Error::invalid("spectra and stiffness matrices must share one dimension"));
    }
    let diff = &s_exact.matrix - &s_est.matrix;
    let weyl_bound = linalg::opnorm_sym(&diff);
    let tol = 1e-10 * (1.0 + weyl_bound);
    let all_dev: Vec<f64> =
        exact.eigenvalues.iter().zip(&estimated.eigenvalues).map(|(a, b)| (a - b).abs()).collect();
    let weyl_violations = all_dev.iter().filter(|d| **d > weyl_bound + tol).count();

    let lh = &exact.eigenvalues;
    let lm = &estimated.eigenvalues;
    let aligned = align_signs(exact, estimated)?;
    let h2s = h.powf(2.0 * s);
    let mut out = SpectralDiagnostics {
        weyl_bound,
        eigenvalue_deviations: all_dev[..l].to_vec(),
        weyl_comparisons: q,
        weyl_violations,
        discrete_gaps: Vec::with_capacity(l),
        continuous_gaps: Vec::with_capacity(l),
        gap_margins: Vec::with_capacity(l),
        gap_condition_ok: true,
        gap_bound_holds: Vec::with_capacity(l),
        gap_bound_violations: 0,
        davis_kahan_ratios: Vec::with_capacity(l),
        eigenvector_deviations: Vec::with_capacity(l),
        sandwich: (0.0, 0.0),
        sandwich_ok: true,
    };
    for k in 1..=l {
        let i = k - 1;
        let above = if k == 1 { f64::INFINITY } else { (lm[i - 1] - lh[i]).abs() };
        let below = if k == q { f64::INFINITY } else { (lh[i] - lm[i + 1]).abs() };
        let dgap = above.min(below);
        let cgap = oracle.gap(k);
        let margin = cgap - 4.0 * calib.c1 * h2s / oracle.eigenvalue(k + 1) - 4.0 * weyl_bound;
        let holds = (margin >= 0.0).then_some(dgap >= 0.25 * cgap);
        if holds == Some(false) {
            out.gap_bound_violations += 1;
        }
        out.gap_condition_ok &= margin >= 0.0;
        out.discrete_gaps.push(dgap);
        out.continuous_gaps.push(cgap);
        out.gap_margins.push(margin);
        out.gap_bound_holds.push(holds);
        out.davis_kahan_ratios.push(weyl_bound / dgap);
        out.eigenvector_deviations
            .push((exact.tilde_vectors.column(i) - aligned.tilde_vectors.column(i)).norm());
    }
    let cov_norm = linalg::opnorm_sym(&(&s_exact.cov - &s_est.cov));
    let (lo, hi) = opnorm_sandwich(s_exact.mass, cov_norm)?;
    out.sandwich = (lo, hi);
    let slack = 1e-10 * (1.0 + hi);
    out.sandwich_ok = lo <= weyl_bound + slack && weyl_bound <= hi + slack;
    Ok(out)
}
