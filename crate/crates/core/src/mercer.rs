//! Truncated Mercer kernels and the three-way reconstruction error.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{FeSpace, Mesh, QuadratureGrid};
use crate::field::{AnalyticField, EigenSequence, KlOracle};
use crate::spectral::{align_signs, DiscreteSpectrum};

/// Where the eigenpairs of a kernel came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum Provenance {
    ExactDiscrete { h: f64 },
    Estimated { h: f64, m: usize, tau: Option<usize>, seed: u64 },
}

/// `Σ_{ℓ≤L} λ_ℓ φ_ℓ(x) φ_ℓ(x′)` with `φ_ℓ = Φ_ℓ · θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MercerKernel {
    pub mesh: Mesh,
    pub eigenvalues: Vec<f64>,
    /// Generalized eigenvectors, one per column.
    pub vectors: DMatrix<f64>,
    pub provenance: Provenance,
}

/// Keeps the leading `l` eigenpairs.
pub fn build_kernel(
    spectrum: &DiscreteSpectrum,
    l: usize,
    space: &FeSpace,
    provenance: Provenance,
) -> Result<MercerKernel> {
    let q = space.dof_count();
    if l == 0 || l > q || spectrum.len() != q {
        return Err(Error::invalid(format!(
            "truncation {l} must lie in 1..={q} for a spectrum of size {}",
            spectrum.len()
        )));
    }
    Ok(MercerKernel {
        mesh: space.mesh().clone(),
        eigenvalues: spectrum.eigenvalues[..l].to_vec(),
        vectors: spectrum.gen_vectors.columns(0, l).into_owned(),
        provenance,
    })
}

impl MercerKernel {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `φ_ℓ(x)` for every kept mode.
    pub fn modes_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        let st = self.mesh.basis_at(x)?;
        Ok((0..self.rank())
            .map(|l| st.iter().map(|(j, v)| self.vectors[(j, l)] * v).sum())
            .collect())
    }

    /// Pointwise value; both points must lie in the closed unit cube.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let a = self.modes_at(x)?;
        let b = self.modes_at(y)?;
        Ok(self.eigenvalues.iter().zip(a.iter().zip(&b)).map(|(lam, (u, v))| lam * (u * v)).sum())
    }

    /// Values on a regular `npts`-point grid per axis. In 1D the full
    /// `npts × npts` table; in 2D the slice with the second point fixed at `anchor`.
    pub fn snapshot(&self, npts: usize, anchor: &[f64]) -> Result<DMatrix<f64>> {
        if npts < 2 {
            return Err(Error::invalid("snapshot grid needs at least 2 points"));
        }
        let t = |i: usize| i as f64 / (npts - 1) as f64;
        match self.mesh.dim() {
            1 => {
                let modes: Vec<Vec<f64>> = (0..npts).map(|i| self.modes_at(&[t(i)])).collect::<Result<_>>()?;
                Ok(DMatrix::from_fn(npts, npts, |i, j| {
                    self.eigenvalues.iter().enumerate().map(|(l, lam)| lam * (modes[i][l] * modes[j][l])).sum()
                }))
            }
            _ => {
                let b = self.modes_at(anchor)?;
                let mut out = DMatrix::zeros(npts, npts);
                for i in 0..npts {
                    for j in 0..npts {
                        let a = self.modes_at(&[t(i), t(j)])?;
                        out[(i, j)] = self.eigenvalues.iter().enumerate().map(|(l, lam)| lam * (a[l] * b[l])).sum();
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Low-rank kernel `Σ c_k f_k ⊗ f_k` tabulated on a quadrature grid.
struct Tabulated {
    coef: Vec<f64>,
    funcs: Vec<Vec<f64>>,
}

impl Tabulated {
    fn from_spectrum(grid: &QuadratureGrid, spec: &DiscreteSpectrum, l: usize, sign: f64) -> Self {
        Tabulated {
            coef: spec.eigenvalues[..l].iter().map(|v| sign * v).collect(),
            funcs: (0..l).map(|k| grid.tabulate(spec.gen_vectors.column(k).as_slice())).collect(),
        }
    }

    fn from_oracle(grid: &QuadratureGrid, oracle: &KlOracle, l: usize) -> Self {
        Tabulated {
            coef: (1..=l).map(|k| oracle.eigenvalue(k)).collect(),
            funcs: (1..=l).map(|k| grid.sample(|x| oracle.eigenfunction(k, x))).collect(),
        }
    }

    fn extend(mut self, other: Tabulated) -> Self {
        self.coef.extend(other.coef);
        self.funcs.extend(other.funcs);
        self
    }

    /// Tensor quadrature of the squared kernel via weighted Gram entries.
    fn norm(&self, grid: &QuadratureGrid) -> f64 {
        let k = self.coef.len();
        let mut gram = vec![0.0; k * k];
        for a in 0..k {
            for b in a..k {
                let g = grid.inner(&self.funcs[a], &self.funcs[b]);
                gram[a * k + b] = g;
                gram[b * k + a] = g;
            }
        }
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                s += self.coef[a] * self.coef[b] * gram[a * k + b] * gram[a * k + b];
            }
        }
        s.max(0.0).sqrt()
    }

    fn value(&self, i: usize, j: usize) -> f64 {
        self.coef.iter().zip(&self.funcs).map(|(c, f)| c * (f[i] * f[j])).sum()
    }
}

/// Truncation, discretization and sampling errors in `L²(D×D)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub l: usize,
    /// Gauss points per element per axis.
    pub q: usize,
    /// `‖R − R^L‖`, from the eigenvalue tail.
    pub e1: f64,
    /// `‖R^L − R^{L;h}‖`.
    pub e2: f64,
    /// `‖R^{L;h} − R^{L;h;M}‖`.
    pub e3: f64,
    /// `‖R − R^{L;h;M}‖`.
    pub total: f64,
    /// `total − (e1 + e2 + e3)`.
    pub triangle_slack: f64,
    /// `e3` from eigenvector inner products instead of quadrature.
    pub e3_spectral: f64,
    /// Eigenvalue part of the sampling error.
    pub e3_eigenvalues: f64,
    /// Each of the two eigenvector parts of the sampling error (they are equal).
    pub e3_eigenvectors: f64,
    /// Some gap among the leading `L + 1` eigenvalues is below `1e-8 λ₁`;
    /// the per-mode split is then unreliable.
    pub near_degenerate: bool,
}

fn near_degenerate(spec: &DiscreteSpectrum, l: usize) -> bool {
    let ev = &spec.eigenvalues;
    let top = ev[0].abs();
    let upto = (l + 1).min(ev.len());
    ev[..upto].windows(2).any(|w| (w[0] - w[1]).abs() < 1e-8 * top)
}

/// Error split of the rank-`l` reconstruction from `est_spec`.
///
/// `est_spec` is sign-aligned to `exact_spec` first; the kernel norms are
/// sign-invariant but the per-mode split is not.
pub fn error_decomposition(
    field: &AnalyticField,
    oracle: &KlOracle,
    space: &FeSpace,
    exact_spec: &DiscreteSpectrum,
    est_spec: &DiscreteSpectrum,
    l: usize,
    q: usize,
) -> Result<ErrorReport> {
    let n = space.dof_count();
    if l == 0 || l > n {
        return Err(Error::invalid(format!("truncation {l} must lie in 1..={n}")));
    }
    if exact_spec.len() != n || est_spec.len() != n {
        return Err(Error::invalid("spectra do not match the finite element space"));
    }
    if field.dim() != space.dim() {
        return Err(Error::invalid("field and finite element space differ in dimension"));
    }
    if !(2..=6).contains(&q) {
        return Err(Error::invalid(format!("kernel quadrature order must lie in 2..=6, got {q}")));
    }
    if let Some(avail) = oracle.available() {
        if l > avail {
            return Err(Error::invalid(format!("oracle tabulates {avail} modes, truncation is {l}")));
        }
    }
    let est = align_signs(exact_spec, est_spec)?;
    let grid = space.quadrature(q);

    let e1 = oracle.tail_sq_sum(l).sqrt();
    let e2 = Tabulated::from_oracle(&grid, oracle, l)
        .extend(Tabulated::from_spectrum(&grid, exact_spec, l, -1.0))
        .norm(&grid);
    let e3 = Tabulated::from_spectrum(&grid, exact_spec, l, 1.0)
        .extend(Tabulated::from_spectrum(&grid, &est, l, -1.0))
        .norm(&grid);

    let recon = Tabulated::from_spectrum(&grid, &est, l, 1.0);
    let total = grid
        .kernel_sq_integral(|i, j| field.covariance(grid.point(i), grid.point(j)) - recon.value(i, j))
        .sqrt();

    let lh = &exact_spec.eigenvalues[..l];
    let lm = &est.eigenvalues[..l];
    let mut cross = 0.0;
    for a in 0..l {
        for b in 0..l {
            let d = exact_spec.tilde_vectors.column(a).dot(&est.tilde_vectors.column(b));
            cross += lh[a] * lm[b] * d * d;
        }
    }
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let e3_spectral = (sq(lh) + sq(lm) - 2.0 * cross).max(0.0).sqrt();
    let e3_eigenvalues = lh.iter().zip(lm).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let e3_eigenvectors = (0..l)
        .map(|k| {
            let d = (exact_spec.tilde_vectors.column(k) - est.tilde_vectors.column(k)).norm_squared();
            lm[k] * lm[k] * d
        })
        .sum::<f64>()
        .sqrt();

    Ok(ErrorReport {
        l,
        q,
        e1,
        e2,
        e3,
        total,
        triangle_slack: total - (e1 + e2 + e3),
        e3_spectral,
        e3_eigenvalues,
        e3_eigenvectors,
        near_degenerate: near_degenerate(exact_spec, l) || near_degenerate(&est, l),
    })
}

/// `‖R − R^L‖` by tensor quadrature, as a cross-check of the eigenvalue tail.
pub fn truncation_error_quadrature(
    field: &AnalyticField,
    oracle: &KlOracle,
    space: &FeSpace,
    l: usize,
    q: usize,
) -> f64 {
    let grid = space.quadrature(q);
    let modes = Tabulated::from_oracle(&grid, oracle, l);
    grid.kernel_sq_integral(|i, j| field.covariance(grid.point(i), grid.point(j)) - modes.value(i, j))
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{estimate, EstimatorKind};
    use crate::field::{brownian_oracle, draw_batch, exact_discrete_covariance, FieldKind, SamplingMode};
    use crate::spectral::{eigensolve, transform, StiffnessSource};

    fn exact_spectrum(space: &FeSpace, field: &AnalyticField) -> DiscreteSpectrum {
        let sigma = exact_discrete_covariance(field, space);
        eigensolve(&transform(&sigma, space.mass(), StiffnessSource::ExactDiscrete).unwrap()).unwrap()
    }

    fn estimated_spectrum(space: &FeSpace, field: &AnalyticField, m: usize, seed: u64) -> DiscreteSpectrum {
        let b = draw_batch(field, space, m, SamplingMode::NodalInterpolation, seed).unwrap();
        let c = estimate(&b.coeffs, EstimatorKind::Mle, 1.0).unwrap();
        eigensolve(&transform(&c.matrix, space.mass(), StiffnessSource::Estimated).unwrap()).unwrap()
    }

    #[test]
    fn full_rank_kernel_interpolates_nodal_covariance() {
        for kind in [FieldKind::BrownianMotion1D, FieldKind::BrownianSheet2D] {
            let f = AnalyticField::new(kind);
            let n = if f.dim() == 1 { 8 } else { 3 };
            let space = FeSpace::uniform(f.dim(), n).unwrap();
            let spec = exact_spectrum(&space, &f);
            let q = space.dof_count();
            let k = build_kernel(&spec, q, &space, Provenance::ExactDiscrete { h: space.h() }).unwrap();
            let sigma = exact_discrete_covariance(&f, &space);
            let nodes = space.mesh().nodes();
            for a in 0..q {
                for b in 0..q {
                    assert!((k.eval(&nodes[a], &nodes[b]).unwrap() - sigma[(a, b)]).abs() < 1e-12);
                }
                assert!(k.eval(&vec![0.0; f.dim()], &nodes[a]).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_is_bilinear_interpolation() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let space = FeSpace::uniform(1, 4).unwrap();
        let spec = exact_spectrum(&space, &f);
        let k = build_kernel(&spec, 5, &space, Provenance::ExactDiscrete { h: 0.25 }).unwrap();
        let (x, y) = (0.375, 0.625);
        let want = 0.25 * (0.25f64.min(0.5) + 0.25f64.min(0.75) + 0.5f64.min(0.5) + 0.5f64.min(0.75));
        assert!((k.eval(&[x], &[y]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kernel_rank_and_symmetry() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let space = FeSpace::uniform(1, 8).unwrap();
        let spec = exact_spectrum(&space, &f);
        let prov = Provenance::ExactDiscrete { h: space.h() };
        let k1 = build_kernel(&spec, 1, &space, prov).unwrap();
        let k2 = build_kernel(&spec, 2, &space, prov).unwrap();
        let k3 = build_kernel(&spec, 3, &space, prov).unwrap();
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            assert!(k1.eval(&[x], &[x]).unwrap() >= 0.0);
            for j in 0..=20 {
                let y = j as f64 / 20.0;
                assert_eq!(k3.eval(&[x], &[y]).unwrap(), k3.eval(&[y], &[x]).unwrap());
                let phi = |t: f64| {
                    let st = space.mesh().basis_at(&[t]).unwrap();
                    st.iter().map(|(jj, v)| spec.gen_vectors[(jj, 2)] * v).sum::<f64>()
                };
                let dyad = spec.eigenvalues[2] * phi(x) * phi(y);
                let diff = k3.eval(&[x], &[y]).unwrap() - k2.eval(&[x], &[y]).unwrap();
                assert!((diff - dyad).abs() < 1e-14);
            }
        }
        assert!(build_kernel(&spec, 0, &space, prov).is_err());
        assert!(build_kernel(&spec, 10, &space, prov).is_err());
        assert!(k1.eval(&[1.2], &[0.5]).is_err());
    }

    #[test]
    fn exact_estimate_has_zero_sampling_error() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let space = FeSpace::uniform(1, 16).unwrap();
        let spec = exact_spectrum(&space, &f);
        let r = error_decomposition(&f, &f.oracle(), &space, &spec, &spec, 3, 2).unwrap();
        assert_eq!(r.e3, 0.0);
        assert_eq!(r.e3_eigenvalues, 0.0);
        assert!(r.total <= r.e1 + r.e2 + 1e-8);
    }

    #[test]
    fn truncation_error_matches_quadrature() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let o = brownian_oracle(1);
        let space = FeSpace::uniform(1, 256).unwrap();
        for l in [1, 3] {
            let quad = truncation_error_quadrature(&f, &o, &space, l, 4);
            let exact = o.tail_sq_sum(l).sqrt();
            assert!((quad - exact).abs() < 1e-4 * exact, "L={l}: {quad} vs {exact}");
        }
    }

    #[test]
    fn sampling_error_split_matches_quadrature() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let space = FeSpace::uniform(1, 16).unwrap();
        let exact = exact_spectrum(&space, &f);
        for seed in 0..5 {
            let est = estimated_spectrum(&space, &f, 500, seed);
            let r = error_decomposition(&f, &f.oracle(), &space, &exact, &est, 3, 2).unwrap();
            assert!((r.e3 - r.e3_spectral).abs() <= 0.02 * r.e3, "{} vs {}", r.e3, r.e3_spectral);
            assert!(r.e3 <= r.e3_eigenvalues + 2.0 * r.e3_eigenvectors + 1e-12);
            assert!(r.total <= r.e1 + r.e2 + r.e3 + 1e-8);
            assert!(r.total >= r.e1 - 1e-3);
            assert!(!r.near_degenerate);
        }
    }

    #[test]
    fn full_rank_reconstruction_loses_nothing_beyond_interpolation() {
        let f = AnalyticField::new(FieldKind::BrownianMotion1D);
        let space = FeSpace::uniform(1, 8).unwrap();
        let spec = exact_spectrum(&space, &f);
        let q = space.dof_count();
        let sigma = &exact_discrete_covariance(&f, &space);
        let grid = space.quadrature(4);
        let full = Tabulated::from_spectrum(&grid, &spec, q, 1.0);
        let diff = grid
            .kernel_sq_integral(|i, j| {
                let interp: f64 = grid.stencils[i]
                    .iter()
                    .flat_map(|(a, va)| grid.stencils[j].iter().map(move |(b, vb)| va * vb * sigma[(a, b)]))
                    .sum();
                interp - full.value(i, j)
            })
            .sqrt();
        assert!(diff <= 1e-10, "{diff}");
    }

    #[test]
    fn two_dimensional_report_is_consistent() {
        let f = AnalyticField::new(FieldKind::BrownianSheet2D);
        let space = FeSpace::uniform(2, 6).unwrap();
        let exact = exact_spectrum(&space, &f);
        let est = estimated_spectrum(&space, &f, 400, 1);
        let r = error_decomposition(&f, &f.oracle(), &space, &exact, &est, 1, 2).unwrap();
        assert!(r.total <= r.e1 + r.e2 + r.e3 + 1e-8);
        assert!((r.e3 - r.e3_spectral).abs() <= 1e-8);
    }

    #[test]
    fn snapshot_shapes() {
        let f = AnalyticField::new(FieldKind::BrownianSheet2D);
        let space = FeSpace::uniform(2, 4).unwrap();
        let spec = exact_spectrum(&space, &f);
        let k = build_kernel(&spec, 3, &space, Provenance::ExactDiscrete { h: 0.25 }).unwrap();
        let s = k.snapshot(9, &[0.5, 0.5]).unwrap();
        assert_eq!(s.shape(), (9, 9));
        assert!(s[(0, 0)].abs() < 1e-12);
    }
}
