//! Gaussian fields with known covariance: Brownian motion and the Brownian sheet.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{self, FeSpace, Mesh};
use crate::rng::substream;

/// Which analytic field to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    /// `R(x, x′) = min(x, x′)` on `(0, 1)`.
    #[serde(rename = "brownian_motion", alias = "brownian_motion_1d")]
    BrownianMotion1D,
    /// `R = min(x₁, x₁′) min(x₂, x₂′)` on `(0, 1)²`.
    #[serde(rename = "brownian_sheet", alias = "brownian_sheet_2d")]
    BrownianSheet2D,
}

impl FieldKind {
    pub fn dim(self) -> usize {
        match self {
            FieldKind::BrownianMotion1D => 1,
            FieldKind::BrownianSheet2D => 2,
        }
    }

    pub fn for_dim(dim: usize) -> Result<Self> {
        match dim {
            1 => Ok(FieldKind::BrownianMotion1D),
            2 => Ok(FieldKind::BrownianSheet2D),
            _ => Err(Error::invalid(format!("no analytic field in dimension {dim}"))),
        }
    }
}

/// A centered Gaussian field with closed-form covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticField {
    pub kind: FieldKind,
    /// Reported smoothness is `0.5 − smoothness_epsilon`.
    pub smoothness_epsilon: f64,
}

impl AnalyticField {
    pub fn new(kind: FieldKind) -> Self {
        AnalyticField { kind, smoothness_epsilon: 1e-3 }
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn smoothness(&self) -> f64 {
        0.5 - self.smoothness_epsilon
    }

    pub fn covariance(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(a, b)| a.min(*b)).product()
    }

    pub fn oracle(&self) -> KlOracle {
        brownian_oracle(self.dim())
    }
}

/// Eigenvalues with their gaps, indexed from 1 in descending order.
pub trait EigenSequence {
    fn eigenvalue(&self, l: usize) -> f64;

    /// `min{λ_{ℓ−1} − λ_ℓ, λ_ℓ − λ_{ℓ+1}}` with `λ₀ = ∞`.
    fn gap(&self, l: usize) -> f64 {
        let lam = self.eigenvalue(l);
        let below = lam - self.eigenvalue(l + 1);
        if l == 1 {
            below
        } else {
            below.min(self.eigenvalue(l - 1) - lam)
        }
    }
}

fn bm_eigenvalue(l: usize) -> f64 {
    let t = l as f64 - 0.5;
    1.0 / (PI * PI * t * t)
}

fn bm_eigenfunction(l: usize, x: f64) -> f64 {
    std::f64::consts::SQRT_2 * ((l as f64 - 0.5) * PI * x).sin()
}

/// `Σ_{ℓ>L} λ_ℓ²` for Brownian motion: explicit sum to `L + 10⁶` plus the
/// integral remainder of `(16/π⁴)(2ℓ−1)^{−4}`.
fn bm_tail_sq(l: usize) -> f64 {
    const TERMS: usize = 1_000_000;
    let c = 16.0 / PI.powi(4);
    let end = l + TERMS;
    // Summed from the smallest term upward.
    let mut s = 0.0;
    for k in ((l + 1)..=end).rev() {
        let t = 2.0 * k as f64 - 1.0;
        s += 1.0 / (t * t * t * t);
    }
    let remainder = 1.0 / (6.0 * (2.0 * end as f64).powi(3));
    c * (s + remainder)
}

/// Distinct eigenvalues of Brownian motion (`d = 1`) or the Brownian sheet
/// (`d = 2`), the latter reindexed by odd products `(2a−1)(2b−1) = 2ℓ−1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistinctBrownian {
    pub dim: usize,
}

impl DistinctBrownian {
    fn scale(&self) -> f64 {
        bm_eigenvalue(1).powi(self.dim as i32 - 1)
    }
}

impl EigenSequence for DistinctBrownian {
    fn eigenvalue(&self, l: usize) -> f64 {
        self.scale() * bm_eigenvalue(l)
    }
}

/// One tensor-product mode `φ_a(x₁) φ_b(x₂)` of the Brownian sheet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SheetMode {
    pub lambda: f64,
    pub a: usize,
    pub b: usize,
}

/// Exact Karhunen-Loève pairs of the Brownian fields.
#[derive(Debug, Clone, PartialEq)]
pub enum KlOracle {
    BrownianMotion,
    /// Tensor-product modes sorted by decreasing eigenvalue, ties by `a`.
    BrownianSheet { modes: Vec<SheetMode> },
}

/// Largest odd product kept in the Brownian sheet mode table.
const SHEET_MAX_PRODUCT: usize = 4001;

/// Karhunen-Loève oracle for `d ∈ {1, 2}`.
pub fn brownian_oracle(dim: usize) -> KlOracle {
    if dim == 1 {
        return KlOracle::BrownianMotion;
    }
    let mut modes = Vec::new();
    let mut a = 1;
    while 2 * a - 1 <= SHEET_MAX_PRODUCT {
        let pa = 2 * a - 1;
        let mut b = 1;
        while pa * (2 * b - 1) <= SHEET_MAX_PRODUCT {
            // From the odd product so that equal products give bit-equal eigenvalues.
            let prod = (pa * (2 * b - 1)) as f64;
            modes.push(SheetMode { lambda: 16.0 / (PI.powi(4) * prod * prod), a, b });
            b += 1;
        }
        a += 1;
    }
    modes.sort_by_key(|m| ((2 * m.a - 1) * (2 * m.b - 1), m.a));
    KlOracle::BrownianSheet { modes }
}

impl KlOracle {
    pub fn dim(&self) -> usize {
        match self {
            KlOracle::BrownianMotion => 1,
            KlOracle::BrownianSheet { .. } => 2,
        }
    }

    /// Number of modes available, `None` when unbounded.
    pub fn available(&self) -> Option<usize> {
        match self {
            KlOracle::BrownianMotion => None,
            KlOracle::BrownianSheet { modes } => Some(modes.len()),
        }
    }

    fn sheet_mode(modes: &[SheetMode], l: usize) -> SheetMode {
        assert!(
            l >= 1 && l <= modes.len(),
            "Brownian sheet oracle tabulates modes 1..={}, asked for {l}",
            modes.len()
        );
        modes[l - 1]
    }

    /// `φ_ℓ(x)`, orthonormal in `L²((0, 1)^d)`.
    pub fn eigenfunction(&self, l: usize, x: &[f64]) -> f64 {
        match self {
            KlOracle::BrownianMotion => bm_eigenfunction(l, x[0]),
            KlOracle::BrownianSheet { modes } => {
                let m = Self::sheet_mode(modes, l);
                bm_eigenfunction(m.a, x[0]) * bm_eigenfunction(m.b, x[1])
            }
        }
    }

    /// Closed form of the Brownian motion forward gap, `2ℓ / (π²(ℓ² − ¼)²)`.
    pub fn closed_form_gap(l: usize) -> f64 {
        let lf = l as f64;
        2.0 * lf / (PI * PI * (lf * lf - 0.25).powi(2))
    }

    /// `Σ_{ℓ>L} λ_ℓ²`, the squared truncation error of the Mercer series.
    pub fn tail_sq_sum(&self, l: usize) -> f64 {
        match self {
            KlOracle::BrownianMotion => bm_tail_sq(l),
            KlOracle::BrownianSheet { modes } => {
                let head: f64 = modes[..l.min(modes.len())].iter().map(|m| m.lambda * m.lambda).sum();
                (1.0 / 36.0 - head).max(0.0)
            }
        }
    }

    /// `Σ_{ℓ ≤ K} λ_ℓ φ_ℓ(x) φ_ℓ(x′)`.
    pub fn truncated_kernel(&self, k: usize, x: &[f64], y: &[f64]) -> f64 {
        (1..=k)
            .map(|l| self.eigenvalue(l) * self.eigenfunction(l, x) * self.eigenfunction(l, y))
            .sum()
    }
}

impl EigenSequence for KlOracle {
    fn eigenvalue(&self, l: usize) -> f64 {
        assert!(l >= 1, "eigenvalues are indexed from 1");
        match self {
            KlOracle::BrownianMotion => bm_eigenvalue(l),
            KlOracle::BrownianSheet { modes } => {
                if l > modes.len() {
                    return 0.0;
                }
                modes[l - 1].lambda
            }
        }
    }
}

/// How a field realization becomes a coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    /// Exact joint-Gaussian nodal values.
    NodalInterpolation,
    /// `L²` projection of the Karhunen-Loève series truncated at `kl_trunc` terms.
    L2ProjectionOfTruncatedKl { kl_trunc: usize },
}

/// `M` coefficient vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub mesh: Mesh,
    pub field: FieldKind,
    pub mode: SamplingMode,
    pub seed: u64,
    pub coeffs: DMatrix<f64>,
}

/// Metadata written next to an exported batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub version: String,
    pub field: FieldKind,
    pub dim: usize,
    pub elements_per_axis: usize,
    pub samples: usize,
    pub dofs: usize,
    pub seed: u64,
    pub sampling: SamplingMode,
}

impl SampleBatch {
    pub fn m(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn meta(&self) -> BatchMeta {
        BatchMeta {
            version: crate::VERSION.to_string(),
            field: self.field,
            dim: self.mesh.dim(),
            elements_per_axis: self.mesh.elements_per_axis(),
            samples: self.m(),
            dofs: self.coeffs.ncols(),
            seed: self.seed,
            sampling: self.mode,
        }
    }

    /// One sample per line, comma separated, shortest round-trip formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for r in 0..self.coeffs.nrows() {
            let row: Vec<String> = self.coeffs.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Inverse of [`SampleBatch::write_csv`]; lines starting with `#` are skipped.
    pub fn read_csv<R: BufRead>(r: R, meta: &BatchMeta) -> Result<Self> {
        let mut data = Vec::new();
        let mut rows = 0;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let vals: std::result::Result<Vec<f64>, _> = t.split(',').map(|s| s.trim().parse()).collect();
            let vals = vals.map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
            if vals.len() != meta.dofs {
                return Err(Error::Parse(format!(
                    "line {}: expected {} columns, found {}",
                    ln + 1,
                    meta.dofs,
                    vals.len()
                )));
            }
            data.extend(vals);
            rows += 1;
        }
        let mesh = Mesh::new(meta.dim, meta.elements_per_axis)?;
        if mesh.node_count() != meta.dofs {
            return Err(Error::Parse(format!(
                "metadata lists {} dofs but the mesh has {}",
                meta.dofs,
                mesh.node_count()
            )));
        }
        Ok(SampleBatch {
            mesh,
            field: meta.field,
            mode: meta.sampling,
            seed: meta.seed,
            coeffs: DMatrix::from_row_slice(rows, meta.dofs, &data),
        })
    }
}

fn nodal_sample(dim: usize, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let h = 1.0 / n as f64;
    match dim {
        1 => {
            let sd = h.sqrt();
            let mut out = Vec::with_capacity(n + 1);
            let mut w = 0.0;
            out.push(0.0);
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                w += sd * z;
                out.push(w);
            }
            out
        }
        _ => {
            // W(x_i, y_j) = Σ_{a ≤ i, b ≤ j} h ξ_ab: the closed-form factor of
            // the sheet covariance, zero on both axes.
            let m = n + 1;
            let mut out = vec![0.0; m * m];
            for i in 1..m {
                for j in 1..m {
                    let z: f64 = rng.sample(StandardNormal);
                    out[i * m + j] =
                        h * z + out[(i - 1) * m + j] + out[i * m + j - 1] - out[(i - 1) * m + j - 1];
                }
            }
            out
        }
    }
}

/// Linear map from `K` standard normals to projected coefficients.
fn projection_operator(space: &FeSpace, oracle: &KlOracle, k: usize) -> Result<DMatrix<f64>> {
    let grid = space.quadrature(4);
    let mut t = DMatrix::zeros(space.dof_count(), k);
    for l in 1..=k {
        let lam = oracle.eigenvalue(l);
        let vals = grid.sample(|x| lam.sqrt() * oracle.eigenfunction(l, x));
        let c = fem::project_values(space, &grid, &vals)?;
        t.set_column(l - 1, &c);
    }
    Ok(t)
}

/// Draws `m` independent realizations; sample `i` uses substream `i` of `seed`.
pub fn draw_batch(
    field: &AnalyticField,
    space: &FeSpace,
    m: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<SampleBatch> {
    if m == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if field.dim() != space.dim() {
        return Err(Error::invalid(format!(
            "field is {}-dimensional but the space is {}-dimensional",
            field.dim(),
            space.dim()
        )));
    }
    let q = space.dof_count();
    let n = space.mesh().elements_per_axis();
    let dim = space.dim();
    let rows: Vec<Vec<f64>> = match mode {
        SamplingMode::NodalInterpolation => crate::par_map(m, |i| {
            let mut rng = substream(seed, i as u64);
            nodal_sample(dim, n, &mut rng)
        }),
        SamplingMode::L2ProjectionOfTruncatedKl { kl_trunc } => {
            if kl_trunc == 0 {
                return Err(Error::invalid("kl_trunc must be at least 1"));
            }
            let oracle = field.oracle();
            if let Some(avail) = oracle.available() {
                if kl_trunc > avail {
                    return Err(Error::invalid(format!(
                        "kl_trunc {kl_trunc} exceeds the {avail} tabulated modes"
                    )));
                }
            }
            let t = projection_operator(space, &oracle, kl_trunc)?;
            crate::par_map(m, |i| {
                let mut rng = substream(seed, i as u64);
                let psi = DVector::from_fn(kl_trunc, |_, _| rng.sample::<f64, _>(StandardNormal));
                (&t * psi).iter().copied().collect()
            })
        }
    };
    let mut coeffs = DMatrix::zeros(m, q);
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            coeffs[(i, j)] = *v;
        }
    }
    Ok(SampleBatch { mesh: space.mesh().clone(), field: field.kind, mode, seed, coeffs })
}

/// `m` samples of `N(0, cov)` via a Cholesky factor; sample `i` uses substream `i`.
///
/// A failed factorization is retried once with a diagonal jitter of
/// `1e-10 · max diag`.
pub fn draw_from_covariance(cov: &DMatrix<f64>, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let q = cov.nrows();
    let l = match cov.clone().cholesky() {
        Some(c) => c.l(),
        None => {
            let jitter = 1e-10 * cov.diagonal().max().max(f64::MIN_POSITIVE);
            let mut c = cov.clone();
            for i in 0..q {
                c[(i, i)] += jitter;
            }
            c.cholesky()
                .ok_or_else(|| {
                    Error::NumericalDegeneracy(format!(
                        "covariance of size {q} is not positive definite even with jitter {jitter:e}"
                    ))
                })?
                .l()
        }
    };
    let rows = crate::par_map(m, |i| {
        let mut rng = substream(seed, i as u64);
        (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>()
    });
    let z = DMatrix::from_fn(m, q, |i, j| rows[i][j]);
    // One product instead of `m` matrix-vector products.
    Ok(z * l.transpose())
}

/// `Σ_jk = R(x_j, x_k)`, the covariance of nodal values.
pub fn exact_discrete_covariance(field: &AnalyticField, space: &FeSpace) -> DMatrix<f64> {
    let nodes = space.mesh().nodes();
    let q = nodes.len();
    DMatrix::from_fn(q, q, |j, k| field.covariance(&nodes[j], &nodes[k]))
}

/// Empirical sup-norm moment and centering check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentDiagnostics {
    /// `sqrt(mean_m max_j |K_j|²)`.
    pub c_inf_hat: f64,
    /// `max_j |mean_m K_j|`.
    pub mean_max_abs: f64,
    /// `mean_max_abs ≤ c_inf_hat + 3 c_inf_hat / sqrt(M)`.
    pub mean_within_bound: bool,
}

pub fn moment_diagnostics(batch: &SampleBatch) -> Result<MomentDiagnostics> {
    let m = batch.m();
    if m < 2 {
        return Err(Error::invalid(format!("moment diagnostics need M >= 2, got {m}")));
    }
    let mut acc = 0.0;
    for r in batch.coeffs.row_iter() {
        let mx = r.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        acc += mx * mx;
    }
    let c_inf_hat = (acc / m as f64).sqrt();
    let mean = crate::estimator::sample_mean(&batch.coeffs);
    let mean_max_abs = mean.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let slack = 3.0 * c_inf_hat / (m as f64).sqrt();
    Ok(MomentDiagnostics {
        c_inf_hat,
        mean_max_abs,
        mean_within_bound: mean_max_abs <= c_inf_hat + slack,
    })
}
