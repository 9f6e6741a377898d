//! P1 finite elements on the unit interval and the unit square.
//!
//! Nodes are ordered lexicographically with the first coordinate varying
//! slowest, so node `(ix, iy)` has index `ix * (n + 1) + iy`. The 2D mass
//! matrix and its Cholesky factor are Kronecker products of the 1D ones.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::gauss_legendre;

/// Uniform partition of `(0, 1)^dim` with `n` elements per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    dim: usize,
    n: usize,
    h: f64,
    axis: Vec<f64>,
}

impl Mesh {
    /// Requires `dim ∈ {1, 2}` and `n ≥ 2`.
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "elements per axis must be at least 2, got {n}"
            )));
        }
        let nf = n as f64;
        let axis = (0..=n).map(|i| i as f64 / nf).collect();
        Ok(Mesh { dim, n, h: 1.0 / nf, axis })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn elements_per_axis(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Node coordinates along one axis, ascending.
    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    /// `Q_h = (n + 1)^dim`.
    pub fn node_count(&self) -> usize {
        (self.n + 1).pow(self.dim as u32)
    }

    /// Coordinates of node `j`.
    pub fn node(&self, j: usize) -> Vec<f64> {
        match self.dim {
            1 => vec![self.axis[j]],
            _ => {
                let m = self.n + 1;
                vec![self.axis[j / m], self.axis[j % m]]
            }
        }
    }

    /// All node coordinates in lexicographic order.
    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.node_count()).map(|j| self.node(j)).collect()
    }

    /// Element index and local coordinate of `x` on one axis.
    fn locate_axis(&self, x: f64) -> (usize, f64) {
        let t = x * self.n as f64;
        let e = (t.floor() as usize).min(self.n - 1);
        (e, t - e as f64)
    }

    /// Nonzero basis functions at `x`; at most four.
    pub fn basis_at(&self, x: &[f64]) -> Result<Stencil> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has {} coordinates, mesh is {}-dimensional",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!("point {x:?} lies outside [0, 1]^{}", self.dim)));
        }
        Ok(self.basis_unchecked(x))
    }

    pub(crate) fn basis_unchecked(&self, x: &[f64]) -> Stencil {
        let (ex, tx) = self.locate_axis(x[0]);
        let hx = [(ex, 1.0 - tx), (ex + 1, tx)];
        let mut s = Stencil::default();
        if self.dim == 1 {
            for (i, v) in hx {
                s.push(i, v);
            }
        } else {
            let (ey, ty) = self.locate_axis(x[1]);
            let hy = [(ey, 1.0 - ty), (ey + 1, ty)];
            let m = self.n + 1;
            for (i, vx) in hx {
                for (k, vy) in hy {
                    s.push(i * m + k, vx * vy);
                }
            }
        }
        s
    }
}

/// Indices and values of the basis functions that are nonzero at a point.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stencil {
    entries: [(usize, f64); 4],
    len: usize,
}

impl Stencil {
    fn push(&mut self, j: usize, v: f64) {
        self.entries[self.len] = (j, v);
        self.len += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries[..self.len].iter().copied()
    }

    /// `Σ_j c_j θ_j(x)`.
    pub fn apply(&self, c: &[f64]) -> f64 {
        self.iter().map(|(j, v)| c[j] * v).sum()
    }
}

/// Mass matrix `G_jk = (θ_j, θ_k)` with its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct MassMatrix {
    pub matrix: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

fn mass_1d(n: usize) -> DMatrix<f64> {
    let h = 1.0 / n as f64;
    let mut g = DMatrix::zeros(n + 1, n + 1);
    let diag = h / 3.0;
    let off = h / 6.0;
    for e in 0..n {
        g[(e, e)] += diag;
        g[(e + 1, e + 1)] += diag;
        g[(e, e + 1)] += off;
        g[(e + 1, e)] += off;
    }
    g
}

/// Exact P1 mass matrix of `mesh`, factored.
pub fn assemble_mass(mesh: &Mesh) -> Result<MassMatrix> {
    let g1 = mass_1d(mesh.elements_per_axis());
    let l1 = g1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalDegeneracy("mass matrix is not positive definite".into()))?
        .l();
    let ev = linalg::sym_eigenvalues(&g1);
    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
    if lo <= 0.0 {
        return Err(Error::NumericalDegeneracy(format!(
            "mass matrix has nonpositive eigenvalue {lo}"
        )));
    }
    Ok(match mesh.dim() {
        1 => MassMatrix { matrix: g1, chol: l1, lambda_min: lo, lambda_max: hi },
        _ => MassMatrix {
            matrix: g1.kronecker(&g1),
            chol: l1.kronecker(&l1),
            lambda_min: lo * lo,
            lambda_max: hi * hi,
        },
    })
}

/// Nodal P1 space on a mesh; owns the factored mass matrix.
#[derive(Debug, Clone)]
pub struct FeSpace {
    mesh: Mesh,
    mass: MassMatrix,
}

impl FeSpace {
    pub fn new(mesh: Mesh) -> Result<Self> {
        let mass = assemble_mass(&mesh)?;
        Ok(FeSpace { mesh, mass })
    }

    /// Shorthand for `FeSpace::new(Mesh::new(dim, n)?)`.
    pub fn uniform(dim: usize, n: usize) -> Result<Self> {
        Self::new(Mesh::new(dim, n)?)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn mass(&self) -> &MassMatrix {
        &self.mass
    }

    pub fn dim(&self) -> usize {
        self.mesh.dim()
    }

    pub fn h(&self) -> f64 {
        self.mesh.h()
    }

    pub fn dof_count(&self) -> usize {
        self.mesh.node_count()
    }

    /// Polynomial degree of the basis; always 1.
    pub fn degree(&self) -> usize {
        1
    }

    /// Composite tensor Gauss grid with `q` points per element per axis.
    pub fn quadrature(&self, q: usize) -> QuadratureGrid {
        QuadratureGrid::new(&self.mesh, q)
    }
}

/// Composite Gauss points on the whole domain with precomputed basis values.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    dim: usize,
    coords: Vec<f64>,
    pub weights: Vec<f64>,
    pub stencils: Vec<Stencil>,
}

impl QuadratureGrid {
    pub fn new(mesh: &Mesh, q: usize) -> Self {
        let rule = gauss_legendre(q);
        let h = mesh.h();
        let n = mesh.elements_per_axis();
        let mut ax = Vec::with_capacity(n * q);
        let mut aw = Vec::with_capacity(n * q);
        for e in 0..n {
            let left = e as f64 * h;
            for (t, w) in rule.nodes.iter().zip(&rule.weights) {
                ax.push(left + h * t);
                aw.push(h * w);
            }
        }
        let dim = mesh.dim();
        let (coords, weights) = if dim == 1 {
            (ax, aw)
        } else {
            let mut c = Vec::with_capacity(2 * ax.len() * ax.len());
            let mut w = Vec::with_capacity(ax.len() * ax.len());
            for (x, wx) in ax.iter().zip(&aw) {
                for (y, wy) in ax.iter().zip(&aw) {
                    c.push(*x);
                    c.push(*y);
                    w.push(wx * wy);
                }
            }
            (c, w)
        };
        let stencils = coords.chunks(dim).map(|p| mesh.basis_unchecked(p)).collect();
        QuadratureGrid { dim, coords, weights, stencils }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    /// Values of `Σ_j c_j θ_j` at every quadrature point.
    pub fn tabulate(&self, c: &[f64]) -> Vec<f64> {
        self.stencils.iter().map(|s| s.apply(c)).collect()
    }

    /// Values of `f` at every quadrature point.
    pub fn sample(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|i| f(self.point(i))).collect()
    }

    /// Weighted inner product `Σ_i w_i u_i v_i`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.weights.iter().zip(u).zip(v).map(|((w, a), b)| w * a * b).sum()
    }

    /// Tensor quadrature of `∫∫ k(x, x′)² dx dx′`; rows summed in order.
    pub fn kernel_sq_integral<K>(&self, k: K) -> f64
    where
        K: Fn(usize, usize) -> f64 + Sync + Send,
    {
        let rows = crate::par_map(self.len(), |i| {
            let mut s = 0.0;
            for j in 0..self.len() {
                let v = k(i, j);
                s += self.weights[j] * v * v;
            }
            s
        });
        rows.iter().zip(&self.weights).map(|(r, w)| r * w).sum()
    }
}

/// `L²` projection onto the P1 space using `q`-point Gauss per element per axis.
pub fn l2_project(space: &FeSpace, f: impl Fn(&[f64]) -> f64, q: usize) -> Result<DVector<f64>> {
    let grid = space.quadrature(q);
    let values = grid.sample(f);
    project_values(space, &grid, &values)
}

/// Projection from precomputed values of the target function on `grid`.
pub(crate) fn project_values(
    space: &FeSpace,
    grid: &QuadratureGrid,
    values: &[f64],
) -> Result<DVector<f64>> {
    let mut b = DVector::zeros(space.dof_count());
    for ((s, w), v) in grid.stencils.iter().zip(&grid.weights).zip(values) {
        for (j, t) in s.iter() {
            b[j] += w * v * t;
        }
    }
    let chol = &space.mass().chol;
    let y = chol
        .solve_lower_triangular(&b)
        .ok_or_else(|| Error::Internal("singular mass factor in projection".into()))?;
    let c = chol
        .tr_solve_lower_triangular(&y)
        .ok_or_else(|| Error::Internal("singular mass factor in projection".into()))?;
    let resid = (&space.mass().matrix * &c - &b).amax();
    let scale = b.amax();
    if resid > 1e-10 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Internal(format!(
            "projection residual {resid:e} exceeds tolerance for right-hand side of size {scale:e}"
        )));
    }
    Ok(c)
}

/// `(∫∫ k(x, x′)² dx dx′)^{1/2}` by composite tensor Gauss with `q ≥ 2` points.
pub fn kernel_l2_norm<K>(space: &FeSpace, k: K, q: usize) -> Result<f64>
where
    K: Fn(&[f64], &[f64]) -> f64 + Sync + Send,
{
    if q < 2 {
        return Err(Error::invalid(format!("kernel norm quadrature needs q >= 2, got {q}")));
    }
    let grid = space.quadrature(q);
    Ok(grid.kernel_sq_integral(|i, j| k(grid.point(i), grid.point(j))).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn mesh_examples() {
        let m = Mesh::new(1, 2).unwrap();
        assert_eq!(m.nodes(), vec![vec![0.0], vec![0.5], vec![1.0]]);
        assert_eq!(m.h(), 0.5);
        assert_eq!(m.node_count(), 3);
        let m = Mesh::new(1, 4).unwrap();
        assert_eq!((m.node_count(), m.h()), (5, 0.25));
        let m = Mesh::new(2, 2).unwrap();
        assert_eq!(m.node_count(), 9);
        let nodes = m.nodes();
        for w in nodes.windows(2) {
            assert!(w[0] < w[1], "nodes not lexicographic: {:?}", w);
        }
    }

    #[test]
    fn mesh_rejects_coarse_or_bad_dim() {
        assert!(matches!(Mesh::new(1, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(Mesh::new(3, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn mass_1d_n2_matches_hat_integrals() {
        let g = assemble_mass(&Mesh::new(1, 2).unwrap()).unwrap();
        let want = DMatrix::from_row_slice(
            3,
            3,
            &[1.0 / 6.0, 1.0 / 12.0, 0.0, 1.0 / 12.0, 1.0 / 3.0, 1.0 / 12.0, 0.0, 1.0 / 12.0, 1.0 / 6.0],
        );
        assert!((g.matrix - want).amax() < 1e-15);
    }

    #[test]
    fn mass_matches_quadrature_of_basis_products() {
        for dim in [1, 2] {
            let space = FeSpace::uniform(dim, 3).unwrap();
            let grid = space.quadrature(3);
            let q = space.dof_count();
            let mut g = DMatrix::zeros(q, q);
            for (s, w) in grid.stencils.iter().zip(&grid.weights) {
                for (a, va) in s.iter() {
                    for (b, vb) in s.iter() {
                        g[(a, b)] += w * va * vb;
                    }
                }
            }
            assert!((g - &space.mass().matrix).amax() < 1e-14, "dim {dim}");
        }
    }

    #[test]
    fn mass_row_sums_and_total() {
        let n = 8;
        let space = FeSpace::uniform(1, n).unwrap();
        let g = &space.mass().matrix;
        let h = space.h();
        for j in 0..=n {
            let want = if j == 0 || j == n { h / 2.0 } else { h };
            assert_relative_eq!(g.row(j).sum(), want, epsilon = 1e-15);
        }
        for dim in [1, 2] {
            let s = FeSpace::uniform(dim, 5).unwrap();
            assert_relative_eq!(s.mass().matrix.sum(), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn mass_2d_is_kronecker() {
        let g1 = assemble_mass(&Mesh::new(1, 2).unwrap()).unwrap().matrix;
        let g2 = assemble_mass(&Mesh::new(2, 2).unwrap()).unwrap().matrix;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        assert_eq!(g2[(a * 3 + b, c * 3 + d)], g1[(a, c)] * g1[(b, d)]);
                    }
                }
            }
        }
    }

    #[test]
    fn cholesky_round_trip_and_extremes() {
        for (dim, n) in [(1, 2), (1, 17), (2, 2), (2, 6)] {
            let s = FeSpace::uniform(dim, n).unwrap();
            let m = s.mass();
            assert_eq!(m.matrix, m.matrix.transpose());
            let rec = &m.chol * m.chol.transpose();
            assert!((rec - &m.matrix).amax() <= 1e-12 * m.lambda_max);
            let ev = linalg::sym_eigenvalues(&m.matrix);
            assert_relative_eq!(ev[0], m.lambda_min, max_relative = 1e-10);
            assert_relative_eq!(ev[ev.len() - 1], m.lambda_max, max_relative = 1e-10);
            assert!(m.lambda_min > 0.0);
        }
    }

    #[test]
    fn partition_of_unity_at_quadrature_points() {
        for dim in [1, 2] {
            let s = FeSpace::uniform(dim, 5).unwrap();
            let grid = s.quadrature(4);
            for st in &grid.stencils {
                let sum: f64 = st.iter().map(|(_, v)| v).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            let corner = vec![1.0; dim];
            let sum: f64 = s.mesh().basis_at(&corner).unwrap().iter().map(|(_, v)| v).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_rejects_outside_points() {
        let m = Mesh::new(1, 4).unwrap();
        assert!(m.basis_at(&[1.5]).is_err());
        assert!(m.basis_at(&[0.2, 0.3]).is_err());
    }

    #[test]
    fn projection_reproduces_p1_functions() {
        let s = FeSpace::uniform(1, 6).unwrap();
        let c = l2_project(&s, |_| 1.0, 4).unwrap();
        assert!(c.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let c = l2_project(&s, |x| x[0], 4).unwrap();
        for (ci, xi) in c.iter().zip(s.mesh().axis()) {
            assert!((ci - xi).abs() < 1e-12);
        }
        let s2 = FeSpace::uniform(2, 4).unwrap();
        let c = l2_project(&s2, |x| x[0] * x[1], 4).unwrap();
        for (j, cj) in c.iter().enumerate() {
            let p = s2.mesh().node(j);
            assert!((cj - p[0] * p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_of_square_is_second_order_close_to_nodes() {
        let mut prev = f64::INFINITY;
        for n in [4, 8, 16] {
            let s = FeSpace::uniform(1, n).unwrap();
            let c = l2_project(&s, |x| x[0] * x[0], 4).unwrap();
            let h = s.h();
            let dev = c
                .iter()
                .zip(s.mesh().axis())
                .map(|(ci, x)| (ci - x * x).abs())
                .fold(0.0, f64::max);
            assert!(dev <= 0.5 * h * h, "n={n}: {dev}");
            assert!(dev < prev);
            prev = dev;
        }
    }

    #[test]
    fn kernel_norm_examples() {
        let s = FeSpace::uniform(1, 4).unwrap();
        assert_relative_eq!(kernel_l2_norm(&s, |_, _| 1.0, 2).unwrap(), 1.0, epsilon = 1e-14);
        let g11 = s.mass().matrix[(1, 1)];
        let m = s.mesh().clone();
        let theta1 = move |x: &[f64]| m.basis_unchecked(x).iter().find(|e| e.0 == 1).map_or(0.0, |e| e.1);
        let k = kernel_l2_norm(&s, |x, y| theta1(x) * theta1(y), 2).unwrap();
        assert_relative_eq!(k, g11, epsilon = 1e-14);
        assert!(kernel_l2_norm(&s, |_, _| 1.0, 1).is_err());
    }

    #[test]
    fn min_kernel_norm_converges_to_sqrt_one_sixth() {
        // ∫∫ min(x, y)² = 1/6.
        let exact = (1.0f64 / 6.0).sqrt();
        let s = FeSpace::uniform(1, 256).unwrap();
        let v = kernel_l2_norm(&s, |x, y| x[0].min(y[0]), 2).unwrap();
        assert!((v - exact).abs() < 1e-6, "{v} vs {exact}");
        let coarse = FeSpace::uniform(1, 16).unwrap();
        let errs: Vec<f64> = (2..=6)
            .map(|q| (kernel_l2_norm(&coarse, |x, y| x[0].min(y[0]), q).unwrap() - exact).abs())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] <= w[0], "{errs:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn mass_rayleigh_quotient_is_sandwiched(
            dim in 1usize..=2, n in 2usize..7,
            seed in proptest::collection::vec(-1.0f64..1.0, 49)
        ) {
            let s = FeSpace::uniform(dim, n).unwrap();
            let q = s.dof_count();
            let y = DVector::from_iterator(q, seed.iter().cycle().take(q).copied());
            let yy = y.dot(&y);
            prop_assume!(yy > 1e-6);
            let r = y.dot(&(&s.mass().matrix * &y));
            let m = s.mass();
            prop_assert!(m.lambda_min * yy <= r * (1.0 + 1e-12));
            prop_assert!(r <= m.lambda_max * yy * (1.0 + 1e-12));
        }
    }
}
