//! Forward problems: the conductivity equation, the second-order correction, the quasilinear
//! boundary value problem and the Dirichlet-to-Neumann maps built on them.

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{BoundaryTrace, ComplexTrace, Grid, NodeRole, RealTrace, ScalarField, VectorField};
use crate::krylov::{gmres, norm2, GmresOptions};
use crate::sparse::{nested_dissection, CsrMatrix, SparseCholesky};

/// Higher-order part R(x, q) of the flux.
#[derive(Debug, Clone)]
pub enum RemainderKind {
    Zero,
    /// R(x, q) = c(x)|q|²q.
    CubicSaturation { c: ScalarField },
}

#[derive(Debug, Clone)]
pub struct RemainderSpec {
    pub kind: RemainderKind,
    /// Radius of the admissible gradient ball.
    pub h: f64,
    /// Bound constant in |∂_q^α ∂_x^β R| ≤ C2 |q|^{3−|α|}.
    pub c2: f64,
}

impl RemainderSpec {
    pub fn zero(h: f64) -> RemainderSpec {
        RemainderSpec {
            kind: RemainderKind::Zero,
            h,
            c2: 1.0,
        }
    }

    /// Cubic saturation with C2 = 6·max_{|β|≤2} |∂^β c| (finite differences on the grid).
    pub fn cubic_saturation(c: ScalarField, h: f64) -> RemainderSpec {
        let c2 = 6.0 * max_derivatives_up_to_two(&c);
        RemainderSpec {
            kind: RemainderKind::CubicSaturation { c },
            h,
            c2,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, RemainderKind::Zero)
    }

    pub fn coefficient_field(&self) -> Option<&ScalarField> {
        match &self.kind {
            RemainderKind::Zero => None,
            RemainderKind::CubicSaturation { c } => Some(c),
        }
    }

    /// R at node `idx`.
    pub fn eval(&self, idx: usize, q: [f64; 3]) -> [f64; 3] {
        match &self.kind {
            RemainderKind::Zero => [0.0; 3],
            RemainderKind::CubicSaturation { c } => {
                let s = c.values[idx] * (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
                [s * q[0], s * q[1], s * q[2]]
            }
        }
    }

    /// Checks the bound on random nodes and gradients in the admissible ball, differentiating
    /// in q by central differences and in x by grid differences. Returns the worst ratio
    /// |derivative| / (C2 |q|^{3−|α|}).
    pub fn check_bound(&self, samples: usize, seed: u64) -> Result<f64> {
        let c = match &self.kind {
            RemainderKind::Zero => return Ok(0.0),
            RemainderKind::CubicSaturation { c } => c,
        };
        let grid = &c.grid;
        let derivs = x_derivative_fields(c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let dq = 1e-3 * self.h;
        for _ in 0..samples {
            let idx = rng.gen_range(0..grid.len());
            let r = self.h * rng.gen::<f64>().cbrt();
            let dir = random_unit(&mut rng);
            let q = [r * dir[0], r * dir[1], r * dir[2]];
            let qn = r.max(1e-300);
            for cv in &derivs {
                let coef = cv[idx];
                let f = |q: [f64; 3]| {
                    let s = coef * (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
                    [s * q[0], s * q[1], s * q[2]]
                };
                // |α| = 0
                let v = f(q);
                let m0 = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                worst = worst.max(m0 / (self.c2 * qn.powi(3)));
                // |α| = 1..3 by nested central differences
                for i in 0..3 {
                    let d1 = central(&f, q, i, dq);
                    let m1 = d1.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    worst = worst.max(m1 / (self.c2 * qn.powi(2)));
                    for j in 0..3 {
                        let g = |q: [f64; 3]| central(&f, q, i, dq);
                        let d2 = central(&g, q, j, dq);
                        let m2 = d2.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                        worst = worst.max(m2 / (self.c2 * qn));
                        for k in 0..3 {
                            let g2 = |q: [f64; 3]| central(&g, q, j, dq);
                            let d3 = central(&g2, q, k, dq);
                            let m3 = d3.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                            worst = worst.max(m3 / self.c2);
                        }
                    }
                }
            }
        }
        Ok(worst)
    }
}

fn central(f: &dyn Fn([f64; 3]) -> [f64; 3], q: [f64; 3], i: usize, dq: f64) -> [f64; 3] {
    let mut qp = q;
    let mut qm = q;
    qp[i] += dq;
    qm[i] -= dq;
    let (a, b) = (f(qp), f(qm));
    [
        (a[0] - b[0]) / (2.0 * dq),
        (a[1] - b[1]) / (2.0 * dq),
        (a[2] - b[2]) / (2.0 * dq),
    ]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
            rng.gen::<f64>() * 2.0 - 1.0,
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// c together with its first and second grid derivatives (all multi-indices |β| ≤ 2).
fn x_derivative_fields(c: &ScalarField) -> Vec<Vec<f64>> {
    let g = &c.grid;
    let v = &c.values;
    let mut out = vec![v.clone()];
    let d1 = |vals: &[f64], d: usize| -> Vec<f64> {
        (0..g.len())
            .map(|idx| {
                match (g.neighbor(idx, d, 1), g.neighbor(idx, d, -1)) {
                    (Some(p), Some(m)) => (vals[p] - vals[m]) / (2.0 * g.spacing[d]),
                    _ => 0.0,
                }
            })
            .collect()
    };
    let firsts: Vec<Vec<f64>> = (0..3).map(|d| d1(v, d)).collect();
    for d in 0..3 {
        for e in d..3 {
            out.push(d1(&firsts[d], e));
        }
    }
    out.extend(firsts);
    out
}

fn max_derivatives_up_to_two(c: &ScalarField) -> f64 {
    x_derivative_fields(c)
        .iter()
        .flatten()
        .fold(0.0f64, |m, x| m.max(x.abs()))
}

/// The coefficients (γ, b, R) of the flux C(x, q) = γq + |q|²b + R(x, q).
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub gamma: ScalarField,
    pub b: VectorField,
    pub remainder: RemainderSpec,
    /// Recorded lower bound of γ over the discrete closure of Ω.
    pub c1: f64,
}

impl CoefficientSet {
    pub fn new(gamma: ScalarField, b: VectorField, remainder: RemainderSpec) -> Result<CoefficientSet> {
        if gamma.grid != b.grid {
            return Err(Error::GridMismatch);
        }
        if let Some(c) = remainder.coefficient_field() {
            if c.grid != gamma.grid {
                return Err(Error::GridMismatch);
            }
        }
        let c1 = gamma.min_on_domain();
        if !(c1 > 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, min is {c1}")));
        }
        let g = &gamma.grid;
        for idx in 0..g.len() {
            let c = g.coords(idx);
            let outer = (0..3).any(|d| c[d] == 0 || c[d] + 1 == g.dims[d]);
            if outer && (gamma.values[idx] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(
                    "gamma - 1 must vanish on the faces of the grid box".into(),
                ));
            }
        }
        Ok(CoefficientSet {
            gamma,
            b,
            remainder,
            c1,
        })
    }

    /// γ ≡ 1, b ≡ 0, R ≡ 0.
    pub fn flat(grid: &Arc<Grid>, h: f64) -> CoefficientSet {
        CoefficientSet {
            gamma: ScalarField::constant(grid, 1.0),
            b: VectorField::zeros(grid),
            remainder: RemainderSpec::zero(h),
            c1: 1.0,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.gamma.grid
    }
}

/// Per-edge coefficients of the discrete flux.
#[derive(Debug, Clone)]
pub struct EdgeCoefficients {
    /// Geometric mean √(γ_a γ_b).
    pub gamma: Vec<f64>,
    /// Edge-direction component of b, averaged over the endpoints.
    pub b: Vec<f64>,
    /// Remainder coefficient averaged over the endpoints (empty for R ≡ 0).
    pub c: Vec<f64>,
}

impl EdgeCoefficients {
    pub fn gamma_only(gamma: &ScalarField) -> Vec<f64> {
        gamma
            .grid
            .mesh()
            .edges
            .iter()
            .map(|e| (gamma.values[e.a as usize] * gamma.values[e.b as usize]).sqrt())
            .collect()
    }

    pub fn b_only(b: &VectorField) -> Vec<f64> {
        b.grid
            .mesh()
            .edges
            .iter()
            .map(|e| {
                let d = e.dir as usize;
                0.5 * (b.values[e.a as usize][d] + b.values[e.b as usize][d])
            })
            .collect()
    }

    pub fn new(coeffs: &CoefficientSet) -> EdgeCoefficients {
        let grid = coeffs.grid();
        let c = match coeffs.remainder.coefficient_field() {
            None => Vec::new(),
            Some(c) => grid
                .mesh()
                .edges
                .iter()
                .map(|e| 0.5 * (c.values[e.a as usize] + c.values[e.b as usize]))
                .collect(),
        };
        EdgeCoefficients {
            gamma: Self::gamma_only(&coeffs.gamma),
            b: Self::b_only(&coeffs.b),
            c,
        }
    }
}

/// Negative interior divergence −∇·C of edge fluxes, indexed by interior node. For the
/// linear flux this is M u minus the boundary contribution.
pub fn divergence_of_fluxes(grid: &Grid, fluxes: &[f64]) -> Vec<f64> {
    let mesh = grid.mesh();
    let dom = grid.domain();
    let mut out = vec![0.0; grid.n_interior()];
    for (e, &c) in mesh.edges.iter().zip(fluxes) {
        let s = c * mesh.inv_h[e.dir as usize];
        let ia = dom.interior_index[e.a as usize];
        if ia != crate::grid::NONE {
            out[ia as usize] -= s;
        }
        let ib = dom.interior_index[e.b as usize];
        if ib != crate::grid::NONE {
            out[ib as usize] += s;
        }
    }
    out
}

/// Outward flux per unit boundary weight: Λ_b = (1/A_b) Σ face_area · C_{i→b}.
pub fn boundary_flux(grid: &Arc<Grid>, fluxes: &[f64]) -> RealTrace {
    let mesh = grid.mesh();
    let dom = grid.domain();
    let mut out = vec![0.0; grid.n_boundary()];
    for (e, &c) in mesh.edges.iter().zip(fluxes) {
        let area = grid.face_area(e.dir as usize);
        let kb = dom.boundary_index[e.b as usize];
        if kb != crate::grid::NONE {
            out[kb as usize] += area * c;
        }
        let ka = dom.boundary_index[e.a as usize];
        if ka != crate::grid::NONE {
            out[ka as usize] -= area * c;
        }
    }
    for (v, a) in out.iter_mut().zip(&dom.areas) {
        *v /= a;
    }
    BoundaryTrace {
        grid: grid.clone(),
        samples: out,
    }
}

/// Linear fluxes γ_e D_e u.
pub fn linear_fluxes(grid: &Grid, gamma_e: &[f64], u: &[f64]) -> Vec<f64> {
    let mesh = grid.mesh();
    mesh.edges
        .iter()
        .zip(gamma_e)
        .map(|(e, &g)| g * (u[e.b as usize] - u[e.a as usize]) * mesh.inv_h[e.dir as usize])
        .collect()
}

/// Edge quadrature Σ_e F_e h³ of a per-edge quantity.
pub fn edge_sum(grid: &Grid, values: impl Iterator<Item = f64>) -> f64 {
    values.sum::<f64>() * grid.cell_volume()
}

/// Factorized discrete conductivity operator −∇·(γ∇·) on the interior nodes.
#[derive(Debug)]
pub struct LinearConductivity {
    pub grid: Arc<Grid>,
    pub gamma_e: Vec<f64>,
    chol: SparseCholesky,
}

impl LinearConductivity {
    pub fn new(gamma: &ScalarField) -> Result<LinearConductivity> {
        if !(gamma.min_on_domain() > 0.0) {
            return Err(Error::InvalidArgument("gamma must be positive".into()));
        }
        Self::from_edge_gamma(&gamma.grid, EdgeCoefficients::gamma_only(gamma))
    }

    pub fn from_edge_gamma(grid: &Arc<Grid>, gamma_e: Vec<f64>) -> Result<LinearConductivity> {
        Self::build(grid, gamma_e, None)
    }

    /// Operator −Δ_h + q with unit edge conductivity, for (Δ − q)v = 0 with Dirichlet data.
    /// `potential` holds q at every grid node; only interior values are used.
    pub fn schrodinger(grid: &Arc<Grid>, potential: &[f64]) -> Result<LinearConductivity> {
        let ones = vec![1.0; grid.mesh().edges.len()];
        Self::build(grid, ones, Some(potential))
    }

    fn build(grid: &Arc<Grid>, gamma_e: Vec<f64>, potential: Option<&[f64]>) -> Result<LinearConductivity> {
        let mesh = grid.mesh();
        let dom = grid.domain();
        let n = grid.n_interior();
        let mut trip = Vec::with_capacity(7 * n);
        for (e, &g) in mesh.edges.iter().zip(&gamma_e) {
            let w = g * mesh.inv_h[e.dir as usize].powi(2);
            let ia = dom.interior_index[e.a as usize];
            let ib = dom.interior_index[e.b as usize];
            if ia != crate::grid::NONE {
                trip.push((ia as usize, ia as usize, w));
            }
            if ib != crate::grid::NONE {
                trip.push((ib as usize, ib as usize, w));
            }
            if ia != crate::grid::NONE && ib != crate::grid::NONE {
                trip.push((ia as usize, ib as usize, -w));
                trip.push((ib as usize, ia as usize, -w));
            }
        }
        if let Some(q) = potential {
            for (k, &i) in dom.interior.iter().enumerate() {
                trip.push((k, k, q[i]));
            }
        }
        let a = CsrMatrix::from_triplets(n, trip);
        let coords: Vec<[i32; 3]> = dom
            .interior
            .iter()
            .map(|&i| grid.coords(i).map(|c| c as i32))
            .collect();
        let chol = SparseCholesky::factor(&a, nested_dissection(&coords))?;
        Ok(LinearConductivity {
            grid: grid.clone(),
            gamma_e,
            chol,
        })
    }

    /// Solves M x = rhs in place (rhs indexed by interior node).
    pub fn solve_interior<T>(&self, rhs: &mut [T])
    where
        T: Copy
            + std::ops::Sub<Output = T>
            + std::ops::Mul<f64, Output = T>
            + std::ops::Div<f64, Output = T>,
    {
        self.chol.solve_in_place(rhs);
    }

    /// Right-hand side contributed by Dirichlet data on boundary nodes.
    fn boundary_rhs<T>(&self, f: &[T]) -> Vec<T>
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        let mesh = self.grid.mesh();
        let dom = self.grid.domain();
        let mut rhs = vec![T::default(); self.grid.n_interior()];
        for (e, &g) in mesh.edges.iter().zip(&self.gamma_e) {
            let w = g * mesh.inv_h[e.dir as usize].powi(2);
            let (a, b) = (e.a as usize, e.b as usize);
            let ia = dom.interior_index[a];
            let ib = dom.interior_index[b];
            if ia != crate::grid::NONE && ib == crate::grid::NONE {
                rhs[ia as usize] = rhs[ia as usize] + f[dom.boundary_index[b] as usize] * w;
            } else if ib != crate::grid::NONE && ia == crate::grid::NONE {
                rhs[ib as usize] = rhs[ib as usize] + f[dom.boundary_index[a] as usize] * w;
            }
        }
        rhs
    }

    fn assemble<T: Copy + Default>(&self, interior: &[T], f: &[T]) -> Vec<T> {
        let dom = self.grid.domain();
        let mut u = vec![T::default(); self.grid.len()];
        for (k, &i) in dom.interior.iter().enumerate() {
            u[i] = interior[k];
        }
        for (k, &b) in dom.boundary.iter().enumerate() {
            u[b] = f[k];
        }
        u
    }

    /// γ-harmonic extension of boundary data (full-grid values, zero on exterior nodes).
    pub fn extend(&self, f: &RealTrace) -> Vec<f64> {
        let mut rhs = self.boundary_rhs(&f.samples);
        self.chol.solve_in_place(&mut rhs);
        self.assemble(&rhs, &f.samples)
    }

    pub fn extend_complex(&self, f: &ComplexTrace) -> Vec<Complex64> {
        let mut rhs = self.boundary_rhs(&f.samples);
        self.chol.solve_in_place(&mut rhs);
        self.assemble(&rhs, &f.samples)
    }

    /// Λγ f.
    pub fn apply(&self, f: &RealTrace) -> RealTrace {
        let u = self.extend(f);
        self.dn_of(&u)
    }

    /// Λγ applied to real and imaginary parts.
    pub fn apply_complex(&self, f: &ComplexTrace) -> ComplexTrace {
        let u = self.extend_complex(f);
        let re: Vec<f64> = u.iter().map(|z| z.re).collect();
        let im: Vec<f64> = u.iter().map(|z| z.im).collect();
        ComplexTrace::from_parts(&self.dn_of(&re), &self.dn_of(&im))
    }

    /// Linear boundary flux of a full-grid function.
    pub fn dn_of(&self, u: &[f64]) -> RealTrace {
        boundary_flux(&self.grid, &linear_fluxes(&self.grid, &self.gamma_e, u))
    }

    /// Euclidean norm of the interior residual ∇·(γ∇u).
    pub fn residual_norm(&self, u: &[f64]) -> f64 {
        norm2(&divergence_of_fluxes(
            &self.grid,
            &linear_fluxes(&self.grid, &self.gamma_e, u),
        ))
    }

    /// Discrete energy Σ_e γ_e (D_e u)² h³.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let mesh = self.grid.mesh();
        edge_sum(
            &self.grid,
            mesh.edges.iter().zip(&self.gamma_e).map(|(e, &g)| {
                let du = (u[e.b as usize] - u[e.a as usize]) * mesh.inv_h[e.dir as usize];
                g * du * du
            }),
        )
    }

    /// Solution with zero boundary values of −∇·(γ∇u) = −∇·S for edge fluxes S, i.e.
    /// ∇·(γ∇u + S) = 0.
    pub fn solve_flux_source(&self, source: &[f64]) -> Vec<f64> {
        let mut rhs: Vec<f64> = divergence_of_fluxes(&self.grid, source).iter().map(|v| -v).collect();
        self.chol.solve_in_place(&mut rhs);
        let zeros = vec![0.0; self.grid.n_boundary()];
        self.assemble(&rhs, &zeros)
    }
}

/// Solves ∇·(γ∇u) = 0 in Ω with u = f on the boundary nodes.
pub fn solve_conductivity(gamma: &ScalarField, f: &RealTrace) -> Result<ScalarField> {
    let lin = LinearConductivity::new(gamma)?;
    let u = lin.extend(f);
    check_linear_residual(&lin, &u, f.max_abs())?;
    Ok(ScalarField {
        grid: gamma.grid.clone(),
        values: u,
    })
}

fn check_linear_residual(lin: &LinearConductivity, u: &[f64], scale: f64) -> Result<()> {
    let res = lin.residual_norm(u);
    let h = lin.grid.spacing[0];
    let bound = 1e-10 * scale.max(1e-300) * lin.gamma_e.iter().fold(0.0f64, |m, g| m.max(*g))
        / (h * h)
        * (lin.grid.n_interior() as f64).sqrt();
    if res > bound {
        return Err(Error::NonConvergence {
            what: "linear conductivity solve",
            iterations: 1,
            residual: res,
        });
    }
    Ok(())
}

/// Quadratic-term edge fluxes b_e |G_e(u)|².
pub fn quadratic_fluxes(grid: &Grid, b_e: &[f64], u: &[f64]) -> Vec<f64> {
    let mesh = grid.mesh();
    mesh.edges
        .iter()
        .zip(b_e)
        .map(|(e, &b)| {
            let g = mesh.edge_gradient(e, u);
            b * (g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
        })
        .collect()
}

/// Bilinear edge fluxes b_e G_e(u)·G_e(v) for complex u, v (no conjugation).
pub fn bilinear_fluxes(grid: &Grid, b_e: &[f64], u: &[Complex64], v: &[Complex64]) -> Vec<Complex64> {
    let mesh = grid.mesh();
    let ur: Vec<f64> = u.iter().map(|z| z.re).collect();
    let ui: Vec<f64> = u.iter().map(|z| z.im).collect();
    let vr: Vec<f64> = v.iter().map(|z| z.re).collect();
    let vi: Vec<f64> = v.iter().map(|z| z.im).collect();
    mesh.edges
        .iter()
        .zip(b_e)
        .map(|(e, &b)| {
            let (a1, a2) = (mesh.edge_gradient(e, &ur), mesh.edge_gradient(e, &ui));
            let (b1, b2) = (mesh.edge_gradient(e, &vr), mesh.edge_gradient(e, &vi));
            let mut acc = Complex64::default();
            for d in 0..3 {
                acc += Complex64::new(a1[d], a2[d]) * Complex64::new(b1[d], b2[d]);
            }
            acc * b
        })
        .collect()
}

/// Solves ∇·(γ∇u₂) + ∇·(b|∇u₁|²) = 0 with u₂ = 0 on the boundary nodes.
pub fn solve_second_order(gamma: &ScalarField, b: &VectorField, u1: &ScalarField) -> Result<ScalarField> {
    if gamma.grid != b.grid || gamma.grid != u1.grid {
        return Err(Error::GridMismatch);
    }
    let lin = LinearConductivity::new(gamma)?;
    let b_e = EdgeCoefficients::b_only(b);
    let u2 = lin.solve_flux_source(&quadratic_fluxes(&gamma.grid, &b_e, &u1.values));
    Ok(ScalarField {
        grid: gamma.grid.clone(),
        values: u2,
    })
}

/// Second-order boundary data γ∂νu₂ + ν·b|∇u₁|², evaluated from the discrete fluxes.
pub fn second_order_trace(lin: &LinearConductivity, b_e: &[f64], u1: &[f64], u2: &[f64]) -> RealTrace {
    let mut fl = linear_fluxes(&lin.grid, &lin.gamma_e, u2);
    for (f, q) in fl.iter_mut().zip(quadratic_fluxes(&lin.grid, b_e, u1)) {
        *f += q;
    }
    boundary_flux(&lin.grid, &fl)
}

/// Solver settings for the quasilinear problem.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Newton stops when ‖F(u)‖ ≤ newton_tol·‖F(u_0)‖ with u_0 the boundary data alone.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub picard_max_iter: usize,
    /// Largest admissible ε·max|f|.
    pub smallness: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            newton_tol: 1e-12,
            newton_max_iter: 40,
            picard_max_iter: 200,
            smallness: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QuasilinearSolveResult {
    pub u: ScalarField,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Discrete H²-type norm of u over interior nodes with a full stencil.
    pub w2p_proxy_norm: f64,
    /// Number of linear solves with the conductivity factorization.
    pub linear_solves: usize,
}

/// Discretized quasilinear problem with a cached factorization of its linear part.
#[derive(Debug)]
pub struct QuasilinearSolver {
    pub coeffs: Arc<CoefficientSet>,
    pub lin: Arc<LinearConductivity>,
    pub edge: EdgeCoefficients,
    pub options: SolverOptions,
}

struct Evaluation {
    residual: Vec<f64>,
    grads: Vec<[f64; 3]>,
    fluxes: Vec<f64>,
    max_grad: f64,
}

impl QuasilinearSolver {
    pub fn new(coeffs: Arc<CoefficientSet>, options: SolverOptions) -> Result<QuasilinearSolver> {
        let edge = EdgeCoefficients::new(&coeffs);
        let lin = Arc::new(LinearConductivity::from_edge_gamma(coeffs.grid(), edge.gamma.clone())?);
        Ok(QuasilinearSolver {
            coeffs,
            lin,
            edge,
            options,
        })
    }

    pub fn with_linear(
        coeffs: Arc<CoefficientSet>,
        lin: Arc<LinearConductivity>,
        options: SolverOptions,
    ) -> QuasilinearSolver {
        let edge = EdgeCoefficients::new(&coeffs);
        QuasilinearSolver {
            coeffs,
            lin,
            edge,
            options,
        }
    }

    fn grid(&self) -> &Arc<Grid> {
        self.coeffs.grid()
    }

    /// Full nonlinear edge fluxes C_e(u).
    pub fn fluxes(&self, u: &[f64]) -> Vec<f64> {
        self.evaluate(u).fluxes
    }

    fn evaluate(&self, u: &[f64]) -> Evaluation {
        let grid = self.grid();
        let mesh = grid.mesh();
        let has_c = !self.edge.c.is_empty();
        let mut grads = Vec::with_capacity(mesh.edges.len());
        let mut fluxes = Vec::with_capacity(mesh.edges.len());
        let mut max_grad: f64 = 0.0;
        for (k, e) in mesh.edges.iter().enumerate() {
            let g = mesh.edge_gradient(e, u);
            let d = e.dir as usize;
            let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
            max_grad = max_grad.max(g2);
            let mut c = self.edge.gamma[k] * g[d] + self.edge.b[k] * g2;
            if has_c {
                c += self.edge.c[k] * g2 * g[d];
            }
            grads.push(g);
            fluxes.push(c);
        }
        Evaluation {
            residual: divergence_of_fluxes(grid, &fluxes),
            grads,
            fluxes,
            max_grad: max_grad.sqrt(),
        }
    }

    /// Jacobian of the interior residual applied to an interior-indexed direction.
    fn jacobian_apply(&self, grads: &[[f64; 3]], dv: &[f64], work: &mut [f64]) -> Vec<f64> {
        let grid = self.grid();
        let mesh = grid.mesh();
        let dom = grid.domain();
        for (k, &i) in dom.interior.iter().enumerate() {
            work[i] = dv[k];
        }
        let has_c = !self.edge.c.is_empty();
        let fl: Vec<f64> = mesh
            .edges
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let gd = mesh.edge_gradient(e, work);
                let g = grads[k];
                let d = e.dir as usize;
                let dot = g[0] * gd[0] + g[1] * gd[1] + g[2] * gd[2];
                let mut c = self.edge.gamma[k] * gd[d] + 2.0 * self.edge.b[k] * dot;
                if has_c {
                    let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
                    c += self.edge.c[k] * (g2 * gd[d] + 2.0 * dot * g[d]);
                }
                c
            })
            .collect();
        divergence_of_fluxes(grid, &fl)
    }

    fn check_smallness(&self, f: &RealTrace, eps: f64) -> Result<()> {
        let amp = eps.abs() * f.max_abs();
        if amp > self.options.smallness {
            return Err(Error::DataTooLarge {
                amplitude: amp,
                threshold: self.options.smallness,
            });
        }
        Ok(())
    }

    /// Predictor εu₁ + ε²u₂ from the first two terms of the expansion in ε.
    pub fn expansion_guess(&self, f: &RealTrace) -> (Vec<f64>, Vec<f64>) {
        let u1 = self.lin.extend(f);
        let u2 = self
            .lin
            .solve_flux_source(&quadratic_fluxes(self.grid(), &self.edge.b, &u1));
        (u1, u2)
    }

    /// Solves ∇·C(x, ∇u) = 0 with u = εf on the boundary nodes.
    pub fn solve(&self, f: &RealTrace, eps: f64) -> Result<QuasilinearSolveResult> {
        self.check_smallness(f, eps)?;
        let (u1, u2) = self.expansion_guess(f);
        self.solve_from(f, eps, &u1, &u2)
    }

    /// Solve with the predictor built from precomputed u₁, u₂.
    pub fn solve_from(&self, f: &RealTrace, eps: f64, u1: &[f64], u2: &[f64]) -> Result<QuasilinearSolveResult> {
        self.check_smallness(f, eps)?;
        let grid = self.grid().clone();
        let dom = grid.domain();
        let h_ball = self.coeffs.remainder.h;
        let mut u = vec![0.0; grid.len()];
        for (k, &b) in dom.boundary.iter().enumerate() {
            u[b] = eps * f.samples[k];
        }
        let f0 = norm2(&self.evaluate(&u).residual);
        if f0 == 0.0 {
            return Ok(self.finish(u, 0, 0.0, 0));
        }
        for &i in &dom.interior {
            u[i] = eps * u1[i] + eps * eps * u2[i];
        }
        let mut ev = self.evaluate(&u);
        if ev.max_grad > h_ball {
            // The predictor is only a starting point; fall back to the plain boundary lift.
            for &i in &dom.interior {
                u[i] = 0.0;
            }
            ev = self.evaluate(&u);
        }
        let mut solves = 0usize;
        let mut work = vec![0.0; grid.len()];
        let mut rn = norm2(&ev.residual);
        let target = self.options.newton_tol * f0;
        let mut iter = 0;
        while iter < self.options.newton_max_iter {
            if rn <= target {
                return Ok(self.finish(u, iter, rn / f0, solves));
            }
            iter += 1;
            let forcing = (rn / f0).clamp(1e-3 * self.options.newton_tol, 1e-2);
            let rhs: Vec<f64> = ev.residual.iter().map(|r| -r).collect();
            let mut dv = vec![0.0; rhs.len()];
            let grads = ev.grads.clone();
            let out = gmres(
                |x: &[f64], y: &mut [f64]| {
                    let r = self.jacobian_apply(&grads, x, &mut work);
                    y.copy_from_slice(&r);
                },
                |x: &[f64], y: &mut [f64]| {
                    y.copy_from_slice(x);
                    self.lin.solve_interior(y);
                },
                &rhs,
                &mut dv,
                GmresOptions {
                    tol: forcing,
                    max_iter: 60,
                    restart: 30,
                },
            );
            solves += out.iterations + 1;
            let mut step = 1.0;
            let mut accepted = false;
            let mut trial = u.clone();
            while step >= 1.0 / 64.0 {
                for (k, &i) in dom.interior.iter().enumerate() {
                    trial[i] = u[i] + step * dv[k];
                }
                let tev = self.evaluate(&trial);
                let tn = norm2(&tev.residual);
                if tev.max_grad <= h_ball && tn <= (1.0 - 1e-4 * step) * rn {
                    u.copy_from_slice(&trial);
                    ev = tev;
                    rn = tn;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                if rn <= 1e3 * target {
                    // Stagnation at rounding level.
                    return Ok(self.finish(u, iter, rn / f0, solves));
                }
                return self.picard(f, eps, u, f0, iter, solves);
            }
        }
        if rn <= 1e3 * target {
            return Ok(self.finish(u, iter, rn / f0, solves));
        }
        Err(Error::NonConvergence {
            what: "Newton iteration",
            iterations: iter,
            residual: rn / f0,
        })
    }

    /// Frozen-coefficient iteration ∇·(γ∇u_{k+1}) = −∇·N(u_k) with N the nonlinear flux part.
    fn picard(
        &self,
        f: &RealTrace,
        eps: f64,
        mut u: Vec<f64>,
        f0: f64,
        iter0: usize,
        mut solves: usize,
    ) -> Result<QuasilinearSolveResult> {
        let grid = self.grid().clone();
        let dom = grid.domain();
        let lin_data = f.scale(eps);
        let base = self.lin.extend(&lin_data);
        solves += 1;
        let target = self.options.newton_tol * f0;
        let mut rn = f64::INFINITY;
        for it in 0..self.options.picard_max_iter {
            let ev = self.evaluate(&u);
            if ev.max_grad > self.coeffs.remainder.h {
                return Err(Error::GradientOutOfRange {
                    max_grad: ev.max_grad,
                    limit: self.coeffs.remainder.h,
                });
            }
            rn = norm2(&ev.residual);
            if rn <= 1e3 * target {
                return Ok(self.finish(u, iter0 + it, rn / f0, solves));
            }
            let nonlinear: Vec<f64> = ev
                .fluxes
                .iter()
                .zip(linear_fluxes(&grid, &self.edge.gamma, &u))
                .map(|(c, l)| c - l)
                .collect();
            let corr = self.lin.solve_flux_source(&nonlinear);
            solves += 1;
            for &i in &dom.interior {
                u[i] = base[i] + corr[i];
            }
        }
        Err(Error::NonConvergence {
            what: "Picard iteration",
            iterations: iter0 + self.options.picard_max_iter,
            residual: rn / f0,
        })
    }

    fn finish(&self, u: Vec<f64>, iterations: usize, residual: f64, solves: usize) -> QuasilinearSolveResult {
        let grid = self.grid().clone();
        let w2p = w2p_proxy(&grid, &u);
        QuasilinearSolveResult {
            u: ScalarField { grid, values: u },
            iterations,
            residual_norm: residual,
            w2p_proxy_norm: w2p,
            linear_solves: solves,
        }
    }

    /// Boundary trace ν·C(x, ∇u) of a solution.
    pub fn dn_of(&self, u: &[f64]) -> RealTrace {
        boundary_flux(self.grid(), &self.fluxes(u))
    }
}

/// Solves the quasilinear problem with u = εf on the boundary nodes.
pub fn solve_quasilinear(
    coeffs: &Arc<CoefficientSet>,
    f: &RealTrace,
    eps: f64,
    options: SolverOptions,
) -> Result<QuasilinearSolveResult> {
    QuasilinearSolver::new(coeffs.clone(), options)?.solve(f, eps)
}

/// Discrete H² norm over interior nodes whose 27-point neighborhood is active.
pub fn w2p_proxy(grid: &Grid, u: &[f64]) -> f64 {
    let dom = grid.domain();
    let h = grid.spacing;
    let mut acc = 0.0;
    for &i in &dom.interior {
        let c = grid.coords(i);
        let mut full = true;
        'outer: for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    let idx = grid.index(n[0] as usize, n[1] as usize, n[2] as usize);
                    if grid.role(idx) == NodeRole::Exterior {
                        full = false;
                        break 'outer;
                    }
                }
            }
        }
        if !full {
            continue;
        }
        let at = |d: [i64; 3]| {
            u[grid.index(
                (c[0] as i64 + d[0]) as usize,
                (c[1] as i64 + d[1]) as usize,
                (c[2] as i64 + d[2]) as usize,
            )]
        };
        let mut s = u[i] * u[i];
        for d in 0..3 {
            let mut e = [0i64; 3];
            e[d] = 1;
            let m = [-e[0], -e[1], -e[2]];
            let g = (at(e) - at(m)) / (2.0 * h[d]);
            let dd = (at(e) - 2.0 * u[i] + at(m)) / (h[d] * h[d]);
            s += g * g + dd * dd;
            for d2 in d + 1..3 {
                let mut f = [0i64; 3];
                f[d2] = 1;
                let pp = at([e[0] + f[0], e[1] + f[1], e[2] + f[2]]);
                let pm = at([e[0] - f[0], e[1] - f[1], e[2] - f[2]]);
                let mp = at([-e[0] + f[0], -e[1] + f[1], -e[2] + f[2]]);
                let mm = at([-e[0] - f[0], -e[1] - f[1], -e[2] - f[2]]);
                let x = (pp - pm - mp + mm) / (4.0 * h[d] * h[d2]);
                s += 2.0 * x * x;
            }
        }
        acc += s;
    }
    (acc * grid.cell_volume()).sqrt()
}

/// Mode of a Dirichlet-to-Neumann operator.
#[derive(Debug, Clone)]
pub enum DtNMode {
    /// f ↦ ν·C(x, ∇u) for the solution with boundary data εf.
    Nonlinear { coeffs: Arc<CoefficientSet>, eps: f64 },
    /// f ↦ γ∂νu for the conductivity equation.
    LinearGamma,
}

/// Discrete Dirichlet-to-Neumann operator with a cached factorization.
#[derive(Debug, Clone)]
pub struct DtNOperator {
    pub mode: DtNMode,
    lin: Arc<LinearConductivity>,
    solver: Option<Arc<QuasilinearSolver>>,
}

impl DtNOperator {
    pub fn linear(gamma: &ScalarField) -> Result<DtNOperator> {
        Ok(DtNOperator {
            mode: DtNMode::LinearGamma,
            lin: Arc::new(LinearConductivity::new(gamma)?),
            solver: None,
        })
    }

    pub fn nonlinear(coeffs: Arc<CoefficientSet>, eps: f64, options: SolverOptions) -> Result<DtNOperator> {
        let solver = Arc::new(QuasilinearSolver::new(coeffs.clone(), options)?);
        Ok(DtNOperator {
            mode: DtNMode::Nonlinear { coeffs, eps },
            lin: solver.lin.clone(),
            solver: Some(solver),
        })
    }

    /// Same operator at a different amplitude ε.
    pub fn with_eps(&self, eps: f64) -> DtNOperator {
        let mut op = self.clone();
        if let DtNMode::Nonlinear { eps: e, .. } = &mut op.mode {
            *e = eps;
        }
        op
    }

    /// The linear conductivity operator Λγ underlying either mode.
    pub fn linear_part(&self) -> &Arc<LinearConductivity> {
        &self.lin
    }

    pub fn solver(&self) -> Option<&Arc<QuasilinearSolver>> {
        self.solver.as_ref()
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.lin.grid
    }

    pub fn dn_apply(&self, f: &RealTrace) -> Result<RealTrace> {
        match &self.mode {
            DtNMode::LinearGamma => Ok(self.lin.apply(f)),
            DtNMode::Nonlinear { eps, .. } => {
                let s = self.solver.as_ref().expect("nonlinear operator has a solver");
                let r = s.solve(f, *eps)?;
                Ok(s.dn_of(&r.u.values))
            }
        }
    }

    /// Nonlinear evaluations Λ(εf) for several ε, sharing the expansion predictor.
    pub fn dn_sweep(&self, f: &RealTrace, eps: &[f64]) -> Result<Vec<RealTrace>> {
        let s = match &self.solver {
            Some(s) => s,
            None => return Err(Error::InvalidArgument("sweep needs a nonlinear operator".into())),
        };
        let (u1, u2) = s.expansion_guess(f);
        eps.iter()
            .map(|&e| {
                let r = s.solve_from(f, e, &u1, &u2)?;
                Ok(s.dn_of(&r.u.values))
            })
            .collect()
    }
}
