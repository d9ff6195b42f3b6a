//! Complex frequencies ζ with ζ·ζ = 0 and complex geometrical optics solutions
//! v = e^{ζ·x}γ^{−1/2}(1 + r).

use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::{fft3, wavenumbers};
use crate::grid::{cross, dot, laplacian, norm, ComplexScalarField, ComplexTrace, Grid, ScalarField, AXES};
use crate::krylov::{gmres, norm2, GmresOptions};

pub type C3 = [Complex64; 3];

/// Bilinear (non-Hermitian) product a·b.
pub fn cdot(a: &C3, b: &C3) -> Complex64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// ζ·x for a real point x.
pub fn cdot_real(a: &C3, x: [f64; 3]) -> Complex64 {
    a[0] * x[0] + a[1] * x[1] + a[2] * x[2]
}

pub fn cnorm(a: &C3) -> f64 {
    (a[0].norm_sqr() + a[1].norm_sqr() + a[2].norm_sqr()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZetaPair {
    pub xi: [f64; 3],
    pub eta: [f64; 3],
    pub k: [f64; 3],
    pub s: f64,
    /// r with r² = |ξ|²/4 + s².
    pub r_param: f64,
    pub zeta1: C3,
    pub zeta2: C3,
}

/// Orthonormal pair (η, k) orthogonal to ξ: η from the axis least aligned with ξ (lowest index
/// on ties), k = ξ×η/|ξ×η|.
pub fn frame(xi: [f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let n = norm(xi);
    if !(n > 0.0) {
        return Err(Error::ZeroXi);
    }
    let u = [xi[0] / n, xi[1] / n, xi[2] / n];
    let mut axis = 0;
    for d in 1..3 {
        if u[d].abs() < u[axis].abs() {
            axis = d;
        }
    }
    let e = AXES[axis];
    let p = dot(e, u);
    let eta = [e[0] - p * u[0], e[1] - p * u[1], e[2] - p * u[2]];
    let en = norm(eta);
    let eta = [eta[0] / en, eta[1] / en, eta[2] / en];
    let k = cross(u, eta);
    let kn = norm(k);
    Ok((eta, [k[0] / kn, k[1] / kn, k[2] / kn]))
}

/// ζ₁ = rk − i(ξ/2 + sη), ζ₂ = −rk − i(ξ/2 − sη).
pub fn make_zeta_pair(xi: [f64; 3], s: f64) -> Result<ZetaPair> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("s must be positive, got {s}")));
    }
    let (eta, k) = frame(xi)?;
    Ok(pair_from_frame(xi, s, eta, k))
}

/// Pair for ξ = 0 in the fixed frame η = e₁, k = e₂.
pub fn zeta_pair_at_zero(s: f64) -> Result<ZetaPair> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("s must be positive, got {s}")));
    }
    Ok(pair_from_frame([0.0; 3], s, AXES[0], AXES[1]))
}

/// [`make_zeta_pair`] for ξ ≠ 0 and [`zeta_pair_at_zero`] otherwise.
pub fn zeta_pair_any(xi: [f64; 3], s: f64) -> Result<ZetaPair> {
    if norm(xi) == 0.0 {
        zeta_pair_at_zero(s)
    } else {
        make_zeta_pair(xi, s)
    }
}

fn pair_from_frame(xi: [f64; 3], s: f64, eta: [f64; 3], k: [f64; 3]) -> ZetaPair {
    let r = (0.25 * dot(xi, xi) + s * s).sqrt();
    let mut z1 = [Complex64::default(); 3];
    let mut z2 = [Complex64::default(); 3];
    for d in 0..3 {
        z1[d] = Complex64::new(r * k[d], -(0.5 * xi[d] + s * eta[d]));
        z2[d] = Complex64::new(-r * k[d], -(0.5 * xi[d] - s * eta[d]));
    }
    ZetaPair {
        xi,
        eta,
        k,
        s,
        r_param: r,
        zeta1: z1,
        zeta2: z2,
    }
}

/// q = Δ_h σ / σ with σ = γ^{1/2} and the seven-point Laplacian.
pub fn compute_q(gamma: &ScalarField) -> ScalarField {
    let sigma: Vec<f64> = gamma.values.iter().map(|g| g.sqrt()).collect();
    let lap = laplacian(&sigma, &gamma.grid);
    ScalarField {
        grid: gamma.grid.clone(),
        values: lap.iter().zip(&sigma).map(|(l, s)| l / s).collect(),
    }
}

/// q = Δσ/σ with the Laplacian taken spectrally on the periodic box.
pub fn compute_q_spectral(gamma: &ScalarField) -> ScalarField {
    let grid = &gamma.grid;
    let sigma: Vec<f64> = gamma.values.iter().map(|g| g.sqrt()).collect();
    let mut v: Vec<Complex64> = sigma.iter().map(|s| Complex64::new(s - 1.0, 0.0)).collect();
    spectral_multiply(grid, &mut v, [0.0; 3], |k| Complex64::new(-dot(k, k), 0.0));
    ScalarField {
        grid: grid.clone(),
        values: v.iter().zip(&sigma).map(|(l, s)| l.re / s).collect(),
    }
}

/// Multiplies the DFT of `v` by `symbol(k + θ)` on the unshifted wavenumbers k.
fn spectral_multiply(grid: &Grid, v: &mut [Complex64], theta: [f64; 3], symbol: impl Fn([f64; 3]) -> Complex64) {
    fft3(v, grid.dims, false);
    let k = wavenumbers(grid);
    let n = grid.len() as f64;
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        let kk = [k[0][c[0]] + theta[0], k[1][c[1]] + theta[1], k[2][c[2]] + theta[2]];
        v[idx] *= symbol(kk) / n;
    }
    fft3(v, grid.dims, true);
}

/// Symbol −|k|² + 2iζ·k of Δ + 2ζ·∇.
pub fn faddeev_symbol(zeta: &C3, k: [f64; 3]) -> Complex64 {
    Complex64::new(-dot(k, k), 0.0) + Complex64::i() * 2.0 * cdot_real(zeta, k)
}

#[derive(Debug, Clone, Copy)]
pub struct CgoOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative guard band: the smallest symbol modulus must exceed guard·|ζ|.
    pub guard: f64,
    pub min_zeta: f64,
}

impl Default for CgoOptions {
    fn default() -> Self {
        CgoOptions {
            tol: 1e-8,
            max_iter: 200,
            guard: 1e-3,
            min_zeta: 1e-6,
        }
    }
}

/// Solution of the r-equation with its diagnostics.
#[derive(Debug, Clone)]
pub struct RSolve {
    pub r: ComplexScalarField,
    /// Bloch shift θ: r = e^{iθ·x}ρ with ρ periodic.
    pub shift: [f64; 3],
    /// Periodic part ρ.
    pub rho: Vec<Complex64>,
    pub iterations: usize,
    /// ‖Δr + 2ζ·∇r − qr − q‖₂ / ‖q‖₂.
    pub residual: f64,
    pub min_symbol: f64,
}

/// Picks the Bloch shift (a fraction of the lattice spacing) keeping the symbol farthest from 0.
fn choose_shift(grid: &Grid, zeta: &C3) -> ([f64; 3], f64) {
    let p = grid.period();
    let dk = [2.0 * std::f64::consts::PI / p[0], 2.0 * std::f64::consts::PI / p[1], 2.0 * std::f64::consts::PI / p[2]];
    let k = wavenumbers(grid);
    let fracs = [0.0, 0.25, 0.5];
    let mut best = ([0.0; 3], -1.0);
    for a in fracs {
        for b in fracs {
            for c in fracs {
                if a == 0.0 && b == 0.0 && c == 0.0 {
                    continue;
                }
                let th = [a * dk[0], b * dk[1], c * dk[2]];
                let mut m = f64::INFINITY;
                for kz in &k[2] {
                    for ky in &k[1] {
                        for kx in &k[0] {
                            let s = faddeev_symbol(zeta, [kx + th[0], ky + th[1], kz + th[2]]).norm();
                            m = m.min(s);
                        }
                    }
                }
                if m > best.1 {
                    best = (th, m);
                }
            }
        }
    }
    best
}

fn bloch(grid: &Grid, theta: [f64; 3], sign: f64) -> Vec<Complex64> {
    (0..grid.len())
        .map(|i| Complex64::from_polar(1.0, sign * dot(theta, grid.position(i))))
        .collect()
}

/// Solves Δr + 2ζ·∇r − qr = q on the periodic box.
pub fn solve_r(q: &ScalarField, zeta: &C3) -> Result<ComplexScalarField> {
    Ok(solve_r_with(q, zeta, &CgoOptions::default())?.r)
}

pub fn solve_r_with(q: &ScalarField, zeta: &C3, opts: &CgoOptions) -> Result<RSolve> {
    let grid = q.grid.clone();
    let zn = cnorm(zeta);
    if !(zn >= opts.min_zeta) {
        return Err(Error::InvalidArgument(format!("|zeta| = {zn:.3e} is below the minimum")));
    }
    let (theta, min_symbol) = choose_shift(&grid, zeta);
    if min_symbol < opts.guard * zn {
        return Err(Error::SymbolSingularity {
            min_symbol,
            guard: opts.guard * zn,
        });
    }
    let n = grid.len();
    let qv = &q.values;
    let qnorm = norm2(qv);
    if qnorm == 0.0 {
        return Ok(RSolve {
            r: ComplexScalarField::zeros(&grid),
            shift: theta,
            rho: vec![Complex64::default(); n],
            iterations: 0,
            residual: 0.0,
            min_symbol,
        });
    }
    let inv_symbol = |k: [f64; 3]| 1.0 / faddeev_symbol(zeta, k);
    let em = bloch(&grid, theta, -1.0);
    let mut rhs: Vec<Complex64> = (0..n).map(|i| em[i] * qv[i]).collect();
    spectral_multiply(&grid, &mut rhs, theta, inv_symbol);
    let mut rho = vec![Complex64::default(); n];
    let out = gmres(
        |x: &[Complex64], y: &mut [Complex64]| {
            let mut t: Vec<Complex64> = x.iter().zip(qv).map(|(a, b)| a * b).collect();
            spectral_multiply(&grid, &mut t, theta, inv_symbol);
            for i in 0..x.len() {
                y[i] = x[i] - t[i];
            }
        },
        |x: &[Complex64], y: &mut [Complex64]| y.copy_from_slice(x),
        &rhs,
        &mut rho,
        GmresOptions {
            tol: opts.tol * 1e-3,
            max_iter: opts.max_iter,
            restart: 50,
        },
    );
    let residual = r_residual_periodic(&grid, qv, zeta, theta, &rho, &em) / qnorm;
    if !out.converged && residual > opts.tol {
        return Err(Error::NonConvergence {
            what: "r-equation",
            iterations: out.iterations,
            residual,
        });
    }
    let ep = bloch(&grid, theta, 1.0);
    let r: Vec<Complex64> = rho.iter().zip(&ep).map(|(a, b)| a * b).collect();
    Ok(RSolve {
        r: ComplexScalarField {
            grid: grid.clone(),
            values: r,
        },
        shift: theta,
        rho,
        iterations: out.iterations,
        residual,
        min_symbol,
    })
}

/// ‖P_θρ − qρ − e^{−iθx}q‖₂, which equals the modulus of the r-equation residual.
fn r_residual_periodic(grid: &Grid, q: &[f64], zeta: &C3, theta: [f64; 3], rho: &[Complex64], em: &[Complex64]) -> f64 {
    let mut p = rho.to_vec();
    spectral_multiply(grid, &mut p, theta, |k| faddeev_symbol(zeta, k));
    let res: Vec<Complex64> = (0..rho.len()).map(|i| p[i] - q[i] * rho[i] - em[i] * q[i]).collect();
    norm2(&res)
}

/// Relative residual of the r-equation for a given r = e^{iθx}ρ.
pub fn r_residual(q: &ScalarField, zeta: &C3, sol: &RSolve) -> f64 {
    let em = bloch(&q.grid, sol.shift, -1.0);
    let qn = norm2(&q.values);
    if qn == 0.0 {
        return norm2(&sol.rho);
    }
    r_residual_periodic(&q.grid, &q.values, zeta, sol.shift, &sol.rho, &em) / qn
}

/// ‖f‖_{L²(Ω)} over the interior nodes.
pub fn l2_on_domain(grid: &Grid, v: &[Complex64]) -> f64 {
    let dom = grid.domain();
    (dom.interior.iter().map(|&i| v[i].norm_sqr()).sum::<f64>() * grid.cell_volume()).sqrt()
}

#[derive(Debug, Clone)]
pub struct CgoSolution {
    pub zeta: C3,
    pub r_field: ComplexScalarField,
    pub v_field: ComplexScalarField,
    pub q_used: ScalarField,
    pub shift: [f64; 3],
    pub r_residual: f64,
    rho: Vec<Complex64>,
    sigma_inv: Vec<f64>,
}

/// v = e^{ζ·x}γ^{−1/2}(1 + r) with q taken spectrally from γ.
pub fn assemble_cgo(gamma: &ScalarField, zeta: &C3) -> Result<CgoSolution> {
    assemble_cgo_with(gamma, zeta, &CgoOptions::default())
}

pub fn assemble_cgo_with(gamma: &ScalarField, zeta: &C3, opts: &CgoOptions) -> Result<CgoSolution> {
    let grid = gamma.grid.clone();
    let q = compute_q_spectral(gamma);
    let rs = solve_r_with(&q, zeta, opts)?;
    let sigma_inv: Vec<f64> = gamma.values.iter().map(|g| 1.0 / g.sqrt()).collect();
    let v: Vec<Complex64> = (0..grid.len())
        .map(|i| cdot_real(zeta, grid.position(i)).exp() * sigma_inv[i] * (1.0 + rs.r.values[i]))
        .collect();
    Ok(CgoSolution {
        zeta: *zeta,
        r_field: rs.r,
        v_field: ComplexScalarField { grid, values: v },
        q_used: q,
        shift: rs.shift,
        r_residual: rs.residual,
        rho: rs.rho,
        sigma_inv,
    })
}

impl CgoSolution {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.v_field.grid
    }

    /// Boundary trace of v.
    pub fn trace(&self) -> ComplexTrace {
        crate::grid::boundary_restrict(self.grid(), &self.v_field.values)
    }

    /// e^{−ζ·x}∇v = (∇ + ζ)φ with φ = σ⁻¹(1 + r), differentiated spectrally.
    pub fn reduced_gradient(&self) -> [Vec<Complex64>; 3] {
        let grid = self.grid().clone();
        let n = grid.len();
        let z = self.zeta;
        let th = self.shift;
        let ep = bloch(&grid, th, 1.0);
        let mut out: [Vec<Complex64>; 3] = Default::default();
        for d in 0..3 {
            let mut a: Vec<Complex64> = self.sigma_inv.iter().map(|s| Complex64::new(s - 1.0, 0.0)).collect();
            spectral_multiply(&grid, &mut a, [0.0; 3], |k| Complex64::new(0.0, k[d]));
            let mut b: Vec<Complex64> = (0..n).map(|i| self.sigma_inv[i] * self.rho[i]).collect();
            let psi = b.clone();
            spectral_multiply(&grid, &mut b, th, |k| Complex64::new(0.0, k[d]));
            out[d] = (0..n)
                .map(|i| a[i] + z[d] * self.sigma_inv[i] + ep[i] * (b[i] + z[d] * psi[i]))
                .collect();
        }
        out
    }

    /// Relative residual of ∇·(γ∇v) = 0 on Ω: ‖e^{−ζx}∇·(γ∇v)‖/(|ζ|²‖e^{−ζx}v‖), spectral.
    pub fn l_gamma_residual(&self, gamma: &ScalarField) -> f64 {
        let grid = self.grid().clone();
        let n = grid.len();
        let z = self.zeta;
        let th = self.shift;
        let ep = bloch(&grid, th, 1.0);
        let em = bloch(&grid, th, -1.0);
        let g = self.reduced_gradient();
        // (∇ + ζ)·(γ V) with V the reduced gradient; split into periodic pieces.
        let mut total = vec![Complex64::default(); n];
        for d in 0..3 {
            // γV_d = periodic part P + e^{iθx}·Q, separated through the Bloch factor of ρ.
            let mut base: Vec<Complex64> = Vec::with_capacity(n);
            let mut bl: Vec<Complex64> = Vec::with_capacity(n);
            let mut da: Vec<Complex64> = self.sigma_inv.iter().map(|s| Complex64::new(s - 1.0, 0.0)).collect();
            spectral_multiply(&grid, &mut da, [0.0; 3], |k| Complex64::new(0.0, k[d]));
            for i in 0..n {
                let periodic = da[i] + z[d] * self.sigma_inv[i];
                base.push(gamma.values[i] * periodic - z[d]);
                bl.push(gamma.values[i] * (g[d][i] - periodic) * em[i]);
            }
            let mut b1 = base.clone();
            spectral_multiply(&grid, &mut b1, [0.0; 3], |k| Complex64::new(0.0, k[d]));
            let mut b2 = bl.clone();
            spectral_multiply(&grid, &mut b2, th, |k| Complex64::new(0.0, k[d]));
            for i in 0..n {
                // The constant ζ_d removed from `base` contributes ζ_d·ζ_d, summing to ζ·ζ = 0.
                total[i] += b1[i] + z[d] * (base[i] + z[d]) + ep[i] * (b2[i] + z[d] * bl[i]);
            }
        }
        let phi: Vec<Complex64> = (0..n)
            .map(|i| self.sigma_inv[i] * (1.0 + self.r_field.values[i]))
            .collect();
        let zn = cnorm(&z);
        l2_on_domain(&grid, &total) / (zn * zn * l2_on_domain(&grid, &phi))
    }
}

/// One row of the decay ladder: (|ζ|, ‖r‖_{L²(Ω)}, relative r-residual).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LadderRow {
    pub zeta_norm: f64,
    pub r_norm: f64,
    pub residual: f64,
}

/// Solves the r-equation for ζ₁(ξ, s) with |ζ₁| = each requested value.
pub fn decay_ladder(gamma: &ScalarField, xi: [f64; 3], zeta_norms: &[f64]) -> Result<Vec<LadderRow>> {
    let q = compute_q_spectral(gamma);
    let mut rows = Vec::new();
    for &zn in zeta_norms {
        let s2 = 0.5 * zn * zn - 0.25 * dot(xi, xi);
        if !(s2 > 0.0) {
            return Err(Error::InvalidArgument(format!("|zeta| = {zn} is too small for this xi")));
        }
        let pair = nudged_pair(&q, xi, s2.sqrt())?;
        let rs = solve_r_with(&q, &pair.zeta1, &CgoOptions::default())?;
        rows.push(LadderRow {
            zeta_norm: cnorm(&pair.zeta1),
            r_norm: l2_on_domain(&q.grid, &rs.r.values),
            residual: rs.residual,
        });
    }
    Ok(rows)
}

/// Pair at (ξ, s), moving s by half a lattice spacing while either ζ hits the guard band.
pub fn nudged_pair(q: &ScalarField, xi: [f64; 3], s: f64) -> Result<ZetaPair> {
    let grid = &q.grid;
    let half = std::f64::consts::PI / grid.period()[0];
    let opts = CgoOptions::default();
    let mut last = None;
    for t in [0.0, 1.0, -1.0, 2.0, -2.0] {
        let st = s + t * half;
        if st <= 0.0 {
            continue;
        }
        let pair = zeta_pair_any(xi, st)?;
        let ok = [pair.zeta1, pair.zeta2].iter().all(|z| {
            let (_, m) = choose_shift(grid, z);
            let good = m >= opts.guard * cnorm(z);
            if !good {
                last = Some(m);
            }
            good
        });
        if ok {
            return Ok(pair);
        }
    }
    Err(Error::SymbolSingularity {
        min_symbol: last.unwrap_or(0.0),
        guard: opts.guard,
    })
}

/// Log-log least-squares slope of y against x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
