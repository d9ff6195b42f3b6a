//! Reconstruction of γ from the linear Dirichlet-to-Neumann map: boundary values, conversion to
//! a Schrödinger DN map, the scattering transform, Fourier inversion for q and the final
//! Schrödinger solve.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgo::{cdot_real, frame, C3};
use crate::error::{Error, Result};
use crate::extrapolate::richardson_inverse_s;
use crate::fourier::{fft3, lattice_synthesis, FrequencyGrid};
use crate::forward::LinearConductivity;
use crate::grid::{
    boundary_integral, cross, dot, normalize, ComplexTrace, Grid, RealTrace, ScalarField, AXES,
};
use crate::krylov::{gmres, GmresOptions};

/// γ and its normal derivative at the boundary nodes.
#[derive(Debug, Clone)]
pub struct BoundaryGammaData {
    pub grid: Arc<Grid>,
    pub gamma_b: Vec<f64>,
    pub dgamma_b: Vec<f64>,
}

impl BoundaryGammaData {
    /// Boundary data of a known γ, with ∂νγ chosen so that the Schrödinger conversion reproduces
    /// the exact discrete identity.
    pub fn from_truth(gamma: &ScalarField) -> BoundaryGammaData {
        let grid = gamma.grid.clone();
        let dom = grid.domain();
        let kappa = exact_kappa(gamma);
        let mut gamma_b = Vec::with_capacity(dom.boundary.len());
        let mut dgamma_b = Vec::with_capacity(dom.boundary.len());
        for (k, &b) in dom.boundary.iter().enumerate() {
            let g = gamma.values[b];
            let proj = dot(dom.normals[k], dom.flux_normals[k]);
            gamma_b.push(g);
            dgamma_b.push(kappa[k] * 2.0 * g * dom.areas[k] / proj);
        }
        BoundaryGammaData {
            grid,
            gamma_b,
            dgamma_b,
        }
    }

    pub fn min_gamma(&self) -> f64 {
        self.gamma_b.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// κ_b = (1/A_b) Σ_faces face_area (σ_b − σ_i)/(σ_b h) over the interior neighbors i of b.
pub fn exact_kappa(gamma: &ScalarField) -> Vec<f64> {
    let grid = &gamma.grid;
    let dom = grid.domain();
    dom.boundary
        .iter()
        .enumerate()
        .map(|(k, &b)| {
            let sb = gamma.values[b].sqrt();
            let mut acc = 0.0;
            for d in 0..3 {
                for sign in [-1, 1] {
                    if let Some(i) = grid.neighbor(b, d, sign) {
                        if grid.is_interior(i) {
                            let si = gamma.values[i].sqrt();
                            acc += grid.face_area(d) * (sb - si) / (sb * grid.spacing[d]);
                        }
                    }
                }
            }
            acc / dom.areas[k]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryOptions {
    /// The two oscillation frequencies as multiples of 1/h.
    pub nh: [f64; 2],
    /// Envelope width in units of 1/N at the lower frequency.
    pub width_cycles: f64,
    /// Largest admissible N·h.
    pub max_nh: f64,
    /// Van Cittert sweeps undoing the tangential averaging of each quotient.
    pub deconvolve_steps: usize,
}

impl Default for BoundaryOptions {
    fn default() -> Self {
        BoundaryOptions {
            nh: [0.6, 1.0],
            width_cycles: 2.5,
            max_nh: 1.2,
            deconvolve_steps: 2,
        }
    }
}

fn tangent(nu: [f64; 3]) -> [f64; 3] {
    let mut axis = 0;
    for d in 1..3 {
        if nu[d].abs() < nu[axis].abs() {
            axis = d;
        }
    }
    normalize(cross(nu, AXES[axis]))
}

/// Quotient at one probe and frequency, with the boundary distribution of the reference energy
/// (sparse, normalized to unit sum).
struct Probe {
    quotient: f64,
    weights: Vec<(usize, f64)>,
}

fn probe(
    lam: &LinearConductivity,
    lam1: &LinearConductivity,
    pos: &[[f64; 3]],
    p: usize,
    t: [f64; 3],
    n: f64,
    w: f64,
) -> Probe {
    let grid = &lam.grid;
    let xp = pos[p];
    let mut cs = vec![0.0; pos.len()];
    let mut sn = vec![0.0; pos.len()];
    for (k, x) in pos.iter().enumerate() {
        let d = [x[0] - xp[0], x[1] - xp[1], x[2] - xp[2]];
        let env = (-dot(d, d) / (2.0 * w * w)).exp();
        let ph = n * dot(t, d);
        cs[k] = env * ph.cos();
        sn[k] = env * ph.sin();
    }
    let areas = &grid.domain().areas;
    let mut num = 0.0;
    let mut density = vec![0.0; pos.len()];
    for v in [cs, sn] {
        let tr = RealTrace {
            grid: grid.clone(),
            samples: v,
        };
        num += boundary_integral(&lam.apply(&tr), &tr).unwrap_or(0.0);
        let r = lam1.apply(&tr);
        for k in 0..pos.len() {
            density[k] += r.samples[k] * tr.samples[k] * areas[k];
        }
    }
    let den: f64 = density.iter().sum();
    let peak = density.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let weights = density
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > 1e-10 * peak)
        .map(|(k, v)| (k, v / den))
        .collect();
    Probe {
        quotient: num / den,
        weights,
    }
}

/// Iterates g ← g + (Q − K g) starting from g = Q, where K holds the probe weights.
fn van_cittert(probes: &[Probe], steps: usize) -> Vec<f64> {
    let q: Vec<f64> = probes.iter().map(|p| p.quotient).collect();
    let mut g = q.clone();
    for _ in 0..steps {
        let kg: Vec<f64> = probes
            .iter()
            .map(|p| p.weights.iter().map(|&(k, v)| v * g[k]).sum())
            .collect();
        for i in 0..g.len() {
            g[i] += q[i] - kg[i];
        }
    }
    g
}

/// Recovers γ and ∂νγ on the boundary from quotients ⟨Λγ f_N, f_N⟩ / ⟨Λ₁ f_N, f_N⟩ of
/// oscillatory traces concentrated at each boundary node, using Q(N) ≈ γ − ∂νγ/(2N) at two N.
/// The tangential averaging of each quotient is undone by a few Van Cittert sweeps with the
/// boundary energy distribution of the reference problem as the kernel.
pub fn recover_boundary_gamma(lam: &LinearConductivity, opts: &BoundaryOptions) -> Result<BoundaryGammaData> {
    let grid = lam.grid.clone();
    let h = grid.spacing.iter().cloned().fold(0.0, f64::max);
    for &nh in &opts.nh {
        if nh > opts.max_nh {
            return Err(Error::OscillationBudgetExceeded {
                nh,
                limit: opts.max_nh,
            });
        }
    }
    if !(opts.nh[0] > 0.0 && opts.nh[1] > opts.nh[0]) {
        return Err(Error::InvalidArgument("oscillation frequencies must be positive and increasing".into()));
    }
    let n = [opts.nh[0] / h, opts.nh[1] / h];
    let w = opts.width_cycles / n[0];
    let lam1 = LinearConductivity::new(&ScalarField::constant(&grid, 1.0))?;
    let dom = grid.domain();
    let pos: Vec<[f64; 3]> = dom.boundary.iter().map(|&b| grid.position(b)).collect();
    let mut q = Vec::with_capacity(2);
    for &nj in &n {
        let probes: Vec<Probe> = (0..pos.len())
            .into_par_iter()
            .map(|p| probe(lam, &lam1, &pos, p, tangent(dom.normals[p]), nj, w))
            .collect();
        q.push(van_cittert(&probes, opts.deconvolve_steps));
    }
    let gamma_b: Vec<f64> = (0..pos.len())
        .map(|k| (n[0] * q[0][k] - n[1] * q[1][k]) / (n[0] - n[1]))
        .collect();
    let dgamma_b: Vec<f64> = (0..pos.len())
        .map(|k| 2.0 * n[0] * n[1] * (q[0][k] - q[1][k]) / (n[0] - n[1]))
        .collect();
    let min = gamma_b.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::VerificationMismatch(format!(
            "recovered boundary conductivity is not positive (min {min:.3e})"
        )));
    }
    Ok(BoundaryGammaData {
        grid,
        gamma_b,
        dgamma_b,
    })
}

/// Schrödinger DN map Λ̃q g = σ_b⁻¹ Λγ(σ⁻¹g) + κ_b g and its q = 0 counterpart Λ̃0.
#[derive(Debug, Clone)]
pub struct SchrodingerDtN {
    pub lam: Arc<LinearConductivity>,
    pub lam0: Arc<LinearConductivity>,
    pub sigma_b: Vec<f64>,
    pub kappa: Vec<f64>,
}

/// κ_b = (∂νγ / 2γ_b)(ν_b·n_b)/A_b, the discrete form of ½γ⁻¹∂νγ seen by the flux.
pub fn conductivity_to_schrodinger(lam: Arc<LinearConductivity>, bdata: &BoundaryGammaData) -> Result<SchrodingerDtN> {
    let grid = lam.grid.clone();
    if *grid != *bdata.grid {
        return Err(Error::GridMismatch);
    }
    if !(bdata.min_gamma() > 0.0) {
        return Err(Error::InvalidArgument("boundary conductivity must be positive".into()));
    }
    let dom = grid.domain();
    let kappa = (0..dom.boundary.len())
        .map(|k| {
            let proj = dot(dom.normals[k], dom.flux_normals[k]);
            bdata.dgamma_b[k] / (2.0 * bdata.gamma_b[k]) * proj / dom.areas[k]
        })
        .collect();
    let lam0 = Arc::new(LinearConductivity::new(&ScalarField::constant(&grid, 1.0))?);
    Ok(SchrodingerDtN {
        lam,
        lam0,
        sigma_b: bdata.gamma_b.iter().map(|g| g.sqrt()).collect(),
        kappa,
    })
}

impl SchrodingerDtN {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.lam.grid
    }

    pub fn apply(&self, g: &RealTrace) -> RealTrace {
        let scaled = RealTrace {
            grid: g.grid.clone(),
            samples: g.samples.iter().zip(&self.sigma_b).map(|(v, s)| v / s).collect(),
        };
        let out = self.lam.apply(&scaled);
        RealTrace {
            grid: g.grid.clone(),
            samples: (0..g.len())
                .map(|k| out.samples[k] / self.sigma_b[k] + self.kappa[k] * g.samples[k])
                .collect(),
        }
    }

    pub fn apply_zero(&self, g: &RealTrace) -> RealTrace {
        self.lam0.apply(g)
    }

    /// (Λ̃q − Λ̃0) g for complex g.
    pub fn difference_complex(&self, g: &ComplexTrace) -> ComplexTrace {
        let (re, im) = (g.re(), g.im());
        let dr = self.apply(&re).axpy(-1.0, &self.apply_zero(&re));
        let di = self.apply(&im).axpy(-1.0, &self.apply_zero(&im));
        ComplexTrace::from_parts(&dr, &di)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ScatteringPath {
    Born,
    Exact,
}

impl std::str::FromStr for ScatteringPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "born" => Ok(ScatteringPath::Born),
            "exact" => Ok(ScatteringPath::Exact),
            other => Err(Error::InvalidArgument(format!("unknown scattering path {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScatteringTransform {
    pub t_values: Vec<Complex64>,
    pub zeta_used: Vec<C3>,
    pub path: ScatteringPath,
    pub s_ladder: Vec<f64>,
    /// t per ξ and per ladder rung, before extrapolation.
    pub ladder_values: Vec<Vec<Complex64>>,
}

/// ζ = −ξ/2 + sη + irk with r² = |ξ|²/4 + s², so that ζ·ζ = (ζ+ξ)·(ζ+ξ) = 0.
pub fn step3_zeta(xi: [f64; 3], s: f64) -> C3 {
    let (eta, k) = if dot(xi, xi) == 0.0 {
        (AXES[0], AXES[1])
    } else {
        frame(xi).expect("nonzero xi")
    };
    let r = (0.25 * dot(xi, xi) + s * s).sqrt();
    let mut z = [Complex64::default(); 3];
    for d in 0..3 {
        z[d] = Complex64::new(-0.5 * xi[d] + s * eta[d], r * k[d]);
    }
    z
}

fn exp_trace(grid: &Arc<Grid>, z: &C3, sign: f64) -> ComplexTrace {
    ComplexTrace::from_fn(grid, |x| (Complex64::i() * sign * cdot_real(z, x)).exp())
}

/// Adjusts ζ (minimum-norm Gauss–Newton) so that e^{ix·ζ} and e^{−ix·(ζ+ξ)} are exactly
/// discrete harmonic: Σ_j cos(hζ_j) = 3 and Σ_j cos(h(ζ_j + ξ_j)) = 3.
pub fn discrete_harmonic_zeta(z0: C3, xi: [f64; 3], h: f64) -> Result<C3> {
    let mut z = z0;
    let same = dot(xi, xi) == 0.0;
    for _ in 0..60 {
        let f1: Complex64 = (0..3).map(|j| (z[j] * h).cos()).sum::<Complex64>() - 3.0;
        let f2: Complex64 = (0..3).map(|j| ((z[j] + xi[j]) * h).cos()).sum::<Complex64>() - 3.0;
        let a: Vec<Complex64> = (0..3).map(|j| -(z[j] * h).sin() * h).collect();
        let b: Vec<Complex64> = (0..3).map(|j| -((z[j] + xi[j]) * h).sin() * h).collect();
        let scale = (0..3).map(|j| (z[j] * h).cos().norm()).sum::<f64>();
        if f1.norm() <= 1e-15 * scale && (same || f2.norm() <= 1e-15 * scale) {
            return Ok(z);
        }
        let delta: Vec<Complex64> = if same {
            let aa: f64 = a.iter().map(|v| v.norm_sqr()).sum();
            (0..3).map(|j| -a[j].conj() * f1 / aa).collect()
        } else {
            let aa: f64 = a.iter().map(|v| v.norm_sqr()).sum();
            let bb: f64 = b.iter().map(|v| v.norm_sqr()).sum();
            let ab: Complex64 = (0..3).map(|j| a[j] * b[j].conj()).sum();
            let det = aa * bb - ab.norm_sqr();
            if !(det > 1e-300) {
                return Err(Error::InvalidArgument("degenerate harmonic constraints".into()));
            }
            // (J J^H)⁻¹ F with J J^H = [[aa, ab], [conj ab, bb]].
            let y1 = (f1 * bb - ab * f2) / det;
            let y2 = (f2 * aa - ab.conj() * f1) / det;
            (0..3).map(|j| -(a[j].conj() * y1 + b[j].conj() * y2)).collect()
        };
        for j in 0..3 {
            z[j] += delta[j];
        }
    }
    Err(Error::NonConvergence {
        what: "discrete harmonic frequency",
        iterations: 60,
        residual: f64::NAN,
    })
}

/// Lattice Faddeev Green function G with Δ_h G = δ/h³, tabulated on a doubled periodic lattice.
pub struct LatticeGreen {
    m: [usize; 3],
    values: Vec<Complex64>,
}

impl LatticeGreen {
    pub fn new(grid: &Grid, zeta: &C3) -> LatticeGreen {
        let m = [2 * grid.dims[0], 2 * grid.dims[1], 2 * grid.dims[2]];
        let h = grid.spacing;
        let zi = [zeta[0].im, zeta[1].im, zeta[2].im];
        let dk = [
            2.0 * std::f64::consts::PI / (m[0] as f64 * h[0]),
            2.0 * std::f64::consts::PI / (m[1] as f64 * h[1]),
            2.0 * std::f64::consts::PI / (m[2] as f64 * h[2]),
        ];
        let lambda = |k: [f64; 3]| -> Complex64 {
            (0..3)
                .map(|d| (2.0 - 2.0 * (Complex64::new(k[d], zi[d]) * h[d]).cos()) / (h[d] * h[d]))
                .sum::<Complex64>()
                * -1.0
        };
        let kk = |d: usize, j: usize| crate::fourier::signed_index(j, m[d]) as f64 * dk[d];
        // Offset of the frequency sampling, chosen away from the zero set of the symbol.
        let fracs = [0.0, 0.25, 0.5];
        let mut best = ([0.0; 3], -1.0);
        for a in fracs {
            for b in fracs {
                for c in fracs {
                    let th = [a * dk[0], b * dk[1], c * dk[2]];
                    let mut mn = f64::INFINITY;
                    for j2 in 0..m[2] {
                        for j1 in 0..m[1] {
                            for j0 in 0..m[0] {
                                let v = lambda([kk(0, j0) + th[0], kk(1, j1) + th[1], kk(2, j2) + th[2]]).norm();
                                mn = mn.min(v);
                            }
                        }
                    }
                    if mn > best.1 {
                        best = (th, mn);
                    }
                }
            }
        }
        let th = best.0;
        let len = m[0] * m[1] * m[2];
        let mut v = vec![Complex64::default(); len];
        for j2 in 0..m[2] {
            for j1 in 0..m[1] {
                for j0 in 0..m[0] {
                    let k = [kk(0, j0) + th[0], kk(1, j1) + th[1], kk(2, j2) + th[2]];
                    v[j0 + m[0] * (j1 + m[1] * j2)] = 1.0 / lambda(k);
                }
            }
        }
        fft3(&mut v, m, true);
        let norm = 1.0 / (m[0] as f64 * h[0] * m[1] as f64 * h[1] * m[2] as f64 * h[2]);
        for j2 in 0..m[2] {
            for j1 in 0..m[1] {
                for j0 in 0..m[0] {
                    let n = [
                        crate::fourier::signed_index(j0, m[0]) as f64 * h[0],
                        crate::fourier::signed_index(j1, m[1]) as f64 * h[1],
                        crate::fourier::signed_index(j2, m[2]) as f64 * h[2],
                    ];
                    let f = Complex64::new(-dot(n, zi), dot(n, th)).exp();
                    v[j0 + m[0] * (j1 + m[1] * j2)] *= f * norm;
                }
            }
        }
        LatticeGreen { m, values: v }
    }

    /// G at the lattice offset `n` (in grid steps).
    pub fn at(&self, n: [i64; 3]) -> Complex64 {
        let w = |d: usize| n[d].rem_euclid(self.m[d] as i64) as usize;
        self.values[w(0) + self.m[0] * (w(1) + self.m[1] * w(2))]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LayerOptions {
    fn default() -> Self {
        LayerOptions {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

/// Born value ⟨(Λ̃q − Λ̃0)e^{−ix·(ζ+ξ)}, e^{ix·ζ}⟩.
pub fn t_born(sd: &SchrodingerDtN, xi: [f64; 3], z: &C3) -> Complex64 {
    let grid = sd.grid().clone();
    let zx: C3 = [z[0] + xi[0], z[1] + xi[1], z[2] + xi[2]];
    let e1 = exp_trace(&grid, &zx, -1.0);
    let e2 = exp_trace(&grid, z, 1.0);
    boundary_integral(&sd.difference_complex(&e1), &e2).unwrap_or_default()
}

/// Solves (I − S_ζ(Λ̃q − Λ̃0))ψ = e^{ix·ζ} on the boundary nodes and returns
/// ⟨(Λ̃q − Λ̃0)e^{−ix·(ζ+ξ)}, ψ⟩ together with ψ.
pub fn t_exact(sd: &SchrodingerDtN, xi: [f64; 3], z: &C3, opts: &LayerOptions) -> Result<(Complex64, ComplexTrace)> {
    let grid = sd.grid().clone();
    let dom = grid.domain();
    let nb = dom.boundary.len();
    let green = LatticeGreen::new(&grid, z);
    let coords: Vec<[i64; 3]> = dom
        .boundary
        .iter()
        .map(|&b| grid.coords(b).map(|c| c as i64))
        .collect();
    let mut s = vec![Complex64::default(); nb * nb];
    for a in 0..nb {
        for b in 0..nb {
            let d = [coords[a][0] - coords[b][0], coords[a][1] - coords[b][1], coords[a][2] - coords[b][2]];
            s[a * nb + b] = green.at(d) * dom.areas[b];
        }
    }
    let rhs = exp_trace(&grid, z, 1.0);
    let mut psi = rhs.samples.clone();
    let out = gmres(
        |x: &[Complex64], y: &mut [Complex64]| {
            let tr = ComplexTrace {
                grid: grid.clone(),
                samples: x.to_vec(),
            };
            let d = sd.difference_complex(&tr);
            for a in 0..nb {
                let row = &s[a * nb..(a + 1) * nb];
                let acc: Complex64 = row.iter().zip(&d.samples).map(|(g, v)| g * v).sum();
                y[a] = x[a] - acc;
            }
        },
        |x: &[Complex64], y: &mut [Complex64]| y.copy_from_slice(x),
        &rhs.samples,
        &mut psi,
        GmresOptions {
            tol: opts.tol,
            max_iter: opts.max_iter,
            restart: opts.max_iter,
        },
    );
    if !out.converged {
        return Err(Error::LayerSolveNonConvergence {
            iterations: out.iterations,
            residual: out.relative_residual,
        });
    }
    let psi = ComplexTrace {
        grid: grid.clone(),
        samples: psi,
    };
    let zx: C3 = [z[0] + xi[0], z[1] + xi[1], z[2] + xi[2]];
    let e1 = exp_trace(&grid, &zx, -1.0);
    let t = boundary_integral(&sd.difference_complex(&e1), &psi)?;
    Ok((t, psi))
}

/// Scattering transform over the frequency lattice, extrapolated in 1/s over the ladder.
/// Only one of each ±ξ pair is computed; the other is its complex conjugate.
pub fn scattering_transform(
    sd: &SchrodingerDtN,
    freq: &FrequencyGrid,
    s_ladder: &[f64],
    path: ScatteringPath,
) -> Result<ScatteringTransform> {
    scattering_transform_with(sd, freq, s_ladder, path, &LayerOptions::default())
}

pub fn scattering_transform_with(
    sd: &SchrodingerDtN,
    freq: &FrequencyGrid,
    s_ladder: &[f64],
    path: ScatteringPath,
    layer: &LayerOptions,
) -> Result<ScatteringTransform> {
    if s_ladder.is_empty() || s_ladder.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("s ladder must hold positive values".into()));
    }
    let h = sd.grid().spacing[0];
    let reps: Vec<usize> = (0..freq.len()).filter(|&i| freq.is_representative(i)).collect();
    let computed: Vec<Result<(Vec<Complex64>, C3)>> = reps
        .par_iter()
        .map(|&i| {
            let xi = freq.xi_points[i];
            let mut vals = Vec::with_capacity(s_ladder.len());
            let mut used = [Complex64::default(); 3];
            for &s in s_ladder {
                let z0 = step3_zeta(xi, s);
                let t = match path {
                    ScatteringPath::Born => {
                        used = z0;
                        t_born(sd, xi, &z0)
                    }
                    ScatteringPath::Exact => {
                        let z = discrete_harmonic_zeta(z0, xi, h)?;
                        used = z;
                        t_exact(sd, xi, &z, layer)?.0
                    }
                };
                vals.push(t);
            }
            Ok((vals, used))
        })
        .collect();
    let mut t_values = vec![Complex64::default(); freq.len()];
    let mut zeta_used = vec![[Complex64::default(); 3]; freq.len()];
    let mut ladder_values = vec![Vec::new(); freq.len()];
    for (&i, res) in reps.iter().zip(computed) {
        let (vals, z) = res?;
        let t = richardson_inverse_s(s_ladder, &vals);
        let j = freq.negate_index(i);
        t_values[i] = t;
        zeta_used[i] = z;
        t_values[j] = t.conj();
        zeta_used[j] = [z[0].conj(), z[1].conj(), z[2].conj()];
        ladder_values[j] = vals.iter().map(|v| v.conj()).collect();
        ladder_values[i] = vals;
    }
    Ok(ScatteringTransform {
        t_values,
        zeta_used,
        path,
        s_ladder: s_ladder.to_vec(),
        ladder_values,
    })
}

/// q_rec = Re (1/|P|) Σ_{|ξ|≤ξ_max} t(ξ) e^{iξ·x}; also returns ‖Im‖/‖Re‖.
pub fn invert_q(grid: &Arc<Grid>, st: &ScatteringTransform, freq: &FrequencyGrid) -> (ScalarField, f64) {
    let f = lattice_synthesis(grid, freq, &st.t_values);
    let re = f.re();
    let im = f.im();
    let nr = re.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ni = im.values.iter().map(|v| v * v).sum::<f64>().sqrt();
    (re, if nr > 0.0 { ni / nr } else { 0.0 })
}

/// Solves (Δ_h − q)z = 0 in Ω with z = γ_b^{1/2} on the boundary nodes; γ = z² there, blended to
/// 1 just outside.
pub fn solve_for_gamma(q_rec: &ScalarField, bdata: &BoundaryGammaData) -> Result<ScalarField> {
    let grid = q_rec.grid.clone();
    if *grid != *bdata.grid {
        return Err(Error::GridMismatch);
    }
    let op = LinearConductivity::schrodinger(&grid, &q_rec.values)?;
    let sigma_b = RealTrace {
        grid: grid.clone(),
        samples: bdata.gamma_b.iter().map(|g| g.sqrt()).collect(),
    };
    let z = op.extend(&sigma_b);
    let dom = grid.domain();
    let mut gamma = vec![1.0; grid.len()];
    for &i in &dom.interior {
        if !(z[i] > 0.0) {
            return Err(Error::SingularOperator(format!(
                "Schrödinger solution is not positive at node {i} ({:.3e})",
                z[i]
            )));
        }
        gamma[i] = z[i] * z[i];
    }
    for (k, &b) in dom.boundary.iter().enumerate() {
        gamma[b] = bdata.gamma_b[k];
    }
    blend_exterior(&grid, &mut gamma, &bdata.gamma_b);
    Ok(ScalarField {
        grid,
        values: gamma,
    })
}

/// Exterior nodes next to a boundary node take 1 + (γ_b − 1)(1 − d/2h)₊ from the
/// nearest boundary node; all other exterior nodes stay at 1.
fn blend_exterior(grid: &Grid, gamma: &mut [f64], gamma_b: &[f64]) {
    let dom = grid.domain();
    let h = grid.spacing.iter().cloned().fold(0.0, f64::max);
    let bpos: Vec<[f64; 3]> = dom.boundary.iter().map(|&b| grid.position(b)).collect();
    for idx in 0..grid.len() {
        if grid.is_active(idx) {
            continue;
        }
        let near_boundary = (0..3).any(|d| {
            [-1, 1]
                .iter()
                .any(|&s| grid.neighbor(idx, d, s).map(|n| grid.role(n) == crate::grid::NodeRole::Boundary).unwrap_or(false))
        });
        if !near_boundary {
            continue;
        }
        let x = grid.position(idx);
        let (k, d) = bpos
            .iter()
            .enumerate()
            .map(|(k, p)| (k, crate::grid::norm(crate::grid::sub(x, *p))))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let w = (1.0 - d / (2.0 * h)).max(0.0);
        gamma[idx] = 1.0 + (gamma_b[k] - 1.0) * w;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GammaRecOptions {
    pub boundary: BoundaryOptions,
    pub xi_max: f64,
    pub s_ladder: Vec<f64>,
    pub path: ScatteringPath,
}

impl Default for GammaRecOptions {
    fn default() -> Self {
        GammaRecOptions {
            boundary: BoundaryOptions::default(),
            xi_max: 8.0,
            s_ladder: vec![1.0],
            path: ScatteringPath::Born,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GammaReconstruction {
    pub boundary: BoundaryGammaData,
    pub scattering: ScatteringTransform,
    pub q_rec: ScalarField,
    /// ‖Im q‖/‖Re q‖ before taking the real part.
    pub imag_ratio: f64,
    pub gamma: ScalarField,
}

/// Runs the five reconstruction steps on the linear DN operator.
pub fn reconstruct_gamma(lam: Arc<LinearConductivity>, opts: &GammaRecOptions) -> Result<GammaReconstruction> {
    let grid = lam.grid.clone();
    let boundary = recover_boundary_gamma(&lam, &opts.boundary)?;
    let sd = conductivity_to_schrodinger(lam, &boundary)?;
    let freq = FrequencyGrid::new(&grid, opts.xi_max);
    let scattering = scattering_transform(&sd, &freq, &opts.s_ladder, opts.path)?;
    let (q_rec, imag_ratio) = invert_q(&grid, &scattering, &freq);
    let gamma = solve_for_gamma(&q_rec, &boundary)?;
    Ok(GammaReconstruction {
        boundary,
        scattering,
        q_rec,
        imag_ratio,
        gamma,
    })
}
