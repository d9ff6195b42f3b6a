//! Extraction of the first and second linearizations of a nonlinear Dirichlet-to-Neumann map
//! from evaluations at several small amplitudes.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::forward::DtNOperator;
use crate::grid::{ComplexTrace, RealTrace};

/// Decreasing list of positive amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSchedule {
    values: Vec<f64>,
}

impl EpsilonSchedule {
    pub fn new(values: Vec<f64>) -> Result<EpsilonSchedule> {
        if values.len() < 3 {
            return Err(Error::InvalidArgument("an epsilon schedule needs at least three values".into()));
        }
        if values.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument("epsilon values must be positive".into()));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("epsilon values must be strictly decreasing".into()));
        }
        if values[0] / values[values.len() - 1] > 1e3 {
            return Err(Error::InvalidArgument("epsilon schedule spans more than three decades".into()));
        }
        Ok(EpsilonSchedule { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values[0]
    }
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            values: vec![0.02, 0.014, 0.01, 0.007, 0.005],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Largest accepted condition number of the scaled fit matrices.
    pub cond_cap: f64,
    /// Largest accepted fit residual relative to max|Λ(ε_max f)|.
    pub residual_cap: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            cond_cap: 1e8,
            residual_cap: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearizedData {
    pub f: RealTrace,
    /// First linearization Λγ f.
    pub g1: RealTrace,
    /// Second linearization, the coefficient of ε².
    pub g2: RealTrace,
    /// Largest nodal fit residual relative to the data scale.
    pub fit_residual: f64,
    pub condition: f64,
}

/// Least-squares fit of samples y_k ≈ Σ_j c_j t_k^{p_j} shared by every boundary node.
struct PowerFit {
    pinv: DMatrix<f64>,
    design: DMatrix<f64>,
    cond: f64,
}

impl PowerFit {
    fn new(t: &[f64], powers: &[i32]) -> PowerFit {
        let design = DMatrix::from_fn(t.len(), powers.len(), |k, j| t[k].powi(powers[j]));
        let svd = design.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let pinv = svd.pseudo_inverse(0.0).expect("singular vectors were computed");
        PowerFit {
            pinv,
            design,
            cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        }
    }

    /// Coefficients and the largest residual for one node.
    fn solve(&self, y: &[f64]) -> (DVector<f64>, f64) {
        let y = DVector::from_column_slice(y);
        let c = &self.pinv * &y;
        let r = (&self.design * &c - y).amax();
        (c, r)
    }
}

/// Fits Λ(±ε f) at every scheduled ε: the odd part (Λ(εf) − Λ(−εf))/2 to ε, ε³ and the even part
/// to ε², ε⁴. Returns (g1, g2, relative residual, condition number).
pub fn fit_expansion(
    eps: &[f64],
    plus: &[RealTrace],
    minus: &[RealTrace],
    options: FitOptions,
) -> Result<(RealTrace, RealTrace, f64, f64)> {
    let m = eps.len();
    if plus.len() != m || minus.len() != m || m < 2 {
        return Err(Error::InvalidArgument("fit needs one evaluation per epsilon".into()));
    }
    let emax = eps.iter().fold(0.0f64, |a, &e| a.max(e));
    let t: Vec<f64> = eps.iter().map(|e| e / emax).collect();
    let odd = PowerFit::new(&t, &[1, 3]);
    let even = PowerFit::new(&t, &[2, 4]);
    let cond = odd.cond.max(even.cond);
    if !(cond <= options.cond_cap) {
        return Err(Error::IllConditionedFit {
            cond,
            cap: options.cond_cap,
        });
    }
    let grid = plus[0].grid.clone();
    let nb = plus[0].len();
    let scale = plus
        .iter()
        .chain(minus)
        .map(|p| p.max_abs())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let mut g1 = vec![0.0; nb];
    let mut g2 = vec![0.0; nb];
    let mut worst: f64 = 0.0;
    let mut yo = vec![0.0; m];
    let mut ye = vec![0.0; m];
    for b in 0..nb {
        for k in 0..m {
            yo[k] = 0.5 * (plus[k].samples[b] - minus[k].samples[b]);
            ye[k] = 0.5 * (plus[k].samples[b] + minus[k].samples[b]);
        }
        let (co, ro) = odd.solve(&yo);
        let (ce, re) = even.solve(&ye);
        g1[b] = co[0] / emax;
        g2[b] = ce[0] / (emax * emax);
        worst = worst.max(ro).max(re);
    }
    let rel = worst / scale;
    Ok((
        RealTrace { grid: grid.clone(), samples: g1 },
        RealTrace { grid, samples: g2 },
        rel,
        cond,
    ))
}

/// Extracts (Λγ f, second linearization at f) from nonlinear evaluations along the schedule.
pub fn extract_g1_g2(dn: &DtNOperator, f: &RealTrace, schedule: &EpsilonSchedule) -> Result<LinearizedData> {
    extract_with(dn, f, schedule, FitOptions::default())
}

pub fn extract_with(
    dn: &DtNOperator,
    f: &RealTrace,
    schedule: &EpsilonSchedule,
    options: FitOptions,
) -> Result<LinearizedData> {
    let c = f.max_abs();
    if c == 0.0 {
        return Ok(LinearizedData {
            f: f.clone(),
            g1: RealTrace::zeros(&f.grid),
            g2: RealTrace::zeros(&f.grid),
            fit_residual: 0.0,
            condition: 1.0,
        });
    }
    let fn_ = f.scale(1.0 / c);
    let eps = schedule.values();
    let mut signed = Vec::with_capacity(2 * eps.len());
    for &e in eps {
        signed.push(e);
        signed.push(-e);
    }
    let evals = dn.dn_sweep(&fn_, &signed)?;
    let plus: Vec<RealTrace> = evals.iter().step_by(2).cloned().collect();
    let minus: Vec<RealTrace> = evals.iter().skip(1).step_by(2).cloned().collect();
    let (g1, g2, fit_residual, condition) = fit_expansion(eps, &plus, &minus, options)?;
    if fit_residual > options.residual_cap {
        return Err(Error::VerificationMismatch(format!(
            "epsilon fit residual {fit_residual:.3e} exceeds {:.3e}",
            options.residual_cap
        )));
    }
    Ok(LinearizedData {
        f: f.clone(),
        g1: g1.scale(c),
        g2: g2.scale(c * c),
        fit_residual,
        condition,
    })
}

/// Second linearization difference g2(f + g) − g2(f − g), which equals four times the
/// symmetric bilinear form at (f, g).
pub fn polarized_g2(dn: &DtNOperator, f: &RealTrace, g: &RealTrace, schedule: &EpsilonSchedule) -> Result<RealTrace> {
    let p = extract_g1_g2(dn, &f.axpy(1.0, g), schedule)?;
    let m = extract_g1_g2(dn, &f.axpy(-1.0, g), schedule)?;
    Ok(p.g2.axpy(-1.0, &m.g2))
}

/// Symmetric bilinear form B(f, g) of the second linearization, with both arguments rescaled to
/// unit size before polarizing.
pub fn bilinear_g2(dn: &DtNOperator, f: &RealTrace, g: &RealTrace, schedule: &EpsilonSchedule) -> Result<RealTrace> {
    let (cf, cg) = (f.max_abs(), g.max_abs());
    if cf == 0.0 || cg == 0.0 {
        return Ok(RealTrace::zeros(&f.grid));
    }
    let pol = polarized_g2(dn, &f.scale(1.0 / cf), &g.scale(1.0 / cg), schedule)?;
    Ok(pol.scale(0.25 * cf * cg))
}

/// Complex extension of [`bilinear_g2`], bilinear in both arguments (no conjugation).
pub fn complex_bilinear_g2(
    dn: &DtNOperator,
    f: &ComplexTrace,
    g: &ComplexTrace,
    schedule: &EpsilonSchedule,
) -> Result<ComplexTrace> {
    let (fr, fi) = (f.re(), f.im());
    let (gr, gi) = (g.re(), g.im());
    let rr = bilinear_g2(dn, &fr, &gr, schedule)?;
    let ii = bilinear_g2(dn, &fi, &gi, schedule)?;
    let ri = bilinear_g2(dn, &fr, &gi, schedule)?;
    let ir = bilinear_g2(dn, &fi, &gr, schedule)?;
    let samples = (0..rr.len())
        .map(|k| Complex64::new(rr.samples[k] - ii.samples[k], ri.samples[k] + ir.samples[k]))
        .collect();
    Ok(ComplexTrace {
        grid: f.grid.clone(),
        samples,
    })
}
