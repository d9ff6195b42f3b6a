//! Orchestration of forward → linearize → recon-gamma → recon-b on a synthetic phantom.
//!
//! A run directory holds:
//! - `config.toml`: the configuration as run
//! - `metrics.json`: metrics (deterministic given config and seed)
//! - `timings.json`: wall-clock seconds per stage, kept apart from the metrics
//! - `run.log`: one line per stage
//! - `fields/*.qdtn`: phantom and reconstructed fields
//!
//! CSV headers written by [`export_plotdata`] and [`write_sweep_csv`]:
//! - slices: `x,y,value` on the z-plane nearest the box center (vectors as |v|)
//! - known-data ladders: `xi_norm,s,value_re,value_im` (`s = inf` is the extrapolated value)
//! - decay ladder: `log_zeta,log_r`
//! - ξ_max sweep: `xi_max,gamma_rel_error,contrast_rel_error`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::b_rec::{
    build_probe_set, definitional_beta, identity_volume_side, reconstruct_b, select_beta_operator, self_test_floor,
    BetaOperatorForm, KnownDataRoute,
};
use crate::cgo::{
    cdot, compute_q, decay_ladder, loglog_slope, make_zeta_pair, solve_r, LadderRow,
};
use crate::config::{GammaSource, RunConfig};
use crate::error::{Error, Result, StageContext};
use crate::forward::{
    quadratic_fluxes, second_order_trace, DtNOperator, EdgeCoefficients, LinearConductivity, QuasilinearSolver,
};
use crate::fourier::{continuous_transform, fourier_forward, fourier_inverse, lattice_synthesis, FrequencyGrid};
use crate::gamma_rec::{
    conductivity_to_schrodinger, reconstruct_gamma, solve_for_gamma, t_born, BoundaryGammaData, GammaRecOptions,
    GammaReconstruction, ScatteringPath,
};
use crate::grid::{boundary_integral, dot, rel_l2, ComplexScalarField, Grid, RealTrace, ScalarField, VectorField};
use crate::io::{read_dump, scalar_dump, vector_dump, write_dump, Dump, FieldKind};
use crate::linearize::extract_g1_g2;
use crate::phantom::{Phantom, Preset};

/// Which stages to run. Later stages pull in what they need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub forward: bool,
    pub linearize: bool,
    pub gamma: bool,
    pub b: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        forward: true,
        linearize: true,
        gamma: true,
        b: true,
    };
    pub const NONE: Stages = Stages {
        forward: false,
        linearize: false,
        gamma: false,
        b: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    AtLeast,
}

/// A named pass/fail check with its measured value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub comparison: Comparison,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Check {
        Check {
            name: name.to_string(),
            value,
            limit,
            comparison: Comparison::AtMost,
            passed: value <= limit,
        }
    }

    pub fn at_least(name: &str, value: f64, limit: f64) -> Check {
        Check {
            name: name.to_string(),
            value,
            limit,
            comparison: Comparison::AtLeast,
            passed: value >= limit,
        }
    }

    pub fn describe(&self) -> String {
        let op = match self.comparison {
            Comparison::AtMost => "<=",
            Comparison::AtLeast => ">=",
        };
        format!(
            "{} {}: {:.4e} {} {:.4e}",
            if self.passed { "ok  " } else { "FAIL" },
            self.name,
            self.value,
            op,
            self.limit
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMetrics {
    pub eps: f64,
    pub newton_iterations: Vec<usize>,
    pub residuals: Vec<f64>,
    pub w2p_proxy: Vec<f64>,
    /// Worst sampled ratio of the remainder derivatives to their bound (0 without a remainder).
    pub remainder_bound_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizeMetrics {
    pub g1_rel_error: Vec<f64>,
    /// Relative to the direct g₂, or to g₁ when the direct g₂ vanishes.
    pub g2_rel_error: Vec<f64>,
    pub fit_residual: Vec<f64>,
    pub condition: f64,
    /// |boundary − volume| / |volume| of the integral identity, per trace and probe (empty if b ≡ 0).
    pub identity_residual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaMetrics {
    pub xi_max: f64,
    pub path: ScatteringPath,
    pub n_frequencies: usize,
    pub boundary_gamma_max_error: f64,
    pub imag_ratio: f64,
    /// ‖q_rec − q‖/‖q‖ (absent for q ≡ 0).
    pub q_rel_error: Option<f64>,
    /// ‖q_rec − P q‖/‖P q‖ against the band-limited truth P q (absent for q ≡ 0).
    pub q_band_rel_error: Option<f64>,
    /// ‖γ_rec − γ‖/‖γ‖ on Ω.
    pub gamma_rel_error: f64,
    /// ‖γ_rec − γ‖/‖γ − 1‖ on Ω (absent for γ ≡ 1).
    pub contrast_rel_error: Option<f64>,
    pub gamma_rel_error_inner: f64,
    pub gamma_max_deviation: f64,
}

/// Known-data ladder of one frequency for the first probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownLadder {
    pub xi: [f64; 3],
    pub s: Vec<f64>,
    pub values: Vec<[f64; 2]>,
    pub extrapolated: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BMetrics {
    pub route: KnownDataRoute,
    pub gamma_source: GammaSource,
    pub xi_max: f64,
    pub operator: BetaOperatorForm,
    pub self_test_mismatch: f64,
    pub self_test_floor: f64,
    /// Per probe, max over ξ of the extrapolation residual relative to max |K|.
    pub extrapolation_residual: Vec<f64>,
    pub ladders: Vec<KnownLadder>,
    pub face_energy: Vec<f64>,
    pub flagged_fraction: f64,
    /// Per probe, ‖β − β_def‖/‖β_def‖ on Ω (absent when b ≡ 0).
    pub beta_rel_error: Vec<Option<f64>>,
    /// ‖b_rec − b‖/‖b‖ on 0.8·Ω (absent when b ≡ 0).
    pub b_rel_error_inner: Option<f64>,
    /// max |b_rec| on 0.8·Ω.
    pub b_max_inner: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgoMetrics {
    pub xi: [f64; 3],
    pub ladder: Vec<LadderRow>,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub grid_n: usize,
    pub preset: Preset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward: Option<ForwardMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linearize: Option<LinearizeMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<BMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cgo: Option<CgoMetrics>,
    pub checks: Vec<Check>,
}

impl Metrics {
    fn new(cfg: &RunConfig) -> Metrics {
        Metrics {
            seed: cfg.seed,
            grid_n: cfg.grid.n,
            preset: cfg.phantom.preset,
            forward: None,
            linearize: None,
            gamma: None,
            b: None,
            cgo: None,
            checks: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Metrics> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<StageTiming>,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }

    fn record(&mut self, stage: &str, start: Instant) {
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Everything a run produces, before anything is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub timings: Timings,
    pub fields: Vec<(String, Dump)>,
    pub log: Vec<String>,
    pub gamma_rec: Option<ScalarField>,
    pub b_rec: Option<VectorField>,
}

/// Random smooth boundary trace scaled to max |f| = 1.
pub fn random_trace(grid: &Arc<Grid>, rng: &mut ChaCha8Rng) -> RealTrace {
    let c: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let f = RealTrace::from_fn(grid, |x| {
        c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[2] + c[4] * x[0] * x[1] + c[5] * (1.3 * x[2]).sin() + c[6] * x[1] * x[1]
    });
    let m = f.max_abs();
    if m > 0.0 {
        f.scale(1.0 / m)
    } else {
        f
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ‖a − b‖/‖b‖ over boundary samples.
pub fn trace_rel_error(a: &RealTrace, b: &RealTrace) -> f64 {
    let d: Vec<f64> = a.samples.iter().zip(&b.samples).map(|(x, y)| x - y).collect();
    l2(&d) / l2(&b.samples)
}

fn interior_mask(grid: &Grid) -> Vec<bool> {
    (0..grid.len()).map(|i| grid.is_interior(i)).collect()
}

fn flatten(v: &VectorField) -> Vec<f64> {
    v.values.iter().flat_map(|a| a.iter().copied()).collect()
}

fn vector_rel_error(a: &VectorField, truth: &VectorField, mask: &[bool]) -> f64 {
    let m: Vec<bool> = mask.iter().flat_map(|&m| [m, m, m]).collect();
    rel_l2(&flatten(a), &flatten(truth), &m)
}

fn vector_max(v: &VectorField, mask: &[bool]) -> f64 {
    v.values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| dot(*a, *a).sqrt())
        .fold(0.0, f64::max)
}

fn masked_norm(v: &[f64], mask: &[bool]) -> f64 {
    v.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x * x).sum::<f64>().sqrt()
}

/// ‖u^{εf} − εu₁ − ε²u₂‖₂ (grid L²) for each ε.
pub fn expansion_errors(solver: &QuasilinearSolver, f: &RealTrace, eps: &[f64]) -> Result<Vec<f64>> {
    let (u1, u2) = solver.expansion_guess(f);
    let vol = solver.lin.grid.cell_volume();
    eps.iter()
        .map(|&e| {
            let r = solver.solve_from(f, e, &u1, &u2)?;
            let s: f64 = r
                .u
                .values
                .iter()
                .zip(&u1)
                .zip(&u2)
                .map(|((u, a), b)| (u - e * a - e * e * b).powi(2))
                .sum();
            Ok((s * vol).sqrt())
        })
        .collect()
}

/// Direct second-order trace γ∂νu₂ + ν·b|∇u₁|² for boundary data f.
pub fn direct_g2(lin: &LinearConductivity, b: &VectorField, f: &RealTrace) -> RealTrace {
    let b_e = EdgeCoefficients::b_only(b);
    let u1 = lin.extend(f);
    let u2 = lin.solve_flux_source(&quadratic_fluxes(&lin.grid, &b_e, &u1));
    second_order_trace(lin, &b_e, &u1, &u2)
}

/// Band-limited part of a real field: its Fourier samples on the lattice |ξ| ≤ ξ_max, resynthesized.
pub fn band_limit(f: &ScalarField, freq: &FrequencyGrid) -> ScalarField {
    let grid = f.grid.clone();
    let ct = continuous_transform(&grid, &f.to_complex().values);
    let t: Vec<Complex64> = (0..freq.len()).map(|i| ct[freq.bin(i)]).collect();
    lattice_synthesis(&grid, freq, &t).re()
}

struct Context<'a> {
    cfg: &'a RunConfig,
    grid: Arc<Grid>,
    phantom: Phantom,
    dn: DtNOperator,
    traces: Vec<RealTrace>,
    interior: Vec<bool>,
    inner: Vec<bool>,
    log: Vec<String>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Context<'a>> {
        cfg.validate()?;
        let grid = cfg.grid.build()?;
        let phantom = Phantom::new(&grid, &cfg.phantom)?;
        let dn = DtNOperator::nonlinear(phantom.coeffs.clone(), cfg.data.eps, cfg.solver.options())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let traces = (0..cfg.data.n_traces).map(|_| random_trace(&grid, &mut rng)).collect();
        Ok(Context {
            cfg,
            interior: interior_mask(&grid),
            inner: grid.subdomain_mask(0.8),
            grid,
            phantom,
            dn,
            traces,
            log: Vec::new(),
        })
    }

    fn note(&mut self, line: String) {
        log::info!("{line}");
        self.log.push(line);
    }

    fn has_b(&self) -> bool {
        self.phantom.b().values.iter().any(|v| v.iter().any(|c| *c != 0.0))
    }

    fn forward(&mut self) -> Result<ForwardMetrics> {
        let solver = self.dn.solver().expect("nonlinear operator").clone();
        let eps = self.cfg.data.eps;
        let mut m = ForwardMetrics {
            eps,
            newton_iterations: Vec::new(),
            residuals: Vec::new(),
            w2p_proxy: Vec::new(),
            remainder_bound_ratio: self.phantom.coeffs.remainder.check_bound(256, self.cfg.seed)?,
        };
        for f in &self.traces {
            let r = solver.solve(f, eps)?;
            m.newton_iterations.push(r.iterations);
            m.residuals.push(r.residual_norm);
            m.w2p_proxy.push(r.w2p_proxy_norm);
        }
        self.note(format!(
            "forward: {} traces at eps {eps}, Newton iterations {:?}, worst residual {:.3e}",
            self.traces.len(),
            m.newton_iterations,
            m.residuals.iter().cloned().fold(0.0, f64::max)
        ));
        Ok(m)
    }

    fn linearize(&mut self) -> Result<LinearizeMetrics> {
        let schedule = self.cfg.eps_schedule()?;
        let lin = self.dn.linear_part().clone();
        let b = self.phantom.b().clone();
        let has_b = self.has_b();
        let probes = if has_b {
            Some(build_probe_set(self.phantom.gamma(), self.cfg.b.cond_cap)?)
        } else {
            None
        };
        let mut m = LinearizeMetrics {
            g1_rel_error: Vec::new(),
            g2_rel_error: Vec::new(),
            fit_residual: Vec::new(),
            condition: 0.0,
            identity_residual: Vec::new(),
        };
        for f in &self.traces {
            let d = extract_g1_g2(&self.dn, f, &schedule)?;
            let g1 = lin.apply(f);
            m.g1_rel_error.push(trace_rel_error(&d.g1, &g1));
            let g2 = direct_g2(&lin, &b, f);
            let e2 = if g2.max_abs() > 0.0 {
                trace_rel_error(&d.g2, &g2)
            } else {
                l2(&d.g2.samples) / l2(&g1.samples)
            };
            m.g2_rel_error.push(e2);
            m.fit_residual.push(d.fit_residual);
            m.condition = m.condition.max(d.condition);
            if let Some(p) = &probes {
                let u1 = ScalarField::new(self.grid.clone(), lin.extend(f))?;
                for (w, wt) in p.probes.iter().zip(&p.traces) {
                    let bd = boundary_integral(&d.g2, wt)?;
                    let vol = identity_volume_side(&b, &u1, w);
                    m.identity_residual.push((bd - vol).abs() / vol.abs());
                }
            }
        }
        let worst = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        self.note(format!(
            "linearize: g1 error {:.3e}, g2 error {:.3e}, identity residual {:.3e}",
            worst(&m.g1_rel_error),
            worst(&m.g2_rel_error),
            worst(&m.identity_residual)
        ));
        Ok(m)
    }

    fn gamma(&mut self, opts: &GammaRecOptions) -> Result<(GammaReconstruction, GammaMetrics)> {
        let rec = reconstruct_gamma(self.dn.linear_part().clone(), opts)?;
        let m = gamma_metrics(self.phantom.gamma(), &rec, opts, &self.interior, &self.inner);
        self.note(format!(
            "recon-gamma: xi_max {}, {} frequencies, gamma error {:.3e}, contrast error {}, imag ratio {:.3e}",
            m.xi_max,
            m.n_frequencies,
            m.gamma_rel_error,
            m.contrast_rel_error.map_or("n/a".into(), |e| format!("{e:.3e}")),
            m.imag_ratio
        ));
        Ok((rec, m))
    }

    fn b(&mut self, gamma_used: &ScalarField) -> Result<(VectorField, Vec<ScalarField>, BMetrics)> {
        let cfg = self.cfg;
        let opts = cfg.b_options();
        let truth_b = self.phantom.b().clone();
        let rec = reconstruct_b(&self.dn, gamma_used, cfg.b.route, Some(&truth_b), &opts)?;
        let freq = FrequencyGrid::new(&self.grid, opts.xi_max);
        let has_b = self.has_b();
        let beta_rel_error = rec
            .betas
            .iter()
            .map(|bf| {
                has_b.then(|| {
                    let w = &rec.probes.probes[bf.w_id];
                    let truth = definitional_beta(self.phantom.gamma(), &truth_b, w);
                    rel_l2(&bf.beta.values, &truth.values, &self.interior)
                })
            })
            .collect();
        let extrapolation_residual = rec
            .known
            .iter()
            .map(|k| {
                let scale = k.k_values.iter().map(|v| v.norm()).fold(0.0, f64::max);
                let worst = k.extrapolation_residual.iter().cloned().fold(0.0, f64::max);
                if scale > 0.0 {
                    worst / scale
                } else {
                    0.0
                }
            })
            .collect();
        let ladders = rec.known.first().map_or(Vec::new(), |k| known_ladders(&freq, k));
        let b_rec = rec.recovery.b.clone();
        let m = BMetrics {
            route: cfg.b.route,
            gamma_source: cfg.b.gamma_source,
            xi_max: opts.xi_max,
            operator: rec.operator,
            self_test_mismatch: rec.self_test_mismatch,
            self_test_floor: self_test_floor(&self.grid, &freq),
            extrapolation_residual,
            ladders,
            face_energy: rec.betas.iter().map(|b| b.face_energy).collect(),
            flagged_fraction: rec.recovery.flagged_fraction,
            beta_rel_error,
            b_rel_error_inner: has_b.then(|| vector_rel_error(&b_rec, &truth_b, &self.inner)),
            b_max_inner: vector_max(&b_rec, &self.inner),
        };
        self.note(format!(
            "recon-b: route {:?}, gamma {:?}, operator {:?}, b error on 0.8 Omega {}, max |b_rec| {:.3e}",
            m.route,
            m.gamma_source,
            m.operator,
            m.b_rel_error_inner.map_or("n/a".into(), |e| format!("{e:.3e}")),
            m.b_max_inner
        ));
        let betas = rec.betas.into_iter().map(|b| b.beta).collect();
        Ok((b_rec, betas, m))
    }
}

fn gamma_metrics(
    truth: &ScalarField,
    rec: &GammaReconstruction,
    opts: &GammaRecOptions,
    interior: &[bool],
    inner: &[bool],
) -> GammaMetrics {
    let grid = truth.grid.clone();
    let freq = FrequencyGrid::new(&grid, opts.xi_max);
    let dom = grid.domain();
    let boundary_gamma_max_error = dom
        .boundary
        .iter()
        .zip(&rec.boundary.gamma_b)
        .map(|(&i, g)| (g - truth.values[i]).abs() / truth.values[i])
        .fold(0.0, f64::max);
    let q = compute_q(truth);
    let has_q = masked_norm(&q.values, interior) > 0.0;
    let qb = band_limit(&q, &freq);
    let contrast: Vec<f64> = truth.values.iter().map(|v| v - 1.0).collect();
    let cn = masked_norm(&contrast, interior);
    let diff: Vec<f64> = rec.gamma.values.iter().zip(&truth.values).map(|(a, b)| a - b).collect();
    GammaMetrics {
        xi_max: opts.xi_max,
        path: opts.path,
        n_frequencies: freq.len(),
        boundary_gamma_max_error,
        imag_ratio: rec.imag_ratio,
        q_rel_error: has_q.then(|| rel_l2(&rec.q_rec.values, &q.values, interior)),
        q_band_rel_error: has_q.then(|| rel_l2(&rec.q_rec.values, &qb.values, interior)),
        gamma_rel_error: rel_l2(&rec.gamma.values, &truth.values, interior),
        contrast_rel_error: (cn > 0.0).then(|| masked_norm(&diff, interior) / cn),
        gamma_rel_error_inner: rel_l2(&rec.gamma.values, &truth.values, inner),
        gamma_max_deviation: diff
            .iter()
            .zip(interior)
            .filter(|(_, &m)| m)
            .map(|(d, _)| d.abs())
            .fold(0.0, f64::max),
    }
}

/// Ladders at four frequencies spread over |ξ| (smallest, two intermediate, largest).
fn known_ladders(freq: &FrequencyGrid, k: &crate::b_rec::KnownFourierData) -> Vec<KnownLadder> {
    let mut reps: Vec<usize> = (0..freq.len())
        .filter(|&i| freq.is_representative(i) && !k.ladder_values[i].is_empty())
        .collect();
    if reps.is_empty() {
        return Vec::new();
    }
    let norm = |i: usize| dot(freq.xi_points[i], freq.xi_points[i]);
    reps.sort_by(|&a, &b| norm(a).total_cmp(&norm(b)).then(a.cmp(&b)));
    let last = reps.len() - 1;
    let mut picks: Vec<usize> = [0, last / 3, 2 * last / 3, last].iter().map(|&j| reps[j]).collect();
    picks.dedup();
    picks
        .into_iter()
        .map(|i| KnownLadder {
            xi: freq.xi_points[i],
            s: k.s_ladder_used.clone(),
            values: k.ladder_values[i].iter().map(|v| [v.re, v.im]).collect(),
            extrapolated: [k.k_values[i].re, k.k_values[i].im],
        })
        .collect()
}

/// Runs the selected stages without touching the file system.
pub fn execute(cfg: &RunConfig, stages: Stages) -> Result<RunOutput> {
    let mut timings = Timings::default();
    let t = Instant::now();
    let mut ctx = Context::new(cfg).stage("setup")?;
    timings.record("setup", t);
    let mut metrics = Metrics::new(cfg);
    let mut fields = vec![
        ("gamma_true".to_string(), scalar_dump(ctx.phantom.gamma())),
        ("b_true".to_string(), vector_dump(ctx.phantom.b())),
    ];
    ctx.note(format!(
        "setup: preset {}, grid {}^3, seed {}",
        cfg.phantom.preset.name(),
        cfg.grid.n,
        cfg.seed
    ));

    if stages.forward {
        let t = Instant::now();
        metrics.forward = Some(ctx.forward().stage("forward")?);
        timings.record("forward", t);
    }
    if stages.linearize {
        let t = Instant::now();
        let m = ctx.linearize().stage("linearize")?;
        for (j, e) in m.g1_rel_error.iter().enumerate() {
            metrics.checks.push(Check::at_most(&format!("g1_trace_{j}"), *e, 1e-6));
        }
        for (j, e) in m.g2_rel_error.iter().enumerate() {
            metrics.checks.push(Check::at_most(&format!("g2_trace_{j}"), *e, 1e-5));
        }
        if !m.identity_residual.is_empty() {
            let worst = m.identity_residual.iter().cloned().fold(0.0, f64::max);
            metrics.checks.push(Check::at_most("identity", worst, 0.01));
        }
        metrics.linearize = Some(m);
        timings.record("linearize", t);
    }

    let need_gamma = stages.gamma || (stages.b && cfg.b.gamma_source == GammaSource::Reconstructed);
    let mut gamma_rec = None;
    if need_gamma {
        let t = Instant::now();
        let (rec, m) = ctx.gamma(&cfg.gamma).stage("recon-gamma")?;
        if m.contrast_rel_error.is_some() {
            metrics.checks.push(Check::at_most("gamma_error", m.gamma_rel_error, 0.15));
        } else {
            metrics.checks.push(Check::at_most("gamma_flat_deviation", m.gamma_max_deviation, 1e-3));
        }
        fields.push(("gamma_rec".into(), scalar_dump(&rec.gamma)));
        fields.push(("q_rec".into(), scalar_dump(&rec.q_rec)));
        metrics.gamma = Some(m);
        gamma_rec = Some(rec.gamma);
        timings.record("recon-gamma", t);
    }

    let mut b_rec = None;
    if stages.b {
        let t = Instant::now();
        let gamma_used = match cfg.b.gamma_source {
            GammaSource::Oracle => ctx.phantom.gamma().clone(),
            GammaSource::Reconstructed => gamma_rec.clone().expect("gamma stage ran"),
            GammaSource::File => {
                let path = cfg.b.gamma_file.as_ref().expect("validated config");
                read_dump(path).and_then(|d| d.into_scalar(&ctx.grid)).stage("recon-b")?
            }
        };
        let (b, betas, m) = ctx.b(&gamma_used).stage("recon-b")?;
        match m.b_rel_error_inner {
            Some(e) => {
                let limit = if cfg.b.gamma_source == GammaSource::Oracle { 0.20 } else { 0.35 };
                metrics.checks.push(Check::at_most("b_error_inner", e, limit));
            }
            None => {
                let scale = 1e-3 * cfg.phantom.b_scale.abs().max(1.0);
                metrics.checks.push(Check::at_most("b_vanishes", m.b_max_inner, scale));
            }
        }
        fields.push(("b_rec".into(), vector_dump(&b)));
        for (j, beta) in betas.iter().enumerate() {
            fields.push((format!("beta_{j}"), scalar_dump(beta)));
        }
        metrics.b = Some(m);
        b_rec = Some(b);
        timings.record("recon-b", t);
    }

    Ok(RunOutput {
        metrics,
        timings,
        fields,
        log: ctx.log,
        gamma_rec,
        b_rec,
    })
}

/// Writes a run directory for `out`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    fs::write(dir.join("metrics.json"), out.metrics.to_json()?)?;
    let timings = serde_json::to_string_pretty(&out.timings).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("timings.json"), timings)?;
    let mut log = String::new();
    for line in &out.log {
        let _ = writeln!(log, "{line}");
    }
    for s in &out.timings.stages {
        let _ = writeln!(log, "time {}: {:.2} s", s.stage, s.seconds);
    }
    for c in &out.metrics.checks {
        let _ = writeln!(log, "{}", c.describe());
    }
    fs::write(dir.join("run.log"), log)?;
    if cfg.output.fields {
        let fdir = dir.join("fields");
        fs::create_dir_all(&fdir)?;
        for (name, dump) in &out.fields {
            write_dump(&fdir.join(format!("{name}.qdtn")), dump)?;
        }
    }
    Ok(())
}

/// Full pipeline: runs every stage and writes the run directory `cfg.output.dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Metrics> {
    run_stages(cfg, Stages::ALL)
}

/// Runs the selected stages and writes the run directory.
pub fn run_stages(cfg: &RunConfig, stages: Stages) -> Result<Metrics> {
    let out = execute(cfg, stages)?;
    write_run_dir(&cfg.output.dir, cfg, &out).stage("output")?;
    Ok(out.metrics)
}

/// Deliberate defects injected into [`verify_with`] to exercise its failure path.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Faults {
    /// Adds this multiple of a non-symmetric boundary operator to the DN map under test.
    pub adjointness_defect: f64,
}

/// DN map with an optional non-symmetric perturbation f ↦ Λf + δ·(f shifted by one boundary node).
fn faulty_dn(lin: &LinearConductivity, f: &RealTrace, defect: f64) -> RealTrace {
    let mut g = lin.apply(f);
    if defect != 0.0 {
        let n = f.samples.len();
        let scale = g.max_abs().max(1.0);
        for k in 0..n {
            g.samples[k] += defect * scale * f.samples[(k + 1) % n];
        }
    }
    g
}

/// Runs the invariant suite on the configured phantom. Returns the metrics with every check, or
/// the first failed check as a [`Error::VerificationMismatch`].
pub fn verify(cfg: &RunConfig) -> Result<Metrics> {
    verify_with(cfg, &Faults::default())
}

pub fn verify_with(cfg: &RunConfig, faults: &Faults) -> Result<Metrics> {
    let ctx = Context::new(cfg).stage("setup")?;
    let mut metrics = Metrics::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let push = |metrics: &mut Metrics, c: Check| -> Result<()> {
        log::info!("{}", c.describe());
        let failed = !c.passed;
        let msg = c.describe();
        metrics.checks.push(c);
        if failed {
            return Err(Error::VerificationMismatch(msg));
        }
        Ok(())
    };
    let grid = ctx.grid.clone();
    let gamma = ctx.phantom.gamma().clone();
    let lin = ctx.dn.linear_part().clone();

    // ζ-pair algebra.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let xi = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)];
        if dot(xi, xi) < 1e-6 {
            continue;
        }
        let s = rng.gen_range(0.01..100.0);
        let p = make_zeta_pair(xi, s).stage("verify")?;
        let scale = 1.0 + p.r_param * p.r_param;
        let mut d = cdot(&p.zeta1, &p.zeta1).norm().max(cdot(&p.zeta2, &p.zeta2).norm());
        for k in 0..3 {
            d = d.max((p.zeta1[k] + p.zeta2[k] + Complex64::new(0.0, xi[k])).norm());
        }
        d = d.max((p.r_param * p.r_param - 0.25 * dot(xi, xi) - s * s).abs());
        worst = worst.max(d / scale);
    }
    push(&mut metrics, Check::at_most("zeta_algebra", worst, 1e-12))?;

    // Fourier round trip.
    let field = ComplexScalarField::from_fn(&grid, |x| {
        Complex64::new((x[0] * 1.7).sin() + x[1] * x[2], (0.3 * x[2]).cos() - x[0])
    });
    let back = fourier_inverse(&fourier_forward(&field));
    let num: f64 = back.values.iter().zip(&field.values).map(|(a, b)| (a - b).norm_sqr()).sum();
    let den: f64 = field.values.iter().map(|a| a.norm_sqr()).sum();
    push(&mut metrics, Check::at_most("fourier_round_trip", (num / den).sqrt(), 1e-12))?;

    // Green identities of the DN map: symmetry and ⟨Λf, f⟩ = discrete energy.
    let f = random_trace(&grid, &mut rng);
    let g = random_trace(&grid, &mut rng);
    let fg = boundary_integral(&faulty_dn(&lin, &f, faults.adjointness_defect), &g)?;
    let gf = boundary_integral(&faulty_dn(&lin, &g, faults.adjointness_defect), &f)?;
    let ff = boundary_integral(&faulty_dn(&lin, &f, faults.adjointness_defect), &f)?;
    let energy = lin.energy(&lin.extend(&f));
    let green = ((fg - gf).abs() / fg.abs().max(gf.abs()).max(1e-300)).max((ff - energy).abs() / energy);
    push(&mut metrics, Check::at_most("green_identity", green, 1e-10))?;

    // Expansion order of the forward problem.
    let solver = ctx.dn.solver().expect("nonlinear operator").clone();
    let f = &ctx.traces[0];
    if ctx.has_b() || !ctx.phantom.coeffs.remainder.is_zero() {
        let eps = [0.1, 0.0464, 0.0215, 0.01];
        let errs = expansion_errors(&solver, f, &eps).stage("forward")?;
        push(&mut metrics, Check::at_least("expansion_order", loglog_slope(&eps, &errs), 2.7))?;
    } else {
        let errs = expansion_errors(&solver, f, &[0.1]).stage("forward")?;
        let u1 = lin.extend(f);
        let scale = 0.1 * (u1.iter().map(|v| v * v).sum::<f64>() * grid.cell_volume()).sqrt();
        push(&mut metrics, Check::at_most("linear_scaling", errs[0] / scale, 1e-9))?;
    }

    // Linearization against direct solves.
    let schedule = cfg.eps_schedule()?;
    let b = ctx.phantom.b().clone();
    let probes = build_probe_set(&gamma, cfg.b.cond_cap).stage("verify")?;
    let (mut e1, mut e2, mut ident): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for f in &ctx.traces {
        let d = extract_g1_g2(&ctx.dn, f, &schedule).stage("linearize")?;
        let g1 = lin.apply(f);
        e1 = e1.max(trace_rel_error(&d.g1, &g1));
        let g2 = direct_g2(&lin, &b, f);
        e2 = e2.max(if g2.max_abs() > 0.0 {
            trace_rel_error(&d.g2, &g2)
        } else {
            l2(&d.g2.samples) / l2(&g1.samples)
        });
        if ctx.has_b() {
            let u1 = ScalarField::new(grid.clone(), lin.extend(f))?;
            for (w, wt) in probes.probes.iter().zip(&probes.traces) {
                let bd = boundary_integral(&d.g2, wt)?;
                let vol = identity_volume_side(&b, &u1, w);
                ident = ident.max((bd - vol).abs() / vol.abs());
            }
        }
    }
    push(&mut metrics, Check::at_most("g1_extraction", e1, 1e-6))?;
    push(&mut metrics, Check::at_most("g2_extraction", e2, 1e-5))?;
    if ctx.has_b() {
        push(&mut metrics, Check::at_most("integral_identity", ident, 0.01))?;
    }

    // CGO: residual and decay, or r ≡ 0 and t ≡ 0 when q ≡ 0.
    let q = compute_q(&gamma);
    let q_zero = q.values.iter().all(|v| v.abs() <= 1e-12);
    if q_zero {
        let p = make_zeta_pair([1.0, 0.5, 0.0], 20.0).stage("cgo")?;
        let r = solve_r(&q, &p.zeta1).stage("cgo")?;
        let rmax = r.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        push(&mut metrics, Check::at_most("r_vanishes", rmax, 1e-12))?;
        let sd = conductivity_to_schrodinger(lin.clone(), &BoundaryGammaData::from_truth(&gamma)).stage("cgo")?;
        let mut tmax: f64 = 0.0;
        for xi in [[1.0, 0.0, 0.0], [0.5, -1.0, 2.0], [3.0, 1.0, -1.0]] {
            let p = make_zeta_pair(xi, 1.0).stage("cgo")?;
            tmax = tmax.max(t_born(&sd, xi, &p.zeta1).norm());
        }
        push(&mut metrics, Check::at_most("t_vanishes", tmax, 1e-10))?;
    } else {
        let xi = [2.0, -1.0, 1.0];
        let rows = decay_ladder(&gamma, xi, &[10.0, 20.0, 40.0, 80.0]).stage("cgo")?;
        let x: Vec<f64> = rows.iter().map(|r| r.zeta_norm).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.r_norm).collect();
        let slope = loglog_slope(&x, &y);
        let res = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
        metrics.cgo = Some(CgoMetrics { xi, ladder: rows, slope });
        push(&mut metrics, Check::at_most("cgo_residual", res, 1e-6))?;
        push(&mut metrics, Check::at_most("decay_slope", slope, -0.7))?;
    }

    // γ round trip through q with exact boundary data.
    let g_back = solve_for_gamma(&q, &BoundaryGammaData::from_truth(&gamma)).stage("recon-gamma")?;
    push(
        &mut metrics,
        Check::at_most("gamma_round_trip", rel_l2(&g_back.values, &gamma.values, &ctx.interior), 0.01),
    )?;

    // β operator self-test.
    let freq = FrequencyGrid::new(&grid, cfg.b.xi_max);
    let floor = self_test_floor(&grid, &freq);
    let (_, mismatch) = select_beta_operator(&gamma, &freq, cfg.b.self_test_tol).stage("recon-b")?;
    push(
        &mut metrics,
        Check::at_most("beta_operator_self_test", mismatch - floor, cfg.b.self_test_tol),
    )?;

    // Field dump round trip.
    let dump = vector_dump(&b);
    let back = Dump::decode(&dump.encode())?;
    let same = back == dump && back.kind == FieldKind::Vector3;
    push(&mut metrics, Check::at_most("dump_round_trip", if same { 0.0 } else { 1.0 }, 0.0))?;

    Ok(metrics)
}

/// One row of an error-vs-ξ_max sweep of the γ reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub xi_max: f64,
    pub gamma_rel_error: f64,
    pub contrast_rel_error: Option<f64>,
}

/// Reconstructs γ at each ξ_max and reports the errors.
pub fn xi_max_sweep(cfg: &RunConfig, xi_values: &[f64]) -> Result<Vec<SweepRow>> {
    let ctx = Context::new(cfg).stage("setup")?;
    xi_values
        .iter()
        .map(|&xi_max| {
            let opts = GammaRecOptions {
                xi_max,
                ..cfg.gamma.clone()
            };
            let rec = reconstruct_gamma(ctx.dn.linear_part().clone(), &opts).stage("recon-gamma")?;
            let m = gamma_metrics(ctx.phantom.gamma(), &rec, &opts, &ctx.interior, &ctx.inner);
            Ok(SweepRow {
                xi_max,
                gamma_rel_error: m.gamma_rel_error,
                contrast_rel_error: m.contrast_rel_error,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut s = String::from("xi_max,gamma_rel_error,contrast_rel_error\n");
    for r in rows {
        let c = r.contrast_rel_error.map_or(String::new(), |v| format!("{v:.10e}"));
        let _ = writeln!(s, "{},{:.10e},{}", r.xi_max, r.gamma_rel_error, c);
    }
    fs::write(path, s)?;
    Ok(())
}

/// z-plane of a dump nearest the box center as `x,y,value` rows.
pub fn slice_csv(dump: &Dump) -> String {
    let [nx, ny, nz] = dump.dims.map(|d| d as usize);
    let step = |d: usize, n: usize| if n > 1 { (dump.hi[d] - dump.lo[d]) / (n - 1) as f64 } else { 0.0 };
    let (hx, hy, hz) = (step(0, nx), step(1, ny), step(2, nz));
    let zc = 0.5 * (dump.lo[2] + dump.hi[2]);
    let k = if hz > 0.0 {
        (((zc - dump.lo[2]) / hz).round() as usize).min(nz - 1)
    } else {
        0
    };
    let width = match dump.kind {
        FieldKind::Real => 1,
        FieldKind::Complex => 2,
        FieldKind::Vector3 => 3,
    };
    let mut s = String::from("x,y,value\n");
    for j in 0..ny {
        for i in 0..nx {
            let idx = (k * ny + j) * nx + i;
            let v = &dump.data[width * idx..width * (idx + 1)];
            let value = match dump.kind {
                FieldKind::Real => v[0],
                _ => v.iter().map(|c| c * c).sum::<f64>().sqrt(),
            };
            let _ = writeln!(s, "{},{},{:.10e}", dump.lo[0] + i as f64 * hx, dump.lo[1] + j as f64 * hy, value);
        }
    }
    s
}

pub fn decay_csv(rows: &[LadderRow]) -> String {
    let mut s = String::from("log_zeta,log_r\n");
    for r in rows {
        let _ = writeln!(s, "{:.10e},{:.10e}", r.zeta_norm.ln(), r.r_norm.ln());
    }
    s
}

pub fn ladder_csv(ladders: &[KnownLadder]) -> String {
    let mut s = String::from("xi_norm,s,value_re,value_im\n");
    for l in ladders {
        let xn = dot(l.xi, l.xi).sqrt();
        for (sv, v) in l.s.iter().zip(&l.values) {
            let _ = writeln!(s, "{xn:.10e},{sv},{:.10e},{:.10e}", v[0], v[1]);
        }
        let _ = writeln!(s, "{xn:.10e},inf,{:.10e},{:.10e}", l.extrapolated[0], l.extrapolated[1]);
    }
    s
}

/// Writes plot data for a run directory: slices of every field dump, the known-data ladders and
/// the CGO decay ladder when present. Returns the files written.
pub fn export_plotdata(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics = Metrics::from_json(&fs::read_to_string(run_dir.join("metrics.json"))?)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    let fdir = run_dir.join("fields");
    if fdir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&fdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "qdtn"))
            .collect();
        entries.sort();
        for p in entries {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            emit(format!("{stem}_slice.csv"), slice_csv(&read_dump(&p)?))?;
        }
    }
    if let Some(b) = &metrics.b {
        emit("known_ladder.csv".into(), ladder_csv(&b.ladders))?;
    }
    if let Some(c) = &metrics.cgo {
        emit("decay_ladder.csv".into(), decay_csv(&c.ladder))?;
    }
    Ok(written)
}

/// CGO decay ladder for the phantom's γ at one ξ.
pub fn cgo_ladder(cfg: &RunConfig, xi: [f64; 3], zeta_norms: &[f64]) -> Result<CgoMetrics> {
    let grid = cfg.grid.build().stage("setup")?;
    let phantom = Phantom::new(&grid, &cfg.phantom).stage("setup")?;
    let ladder = decay_ladder(phantom.gamma(), xi, zeta_norms).stage("cgo")?;
    let x: Vec<f64> = ladder.iter().map(|r| r.zeta_norm).collect();
    let y: Vec<f64> = ladder.iter().map(|r| r.r_norm).collect();
    let slope = if y.iter().all(|v| *v > 0.0) { loglog_slope(&x, &y) } else { f64::NEG_INFINITY };
    Ok(CgoMetrics { xi, ladder, slope })
}
