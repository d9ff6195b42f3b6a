use std::sync::Arc;

use num_complex::Complex64;
use qdtn::cgo::compute_q;
use qdtn::forward::LinearConductivity;
use qdtn::fourier::{continuous_transform, FrequencyGrid};
use qdtn::gamma_rec::*;
use qdtn::grid::{rel_l2, Grid, RealTrace, ScalarField};
use qdtn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bump(x: [f64; 3], c: [f64; 3], r: f64) -> f64 {
    let t2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)) / (r * r);
    if t2 < 1.0 {
        (1.0 - t2).powi(4)
    } else {
        0.0
    }
}

fn phantom(grid: &Arc<Grid>, a: f64) -> ScalarField {
    ScalarField::from_fn(grid, |x| 1.0 + a * bump(x, [0.12, -0.08, 0.05], 0.5))
}

/// Σ_Ω q e^{−iξ·x} h³ by direct summation.
fn qhat(q: &ScalarField, xi: [f64; 3]) -> Complex64 {
    let g = &q.grid;
    let vol = g.cell_volume();
    g.domain()
        .interior
        .iter()
        .map(|&i| {
            let x = g.position(i);
            Complex64::from_polar(q.values[i] * vol, -(x[0] * xi[0] + x[1] * xi[1] + x[2] * xi[2]))
        })
        .sum()
}

fn interior_mask(grid: &Grid) -> Vec<bool> {
    (0..grid.len()).map(|i| grid.is_interior(i)).collect()
}

fn rel_vec(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

#[test]
fn schrodinger_map_matches_direct_solve() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = phantom(&grid, 0.2);
    let lam = Arc::new(LinearConductivity::new(&gamma).unwrap());
    let sd = conductivity_to_schrodinger(lam, &BoundaryGammaData::from_truth(&gamma)).unwrap();
    let direct = LinearConductivity::schrodinger(&grid, &compute_q(&gamma).values).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = RealTrace::from_fn(&grid, |x| {
            c[0] + c[1] * x[0] + c[2] * x[1] * x[2] + c[3] * (2.0 * x[2]).sin() + c[4] * x[0] * x[0] + c[5] * (x[1] - x[0]).cos()
        });
        let a = sd.apply(&g);
        let b = direct.apply(&g);
        worst = worst.max(a.axpy(-1.0, &b).max_abs() / b.max_abs().max(g.max_abs()));
    }
    assert!(worst <= 1e-4, "mismatch {worst:.3e}");
}

#[test]
fn constant_conductivity_gives_free_map() {
    let grid = Grid::default_ball(16).unwrap();
    let dom = grid.domain();
    for c in [1.0, 2.5] {
        let gamma = ScalarField::constant(&grid, c);
        let lam = Arc::new(LinearConductivity::new(&gamma).unwrap());
        let sd = conductivity_to_schrodinger(lam, &BoundaryGammaData::from_truth(&gamma)).unwrap();
        assert!(sd.kappa.iter().all(|k| *k == 0.0));
        let g = RealTrace::from_fn(&grid, |x| x[0]);
        let a = sd.apply(&g);
        let b = sd.apply_zero(&g);
        assert!(a.axpy(-1.0, &b).max_abs() <= 1e-10);
        // Free map on x₁ is the discrete co-normal.
        for k in 0..dom.boundary.len() {
            let nu1 = dom.flux_normals[k][0] / dom.areas[k];
            assert!((b.samples[k] - nu1).abs() <= 1e-8);
        }
    }
}

#[test]
fn zero_potential_gives_zero_transform() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = ScalarField::constant(&grid, 1.7);
    let lam = Arc::new(LinearConductivity::new(&gamma).unwrap());
    let sd = conductivity_to_schrodinger(lam, &BoundaryGammaData::from_truth(&gamma)).unwrap();
    let freq = FrequencyGrid::new(&grid, 6.0);
    let st = scattering_transform(&sd, &freq, &[1.0, 2.0], ScatteringPath::Born).unwrap();
    assert!(st.t_values.iter().all(|t| t.norm() <= 1e-9));
    let xi = freq.xi_points[3];
    let z = discrete_harmonic_zeta(step3_zeta(xi, 2.0), xi, grid.spacing[0]).unwrap();
    let (t, _) = t_exact(&sd, xi, &z, &LayerOptions::default()).unwrap();
    assert!(t.norm() <= 1e-9);
    let (q, _) = invert_q(&grid, &st, &freq);
    assert!(q.values.iter().all(|v| v.abs() <= 1e-9));
}

#[test]
fn born_transform_approximates_fourier_transform() {
    let grid = Grid::default_ball(32).unwrap();
    let freq = FrequencyGrid::new(&grid, 8.0);
    let mut ts = Vec::new();
    for a in [0.05, 0.1] {
        let gamma = phantom(&grid, a);
        let lam = Arc::new(LinearConductivity::new(&gamma).unwrap());
        let sd = conductivity_to_schrodinger(lam, &BoundaryGammaData::from_truth(&gamma)).unwrap();
        let st = scattering_transform(&sd, &freq, &[1.0], ScatteringPath::Born).unwrap();
        let q = compute_q(&gamma);
        let oracle: Vec<Complex64> = freq.xi_points.iter().map(|&xi| qhat(&q, xi)).collect();
        let err = rel_vec(&st.t_values, &oracle);
        if a == 0.05 {
            assert!(err <= 0.15, "Born error {err:.3e}");
        }
        for i in 0..freq.len() {
            let j = freq.negate_index(i);
            if i == j {
                continue;
            }
            assert!((st.t_values[j] - st.t_values[i].conj()).norm() <= 1e-12 * st.t_values[i].norm().max(1e-12));
        }
        let (_, imag) = invert_q(&grid, &st, &freq);
        assert!(imag <= 0.1);
        ts.push(st.t_values);
    }
    let doubled: Vec<Complex64> = ts[0].iter().map(|v| v * 2.0).collect();
    let nonlin = rel_vec(&ts[1], &doubled);
    assert!(nonlin <= 0.1, "relative nonlinearity {nonlin:.3e}");
}

#[test]
fn exact_path_satisfies_green_identity_and_tracks_born() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = phantom(&grid, 0.05);
    let lam = Arc::new(LinearConductivity::new(&gamma).unwrap());
    let sd = conductivity_to_schrodinger(lam, &BoundaryGammaData::from_truth(&gamma)).unwrap();
    let q = compute_q(&gamma);
    let qop = LinearConductivity::schrodinger(&grid, &q.values).unwrap();
    let h = grid.spacing[0];
    let xi = [2.0 * std::f64::consts::PI / 3.0, 4.0 * std::f64::consts::PI / 3.0, 0.0];
    let target = qhat(&q, xi);
    let mut errs = Vec::new();
    for s in [1.0, 6.0] {
        let z = discrete_harmonic_zeta(step3_zeta(xi, s), xi, h).unwrap();
        let (t, psi) = t_exact(&sd, xi, &z, &LayerOptions::default()).unwrap();
        // Σ_Ω q e^{−ix·(ζ+ξ)} Ψ h³ with Ψ the Schrödinger extension of ψ.
        let re = qop.extend(&psi.re());
        let im = qop.extend(&psi.im());
        let mut vol = Complex64::default();
        for &i in &grid.domain().interior {
            let x = grid.position(i);
            let ph: Complex64 = (0..3).map(|d| (z[d] + xi[d]) * x[d]).sum();
            vol += q.values[i] * (-Complex64::i() * ph).exp() * Complex64::new(re[i], im[i]) * grid.cell_volume();
        }
        assert!((t - vol).norm() <= 1e-8 * t.norm(), "identity {t} vs {vol}");
        let born = t_born(&sd, xi, &z);
        assert!((t - born).norm() <= 0.15 * born.norm(), "exact {t} born {born}");
        errs.push((t - target).norm());
    }
    assert!(errs[1] < errs[0]);
}

#[test]
fn harmonic_frequencies_satisfy_lattice_constraints() {
    let h = 0.1;
    for (xi, s) in [([1.0, -2.0, 0.5], 1.0), ([0.0, 0.0, 0.0], 3.0), ([4.0, 0.0, 0.0], 6.0)] {
        let z = discrete_harmonic_zeta(step3_zeta(xi, s), xi, h).unwrap();
        let f1: Complex64 = (0..3).map(|j| (z[j] * h).cos()).sum::<Complex64>() - 3.0;
        let f2: Complex64 = (0..3).map(|j| ((z[j] + xi[j]) * h).cos()).sum::<Complex64>() - 3.0;
        assert!(f1.norm() <= 1e-12 && f2.norm() <= 1e-12);
        let z0 = step3_zeta(xi, s);
        let shift: f64 = (0..3).map(|j| (z[j] - z0[j]).norm_sqr()).sum::<f64>().sqrt();
        assert!(shift <= 0.05 * (1.0 + s));
    }
}

#[test]
fn lattice_green_function_inverts_laplacian() {
    let grid = Grid::default_ball(16).unwrap();
    let h = grid.spacing[0];
    let xi = [1.0, 0.5, 0.0];
    let z = discrete_harmonic_zeta(step3_zeta(xi, 2.0), xi, h).unwrap();
    let g = LatticeGreen::new(&grid, &z);
    for n in [[0i64, 0, 0], [1, 0, 0], [2, -3, 1], [-5, 4, 2]] {
        let mut lap = -6.0 * g.at(n);
        for d in 0..3 {
            for s in [-1, 1] {
                let mut m = n;
                m[d] += s;
                lap += g.at(m);
            }
        }
        lap /= h * h;
        let expect = if n == [0, 0, 0] { 1.0 / h.powi(3) } else { 0.0 };
        assert!((lap - expect).norm() <= 1e-8 / h.powi(3), "offset {n:?}: {lap}");
    }
}

#[test]
fn band_limited_inversion_of_exact_samples() {
    let grid = Grid::default_ball(32).unwrap();
    let gamma = phantom(&grid, 0.05);
    let q = compute_q(&gamma);
    let freq = FrequencyGrid::new(&grid, 8.0);
    let st = ScatteringTransform {
        t_values: freq.xi_points.iter().map(|&xi| qhat(&q, xi)).collect(),
        zeta_used: vec![[Complex64::default(); 3]; freq.len()],
        path: ScatteringPath::Born,
        s_ladder: vec![1.0],
        ladder_values: vec![Vec::new(); freq.len()],
    };
    let (qr, _) = invert_q(&grid, &st, &freq);
    let err2: f64 = qr.values.iter().zip(&q.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * grid.cell_volume();
    // Tail mass of q̂ outside the cutoff (discrete Parseval over all DFT bins).
    let spec = continuous_transform(&grid, &q.to_complex().values);
    let p = grid.period();
    let kept: std::collections::HashSet<usize> = (0..freq.len()).map(|i| freq.bin(i)).collect();
    let tail: f64 = (0..grid.len()).filter(|b| !kept.contains(b)).map(|b| spec[b].norm_sqr()).sum::<f64>() / (p[0] * p[1] * p[2]);
    assert!((err2.sqrt() - tail.sqrt()).abs() <= 0.01 * tail.sqrt(), "{} vs {}", err2.sqrt(), tail.sqrt());
}

#[test]
fn step5_round_trip() {
    let grid = Grid::default_ball(24).unwrap();
    let mask = interior_mask(&grid);
    let flat = ScalarField::constant(&grid, 1.0);
    let g0 = solve_for_gamma(&ScalarField::zeros(&grid), &BoundaryGammaData::from_truth(&flat)).unwrap();
    assert!(g0.values.iter().all(|v| (v - 1.0).abs() <= 1e-12));
    let gamma = ScalarField::from_fn(&grid, |x| 1.3 + 0.2 * x[0] + 0.3 * bump(x, [0.1, 0.0, 0.0], 0.6));
    let g = solve_for_gamma(&compute_q(&gamma), &BoundaryGammaData::from_truth(&gamma)).unwrap();
    let err = rel_l2(&g.values, &gamma.values, &mask);
    assert!(err <= 1e-9, "round trip {err:.3e}");
}

#[test]
fn boundary_values_from_quotients() {
    let grid = Grid::default_ball(16).unwrap();
    let opts = BoundaryOptions::default();
    // Leakage of the interior bump into the quotient decays like e^{−2N·depth}; 24³ resolves it.
    let fine = Grid::default_ball(24).unwrap();
    let interior = ScalarField::from_fn(&fine, |x| 1.0 + 0.3 * bump(x, [0.0; 3], 0.6));
    let bd = recover_boundary_gamma(&LinearConductivity::new(&interior).unwrap(), &opts).unwrap();
    assert!(bd.gamma_b.iter().all(|v| (v - 1.0).abs() <= 1e-3));
    assert!(bd.dgamma_b.iter().all(|v| v.abs() <= 1e-2));
    let c = ScalarField::constant(&grid, 2.5);
    let bd = recover_boundary_gamma(&LinearConductivity::new(&c).unwrap(), &opts).unwrap();
    assert!(bd.gamma_b.iter().all(|v| (v - 2.5).abs() <= 1e-10));
    let varying = ScalarField::from_fn(&grid, |x| 1.0 + 0.2 * x[0] + 0.1 * x[1] * x[1]);
    let bd = recover_boundary_gamma(&LinearConductivity::new(&varying).unwrap(), &opts).unwrap();
    let dom = grid.domain();
    let worst = dom
        .boundary
        .iter()
        .enumerate()
        .map(|(k, &b)| ((bd.gamma_b[k] - varying.values[b]) / varying.values[b]).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.05, "boundary error {worst:.3e}");
    let bad = BoundaryOptions {
        nh: [0.6, 1.5],
        ..opts
    };
    assert!(matches!(
        recover_boundary_gamma(&LinearConductivity::new(&c).unwrap(), &bad),
        Err(Error::OscillationBudgetExceeded { .. })
    ));
}
