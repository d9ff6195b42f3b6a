use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use qdtn::forward::{
    solve_conductivity, solve_quasilinear, solve_second_order, CoefficientSet, DtNOperator, LinearConductivity,
    RemainderSpec, SolverOptions,
};
use qdtn::grid::{boundary_integral, Grid, RealTrace, ScalarField, VectorField};
use qdtn::Error;

fn bump(x: [f64; 3], c: [f64; 3], r: f64) -> f64 {
    let t2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)) / (r * r);
    if t2 < 1.0 {
        (1.0 - t2).powi(4)
    } else {
        0.0
    }
}

fn gamma_bump(grid: &Arc<Grid>) -> ScalarField {
    ScalarField::from_fn(grid, |x| 1.0 + 0.3 * bump(x, [0.1, -0.1, 0.05], 0.6))
}

#[test]
fn linear_data_is_reproduced_exactly() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = ScalarField::constant(&grid, 1.0);
    let f = RealTrace::from_fn(&grid, |x| 0.3 + x[0] - 2.0 * x[2]);
    let u = solve_conductivity(&gamma, &f).unwrap();
    for &i in &grid.domain().interior {
        let x = grid.position(i);
        assert!((u.values[i] - (0.3 + x[0] - 2.0 * x[2])).abs() < 1e-11);
    }
}

/// Dense assembly of the five-plus-two point operator straight from node neighborhoods.
fn dense_oracle(gamma: &ScalarField, f: &RealTrace) -> Vec<f64> {
    let grid = &gamma.grid;
    let dom = grid.domain();
    let n = dom.interior.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (k, &i) in dom.interior.iter().enumerate() {
        for d in 0..3 {
            let h2 = grid.spacing[d].powi(2);
            for s in [-1, 1] {
                let j = grid.neighbor(i, d, s).unwrap();
                let w = (gamma.values[i] * gamma.values[j]).sqrt() / h2;
                a[(k, k)] += w;
                let ji = dom.interior_index[j];
                if ji != u32::MAX {
                    a[(k, ji as usize)] -= w;
                } else {
                    rhs[k] += w * f.samples[dom.boundary_index[j] as usize];
                }
            }
        }
    }
    let x = a.lu().solve(&rhs).unwrap();
    let mut u = vec![0.0; grid.len()];
    for (k, &i) in dom.interior.iter().enumerate() {
        u[i] = x[k];
    }
    u
}

#[test]
fn sparse_solve_matches_dense_oracle() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = gamma_bump(&grid);
    let f = RealTrace::from_fn(&grid, |x| (x[0] * 1.3).sin() + x[1] * x[2]);
    let u = solve_conductivity(&gamma, &f).unwrap();
    let oracle = dense_oracle(&gamma, &f);
    let err = grid
        .domain()
        .interior
        .iter()
        .map(|&i| (u.values[i] - oracle[i]).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "max difference {err}");
}

#[test]
fn dn_map_is_symmetric_and_nonnegative() {
    let grid = Grid::default_ball(16).unwrap();
    let lin = LinearConductivity::new(&gamma_bump(&grid)).unwrap();
    let f = RealTrace::from_fn(&grid, |x| x[0] + 0.5 * x[1] * x[1]);
    let g = RealTrace::from_fn(&grid, |x| (2.0 * x[2]).cos());
    let fg = boundary_integral(&lin.apply(&f), &g).unwrap();
    let gf = boundary_integral(&lin.apply(&g), &f).unwrap();
    assert!((fg - gf).abs() <= 1e-10 * fg.abs().max(1.0));
    let ff = boundary_integral(&lin.apply(&f), &f).unwrap();
    assert!(ff > 0.0);
    // Green identity: ⟨Λf, f⟩ equals the discrete energy of the extension.
    let e = lin.energy(&lin.extend(&f));
    assert!((ff - e).abs() <= 1e-10 * e);
    let ones = RealTrace::from_fn(&grid, |_| 1.0);
    assert!(lin.apply(&ones).max_abs() < 1e-10);
}

#[test]
fn constant_b_has_affine_solution() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = CoefficientSet::new(
        ScalarField::constant(&grid, 1.0),
        VectorField::from_fn(&grid, |_| [1.0, 0.0, 0.0]),
        RemainderSpec::zero(1.0),
    )
    .unwrap();
    let f = RealTrace::from_fn(&grid, |x| x[0]);
    let eps = 0.1;
    let r = solve_quasilinear(&Arc::new(coeffs), &f, eps, SolverOptions::default()).unwrap();
    assert!(r.residual_norm <= 1e-10);
    for &i in &grid.domain().interior {
        assert!((r.u.values[i] - eps * grid.position(i)[0]).abs() < 1e-12);
    }
}

fn combined(grid: &Arc<Grid>) -> Arc<CoefficientSet> {
    let b = VectorField::from_fn(grid, |x| {
        let p = bump(x, [0.0; 3], 0.7);
        [p, 0.5 * p, -0.75 * p]
    });
    let c = ScalarField::from_fn(grid, |x| 0.5 * bump(x, [0.0; 3], 0.7));
    Arc::new(CoefficientSet::new(gamma_bump(grid), b, RemainderSpec::cubic_saturation(c, 1.0)).unwrap())
}

#[test]
fn newton_converges_and_matches_expansion() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = combined(&grid);
    let f = RealTrace::from_fn(&grid, |x| x[0] + 0.4 * x[1] * x[2]);
    let dn = DtNOperator::nonlinear(coeffs.clone(), 0.01, SolverOptions::default()).unwrap();
    let lin = dn.linear_part().clone();
    let u1 = lin.extend(&f);
    let u1f = ScalarField::new(grid.clone(), u1.clone()).unwrap();
    let u2 = solve_second_order(&coeffs.gamma, &coeffs.b, &u1f).unwrap();
    let g1 = lin.apply(&f);
    let b_e = qdtn::forward::EdgeCoefficients::b_only(&coeffs.b);
    let g2 = qdtn::forward::second_order_trace(&lin, &b_e, &u1, &u2.values);
    let mut errs = Vec::new();
    for eps in [0.02, 0.01] {
        let lam = dn.with_eps(eps).dn_apply(&f).unwrap();
        let pred = g1.scale(eps).axpy(eps * eps, &g2);
        let d = lam.axpy(-1.0, &pred).max_abs();
        errs.push(d);
    }
    // The remainder of the two-term expansion is cubic in ε.
    let ratio = errs[0] / errs[1];
    assert!(ratio > 6.0 && ratio < 10.0, "ratio {ratio}");
}

#[test]
fn large_data_is_rejected() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = combined(&grid);
    let f = RealTrace::from_fn(&grid, |x| x[0]);
    let err = solve_quasilinear(&coeffs, &f, 1.0, SolverOptions::default()).unwrap_err();
    assert!(matches!(err, Error::DataTooLarge { .. }));
}

#[test]
fn remainder_bound_holds() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = combined(&grid);
    let worst = coeffs.remainder.check_bound(200, 3).unwrap();
    assert!(worst <= 1.0, "worst ratio {worst}");
}

#[test]
fn nonpositive_gamma_is_rejected() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = ScalarField::from_fn(&grid, |x| 1.0 - 2.0 * bump(x, [0.0; 3], 0.5));
    assert!(LinearConductivity::new(&gamma).is_err());
}
