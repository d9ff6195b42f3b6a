use std::sync::Arc;

use qdtn::forward::{
    second_order_trace, CoefficientSet, DtNOperator, EdgeCoefficients, LinearConductivity, RemainderSpec,
    SolverOptions,
};
use qdtn::grid::{Grid, RealTrace, ScalarField, VectorField};
use qdtn::linearize::{
    bilinear_g2, extract_g1_g2, fit_expansion, polarized_g2, EpsilonSchedule, FitOptions,
};
use qdtn::Error;

fn bump(x: [f64; 3], c: [f64; 3], r: f64) -> f64 {
    let t2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)) / (r * r);
    if t2 < 1.0 {
        (1.0 - t2).powi(4)
    } else {
        0.0
    }
}

fn smooth_phantom(grid: &Arc<Grid>) -> Arc<CoefficientSet> {
    let gamma = ScalarField::from_fn(grid, |x| 1.0 + 0.2 * bump(x, [0.1, 0.0, -0.1], 0.6));
    let b = VectorField::from_fn(grid, |x| {
        let p = bump(x, [0.0; 3], 0.7);
        [p, 0.5 * p, -0.75 * p]
    });
    let c = ScalarField::from_fn(grid, |x| 0.5 * bump(x, [0.0; 3], 0.7));
    Arc::new(CoefficientSet::new(gamma, b, RemainderSpec::cubic_saturation(c, 1.0)).unwrap())
}

fn rel(a: &RealTrace, b: &RealTrace) -> f64 {
    a.axpy(-1.0, b).max_abs() / b.max_abs()
}

#[test]
fn schedule_validation() {
    assert!(EpsilonSchedule::new(vec![0.02, 0.01]).is_err());
    assert!(EpsilonSchedule::new(vec![0.01, 0.02, 0.005]).is_err());
    assert!(EpsilonSchedule::new(vec![1.0, 0.1, 1e-4]).is_err());
    assert!(EpsilonSchedule::new(vec![0.02, 0.01, 0.005]).is_ok());
}

#[test]
fn exact_polynomial_data_is_fitted_exactly() {
    let grid = Grid::default_ball(16).unwrap();
    let a = RealTrace::from_fn(&grid, |x| x[0] + 0.2);
    let b = RealTrace::from_fn(&grid, |x| x[1] * x[2] - 0.5);
    let eps = [0.02, 0.014, 0.01, 0.007, 0.005];
    let eval = |e: f64| a.scale(e).axpy(e * e, &b);
    let plus: Vec<_> = eps.iter().map(|&e| eval(e)).collect();
    let minus: Vec<_> = eps.iter().map(|&e| eval(-e)).collect();
    let (g1, g2, res, _) = fit_expansion(&eps, &plus, &minus, FitOptions::default()).unwrap();
    assert!(res <= 1e-9);
    assert!(rel(&g1, &a) < 1e-10);
    assert!(rel(&g2, &b) < 1e-9);
}

#[test]
fn nearly_coincident_schedule_is_ill_conditioned() {
    let grid = Grid::default_ball(16).unwrap();
    let eps = [0.02, 0.02 - 1e-13, 0.02 - 2e-13];
    let t = RealTrace::zeros(&grid);
    let plus = vec![t.clone(); 3];
    let err = fit_expansion(&eps, &plus, &plus, FitOptions::default()).unwrap_err();
    assert!(matches!(err, Error::IllConditionedFit { .. }));
}

#[test]
fn constant_b_closed_form() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = Arc::new(
        CoefficientSet::new(
            ScalarField::constant(&grid, 1.0),
            VectorField::from_fn(&grid, |_| [1.0, 0.0, 0.0]),
            RemainderSpec::zero(1.0),
        )
        .unwrap(),
    );
    let dn = DtNOperator::nonlinear(coeffs, 0.01, SolverOptions::default()).unwrap();
    let f = RealTrace::from_fn(&grid, |x| x[0]);
    let lin = extract_g1_g2(&dn, &f, &EpsilonSchedule::default()).unwrap();
    // Discrete co-normal of the staircase boundary.
    let dom = grid.domain();
    let nu1 = RealTrace::new(
        grid.clone(),
        (0..dom.boundary.len()).map(|k| dom.flux_normals[k][0] / dom.areas[k]).collect(),
    )
    .unwrap();
    assert!(lin.fit_residual <= 1e-9);
    assert!(rel(&lin.g1, &nu1) < 1e-9);
    assert!(rel(&lin.g2, &nu1) < 1e-8);
}

#[test]
fn zero_b_gives_zero_g2() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = ScalarField::from_fn(&grid, |x| 1.0 + 0.2 * bump(x, [0.0; 3], 0.6));
    let coeffs = Arc::new(CoefficientSet::new(gamma, VectorField::zeros(&grid), RemainderSpec::zero(1.0)).unwrap());
    let dn = DtNOperator::nonlinear(coeffs, 0.01, SolverOptions::default()).unwrap();
    let f = RealTrace::from_fn(&grid, |x| x[0] * x[1] + x[2]);
    let lin = extract_g1_g2(&dn, &f, &EpsilonSchedule::default()).unwrap();
    assert!(lin.g2.max_abs() <= 1e-8 * lin.g1.max_abs().max(1.0));
}

#[test]
fn extraction_matches_direct_expansion() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = smooth_phantom(&grid);
    let dn = DtNOperator::nonlinear(coeffs.clone(), 0.01, SolverOptions::default()).unwrap();
    let lin_op = LinearConductivity::new(&coeffs.gamma).unwrap();
    let b_e = EdgeCoefficients::b_only(&coeffs.b);
    let f = RealTrace::from_fn(&grid, |x| (1.1 * x[0] - 0.3 * x[2]).sin() + 0.4 * x[1] * x[1]);
    let data = extract_g1_g2(&dn, &f, &EpsilonSchedule::default()).unwrap();
    let u1 = lin_op.extend(&f);
    let u2 = lin_op.solve_flux_source(&qdtn::forward::quadratic_fluxes(&grid, &b_e, &u1));
    let g2 = second_order_trace(&lin_op, &b_e, &u1, &u2);
    assert!(rel(&data.g1, &lin_op.apply(&f)) < 1e-6);
    assert!(rel(&data.g2, &g2) < 1e-5, "g2 error {}", rel(&data.g2, &g2));
    // Homogeneity.
    let d2 = extract_g1_g2(&dn, &f.scale(2.0), &EpsilonSchedule::default()).unwrap();
    assert!(rel(&d2.g1, &data.g1.scale(2.0)) < 1e-6);
    assert!(rel(&d2.g2, &data.g2.scale(4.0)) < 1e-5);
}

#[test]
fn polarization_matches_bilinear_oracle() {
    let grid = Grid::default_ball(16).unwrap();
    let coeffs = smooth_phantom(&grid);
    let dn = DtNOperator::nonlinear(coeffs.clone(), 0.01, SolverOptions::default()).unwrap();
    let sched = EpsilonSchedule::new(vec![0.02, 0.014, 0.01]).unwrap();
    let f = RealTrace::from_fn(&grid, |x| x[0] + 0.3 * x[1] * x[2]);
    let g = RealTrace::from_fn(&grid, |x| (0.8 * x[2]).cos());
    let pol = polarized_g2(&dn, &f, &g, &sched).unwrap();
    // Oracle: γ∂νu₂ + 4ν·b∇u₁f·∇u₁g with u₂ the solution driven by the bilinear flux.
    let lin_op = LinearConductivity::new(&coeffs.gamma).unwrap();
    let b_e = EdgeCoefficients::b_only(&coeffs.b);
    let uf = lin_op.extend(&f);
    let ug = lin_op.extend(&g);
    let qp = qdtn::forward::quadratic_fluxes(&grid, &b_e, &uf.iter().zip(&ug).map(|(a, b)| a + b).collect::<Vec<_>>());
    let qm = qdtn::forward::quadratic_fluxes(&grid, &b_e, &uf.iter().zip(&ug).map(|(a, b)| a - b).collect::<Vec<_>>());
    let cross: Vec<f64> = qp.iter().zip(&qm).map(|(a, b)| a - b).collect();
    let u2 = lin_op.solve_flux_source(&cross);
    let mut fl = qdtn::forward::linear_fluxes(&grid, &lin_op.gamma_e, &u2);
    for (a, c) in fl.iter_mut().zip(&cross) {
        *a += c;
    }
    let oracle = qdtn::forward::boundary_flux(&grid, &fl);
    assert!(rel(&pol, &oracle) < 1e-5, "polarization error {}", rel(&pol, &oracle));
    let zero = polarized_g2(&dn, &f, &RealTrace::zeros(&grid), &sched).unwrap();
    assert!(zero.max_abs() < 1e-8 * pol.max_abs());
    let bil = bilinear_g2(&dn, &f, &g, &sched).unwrap();
    assert!(rel(&bil.scale(4.0), &oracle) < 1e-5);
}
