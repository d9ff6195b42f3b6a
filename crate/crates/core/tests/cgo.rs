use num_complex::Complex64;
use proptest::prelude::*;
use qdtn::cgo::{
    assemble_cgo, cdot, cdot_real, cnorm, compute_q, compute_q_spectral, decay_ladder, loglog_slope, make_zeta_pair,
    solve_r, solve_r_with, CgoOptions,
};
use qdtn::grid::{Grid, ScalarField};
use qdtn::Error;

fn bump(x: [f64; 3], c: [f64; 3], r: f64) -> f64 {
    let t2 = ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)) / (r * r);
    if t2 < 1.0 {
        (1.0 - t2).powi(4)
    } else {
        0.0
    }
}

fn phantom_gamma(grid: &std::sync::Arc<Grid>) -> ScalarField {
    ScalarField::from_fn(grid, |x| 1.0 + 0.1 * bump(x, [0.15, -0.1, 0.05], 0.5))
}

#[test]
fn worked_zeta_pair() {
    let p = make_zeta_pair([2.0, 0.0, 0.0], 1.0).unwrap();
    assert_eq!(p.eta, [0.0, 1.0, 0.0]);
    assert_eq!(p.k, [0.0, 0.0, 1.0]);
    assert!((p.r_param - 2f64.sqrt()).abs() < 1e-15);
    let expect = [Complex64::new(0.0, -1.0), Complex64::new(0.0, -1.0), Complex64::new(2f64.sqrt(), 0.0)];
    for d in 0..3 {
        assert!((p.zeta1[d] - expect[d]).norm() < 1e-15);
    }
    assert!(cdot(&p.zeta1, &p.zeta1).norm() < 1e-14);
    assert!(matches!(make_zeta_pair([0.0; 3], 1.0), Err(Error::ZeroXi)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn zeta_pair_identities(x in -20.0f64..20.0, y in -20.0f64..20.0, z in -20.0f64..20.0, s in 0.01f64..100.0) {
        prop_assume!(x * x + y * y + z * z > 1e-6);
        let xi = [x, y, z];
        let p = make_zeta_pair(xi, s).unwrap();
        let scale = 1.0 + p.r_param * p.r_param;
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let xn = dot(xi, xi).sqrt();
        prop_assert!(dot(p.k, xi).abs() <= 1e-12 * xn);
        prop_assert!(dot(p.k, p.eta).abs() <= 1e-12);
        prop_assert!(dot(p.eta, xi).abs() <= 1e-12 * xn);
        prop_assert!(cdot(&p.zeta1, &p.zeta1).norm() <= 1e-12 * scale);
        prop_assert!(cdot(&p.zeta2, &p.zeta2).norm() <= 1e-12 * scale);
        for d in 0..3 {
            let sum = p.zeta1[d] + p.zeta2[d];
            prop_assert!(sum.re.abs() <= 1e-12 * scale && (sum.im + xi[d]).abs() <= 1e-12 * scale);
        }
        prop_assert!((p.r_param * p.r_param - (0.25 * dot(xi, xi) + s * s)).abs() <= 1e-12 * scale);
        let n1 = cnorm(&p.zeta1);
        prop_assert!((n1 * n1 - 2.0 * p.r_param * p.r_param).abs() <= 1e-12 * scale);
    }
}

#[test]
fn q_of_flat_gamma_vanishes() {
    let grid = Grid::default_ball(16).unwrap();
    let g = ScalarField::constant(&grid, 1.0);
    assert!(compute_q(&g).values.iter().all(|v| *v == 0.0));
    assert!(compute_q_spectral(&g).values.iter().all(|v| v.abs() < 1e-14));
    let p = make_zeta_pair([1.0, 2.0, 0.0], 10.0).unwrap();
    let r = solve_r(&compute_q(&g), &p.zeta1).unwrap();
    assert!(r.values.iter().all(|v| v.norm() == 0.0));
}

#[test]
fn q_converges_at_second_order() {
    let (a, c, rr) = (0.1, [0.15, -0.1, 0.05], 0.5);
    let exact = |x: [f64; 3]| {
        let y = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
        let y2 = y[0] * y[0] + y[1] * y[1] + y[2] * y[2];
        let u = 1.0 - y2 / (rr * rr);
        if u <= 0.0 {
            return 0.0;
        }
        let lap = 4.0 * a * (3.0 * u * u * 4.0 * y2 / rr.powi(4) - 6.0 * u.powi(3) / (rr * rr));
        lap / (1.0 + a * u.powi(4))
    };
    let mut errs = Vec::new();
    for n in [32, 64] {
        let grid = Grid::default_ball(n).unwrap();
        let g = ScalarField::from_fn(&grid, |x| (1.0 + a * bump(x, c, rr)).powi(2));
        let q = compute_q(&g);
        let e = (0..grid.len())
            .map(|i| (q.values[i] - exact(grid.position(i))).abs())
            .fold(0.0, f64::max);
        errs.push((grid.spacing[0], e));
    }
    let order = (errs[0].1 / errs[1].1).ln() / (errs[0].0 / errs[1].0).ln();
    assert!(order > 1.8, "observed order {order}");
}

#[test]
fn r_equation_residual_and_decay() {
    let grid = Grid::default_ball(32).unwrap();
    let gamma = phantom_gamma(&grid);
    let q = compute_q_spectral(&gamma);
    let p = make_zeta_pair([2.0, -1.0, 1.0], (0.5f64 * 900.0 - 1.5).sqrt()).unwrap();
    let rs = solve_r_with(&q, &p.zeta1, &CgoOptions::default()).unwrap();
    assert!((cnorm(&p.zeta1) - 30.0).abs() < 1e-9);
    assert!(rs.residual <= 1e-6, "residual {}", rs.residual);
    let rows = decay_ladder(&gamma, [2.0, -1.0, 1.0], &[10.0, 20.0, 40.0, 80.0]).unwrap();
    let x: Vec<f64> = rows.iter().map(|r| r.zeta_norm).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.r_norm).collect();
    for r in &rows {
        assert!(r.residual <= 1e-6, "residual {} at |zeta| {}", r.residual, r.zeta_norm);
    }
    let slope = loglog_slope(&x, &y);
    assert!(slope <= -0.7, "slope {slope}");
}

#[test]
fn flat_cgo_is_the_exponential() {
    let grid = Grid::default_ball(16).unwrap();
    let gamma = ScalarField::constant(&grid, 1.0);
    let p = make_zeta_pair([1.0, 0.5, 0.0], 2.0).unwrap();
    let sol = assemble_cgo(&gamma, &p.zeta1).unwrap();
    for i in 0..grid.len() {
        let e = cdot_real(&p.zeta1, grid.position(i)).exp();
        assert!((sol.v_field.values[i] - e).norm() <= 1e-12 * e.norm());
    }
    assert!(sol.l_gamma_residual(&gamma) < 1e-12);
}

#[test]
fn cgo_residual_decreases_along_ladder() {
    let grid = Grid::default_ball(32).unwrap();
    let gamma = phantom_gamma(&grid);
    let mut last = f64::INFINITY;
    for zn in [20.0, 40.0, 80.0] {
        let p = make_zeta_pair([1.0, 0.0, 2.0], (0.5f64 * zn * zn - 1.25).sqrt()).unwrap();
        let sol = assemble_cgo(&gamma, &p.zeta1).unwrap();
        let res = sol.l_gamma_residual(&gamma);
        eprintln!("|zeta| {zn}: L_gamma residual {res:.3e}, r residual {:.3e}", sol.r_residual);
        assert!(res <= 1e-4);
        assert!(res <= last * 1.05);
        last = res;
    }
}
