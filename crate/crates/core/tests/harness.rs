use std::sync::Arc;

use proptest::prelude::*;
use qdtn::config::{GammaSource, RunConfig};
use qdtn::grid::Grid;
use qdtn::phantom::{gamma_profile, Phantom, PhantomSpec, Preset, SUPPORT_RADIUS};
use qdtn::pipeline::{
    execute, export_plotdata, run_pipeline, slice_csv, verify, verify_with, write_sweep_csv, xi_max_sweep, Faults,
    Stages, SweepRow,
};
use qdtn::Error;

fn small(preset: Preset, dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.n = 16;
    cfg.phantom.preset = preset;
    cfg.b.xi_max = 5.0;
    cfg.gamma.xi_max = 5.0;
    cfg.output.dir = dir.to_path_buf();
    cfg
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
}

#[test]
fn partial_config_takes_defaults_and_rejects_unknown_keys() {
    let cfg = RunConfig::parse("seed = 3\n[grid]\nn = 24\n[b]\nroute = \"limit\"\n").unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.grid.n, 24);
    assert_eq!(cfg.grid.half_width, RunConfig::default().grid.half_width);
    assert!(matches!(RunConfig::parse("[grid]\nsize = 4\n"), Err(Error::Config(_))));
    assert!(matches!(RunConfig::parse("[phantom]\npreset = \"zebra\"\n"), Err(Error::Config(_))));
}

#[test]
fn validation_rejects_bad_values() {
    let mut cfg = RunConfig::default();
    cfg.phantom.gamma_contrast = 0.9;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = RunConfig::default();
    cfg.b.gamma_source = GammaSource::File;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.b.gamma_file = Some("/nonexistent/gamma.qdtn".into());
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = RunConfig::default();
    cfg.data.eps_schedule = vec![0.01];
    assert!(cfg.validate().is_err());
    let mut cfg = RunConfig::default();
    cfg.b.s_ladder = vec![1.0, -1.0];
    assert!(cfg.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn config_round_trip(seed in any::<u64>(), n in 8usize..64, contrast in -0.4f64..0.5, xi in 1.0f64..20.0,
                         preset in 0usize..5, route in 0usize..3) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.grid.n = n;
        cfg.phantom.preset = Preset::ALL[preset];
        cfg.phantom.gamma_contrast = contrast;
        cfg.b.xi_max = xi;
        cfg.b.route = [qdtn::b_rec::KnownDataRoute::Boundary, qdtn::b_rec::KnownDataRoute::Volume,
                       qdtn::b_rec::KnownDataRoute::Limit][route];
        let back = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn presets_are_supported_inside_the_inner_ball() {
    let grid = Grid::default_ball(24).unwrap();
    for preset in Preset::ALL {
        let p = Phantom::new(&grid, &PhantomSpec::preset(preset)).unwrap();
        for i in 0..grid.len() {
            let x = grid.position(i);
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if r >= SUPPORT_RADIUS {
                assert_eq!(p.gamma().values[i], 1.0, "{preset:?}");
                assert_eq!(p.b().values[i], [0.0; 3], "{preset:?}");
            }
        }
        assert!(p.gamma().min_on_domain() > 0.0);
    }
    let combined = Phantom::new(&grid, &PhantomSpec::preset(Preset::Combined)).unwrap();
    let peak = combined.gamma().values.iter().cloned().fold(0.0, f64::max);
    assert!(peak <= 1.1 && peak > 1.08, "peak {peak}");
    assert_eq!(gamma_profile([0.0; 3]), 1.0);
}

#[test]
fn preset_names_parse() {
    for p in Preset::ALL {
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
}

#[test]
fn flat_pipeline_recovers_unit_gamma_and_zero_b() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Preset::Flat, dir.path());
    let m = run_pipeline(&cfg).unwrap();
    let g = m.gamma.as_ref().unwrap();
    assert!(g.gamma_max_deviation <= 1e-3);
    let b = m.b.as_ref().unwrap();
    assert!(b.b_max_inner <= 1e-3);
    assert!(m.all_passed(), "{:?}", m.checks);
    for f in ["config.toml", "metrics.json", "timings.json", "run.log", "fields/gamma_rec.qdtn", "fields/b_rec.qdtn"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let cfg_back = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(cfg_back, cfg);
    let out = dir.path().join("plots");
    let files = export_plotdata(dir.path(), &out).unwrap();
    let slice = std::fs::read_to_string(out.join("gamma_rec_slice.csv")).unwrap();
    assert_eq!(slice.lines().next(), Some("x,y,value"));
    assert_eq!(slice.lines().count(), 1 + 16 * 16);
    assert!(files.iter().any(|p| p.ends_with("known_ladder.csv")));
}

#[test]
fn metrics_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Preset::Combined, dir.path());
    cfg.data.n_traces = 2;
    let stages = Stages {
        forward: true,
        linearize: true,
        gamma: true,
        b: false,
    };
    let a = execute(&cfg, stages).unwrap();
    let b = execute(&cfg, stages).unwrap();
    assert_eq!(a.metrics.to_json().unwrap(), b.metrics.to_json().unwrap());
    assert_eq!(a.fields, b.fields);
    cfg.seed += 1;
    let c = execute(&cfg, stages).unwrap();
    assert_ne!(
        a.metrics.linearize.unwrap().g1_rel_error,
        c.metrics.linearize.unwrap().g1_rel_error
    );
}

#[test]
fn metrics_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Preset::BumpGamma, dir.path());
    let out = execute(&cfg, Stages { gamma: true, ..Stages::NONE }).unwrap();
    let text = out.metrics.to_json().unwrap();
    assert_eq!(qdtn::pipeline::Metrics::from_json(&text).unwrap(), out.metrics);
    assert!(text.contains("\"seed\": 7"));
}

#[test]
fn stage_errors_are_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(Preset::Flat, dir.path());
    cfg.b.gamma_source = GammaSource::File;
    let bad = dir.path().join("gamma.qdtn");
    std::fs::write(&bad, b"not a dump").unwrap();
    cfg.b.gamma_file = Some(bad);
    let err = execute(&cfg, Stages { b: true, ..Stages::NONE }).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "recon-b", .. }), "{err}");
    assert!(err.to_string().starts_with("stage recon-b:"));
}

#[test]
fn verify_passes_on_flat_and_catches_broken_adjointness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Preset::Flat, dir.path());
    let m = verify(&cfg).unwrap();
    assert!(m.all_passed());
    let err = verify_with(&cfg, &Faults { adjointness_defect: 1e-3 }).unwrap_err();
    assert!(err.is_invariant_failure());
    assert!(err.to_string().contains("green_identity"), "{err}");
}

#[test]
fn sweep_has_one_row_per_xi_max() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Preset::BumpGamma, dir.path());
    let rows = xi_max_sweep(&cfg, &[3.0, 5.0]).unwrap();
    assert_eq!(rows.len(), 2);
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(rows.iter().all(|r: &SweepRow| r.contrast_rel_error.is_some()));
}

#[test]
fn slice_of_vector_dump_is_magnitude() {
    let grid: Arc<Grid> = Grid::default_ball(16).unwrap();
    let v = qdtn::grid::VectorField::from_fn(&grid, |_| [3.0, 0.0, 4.0]);
    let csv = slice_csv(&qdtn::io::vector_dump(&v));
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",5.0000000000e0")));
}
