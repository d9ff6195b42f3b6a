use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qdtn::b_rec::KnownDataRoute;
use qdtn::config::{configure_threads, GammaSource, RunConfig};
use qdtn::forward::DtNOperator;
use qdtn::gamma_rec::ScatteringPath;
use qdtn::grid::RealTrace;
use qdtn::io::{read_dump, scalar_dump, trace_dump, write_dump};
use qdtn::linearize::extract_g1_g2;
use qdtn::phantom::{Phantom, Preset};
use qdtn::pipeline::{
    cgo_ladder, decay_csv, direct_g2, execute, export_plotdata, random_trace, run_stages, trace_rel_error, verify,
    write_run_dir, write_sweep_csv, xi_max_sweep, Stages,
};
use qdtn::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "qdtn", version, about = "DN data synthesis and coefficient reconstruction for quasilinear conductivity equations")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Grid nodes per axis.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the quasilinear problem for one boundary trace.
    Forward(TraceArgs),
    /// Evaluate the DN map on one trace.
    Dnmap {
        #[command(flatten)]
        trace: TraceArgs,
        /// Apply the linear conductivity map Λγ instead of the nonlinear one.
        #[arg(long)]
        linear: bool,
    },
    /// Extract g₁ and g₂ from nonlinear DN data.
    Linearize(TraceArgs),
    /// CGO decay ladder for the phantom's γ.
    Cgo {
        #[arg(long, value_delimiter = ',', default_value = "2,-1,1")]
        xi: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "10,20,40,80")]
        ladder: Vec<f64>,
    },
    /// Reconstruct γ from the linear DN map.
    ReconGamma {
        #[arg(long)]
        xi_max: Option<f64>,
        #[arg(long)]
        path: Option<ScatteringPath>,
    },
    /// Reconstruct b⃗.
    ReconB {
        #[arg(long, value_enum)]
        gamma: Option<GammaArg>,
        /// γ dump used with `--gamma file`.
        #[arg(long)]
        gamma_file: Option<PathBuf>,
        #[arg(long, value_enum)]
        route: Option<RouteArg>,
        #[arg(long)]
        xi_max: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        s_ladder: Option<Vec<f64>>,
        /// Also write the metrics JSON here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// forward → linearize → recon-gamma → recon-b.
    Pipeline,
    /// Run the invariant suite.
    Verify,
    /// Write plot CSVs for a run directory.
    Export {
        /// Run directory to read.
        #[arg(long)]
        run: PathBuf,
        /// Also sweep the γ reconstruction over these ξ_max values.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
    },
}

#[derive(Args)]
struct TraceArgs {
    /// Boundary trace as a real field dump; a seeded random trace otherwise.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GammaArg {
    Oracle,
    Reconstructed,
    File,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RouteArg {
    Boundary,
    Volume,
    Limit,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(p) = c.preset {
        cfg.phantom.preset = p;
    }
    if let Some(n) = c.n {
        cfg.grid.n = n;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn trace_for(cfg: &RunConfig, phantom: &Phantom, args: &TraceArgs) -> Result<RealTrace> {
    let grid = phantom.gamma().grid.clone();
    match &args.trace {
        Some(p) => read_dump(p)?.into_trace(&grid),
        None => Ok(random_trace(&grid, &mut ChaCha8Rng::seed_from_u64(cfg.seed))),
    }
}

fn prepare(cfg: &mut RunConfig, eps: Option<f64>) -> Result<(Phantom, DtNOperator)> {
    if let Some(e) = eps {
        cfg.data.eps = e;
    }
    cfg.validate()?;
    let grid = cfg.grid.build()?;
    let phantom = Phantom::new(&grid, &cfg.phantom)?;
    let dn = DtNOperator::nonlinear(phantom.coeffs.clone(), cfg.data.eps, cfg.solver.options())?;
    std::fs::create_dir_all(&cfg.output.dir)?;
    std::fs::write(cfg.output.dir.join("config.toml"), cfg.to_toml()?)?;
    Ok((phantom, dn))
}

fn print_checks(m: &qdtn::pipeline::Metrics) {
    for c in &m.checks {
        println!("{}", c.describe());
    }
}

fn write_json(path: &Path, m: &qdtn::pipeline::Metrics) -> Result<()> {
    std::fs::write(path, m.to_json()?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = load_config(&cli.common)?;
    let out = cfg.output.dir.clone();
    match cli.command {
        Command::Forward(args) => {
            let (phantom, dn) = prepare(&mut cfg, args.eps)?;
            let f = trace_for(&cfg, &phantom, &args)?;
            let solver = dn.solver().expect("nonlinear operator");
            let r = solver.solve(&f, cfg.data.eps)?;
            write_dump(&out.join("u.qdtn"), &scalar_dump(&r.u))?;
            write_dump(&out.join("dn.qdtn"), &trace_dump(&solver.dn_of(&r.u.values)))?;
            println!(
                "Newton iterations {}, residual {:.3e}, linear solves {}, W2p proxy {:.4e}",
                r.iterations, r.residual_norm, r.linear_solves, r.w2p_proxy_norm
            );
        }
        Command::Dnmap { trace, linear } => {
            let (phantom, dn) = prepare(&mut cfg, trace.eps)?;
            let f = trace_for(&cfg, &phantom, &trace)?;
            let g = if linear { dn.linear_part().apply(&f) } else { dn.dn_apply(&f)? };
            write_dump(&out.join("dn.qdtn"), &trace_dump(&g))?;
            println!("max |Lambda f| = {:.6e}", g.max_abs());
        }
        Command::Linearize(args) => {
            let (phantom, dn) = prepare(&mut cfg, args.eps)?;
            let f = trace_for(&cfg, &phantom, &args)?;
            let d = extract_g1_g2(&dn, &f, &cfg.eps_schedule()?)?;
            write_dump(&out.join("g1.qdtn"), &trace_dump(&d.g1))?;
            write_dump(&out.join("g2.qdtn"), &trace_dump(&d.g2))?;
            let lin = dn.linear_part();
            let g2 = direct_g2(lin, phantom.b(), &f);
            println!("g1 error vs direct {:.3e}", trace_rel_error(&d.g1, &lin.apply(&f)));
            if g2.max_abs() > 0.0 {
                println!("g2 error vs direct {:.3e}", trace_rel_error(&d.g2, &g2));
            } else {
                println!("max |g2| {:.3e} (b = 0)", d.g2.max_abs());
            }
            println!("fit residual {:.3e}, condition {:.3e}", d.fit_residual, d.condition);
        }
        Command::Cgo { xi, ladder } => {
            let xi: [f64; 3] = xi
                .try_into()
                .map_err(|_| Error::InvalidArgument("--xi needs three components".into()))?;
            let c = cgo_ladder(&cfg, xi, &ladder)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("decay_ladder.csv"), decay_csv(&c.ladder))?;
            for r in &c.ladder {
                println!("|zeta| {:8.3}  ||r|| {:.4e}  residual {:.2e}", r.zeta_norm, r.r_norm, r.residual);
            }
            println!("decay slope {:.3}", c.slope);
            let mut m = execute(&cfg, Stages::NONE)?.metrics;
            m.cgo = Some(c);
            write_json(&out.join("metrics.json"), &m)?;
        }
        Command::ReconGamma { xi_max, path } => {
            if let Some(x) = xi_max {
                cfg.gamma.xi_max = x;
            }
            if let Some(p) = path {
                cfg.gamma.path = p;
            }
            let stages = Stages {
                gamma: true,
                ..Stages::NONE
            };
            let m = run_stages(&cfg, stages)?;
            print_checks(&m);
        }
        Command::ReconB {
            gamma,
            gamma_file,
            route,
            xi_max,
            s_ladder,
            metrics,
        } => {
            if let Some(g) = gamma {
                cfg.b.gamma_source = match g {
                    GammaArg::Oracle => GammaSource::Oracle,
                    GammaArg::Reconstructed => GammaSource::Reconstructed,
                    GammaArg::File => GammaSource::File,
                };
            }
            if gamma_file.is_some() {
                cfg.b.gamma_file = gamma_file;
            }
            if let Some(r) = route {
                cfg.b.route = match r {
                    RouteArg::Boundary => KnownDataRoute::Boundary,
                    RouteArg::Volume => KnownDataRoute::Volume,
                    RouteArg::Limit => KnownDataRoute::Limit,
                };
            }
            if let Some(x) = xi_max {
                cfg.b.xi_max = x;
            }
            if let Some(s) = s_ladder {
                cfg.b.s_ladder = s;
            }
            let stages = Stages {
                b: true,
                ..Stages::NONE
            };
            let m = run_stages(&cfg, stages)?;
            if let Some(p) = metrics {
                write_json(&p, &m)?;
            }
            print_checks(&m);
        }
        Command::Pipeline => {
            let out = execute(&cfg, Stages::ALL)?;
            write_run_dir(&cfg.output.dir, &cfg, &out)?;
            print_checks(&out.metrics);
            println!("total {:.1} s", out.timings.total());
        }
        Command::Verify => {
            let m = verify(&cfg)?;
            print_checks(&m);
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("verify.json"), &m)?;
        }
        Command::Export { run, sweep } => {
            for p in export_plotdata(&run, &out)? {
                println!("{}", p.display());
            }
            if let Some(values) = sweep {
                let rows = xi_max_sweep(&cfg, &values)?;
                let p = out.join("xi_max_sweep.csv");
                write_sweep_csv(&p, &rows)?;
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invariant_failure() {
                ExitCode::from(2)
            } else if e.is_solver_failure() {
                ExitCode::from(3)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
