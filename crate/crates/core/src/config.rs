//! Run configuration, read from a TOML file.
//!
//! Every section and key is optional; missing keys take the defaults below.
//!
//! ```toml
//! seed = 7
//!
//! [grid]
//! n = 32            # nodes per axis
//! half_width = 1.5  # box is [-half_width, half_width]^3
//! radius = 1.0      # Ω is the ball of this radius
//!
//! [phantom]
//! preset = "bump_b" # flat | bump_gamma | bump_b | combined | with_remainder
//! gamma_contrast = 0.1
//! b_scale = 1.0
//!
//! [data]
//! eps = 0.01
//! eps_schedule = [0.02, 0.014, 0.01]
//!
//! [gamma]
//! xi_max = 8.0
//! path = "born"
//!
//! [b]
//! route = "boundary"     # boundary | volume | limit
//! gamma_source = "oracle" # oracle | reconstructed | file
//! xi_max = 8.0
//! s_ladder = [0.25, 0.5, 1.0]
//!
//! [output]
//! dir = "run"
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::b_rec::{BRecOptions, KnownDataRoute};
use crate::error::{Error, Result};
use crate::forward::SolverOptions;
use crate::gamma_rec::GammaRecOptions;
use crate::grid::Grid;
use crate::linearize::EpsilonSchedule;
use crate::phantom::PhantomSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub half_width: f64,
    pub radius: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n: 32,
            half_width: 1.5,
            radius: 1.0,
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<Arc<Grid>> {
        Grid::cube_ball(self.n, -self.half_width, self.half_width, self.radius)
    }
}

/// Data synthesis: the amplitude of single nonlinear evaluations and the ε schedule of the
/// linearization fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub eps: f64,
    pub eps_schedule: Vec<f64>,
    /// Random boundary traces used by the forward and linearization diagnostics.
    pub n_traces: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            eps: 0.01,
            eps_schedule: vec![0.02, 0.014, 0.01],
            n_traces: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub picard_max_iter: usize,
    pub smallness: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let d = SolverOptions::default();
        SolverSpec {
            newton_tol: d.newton_tol,
            newton_max_iter: d.newton_max_iter,
            picard_max_iter: d.picard_max_iter,
            smallness: d.smallness,
        }
    }
}

impl SolverSpec {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            newton_tol: self.newton_tol,
            newton_max_iter: self.newton_max_iter,
            picard_max_iter: self.picard_max_iter,
            smallness: self.smallness,
        }
    }
}

/// Conductivity used by the b reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaSource {
    Oracle,
    Reconstructed,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BStageSpec {
    pub route: KnownDataRoute,
    pub gamma_source: GammaSource,
    /// Field dump read when `gamma_source = "file"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_file: Option<PathBuf>,
    pub xi_max: f64,
    pub s_ladder: Vec<f64>,
    pub cond_cap: f64,
    pub self_test_tol: f64,
}

impl Default for BStageSpec {
    fn default() -> Self {
        let d = BRecOptions::default();
        BStageSpec {
            route: KnownDataRoute::Boundary,
            gamma_source: GammaSource::Oracle,
            gamma_file: None,
            xi_max: d.xi_max,
            s_ladder: d.s_ladder,
            cond_cap: d.cond_cap,
            self_test_tol: d.self_test_tol,
        }
    }
}

impl BStageSpec {
    pub fn options(&self, eps_schedule: &[f64]) -> BRecOptions {
        BRecOptions {
            xi_max: self.xi_max,
            s_ladder: self.s_ladder.clone(),
            eps_schedule: eps_schedule.to_vec(),
            cond_cap: self.cond_cap,
            self_test_tol: self.self_test_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Write field dumps (phantom, reconstructions) next to the metrics.
    pub fields: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            dir: PathBuf::from("run"),
            fields: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub phantom: PhantomSpec,
    pub data: DataSpec,
    pub solver: SolverSpec,
    pub gamma: GammaRecOptions,
    pub b: BStageSpec,
    pub output: OutputSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            grid: GridSpec::default(),
            phantom: PhantomSpec::default(),
            data: DataSpec::default(),
            solver: SolverSpec::default(),
            gamma: GammaRecOptions::default(),
            b: BStageSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg = RunConfig::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn eps_schedule(&self) -> Result<EpsilonSchedule> {
        EpsilonSchedule::new(self.data.eps_schedule.clone())
    }

    pub fn b_options(&self) -> BRecOptions {
        self.b.options(&self.data.eps_schedule)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.grid.n < 8 {
            return Err(Error::Config(format!("grid.n = {} is too small", self.grid.n)));
        }
        if !(self.grid.radius > 0.0 && self.grid.radius < self.grid.half_width) {
            return Err(Error::Config("grid.radius must lie in (0, half_width)".into()));
        }
        if !(self.data.eps > 0.0) {
            return Err(Error::Config("data.eps must be positive".into()));
        }
        self.eps_schedule().map_err(|e| Error::Config(e.to_string()))?;
        for (name, xi) in [("gamma.xi_max", self.gamma.xi_max), ("b.xi_max", self.b.xi_max)] {
            if !(xi > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, ladder) in [("gamma.s_ladder", &self.gamma.s_ladder), ("b.s_ladder", &self.b.s_ladder)] {
            if ladder.is_empty() || ladder.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("{name} must hold positive values")));
            }
        }
        if self.b.gamma_source == GammaSource::File {
            match &self.b.gamma_file {
                Some(p) if p.exists() => {}
                Some(p) => return Err(Error::Config(format!("gamma file {} does not exist", p.display()))),
                None => return Err(Error::Config("b.gamma_source = \"file\" needs b.gamma_file".into())),
            }
        }
        Ok(())
    }
}

/// Sizes the global rayon pool from `QDTN_THREADS` when set. Safe to call more than once.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("QDTN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("QDTN_THREADS = '{v}' is not a thread count")))?;
    if n == 0 {
        return Err(Error::Config("QDTN_THREADS must be at least 1".into()));
    }
    // Fails only if the pool was already built, which keeps the first setting.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
