//! Synthetic coefficient sets for testing and benchmarking.
//!
//! All profiles are radial tapers around the center of Ω, written for the unit ball and scaled to
//! the domain. They are supported in the ball of radius 0.7, so γ − 1, b⃗ and the remainder
//! coefficient vanish outside 0.7·Ω.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{CoefficientSet, RemainderSpec};
use crate::grid::{DomainShape, Grid, ScalarField, VectorField};

/// Radius of the support of every profile, relative to the domain.
pub const SUPPORT_RADIUS: f64 = 0.7;

/// Direction of b⃗ in the b presets, normalized to unit length.
pub fn b_direction() -> [f64; 3] {
    crate::grid::normalize([1.0, 0.5, -0.75])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// γ ≡ 1, b⃗ ≡ 0.
    Flat,
    /// γ bump, b⃗ ≡ 0.
    BumpGamma,
    /// γ ≡ 1, b⃗ bump.
    BumpB,
    /// γ bump and b⃗ bump.
    Combined,
    /// Combined plus a cubic saturation remainder.
    WithRemainder,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Flat,
        Preset::BumpGamma,
        Preset::BumpB,
        Preset::Combined,
        Preset::WithRemainder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Flat => "flat",
            Preset::BumpGamma => "bump_gamma",
            Preset::BumpB => "bump_b",
            Preset::Combined => "combined",
            Preset::WithRemainder => "with_remainder",
        }
    }

    fn has_gamma(self) -> bool {
        matches!(self, Preset::BumpGamma | Preset::Combined | Preset::WithRemainder)
    }

    fn has_b(self) -> bool {
        matches!(self, Preset::BumpB | Preset::Combined | Preset::WithRemainder)
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown phantom preset '{s}'")))
    }
}

/// Preset plus the scalars that size it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub preset: Preset,
    /// Peak of γ − 1.
    pub gamma_contrast: f64,
    /// Peak of |b⃗|.
    pub b_scale: f64,
    /// Peak of the remainder coefficient c(x) in R = c|q|²q.
    pub remainder_scale: f64,
    /// Radius H of the admissible gradient ball.
    pub gradient_bound: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            preset: Preset::BumpB,
            gamma_contrast: 0.1,
            b_scale: 1.0,
            remainder_scale: 0.5,
            gradient_bound: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn preset(preset: Preset) -> Self {
        PhantomSpec {
            preset,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_contrast > -0.5 && self.gamma_contrast <= 0.5) {
            return Err(Error::Config(format!(
                "gamma_contrast {} is outside the small-contrast range (-0.5, 0.5]",
                self.gamma_contrast
            )));
        }
        if !(self.b_scale.is_finite() && self.remainder_scale.is_finite()) {
            return Err(Error::Config("phantom scales must be finite".into()));
        }
        if !(self.gradient_bound > 0.0) {
            return Err(Error::Config("gradient_bound must be positive".into()));
        }
        Ok(())
    }
}

fn radial(x: [f64; 3]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt() / SUPPORT_RADIUS
}

/// (1 − t²)⁴ for t = |x|/0.7, zero outside (unit-ball coordinates).
pub fn gamma_profile(x: [f64; 3]) -> f64 {
    let t = radial(x);
    if t < 1.0 {
        (1.0 - t * t).powi(4)
    } else {
        0.0
    }
}

/// Modified Bessel function I₀ by its power series (adequate for the small arguments used here).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= (x / (2.0 * k)).powi(2);
        sum += term;
        k += 1.0;
    }
    sum
}

/// Kaiser–Bessel taper shape parameter of the b⃗ profile.
pub const B_TAPER_ALPHA: f64 = 5.0;

/// Kaiser–Bessel taper (I₀(α√(1 − t²)) − 1)/(I₀(α) − 1), zero outside t = 1. Its spectrum is
/// concentrated at low |ξ|, which keeps band-limited recovery of β_w accurate.
pub fn b_profile(x: [f64; 3]) -> f64 {
    let t = radial(x);
    if t < 1.0 {
        (bessel_i0(B_TAPER_ALPHA * (1.0 - t * t).sqrt()) - 1.0) / (bessel_i0(B_TAPER_ALPHA) - 1.0)
    } else {
        0.0
    }
}

/// Center and radius of Ω (for a box, its center and smallest half-width).
fn domain_frame(grid: &Grid) -> ([f64; 3], f64) {
    match grid.shape {
        DomainShape::Ball { center, radius } => (center, radius),
        DomainShape::Box { lo, hi } => {
            let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])];
            let r = (0..3).map(|d| 0.5 * (hi[d] - lo[d])).fold(f64::INFINITY, f64::min);
            (c, r)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub coeffs: Arc<CoefficientSet>,
}

impl Phantom {
    pub fn new(grid: &Arc<Grid>, spec: &PhantomSpec) -> Result<Phantom> {
        spec.validate()?;
        let (c, r) = domain_frame(grid);
        let unit = move |x: [f64; 3]| [(x[0] - c[0]) / r, (x[1] - c[1]) / r, (x[2] - c[2]) / r];
        let a = if spec.preset.has_gamma() { spec.gamma_contrast } else { 0.0 };
        let gamma = ScalarField::from_fn(grid, |x| 1.0 + a * gamma_profile(unit(x)));
        let s = if spec.preset.has_b() { spec.b_scale } else { 0.0 };
        let dir = b_direction();
        let b = VectorField::from_fn(grid, |x| {
            let p = s * b_profile(unit(x));
            [p * dir[0], p * dir[1], p * dir[2]]
        });
        let remainder = if spec.preset == Preset::WithRemainder {
            let c = ScalarField::from_fn(grid, |x| spec.remainder_scale * gamma_profile(unit(x)));
            RemainderSpec::cubic_saturation(c, spec.gradient_bound)
        } else {
            RemainderSpec::zero(spec.gradient_bound)
        };
        Ok(Phantom {
            spec: spec.clone(),
            coeffs: Arc::new(CoefficientSet::new(gamma, b, remainder)?),
        })
    }

    pub fn gamma(&self) -> &ScalarField {
        &self.coeffs.gamma
    }

    pub fn b(&self) -> &VectorField {
        &self.coeffs.b
    }

    /// Peak |b⃗| of the b presets at this scale; the reference magnitude for "b ≈ 0" checks.
    pub fn b_reference_scale(&self) -> f64 {
        self.spec.b_scale.abs()
    }
}
