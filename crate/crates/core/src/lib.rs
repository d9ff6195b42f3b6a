//! Dirichlet-to-Neumann data synthesis for the quasilinear equation ∇·C(x,∇u) = 0 with
//! C = γ∇u + |∇u|² b + R, and reconstruction of γ and b from that data.

pub mod b_rec;
pub mod cgo;
pub mod config;
pub mod error;
pub mod extrapolate;
pub mod forward;
pub mod gamma_rec;
pub mod fourier;
pub mod grid;
pub mod io;
pub mod krylov;
pub mod linearize;
pub mod phantom;
pub mod pipeline;
pub mod sparse;
pub mod stencil;

pub use error::{Error, Result};
