//! Binary field dumps.
//!
//! Layout: magic `QDTN1`, three little-endian u32 dims, six f64 box corners (lo then hi),
//! one u8 kind (0 real, 1 complex, 2 vector3), then little-endian f64 values with x fastest.
//! Complex values are stored as (re, im) pairs and vectors as (x, y, z) triples.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{BoundaryTrace, ComplexScalarField, Grid, RealTrace, ScalarField, VectorField};

const MAGIC: &[u8; 5] = b"QDTN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Real = 0,
    Complex = 1,
    Vector3 = 2,
}

impl FieldKind {
    fn width(self) -> usize {
        match self {
            FieldKind::Real => 1,
            FieldKind::Complex => 2,
            FieldKind::Vector3 => 3,
        }
    }
}

/// A decoded dump: header plus raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub dims: [u32; 3],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub kind: FieldKind,
    pub data: Vec<f64>,
}

impl Dump {
    fn for_grid(grid: &Grid, kind: FieldKind, data: Vec<f64>) -> Dump {
        Dump {
            dims: grid.dims.map(|d| d as u32),
            lo: grid.lo,
            hi: grid.hi,
            kind,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 12 + 48 + 1 + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for d in self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for c in self.lo.iter().chain(&self.hi) {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.push(self.kind as u8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Dump> {
        let mut r = bytes;
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut u = [0u8; 4];
        let mut dims = [0u32; 3];
        for d in dims.iter_mut() {
            r.read_exact(&mut u)
                .map_err(|_| Error::Format("truncated header".into()))?;
            *d = u32::from_le_bytes(u);
        }
        let mut f = [0u8; 8];
        let mut corners = [0.0; 6];
        for c in corners.iter_mut() {
            r.read_exact(&mut f)
                .map_err(|_| Error::Format("truncated header".into()))?;
            *c = f64::from_le_bytes(f);
        }
        let mut k = [0u8; 1];
        r.read_exact(&mut k)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let kind = match k[0] {
            0 => FieldKind::Real,
            1 => FieldKind::Complex,
            2 => FieldKind::Vector3,
            other => return Err(Error::Format(format!("unknown kind {other}"))),
        };
        let count = dims.iter().map(|&d| d as usize).product::<usize>() * kind.width();
        if r.len() != 8 * count {
            return Err(Error::Format(format!(
                "expected {} value bytes, found {}",
                8 * count,
                r.len()
            )));
        }
        let data = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Dump {
            dims,
            lo: [corners[0], corners[1], corners[2]],
            hi: [corners[3], corners[4], corners[5]],
            kind,
            data,
        })
    }

    fn check_grid(&self, grid: &Grid, kind: FieldKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected {kind:?} field, found {:?}", self.kind)));
        }
        let dims = grid.dims.map(|d| d as u32);
        let close = |a: [f64; 3], b: [f64; 3]| (0..3).all(|d| (a[d] - b[d]).abs() <= 1e-12 * (1.0 + a[d].abs()));
        if dims != self.dims || !close(self.lo, grid.lo) || !close(self.hi, grid.hi) {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn into_scalar(self, grid: &Arc<Grid>) -> Result<ScalarField> {
        self.check_grid(grid, FieldKind::Real)?;
        ScalarField::new(grid.clone(), self.data)
    }

    pub fn into_complex(self, grid: &Arc<Grid>) -> Result<ComplexScalarField> {
        self.check_grid(grid, FieldKind::Complex)?;
        let v = self
            .data
            .chunks_exact(2)
            .map(|c| Complex64::new(c[0], c[1]))
            .collect();
        ComplexScalarField::new(grid.clone(), v)
    }

    pub fn into_vector(self, grid: &Arc<Grid>) -> Result<VectorField> {
        self.check_grid(grid, FieldKind::Vector3)?;
        let v = self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        VectorField::new(grid.clone(), v)
    }

    /// Reads a real dump as a boundary trace (values taken at boundary nodes).
    pub fn into_trace(self, grid: &Arc<Grid>) -> Result<RealTrace> {
        let f = self.into_scalar(grid)?;
        Ok(crate::grid::boundary_restrict(grid, &f.values))
    }
}

pub fn scalar_dump(f: &ScalarField) -> Dump {
    Dump::for_grid(&f.grid, FieldKind::Real, f.values.clone())
}

pub fn complex_dump(f: &ComplexScalarField) -> Dump {
    let data = f.values.iter().flat_map(|z| [z.re, z.im]).collect();
    Dump::for_grid(&f.grid, FieldKind::Complex, data)
}

pub fn vector_dump(f: &VectorField) -> Dump {
    let data = f.values.iter().flatten().copied().collect();
    Dump::for_grid(&f.grid, FieldKind::Vector3, data)
}

/// Boundary traces are stored as full-grid real fields that vanish off the boundary nodes.
pub fn trace_dump(t: &RealTrace) -> Dump {
    scalar_dump(&t.to_field())
}

pub fn complex_trace_dump(t: &BoundaryTrace<Complex64>) -> Dump {
    complex_dump(&ComplexScalarField {
        grid: t.grid.clone(),
        values: t.to_grid_values(),
    })
}

pub fn write_dump(path: &Path, dump: &Dump) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&dump.encode())?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Dump> {
    Dump::decode(&fs::read(path)?)
}
