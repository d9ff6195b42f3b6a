//! Uniform grids, discrete domains and the field types that live on them.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::stencil::EdgeMesh;

/// Shape of the domain Ω embedded in the grid box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainShape {
    Ball { center: [f64; 3], radius: f64 },
    Box { lo: [f64; 3], hi: [f64; 3] },
}

impl DomainShape {
    /// Level-set value: negative inside, positive outside.
    pub fn level(&self, x: [f64; 3]) -> f64 {
        match *self {
            DomainShape::Ball { center, radius } => norm(sub(x, center)) - radius,
            DomainShape::Box { lo, hi } => (0..3)
                .map(|d| (lo[d] - x[d]).max(x[d] - hi[d]))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            DomainShape::Ball { center, radius } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
            DomainShape::Box { lo, hi } => (lo, hi),
        }
    }

    /// Exact surface area of the continuous boundary.
    pub fn surface_area(&self) -> f64 {
        match *self {
            DomainShape::Ball { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            DomainShape::Box { lo, hi } => {
                let e = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
                2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])
            }
        }
    }

    /// Scaled copy about the center, used for interior subdomains such as 0.8·Ω.
    pub fn scaled(&self, factor: f64) -> DomainShape {
        match *self {
            DomainShape::Ball { center, radius } => DomainShape::Ball {
                center,
                radius: radius * factor,
            },
            DomainShape::Box { lo, hi } => {
                let mut l = [0.0; 3];
                let mut h = [0.0; 3];
                for d in 0..3 {
                    let c = 0.5 * (lo[d] + hi[d]);
                    let r = 0.5 * (hi[d] - lo[d]) * factor;
                    l[d] = c - r;
                    h[d] = c + r;
                }
                DomainShape::Box { lo: l, hi: h }
            }
        }
    }
}

/// Role of a grid node in the discrete domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    /// Node inside Ω; carries an unknown.
    Interior,
    /// Node outside Ω adjacent to an interior node; carries Dirichlet data.
    Boundary,
    Exterior,
}

pub(crate) const NONE: u32 = u32::MAX;

/// Discrete domain: interior nodes, boundary nodes and boundary quadrature.
#[derive(Debug)]
pub struct Domain {
    pub role: Vec<NodeRole>,
    pub interior: Vec<usize>,
    pub interior_index: Vec<u32>,
    pub boundary: Vec<usize>,
    pub boundary_index: Vec<u32>,
    /// Surface quadrature weight per boundary node.
    pub areas: Vec<f64>,
    /// Outward unit normal per boundary node.
    pub normals: Vec<[f64; 3]>,
    /// Sum of the outward staircase face vectors adjacent to each boundary node.
    /// `flux_normals[b] / areas[b]` is the normal seen by the discrete flux.
    pub flux_normals: Vec<[f64; 3]>,
}

/// A uniform 3-D grid over a box, together with the discrete domain Ω_h.
pub struct Grid {
    pub dims: [usize; 3],
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub shape: DomainShape,
    pub spacing: [f64; 3],
    domain: Domain,
    mesh: OnceLock<EdgeMesh>,
}

impl std::fmt::Debug for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grid")
            .field("dims", &self.dims)
            .field("lo", &self.lo)
            .field("hi", &self.hi)
            .field("shape", &self.shape)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.lo == other.lo
            && self.hi == other.hi
            && self.shape == other.shape
    }
}

pub const AXES: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Grid {
    pub fn new(dims: [usize; 3], lo: [f64; 3], hi: [f64; 3], shape: DomainShape) -> Result<Arc<Grid>> {
        if dims.iter().any(|&n| n < 8) {
            return Err(Error::InvalidGrid(format!("dims {dims:?} must be at least 8 per axis")));
        }
        let mut spacing = [0.0; 3];
        for d in 0..3 {
            if !(hi[d] > lo[d]) || !lo[d].is_finite() || !hi[d].is_finite() {
                return Err(Error::InvalidGrid(format!("empty box along axis {d}")));
            }
            spacing[d] = (hi[d] - lo[d]) / (dims[d] - 1) as f64;
        }
        let (elo, ehi) = shape.extent();
        for d in 0..3 {
            let margin = 2.0 * spacing[d];
            if elo[d] < lo[d] + margin || ehi[d] > hi[d] - margin {
                return Err(Error::InvalidGrid(format!(
                    "domain must stay {margin:.3} inside the grid box along axis {d}"
                )));
            }
        }
        if let DomainShape::Ball { radius, .. } = shape {
            if !(radius > 0.0) {
                return Err(Error::InvalidGrid("ball radius must be positive".into()));
            }
        }
        let mut grid = Grid {
            dims,
            lo,
            hi,
            shape,
            spacing,
            domain: Domain {
                role: Vec::new(),
                interior: Vec::new(),
                interior_index: Vec::new(),
                boundary: Vec::new(),
                boundary_index: Vec::new(),
                areas: Vec::new(),
                normals: Vec::new(),
                flux_normals: Vec::new(),
            },
            mesh: OnceLock::new(),
        };
        grid.domain = grid.build_domain();
        if grid.domain.interior.is_empty() {
            return Err(Error::InvalidGrid("domain contains no grid nodes".into()));
        }
        Ok(Arc::new(grid))
    }

    /// Cubic grid with `n` nodes per axis over `[lo, hi]³` and a centered ball.
    pub fn cube_ball(n: usize, lo: f64, hi: f64, radius: f64) -> Result<Arc<Grid>> {
        Grid::new(
            [n; 3],
            [lo; 3],
            [hi; 3],
            DomainShape::Ball {
                center: [0.0; 3],
                radius,
            },
        )
    }

    /// The default 32³ grid over [-1.5, 1.5]³ with the unit ball.
    pub fn default_ball(n: usize) -> Result<Arc<Grid>> {
        Grid::cube_ball(n, -1.5, 1.5, 1.0)
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn position(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        [
            self.lo[0] + c[0] as f64 * self.spacing[0],
            self.lo[1] + c[1] as f64 * self.spacing[1],
            self.lo[2] + c[2] as f64 * self.spacing[2],
        ]
    }

    /// Stride of the flat index along axis `d`.
    #[inline]
    pub fn stride(&self, d: usize) -> usize {
        match d {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    /// Neighbor of `idx` one step along axis `d` in direction `sign` (±1), if inside the box.
    #[inline]
    pub fn neighbor(&self, idx: usize, d: usize, sign: i32) -> Option<usize> {
        let c = self.coords(idx)[d];
        if sign > 0 {
            (c + 1 < self.dims[d]).then(|| idx + self.stride(d))
        } else {
            (c > 0).then(|| idx - self.stride(d))
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Area of a cell face orthogonal to axis `d`.
    pub fn face_area(&self, d: usize) -> f64 {
        let s = self.spacing;
        match d {
            0 => s[1] * s[2],
            1 => s[0] * s[2],
            _ => s[0] * s[1],
        }
    }

    /// FFT period along each axis (number of nodes times spacing).
    pub fn period(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Edge flux stencil, built on first use.
    pub fn mesh(&self) -> &EdgeMesh {
        self.mesh.get_or_init(|| EdgeMesh::build(self))
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn role(&self, idx: usize) -> NodeRole {
        self.domain.role[idx]
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.domain.role[idx] == NodeRole::Interior
    }

    /// Interior or boundary node.
    pub fn is_active(&self, idx: usize) -> bool {
        self.domain.role[idx] != NodeRole::Exterior
    }

    pub fn n_interior(&self) -> usize {
        self.domain.interior.len()
    }

    pub fn n_boundary(&self) -> usize {
        self.domain.boundary.len()
    }

    /// Characteristic function of the continuous domain sampled at nodes.
    pub fn inside(&self, x: [f64; 3]) -> bool {
        self.shape.level(x) < 0.0
    }

    fn build_domain(&self) -> Domain {
        let n = self.len();
        let mut role = vec![NodeRole::Exterior; n];
        for (idx, r) in role.iter_mut().enumerate() {
            if self.inside(self.position(idx)) {
                *r = NodeRole::Interior;
            }
        }
        // Nodes on the outermost layer of the box never carry unknowns.
        for (idx, r) in role.iter_mut().enumerate() {
            let c = self.coords(idx);
            if (0..3).any(|d| c[d] == 0 || c[d] + 1 == self.dims[d]) {
                *r = NodeRole::Exterior;
            }
        }
        let mut boundary_mark = vec![false; n];
        for idx in 0..n {
            if role[idx] != NodeRole::Interior {
                continue;
            }
            for d in 0..3 {
                for s in [-1, 1] {
                    if let Some(nb) = self.neighbor(idx, d, s) {
                        if role[nb] == NodeRole::Exterior {
                            boundary_mark[nb] = true;
                        }
                    }
                }
            }
        }
        for idx in 0..n {
            if boundary_mark[idx] {
                role[idx] = NodeRole::Boundary;
            }
        }
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        let mut interior_index = vec![NONE; n];
        let mut boundary_index = vec![NONE; n];
        for idx in 0..n {
            match role[idx] {
                NodeRole::Interior => {
                    interior_index[idx] = interior.len() as u32;
                    interior.push(idx);
                }
                NodeRole::Boundary => {
                    boundary_index[idx] = boundary.len() as u32;
                    boundary.push(idx);
                }
                NodeRole::Exterior => {}
            }
        }
        let mut areas = Vec::with_capacity(boundary.len());
        let mut normals = Vec::with_capacity(boundary.len());
        let mut flux_normals = Vec::with_capacity(boundary.len());
        for &b in &boundary {
            let xb = self.position(b);
            let mut nvec = [0.0; 3];
            let mut area = 0.0;
            for d in 0..3 {
                for s in [-1, 1] {
                    let Some(i) = self.neighbor(b, d, s) else { continue };
                    if role[i] != NodeRole::Interior {
                        continue;
                    }
                    // Outward face direction points from the interior node i to b.
                    let sign = -(s as f64);
                    let fa = self.face_area(d);
                    nvec[d] += sign * fa;
                    let xi = self.position(i);
                    let xf = [
                        0.5 * (xi[0] + xb[0]),
                        0.5 * (xi[1] + xb[1]),
                        0.5 * (xi[2] + xb[2]),
                    ];
                    area += match self.shape {
                        DomainShape::Ball { center, radius } => {
                            radius * radius * self.face_solid_angle(xf, d, sign, center)
                        }
                        DomainShape::Box { .. } => fa,
                    };
                }
            }
            let normal = match self.shape {
                DomainShape::Ball { center, .. } => normalize(sub(xb, center)),
                DomainShape::Box { .. } => normalize(nvec),
            };
            areas.push(area);
            normals.push(normal);
            flux_normals.push(nvec);
        }
        Domain {
            role,
            interior,
            interior_index,
            boundary,
            boundary_index,
            areas,
            normals,
            flux_normals,
        }
    }

    /// Signed solid angle subtended at `c` by the axis-aligned cell face centered at `xf`,
    /// orthogonal to axis `d`, with outward orientation `sign`·e_d.
    fn face_solid_angle(&self, xf: [f64; 3], d: usize, sign: f64, c: [f64; 3]) -> f64 {
        let (t1, t2) = ((d + 1) % 3, (d + 2) % 3);
        let (h1, h2) = (0.5 * self.spacing[t1], 0.5 * self.spacing[t2]);
        let corner = |a: f64, b: f64| {
            let mut p = sub(xf, c);
            p[t1] += a * h1;
            p[t2] += b * h2;
            p
        };
        let p = [corner(-1.0, -1.0), corner(1.0, -1.0), corner(1.0, 1.0), corner(-1.0, 1.0)];
        let omega = triangle_solid_angle(p[0], p[1], p[2]) + triangle_solid_angle(p[0], p[2], p[3]);
        let facing = sign * (xf[d] - c[d]);
        omega.abs() * facing.signum()
    }

    /// Nodes of a scaled copy of the domain (e.g. 0.8·Ω) as a mask.
    pub fn subdomain_mask(&self, factor: f64) -> Vec<bool> {
        let shape = self.shape.scaled(factor);
        (0..self.len())
            .map(|i| self.is_interior(i) && shape.level(self.position(i)) < 0.0)
            .collect()
    }
}

/// Solid angle of the triangle (a, b, c) seen from the origin.
fn triangle_solid_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let (la, lb, lc) = (norm(a), norm(b), norm(c));
    let num = dot(a, cross(b, c));
    let den = la * lb * lc + dot(a, b) * lc + dot(a, c) * lb + dot(b, c) * la;
    2.0 * num.atan2(den)
}

#[inline]
pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

fn check_len(grid: &Grid, n: usize) -> Result<()> {
    if n != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} values, got {n}",
            grid.len()
        )));
    }
    Ok(())
}

/// Real values at every grid node.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite field value".into()));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        ScalarField {
            grid: grid.clone(),
            values: vec![0.0; grid.len()],
        }
    }

    pub fn constant(grid: &Arc<Grid>, c: f64) -> Self {
        ScalarField {
            grid: grid.clone(),
            values: vec![c; grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_complex(&self) -> ComplexScalarField {
        ComplexScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    /// Minimum over interior and boundary nodes.
    pub fn min_on_domain(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.is_active(*i))
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Three real components at every grid node.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub grid: Arc<Grid>,
    pub values: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(grid: Arc<Grid>, values: Vec<[f64; 3]>) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite field value".into()));
        }
        Ok(VectorField { grid, values })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        VectorField {
            grid: grid.clone(),
            values: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        VectorField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn component(&self, d: usize) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v[d]).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        VectorField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| [c * v[0], c * v[1], c * v[2]]).collect(),
        }
    }
}

/// Complex values at every grid node.
#[derive(Debug, Clone)]
pub struct ComplexScalarField {
    pub grid: Arc<Grid>,
    pub values: Vec<Complex64>,
}

impl ComplexScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<Complex64>) -> Result<Self> {
        check_len(&grid, values.len())?;
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite field value".into()));
        }
        Ok(ComplexScalarField { grid, values })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        ComplexScalarField {
            grid: grid.clone(),
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        ComplexScalarField {
            grid: grid.clone(),
            values,
        }
    }

    pub fn re(&self) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v.re).collect(),
        }
    }

    pub fn im(&self) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v.im).collect(),
        }
    }
}

/// Values sampled on the boundary nodes of the discrete domain.
///
/// Normals and quadrature weights are shared with the grid.
#[derive(Debug, Clone)]
pub struct BoundaryTrace<T> {
    pub grid: Arc<Grid>,
    pub samples: Vec<T>,
}

pub type RealTrace = BoundaryTrace<f64>;
pub type ComplexTrace = BoundaryTrace<Complex64>;

impl<T: Copy + Default> BoundaryTrace<T> {
    pub fn new(grid: Arc<Grid>, samples: Vec<T>) -> Result<Self> {
        if samples.len() != grid.n_boundary() {
            return Err(Error::InvalidArgument(format!(
                "expected {} boundary samples, got {}",
                grid.n_boundary(),
                samples.len()
            )));
        }
        Ok(BoundaryTrace { grid, samples })
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        BoundaryTrace {
            grid: grid.clone(),
            samples: vec![T::default(); grid.n_boundary()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 3]) -> T) -> Self {
        let samples = grid
            .domain()
            .boundary
            .iter()
            .map(|&b| f(grid.position(b)))
            .collect();
        BoundaryTrace {
            grid: grid.clone(),
            samples,
        }
    }

    pub fn normals(&self) -> &[[f64; 3]] {
        &self.grid.domain().normals
    }

    pub fn areas(&self) -> &[f64] {
        &self.grid.domain().areas
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Full-grid array with the samples on boundary nodes and zero elsewhere.
    pub fn to_grid_values(&self) -> Vec<T> {
        let mut out = vec![T::default(); self.grid.len()];
        for (k, &b) in self.grid.domain().boundary.iter().enumerate() {
            out[b] = self.samples[k];
        }
        out
    }
}

impl RealTrace {
    pub fn to_field(&self) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.to_grid_values(),
        }
    }

    pub fn scale(&self, c: f64) -> RealTrace {
        BoundaryTrace {
            grid: self.grid.clone(),
            samples: self.samples.iter().map(|v| c * v).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn axpy(&self, a: f64, other: &RealTrace) -> RealTrace {
        BoundaryTrace {
            grid: self.grid.clone(),
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(x, y)| x + a * y)
                .collect(),
        }
    }
}

impl ComplexTrace {
    pub fn re(&self) -> RealTrace {
        BoundaryTrace {
            grid: self.grid.clone(),
            samples: self.samples.iter().map(|v| v.re).collect(),
        }
    }

    pub fn im(&self) -> RealTrace {
        BoundaryTrace {
            grid: self.grid.clone(),
            samples: self.samples.iter().map(|v| v.im).collect(),
        }
    }

    pub fn from_parts(re: &RealTrace, im: &RealTrace) -> ComplexTrace {
        BoundaryTrace {
            grid: re.grid.clone(),
            samples: re
                .samples
                .iter()
                .zip(&im.samples)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect(),
        }
    }
}

/// Samples a full-grid array at the boundary nodes.
pub fn boundary_restrict<T: Copy + Default>(grid: &Arc<Grid>, values: &[T]) -> BoundaryTrace<T> {
    let samples = grid.domain().boundary.iter().map(|&b| values[b]).collect();
    BoundaryTrace {
        grid: grid.clone(),
        samples,
    }
}

/// Quadrature of the product `g·w` over the discrete boundary (bilinear, no conjugation).
pub fn boundary_integral<T>(g: &BoundaryTrace<T>, w: &BoundaryTrace<T>) -> Result<T>
where
    T: Copy + Default + std::ops::Mul<Output = T> + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
{
    if g.grid != w.grid {
        return Err(Error::GridMismatch);
    }
    let areas = &g.grid.domain().areas;
    let mut acc = T::default();
    for k in 0..g.samples.len() {
        acc = acc + (g.samples[k] * w.samples[k]) * areas[k];
    }
    Ok(acc)
}

/// Centered differences in the box interior, second-order one-sided differences on box faces.
pub fn gradient(f: &ScalarField) -> VectorField {
    let g = &f.grid;
    let v = &f.values;
    let mut out = vec![[0.0; 3]; g.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let c = g.coords(idx);
        for d in 0..3 {
            let s = g.stride(d);
            let h = g.spacing[d];
            let n = g.dims[d];
            o[d] = if c[d] == 0 {
                (-3.0 * v[idx] + 4.0 * v[idx + s] - v[idx + 2 * s]) / (2.0 * h)
            } else if c[d] + 1 == n {
                (3.0 * v[idx] - 4.0 * v[idx - s] + v[idx - 2 * s]) / (2.0 * h)
            } else {
                (v[idx + s] - v[idx - s]) / (2.0 * h)
            };
        }
    }
    VectorField {
        grid: g.clone(),
        values: out,
    }
}

/// Discrete divergence with the same stencils as [`gradient`]; on fields vanishing near the box
/// faces it is the negative adjoint of [`gradient`].
pub fn divergence(field: &VectorField) -> ScalarField {
    let g = &field.grid;
    let v = &field.values;
    let mut out = vec![0.0; g.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let c = g.coords(idx);
        let mut acc = 0.0;
        for d in 0..3 {
            let s = g.stride(d);
            let h = g.spacing[d];
            let n = g.dims[d];
            acc += if c[d] == 0 {
                (-3.0 * v[idx][d] + 4.0 * v[idx + s][d] - v[idx + 2 * s][d]) / (2.0 * h)
            } else if c[d] + 1 == n {
                (3.0 * v[idx][d] - 4.0 * v[idx - s][d] + v[idx - 2 * s][d]) / (2.0 * h)
            } else {
                (v[idx + s][d] - v[idx - s][d]) / (2.0 * h)
            };
        }
        *o = acc;
    }
    ScalarField {
        grid: g.clone(),
        values: out,
    }
}

/// Seven-point Laplacian; zero on the outermost layer of the box.
pub fn laplacian(values: &[f64], grid: &Grid) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let c = grid.coords(idx);
        if (0..3).any(|d| c[d] == 0 || c[d] + 1 == grid.dims[d]) {
            continue;
        }
        let mut acc = 0.0;
        for d in 0..3 {
            let s = grid.stride(d);
            let h2 = grid.spacing[d] * grid.spacing[d];
            acc += (values[idx + s] - 2.0 * values[idx] + values[idx - s]) / h2;
        }
        *o = acc;
    }
    out
}

/// Grid inner product Σ f g h³ over all nodes.
pub fn inner(grid: &Grid, f: &[f64], g: &[f64]) -> f64 {
    f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * grid.cell_volume()
}

/// Relative L² difference ‖a − b‖/‖b‖ restricted to `mask`.
pub fn rel_l2(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.len() {
        if mask[i] {
            num += (a[i] - b[i]).powi(2);
            den += b[i] * b[i];
        }
    }
    (num / den).sqrt()
}
