//! Discrete Fourier transforms on the grid box and the symmetric frequency lattice.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::grid::{ComplexScalarField, Grid};

/// In-place unnormalized 3-D DFT (x fastest). `inverse` uses the positive exponent.
pub fn fft3(values: &mut [Complex64], dims: [usize; 3], inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let [n0, n1, n2] = dims;
    let plan = |p: &mut FftPlanner<f64>, n: usize| {
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    };
    let f0 = plan(&mut planner, n0);
    for line in values.chunks_exact_mut(n0) {
        f0.process(line);
    }
    let f1 = plan(&mut planner, n1);
    let mut buf = vec![Complex64::default(); n1.max(n2)];
    for k in 0..n2 {
        for i in 0..n0 {
            let base = i + n0 * n1 * k;
            for j in 0..n1 {
                buf[j] = values[base + n0 * j];
            }
            f1.process(&mut buf[..n1]);
            for j in 0..n1 {
                values[base + n0 * j] = buf[j];
            }
        }
    }
    let f2 = plan(&mut planner, n2);
    let stride = n0 * n1;
    for base in 0..stride {
        for k in 0..n2 {
            buf[k] = values[base + stride * k];
        }
        f2.process(&mut buf[..n2]);
        for k in 0..n2 {
            values[base + stride * k] = buf[k];
        }
    }
}

/// Unitary forward DFT of a grid field.
pub fn fourier_forward(f: &ComplexScalarField) -> ComplexScalarField {
    let mut v = f.values.clone();
    fft3(&mut v, f.grid.dims, false);
    let s = 1.0 / (f.grid.len() as f64).sqrt();
    v.iter_mut().for_each(|z| *z *= s);
    ComplexScalarField {
        grid: f.grid.clone(),
        values: v,
    }
}

/// Unitary inverse DFT; `fourier_inverse(fourier_forward(f)) == f`.
pub fn fourier_inverse(f: &ComplexScalarField) -> ComplexScalarField {
    let mut v = f.values.clone();
    fft3(&mut v, f.grid.dims, true);
    let s = 1.0 / (f.grid.len() as f64).sqrt();
    v.iter_mut().for_each(|z| *z *= s);
    ComplexScalarField {
        grid: f.grid.clone(),
        values: v,
    }
}

/// Signed integer frequency index of DFT bin `j` out of `n`.
#[inline]
pub fn signed_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        // The Nyquist bin is taken as positive; callers needing symmetry avoid it.
        if 2 * j == n {
            -(j as i64)
        } else {
            j as i64
        }
    } else {
        j as i64 - n as i64
    }
}

/// Angular wavenumbers of every DFT bin along each axis.
pub fn wavenumbers(grid: &Grid) -> [Vec<f64>; 3] {
    let p = grid.period();
    let mk = |d: usize| {
        let n = grid.dims[d];
        (0..n)
            .map(|j| 2.0 * std::f64::consts::PI / p[d] * signed_index(j, n) as f64)
            .collect::<Vec<_>>()
    };
    [mk(0), mk(1), mk(2)]
}

/// Symmetric lattice of frequencies ξ = 2π m / P with |ξ| ≤ xi_max.
#[derive(Debug, Clone)]
pub struct FrequencyGrid {
    pub xi_points: Vec<[f64; 3]>,
    pub lattice: Vec<[i64; 3]>,
    pub xi_max: f64,
    pub spacing: [f64; 3],
    dims: [usize; 3],
    index: HashMap<[i64; 3], usize>,
}

impl FrequencyGrid {
    pub fn new(grid: &Grid, xi_max: f64) -> FrequencyGrid {
        let p = grid.period();
        let spacing = [
            2.0 * std::f64::consts::PI / p[0],
            2.0 * std::f64::consts::PI / p[1],
            2.0 * std::f64::consts::PI / p[2],
        ];
        let mut lattice = Vec::new();
        let lim = |d: usize| {
            let by_cut = (xi_max / spacing[d]).floor() as i64;
            // Keep strictly below Nyquist so that -m is also a distinct bin.
            by_cut.min((grid.dims[d] as i64 - 1) / 2)
        };
        let (l0, l1, l2) = (lim(0), lim(1), lim(2));
        for m2 in -l2..=l2 {
            for m1 in -l1..=l1 {
                for m0 in -l0..=l0 {
                    let xi = [
                        m0 as f64 * spacing[0],
                        m1 as f64 * spacing[1],
                        m2 as f64 * spacing[2],
                    ];
                    if (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt() <= xi_max + 1e-12 {
                        lattice.push([m0, m1, m2]);
                    }
                }
            }
        }
        lattice.sort_by_key(|m| (m[0] * m[0] + m[1] * m[1] + m[2] * m[2], m[2], m[1], m[0]));
        let xi_points = lattice
            .iter()
            .map(|m| {
                [
                    m[0] as f64 * spacing[0],
                    m[1] as f64 * spacing[1],
                    m[2] as f64 * spacing[2],
                ]
            })
            .collect();
        let index = lattice.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        FrequencyGrid {
            xi_points,
            lattice,
            xi_max,
            spacing,
            dims: grid.dims,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.xi_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi_points.is_empty()
    }

    /// Position of −ξ for the point at `i`.
    pub fn negate_index(&self, i: usize) -> usize {
        let m = self.lattice[i];
        self.index[&[-m[0], -m[1], -m[2]]]
    }

    /// True for the representative of each ±ξ pair (first nonzero index positive), and for ξ = 0.
    pub fn is_representative(&self, i: usize) -> bool {
        let m = self.lattice[i];
        for c in m {
            if c != 0 {
                return c > 0;
            }
        }
        true
    }

    /// Flat DFT bin of lattice point `i`.
    pub fn bin(&self, i: usize) -> usize {
        let m = self.lattice[i];
        let w = |d: usize| m[d].rem_euclid(self.dims[d] as i64) as usize;
        w(0) + self.dims[0] * (w(1) + self.dims[1] * w(2))
    }
}

/// Continuous Fourier transform ∫ f(x) e^{−iξ·x} dx of grid samples, evaluated at every DFT bin
/// by the rectangle rule.
pub fn continuous_transform(grid: &Grid, values: &[Complex64]) -> Vec<Complex64> {
    let mut v = values.to_vec();
    fft3(&mut v, grid.dims, false);
    let k = wavenumbers(grid);
    let vol = grid.cell_volume();
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        let phase = -(grid.lo[0] * k[0][c[0]] + grid.lo[1] * k[1][c[1]] + grid.lo[2] * k[2][c[2]]);
        v[idx] *= Complex64::from_polar(vol, phase);
    }
    v
}

/// Inverse of [`continuous_transform`] restricted to lattice points: (1/|P|) Σ t(ξ) e^{iξ·x}.
pub fn lattice_synthesis(grid: &Arc<Grid>, freq: &FrequencyGrid, t: &[Complex64]) -> ComplexScalarField {
    let mut v = vec![Complex64::default(); grid.len()];
    let p = grid.period();
    let vol = p[0] * p[1] * p[2];
    for (i, xi) in freq.xi_points.iter().enumerate() {
        let phase = grid.lo[0] * xi[0] + grid.lo[1] * xi[1] + grid.lo[2] * xi[2];
        v[freq.bin(i)] += t[i] * Complex64::from_polar(1.0 / vol, phase);
    }
    fft3(&mut v, grid.dims, true);
    ComplexScalarField {
        grid: grid.clone(),
        values: v,
    }
}

/// Applies a Fourier multiplier `symbol(k)` to a periodic field (unnormalized pair of transforms).
pub fn apply_multiplier(
    grid: &Grid,
    values: &mut [Complex64],
    symbol: impl Fn([f64; 3]) -> Complex64,
) {
    fft3(values, grid.dims, false);
    let k = wavenumbers(grid);
    let n = grid.len() as f64;
    for idx in 0..grid.len() {
        let c = grid.coords(idx);
        values[idx] *= symbol([k[0][c[0]], k[1][c[1]], k[2][c[2]]]) / n;
    }
    fft3(values, grid.dims, true);
}
