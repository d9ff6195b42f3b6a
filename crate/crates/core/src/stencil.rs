//! Edge-based flux discretization on the discrete domain.
//!
//! Every edge joining two neighboring nodes with at least one interior endpoint carries a
//! flux. The along-edge gradient component is the edge difference; each transverse component
//! is the average over both endpoints of a nodal difference (centered when both neighbors are
//! active, one-sided otherwise). The stencil is exact for linear functions.

use crate::grid::{Grid, NodeRole};

/// A nodal difference contributing `coef·(u[plus] − u[minus])` to a transverse component.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub plus: u32,
    pub minus: u32,
    pub coef: f64,
}

#[derive(Debug, Clone)]
pub struct Edge {
    /// Lower endpoint.
    pub a: u32,
    /// Upper endpoint, `a` shifted by one step along `dir`.
    pub b: u32,
    pub dir: u8,
    /// Taps of the transverse components along axes (dir+1)%3 and (dir+2)%3, two per endpoint.
    pub taps: [[Tap; 2]; 2],
}

#[derive(Debug, Clone)]
pub struct EdgeMesh {
    pub edges: Vec<Edge>,
    pub inv_h: [f64; 3],
}

impl EdgeMesh {
    pub fn build(grid: &Grid) -> EdgeMesh {
        let mut edges = Vec::new();
        for a in 0..grid.len() {
            if !grid.is_active(a) {
                continue;
            }
            for d in 0..3 {
                let Some(b) = grid.neighbor(a, d, 1) else { continue };
                if !grid.is_active(b) {
                    continue;
                }
                if grid.role(a) != NodeRole::Interior && grid.role(b) != NodeRole::Interior {
                    continue;
                }
                let mut taps = [[Tap { plus: 0, minus: 0, coef: 0.0 }; 2]; 2];
                for (t, tap_pair) in taps.iter_mut().enumerate() {
                    let td = (d + 1 + t) % 3;
                    for (e, node) in [a, b].into_iter().enumerate() {
                        tap_pair[e] = nodal_tap(grid, node, td);
                    }
                }
                edges.push(Edge {
                    a: a as u32,
                    b: b as u32,
                    dir: d as u8,
                    taps,
                });
            }
        }
        EdgeMesh {
            edges,
            inv_h: grid.spacing.map(|h| 1.0 / h),
        }
    }

    /// Full edge gradient of `u` on edge `e` (components along x, y, z).
    #[inline]
    pub fn edge_gradient(&self, e: &Edge, u: &[f64]) -> [f64; 3] {
        let d = e.dir as usize;
        let mut g = [0.0; 3];
        g[d] = (u[e.b as usize] - u[e.a as usize]) * self.inv_h[d];
        for t in 0..2 {
            let td = (d + 1 + t) % 3;
            let mut acc = 0.0;
            for tap in &e.taps[t] {
                acc += tap.coef * (u[tap.plus as usize] - u[tap.minus as usize]);
            }
            g[td] = acc;
        }
        g
    }
}

/// Half of the nodal difference along `d` at `node` (the factor ½ averages the two endpoints).
fn nodal_tap(grid: &Grid, node: usize, d: usize) -> Tap {
    let h = grid.spacing[d];
    let up = grid.neighbor(node, d, 1).filter(|&n| grid.is_active(n));
    let dn = grid.neighbor(node, d, -1).filter(|&n| grid.is_active(n));
    let n32 = node as u32;
    match (up, dn) {
        (Some(p), Some(m)) => Tap {
            plus: p as u32,
            minus: m as u32,
            coef: 0.25 / h,
        },
        (Some(p), None) => Tap {
            plus: p as u32,
            minus: n32,
            coef: 0.5 / h,
        },
        (None, Some(m)) => Tap {
            plus: n32,
            minus: m as u32,
            coef: 0.5 / h,
        },
        (None, None) => Tap {
            plus: n32,
            minus: n32,
            coef: 0.0,
        },
    }
}
