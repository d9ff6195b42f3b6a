//! Restarted GMRES with right preconditioning, for real and complex systems.

use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;

pub trait Scalar:
    Copy
    + Default
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn conj(self) -> Self;
    fn modulus(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f64 {
    fn conj(self) -> Self {
        self
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn from_f64(x: f64) -> Self {
        x
    }
}

impl Scalar for Complex64 {
    fn conj(self) -> Self {
        Complex64::conj(&self)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
}

pub fn dotc<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter()
        .zip(y)
        .fold(T::default(), |acc, (&a, &b)| acc + a.conj() * b)
}

pub fn norm2<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.modulus().powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOptions {
    /// Stop when ‖b − A x‖ ≤ tol·‖b‖.
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        GmresOptions {
            tol: 1e-10,
            max_iter: 200,
            restart: 40,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves A x = b starting from the given `x`. `precond` applies M⁻¹ (right preconditioning).
pub fn gmres<T: Scalar>(
    mut apply: impl FnMut(&[T], &mut [T]),
    mut precond: impl FnMut(&[T], &mut [T]),
    b: &[T],
    x: &mut [T],
    opts: GmresOptions,
) -> GmresOutcome {
    let n = b.len();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = T::default());
        return GmresOutcome {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let m = opts.restart.max(1);
    let mut total = 0usize;
    let mut r = vec![T::default(); n];
    let mut tmp = vec![T::default(); n];
    let mut z = vec![T::default(); n];
    loop {
        apply(x, &mut tmp);
        for i in 0..n {
            r[i] = b[i] - tmp[i];
        }
        let beta = norm2(&r);
        let rel = beta / bnorm;
        if rel <= opts.tol || total >= opts.max_iter {
            return GmresOutcome {
                iterations: total,
                relative_residual: rel,
                converged: rel <= opts.tol,
            };
        }
        let mut v: Vec<Vec<T>> = Vec::with_capacity(m + 1);
        v.push(r.iter().map(|&a| a / beta).collect());
        let mut h = vec![vec![T::default(); m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![T::default(); m];
        let mut g = vec![T::default(); m + 1];
        g[0] = T::from_f64(beta);
        let mut k_done = 0;
        for j in 0..m {
            precond(&v[j], &mut z);
            apply(&z, &mut tmp);
            let mut w = tmp.clone();
            for i in 0..=j {
                let hij = dotc(&v[i], &w);
                h[i][j] = hij;
                for t in 0..n {
                    w[t] = w[t] - v[i][t] * hij;
                }
            }
            let wn = norm2(&w);
            h[j + 1][j] = T::from_f64(wn);
            for i in 0..j {
                let a = h[i][j];
                let bb = h[i + 1][j];
                h[i][j] = a * cs[i] + sn[i] * bb;
                h[i + 1][j] = -(sn[i].conj() * a) + bb * cs[i];
            }
            let a = h[j][j];
            let bb = h[j + 1][j];
            let (c, s, rr) = givens(a, bb);
            cs[j] = c;
            sn[j] = s;
            h[j][j] = rr;
            h[j + 1][j] = T::default();
            g[j + 1] = -(s.conj() * g[j]);
            g[j] = g[j] * c;
            total += 1;
            k_done = j + 1;
            let res = g[j + 1].modulus() / bnorm;
            if res <= opts.tol || total >= opts.max_iter || wn == 0.0 {
                break;
            }
            v.push(w.iter().map(|&a| a / wn).collect());
        }
        // Back substitution for the Krylov coefficients.
        let mut y = vec![T::default(); k_done];
        for i in (0..k_done).rev() {
            let mut acc = g[i];
            for t in i + 1..k_done {
                acc = acc - h[i][t] * y[t];
            }
            y[i] = acc / h[i][i];
        }
        let mut upd = vec![T::default(); n];
        for (i, &yi) in y.iter().enumerate() {
            for t in 0..n {
                upd[t] = upd[t] + v[i][t] * yi;
            }
        }
        precond(&upd, &mut z);
        for t in 0..n {
            x[t] = x[t] + z[t];
        }
    }
}

fn givens<T: Scalar>(a: T, b: T) -> (f64, T, T) {
    let am = a.modulus();
    let bm = b.modulus();
    if bm == 0.0 {
        return (1.0, T::default(), a);
    }
    if am == 0.0 {
        return (0.0, T::from_f64(1.0) * (b.conj() / T::from_f64(bm)), T::from_f64(bm));
    }
    let rho = (am * am + bm * bm).sqrt();
    let phase = a / T::from_f64(am);
    let c = am / rho;
    let s = phase * b.conj() / T::from_f64(rho);
    (c, s, phase * T::from_f64(rho))
}
