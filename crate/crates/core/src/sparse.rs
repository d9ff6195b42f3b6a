//! Sparse symmetric matrices and a sparse Cholesky factorization with a geometric
//! nested-dissection ordering.

use std::ops::{Div, Mul, Sub};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> CsrMatrix {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            col_idx.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[self.col_idx[p]];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[i][self.col_idx[p]] += self.vals[p];
            }
        }
        d
    }
}

/// Orders points for low fill by recursive bisection along the longest extent,
/// numbering each separating plane after the two halves it separates.
pub fn nested_dissection(coords: &[[i32; 3]]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..coords.len()).collect();
    let mut order = Vec::with_capacity(coords.len());
    dissect(&mut ids, coords, &mut order);
    order
}

fn dissect(ids: &mut [usize], coords: &[[i32; 3]], order: &mut Vec<usize>) {
    if ids.len() <= 48 {
        order.extend_from_slice(ids);
        return;
    }
    let mut mn = [i32::MAX; 3];
    let mut mx = [i32::MIN; 3];
    for &i in ids.iter() {
        for d in 0..3 {
            mn[d] = mn[d].min(coords[i][d]);
            mx[d] = mx[d].max(coords[i][d]);
        }
    }
    let d = (0..3).max_by_key(|&d| (mx[d] - mn[d], -(d as i32))).unwrap();
    if mx[d] - mn[d] < 2 {
        order.extend_from_slice(ids);
        return;
    }
    let mid = mn[d] + (mx[d] - mn[d]) / 2;
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut sep = Vec::new();
    for &i in ids.iter() {
        match coords[i][d].cmp(&mid) {
            std::cmp::Ordering::Less => left.push(i),
            std::cmp::Ordering::Greater => right.push(i),
            std::cmp::Ordering::Equal => sep.push(i),
        }
    }
    dissect(&mut left, coords, order);
    dissect(&mut right, coords, order);
    order.extend_from_slice(&sep);
}

const NIL: usize = usize::MAX;

/// Cholesky factor P A Pᵀ = L Lᵀ of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl SparseCholesky {
    /// Factors `a` (full symmetric pattern) using the fill-reducing ordering `perm` (perm[new] = old).
    pub fn factor(a: &CsrMatrix, perm: Vec<usize>) -> Result<SparseCholesky> {
        let n = a.n;
        assert_eq!(perm.len(), n);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        // Upper triangle of the permuted matrix, by column: entries (i, k) with i <= k.
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for old_r in 0..n {
            let r = iperm[old_r];
            for p in a.row_ptr[old_r]..a.row_ptr[old_r + 1] {
                let c = iperm[a.col_idx[p]];
                if r <= c {
                    cols[c].push((r, a.vals[p]));
                }
            }
        }
        let parent = etree(&cols, n);
        let mut counts = vec![1usize; n];
        let mut mark = vec![NIL; n];
        let mut stack = vec![0usize; n];
        for k in 0..n {
            let top = ereach(&cols[k], k, &parent, &mut mark, &mut stack);
            for &j in &stack[top..] {
                counts[j] += 1;
            }
        }
        let mut lp = vec![0usize; n + 1];
        for j in 0..n {
            lp[j + 1] = lp[j] + counts[j];
        }
        let nnz = lp[n];
        let mut li = vec![0usize; nnz];
        let mut lx = vec![0.0f64; nnz];
        let mut next = lp[..n].to_vec();
        let mut x = vec![0.0f64; n];
        mark.iter_mut().for_each(|m| *m = NIL);
        for k in 0..n {
            let top = ereach(&cols[k], k, &parent, &mut mark, &mut stack);
            for &(i, v) in &cols[k] {
                x[i] += v;
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / lx[lp[i]];
                x[i] = 0.0;
                for p in lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::SingularOperator(format!(
                    "non-positive pivot {d:.3e} at row {k} of {n}"
                )));
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        Ok(SparseCholesky { n, perm, lp, li, lx })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.lx.len()
    }

    /// Solves A x = b in place for real or complex right-hand sides.
    pub fn solve_in_place<T>(&self, b: &mut [T])
    where
        T: Copy + Sub<Output = T> + Mul<f64, Output = T> + Div<f64, Output = T>,
    {
        let n = self.n;
        let mut y: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        for j in 0..n {
            let yj = y[j] / self.lx[self.lp[j]];
            y[j] = yj;
            for p in self.lp[j] + 1..self.lp[j + 1] {
                let i = self.li[p];
                y[i] = y[i] - yj * self.lx[p];
            }
        }
        for j in (0..n).rev() {
            let mut acc = y[j];
            for p in self.lp[j] + 1..self.lp[j + 1] {
                acc = acc - y[self.li[p]] * self.lx[p];
            }
            y[j] = acc / self.lx[self.lp[j]];
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = y[new];
        }
    }
}

fn etree(cols: &[Vec<(usize, f64)>], n: usize) -> Vec<usize> {
    let mut parent = vec![NIL; n];
    let mut ancestor = vec![NIL; n];
    for k in 0..n {
        for &(i0, _) in &cols[k] {
            let mut i = i0;
            while i != NIL && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NIL {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row k of L (excluding the diagonal), returned as stack[top..] in
/// topological order.
fn ereach(col: &[(usize, f64)], k: usize, parent: &[usize], mark: &mut [usize], stack: &mut [usize]) -> usize {
    let n = stack.len();
    let mut top = n;
    mark[k] = k;
    let mut path = Vec::new();
    for &(i0, _) in col {
        let mut i = i0;
        if i > k {
            continue;
        }
        path.clear();
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            i = parent[i];
        }
        while let Some(p) = path.pop() {
            top -= 1;
            stack[top] = p;
        }
    }
    top
}
