//! LDLᵀ factorization of quasi-definite KKT matrices.
//!
//! The matrix is reordered with reverse Cuthill-McKee and stored as a
//! lower band. Pivots are not exchanged: a quasi-definite matrix admits an
//! LDLᵀ factorization under any symmetric permutation, and pivots that come
//! out with the wrong sign or too small are replaced by a small regularized
//! value, to be corrected afterwards by iterative refinement.

use std::collections::VecDeque;

/// Reverse Cuthill-McKee ordering. Returns `perm` with `perm[new] = old`.
pub(crate) fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut nbrs: Vec<usize> = Vec::new();

    while order.len() < n {
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited node exists");
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(adj[v].iter().copied().filter(|&u| !visited[u]));
            nbrs.sort_by_key(|&u| (degree[u], u));
            for &u in &nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// A symmetric quasi-definite matrix with a fixed sparsity pattern, stored in
/// permuted band form, together with its LDLᵀ factors.
#[derive(Debug, Clone)]
pub(crate) struct BandedKkt {
    n: usize,
    bw: usize,
    /// `iperm[old] = new`
    iperm: Vec<usize>,
    /// Expected pivot sign per *new* index.
    signs: Vec<f64>,
    /// Matrix values (lower band, row-major, width `bw + 1`, diagonal last).
    matrix: Vec<f64>,
    factor: Vec<f64>,
    d: Vec<f64>,
    work: Vec<f64>,
    resid: Vec<f64>,
    corr: Vec<f64>,
}

impl BandedKkt {
    /// `edges` lists off-diagonal structural nonzeros `(i, j)` in original
    /// indexing; `signs[i]` is +1 for primal rows and −1 for dual rows.
    pub(crate) fn new(n: usize, edges: &[(usize, usize)], signs: &[f64]) -> Self {
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let perm = reverse_cuthill_mckee(&adj);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let bw = edges
            .iter()
            .filter(|(i, j)| i != j)
            .map(|&(i, j)| iperm[i].abs_diff(iperm[j]))
            .max()
            .unwrap_or(0);
        let signs_new = perm.iter().map(|&old| signs[old]).collect();
        let w = bw + 1;
        Self {
            n,
            bw,
            iperm,
            signs: signs_new,
            matrix: vec![0.0; n * w],
            factor: vec![0.0; n * w],
            d: vec![0.0; n],
            work: vec![0.0; n],
            resid: vec![0.0; n],
            corr: vec![0.0; n],
        }
    }

    #[cfg(test)]
    pub(crate) fn bandwidth(&self) -> usize {
        self.bw
    }

    pub(crate) fn clear(&mut self) {
        self.matrix.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn slot(&self, pi: usize, pj: usize) -> usize {
        debug_assert!(pi >= pj && pi - pj <= self.bw);
        pi * (self.bw + 1) + (pj + self.bw - pi)
    }

    /// Adds `v` to entry `(i, j)` (and implicitly `(j, i)`). For `i != j`
    /// call once per unordered pair.
    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        let (pi, pj) = (self.iperm[i], self.iperm[j]);
        let s = if pi >= pj { self.slot(pi, pj) } else { self.slot(pj, pi) };
        self.matrix[s] += v;
    }

    /// Factors `matrix + diag(signs)·reg`. Pivots whose sign disagrees with
    /// the expected one, or whose magnitude falls under `pivot_eps`, are
    /// replaced by `signs[i]·pivot_reg`.
    pub(crate) fn factorize(&mut self, reg: f64, pivot_eps: f64, pivot_reg: f64) {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        self.factor.copy_from_slice(&self.matrix);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row_i = i * w;
            for j in j0..i {
                let row_j = j * w;
                let mut sum = self.factor[row_i + (j + bw - i)];
                for k in j0..j {
                    sum -= self.factor[row_i + (k + bw - i)]
                        * self.factor[row_j + (k + bw - j)]
                        * self.d[k];
                }
                self.factor[row_i + (j + bw - i)] = sum / self.d[j];
            }
            let mut dii = self.factor[row_i + bw] + self.signs[i] * reg;
            for k in j0..i {
                let l = self.factor[row_i + (k + bw - i)];
                dii -= l * l * self.d[k];
            }
            if dii * self.signs[i] < pivot_eps {
                dii = self.signs[i] * pivot_reg;
            }
            self.d[i] = dii;
        }
    }

    /// Solves with the factors, in place, in original ordering.
    fn solve_factored(&mut self, x: &mut [f64]) {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let y = &mut self.work;
        for (old, &v) in x.iter().enumerate() {
            y[self.iperm[old]] = v;
        }
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let mut sum = y[i];
            for k in j0..i {
                sum -= self.factor[i * w + (k + bw - i)] * y[k];
            }
            y[i] = sum;
        }
        for i in 0..n {
            y[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            let upto = (i + bw + 1).min(n);
            let mut sum = y[i];
            for k in (i + 1)..upto {
                sum -= self.factor[k * w + (i + bw - k)] * y[k];
            }
            y[i] = sum;
        }
        for (old, v) in x.iter_mut().enumerate() {
            *v = y[self.iperm[old]];
        }
    }

    /// `out = M x` with the unregularized matrix, original ordering.
    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let bw = self.bw;
        let w = bw + 1;
        let mut xp = vec![0.0; n];
        for (old, &v) in x.iter().enumerate() {
            xp[self.iperm[old]] = v;
        }
        let mut yp = vec![0.0; n];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let row = i * w;
            yp[i] += self.matrix[row + bw] * xp[i];
            for j in j0..i {
                let a = self.matrix[row + (j + bw - i)];
                if a != 0.0 {
                    yp[i] += a * xp[j];
                    yp[j] += a * xp[i];
                }
            }
        }
        for (old, v) in out.iter_mut().enumerate() {
            *v = yp[self.iperm[old]];
        }
    }

    /// Solves `M x = rhs` (unregularized `M`), refining the regularized
    /// solve up to `refine` times. `rhs` is overwritten with the solution.
    pub(crate) fn solve(&mut self, rhs: &mut [f64], refine: usize) {
        let b = rhs.to_vec();
        self.solve_factored(rhs);
        let bnorm = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for _ in 0..refine {
            let mut r = std::mem::take(&mut self.resid);
            self.matvec(rhs, &mut r);
            let mut rnorm = 0.0f64;
            for (ri, bi) in r.iter_mut().zip(&b) {
                *ri = bi - *ri;
                rnorm = rnorm.max(ri.abs());
            }
            if rnorm <= 1e-14 * (1.0 + bnorm) {
                self.resid = r;
                break;
            }
            let mut c = std::mem::take(&mut self.corr);
            c.copy_from_slice(&r);
            self.solve_factored(&mut c);
            for (x, dx) in rhs.iter_mut().zip(&c) {
                *x += dx;
            }
            self.corr = c;
            self.resid = r;
        }
    }
}
