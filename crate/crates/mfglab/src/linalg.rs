//! Sparse linear algebra used by the implicit solvers: CSR storage, ILU(0)
//! preconditioning, BiCGSTAB, and inverse-power iteration for extremal
//! eigenpairs of weighted-self-adjoint operators.

use crate::error::{MfgError, Result};

/// Compressed sparse row matrix with sorted column indices per row.
#[derive(Debug, Clone)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// Triplet accumulator; duplicate entries are summed on build.
#[derive(Debug)]
pub struct CsrBuilder {
    n: usize,
    triplets: Vec<(usize, usize, f64)>,
}

impl CsrBuilder {
    pub fn new(n: usize) -> Self {
        CsrBuilder {
            n,
            triplets: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        CsrBuilder {
            n,
            triplets: Vec::with_capacity(nnz),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        if val != 0.0 {
            self.triplets.push((row, col, val));
        }
    }

    pub fn build(mut self) -> Csr {
        self.triplets
            .sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Csr::from_sorted(self.n, std::mem::take(&mut self.triplets))
    }
}

impl Csr {
    fn from_sorted(n: usize, entries: Vec<(usize, usize, f64)>) -> Csr {
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals = Vec::with_capacity(entries.len());
        for (r, c, v) in entries {
            if !cols.is_empty() && row_ptr[r + 1] == cols.len() && cols.last() == Some(&c) {
                // same row, same column: accumulate
                let last = vals.last_mut().unwrap();
                *last += v;
                continue;
            }
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] = cols.len();
        }
        // forward-fill empty rows
        for r in 1..=n {
            if row_ptr[r] < row_ptr[r - 1] {
                row_ptr[r] = row_ptr[r - 1];
            }
        }
        Csr {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        debug_assert_eq!(y.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        match self.cols[lo..hi].binary_search(&col) {
            Ok(k) => self.vals[lo + k],
            Err(_) => 0.0,
        }
    }

    /// Add `shift` to every diagonal entry. The diagonal must be present in
    /// the sparsity pattern (true for every operator assembled here).
    pub fn shift_diagonal(&mut self, shift: f64) {
        for row in 0..self.n {
            let lo = self.row_ptr[row];
            let hi = self.row_ptr[row + 1];
            match self.cols[lo..hi].binary_search(&row) {
                Ok(k) => self.vals[lo + k] += shift,
                Err(_) => panic!("diagonal entry missing in row {row}"),
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Copy of the matrix with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Csr {
        let mut out = self.clone();
        for v in &mut out.vals {
            *v *= factor;
        }
        out
    }

    /// Add `add[i]` to the i-th diagonal entry. The diagonal must be present
    /// in the sparsity pattern.
    pub fn add_diagonal(&mut self, add: &[f64]) {
        assert_eq!(add.len(), self.n, "diagonal length mismatch");
        for row in 0..self.n {
            let lo = self.row_ptr[row];
            let hi = self.row_ptr[row + 1];
            match self.cols[lo..hi].binary_search(&row) {
                Ok(k) => self.vals[lo + k] += add[row],
                Err(_) => panic!("diagonal entry missing in row {row}"),
            }
        }
    }

    /// Iterate over the (column, value) entries of one row.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.cols[lo..hi].iter().copied().zip(self.vals[lo..hi].iter().copied())
    }

    /// Row-sum infinity norm.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| {
                self.vals[self.row_ptr[i]..self.row_ptr[i + 1]]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// Zero-fill incomplete LU factorization. Requires a nonzero diagonal in the
/// pattern. For tridiagonal matrices this is the exact LU factorization.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag_ptr: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &Csr) -> Result<Ilu0> {
        let n = a.n;
        let row_ptr = a.row_ptr.clone();
        let cols = a.cols.clone();
        let mut vals = a.vals.clone();
        let mut diag_ptr = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                if cols[k] == i {
                    diag_ptr[i] = k;
                }
            }
            if diag_ptr[i] == usize::MAX {
                return Err(MfgError::LinearSolve {
                    residual: f64::NAN,
                    iterations: 0,
                });
            }
        }
        // IKJ variant restricted to the existing pattern
        let mut col_pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                col_pos[cols[k]] = k;
            }
            let mut k = row_ptr[i];
            while k < row_ptr[i + 1] && cols[k] < i {
                let pivot_row = cols[k];
                let pivot = vals[diag_ptr[pivot_row]];
                if pivot == 0.0 {
                    return Err(MfgError::LinearSolve {
                        residual: f64::NAN,
                        iterations: 0,
                    });
                }
                let factor = vals[k] / pivot;
                vals[k] = factor;
                for kk in diag_ptr[pivot_row] + 1..row_ptr[pivot_row + 1] {
                    let j = cols[kk];
                    let pos = col_pos[j];
                    if pos != usize::MAX {
                        vals[pos] -= factor * vals[kk];
                    }
                }
                k += 1;
            }
            for k in row_ptr[i]..row_ptr[i + 1] {
                col_pos[cols[k]] = usize::MAX;
            }
        }
        Ok(Ilu0 {
            n,
            row_ptr,
            cols,
            vals,
            diag_ptr,
        })
    }

    /// z = (LU)^{-1} r with unit lower-triangular L.
    pub fn solve(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        for i in 0..self.n {
            let mut acc = z[i];
            for k in self.row_ptr[i]..self.diag_ptr[i] {
                acc -= self.vals[k] * z[self.cols[k]];
            }
            z[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = z[i];
            for k in self.diag_ptr[i] + 1..self.row_ptr[i + 1] {
                acc -= self.vals[k] * z[self.cols[k]];
            }
            z[i] = acc / self.vals[self.diag_ptr[i]];
        }
    }
}

/// Preconditioner choice for the Krylov solver.
#[derive(Debug, Clone)]
pub enum Precond {
    Identity,
    Jacobi(Vec<f64>),
    Ilu(Box<Ilu0>),
}

impl Precond {
    pub fn jacobi(a: &Csr) -> Precond {
        Precond::Jacobi(
            a.diagonal()
                .into_iter()
                .map(|d| if d.abs() > 0.0 { 1.0 / d } else { 1.0 })
                .collect(),
        )
    }

    pub fn ilu(a: &Csr) -> Result<Precond> {
        Ok(Precond::Ilu(Box::new(Ilu0::new(a)?)))
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Precond::Identity => z.copy_from_slice(r),
            Precond::Jacobi(inv_diag) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv_diag) {
                    *zi = ri * di;
                }
            }
            Precond::Ilu(f) => f.solve(r, z),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned BiCGSTAB. Solves a x = b in place starting from the
/// content of `x`; converges when ||b - a x||_2 <= tol * max(||b||_2, tiny).
pub fn bicgstab(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    pre: &Precond,
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = a.n();
    let bnorm = norm2(b).max(f64::MIN_POSITIVE.sqrt());
    let target = tol * bnorm;
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut rnorm = norm2(&r);
    if rnorm <= target {
        return Ok(SolveStats {
            iterations: 0,
            residual: rnorm,
        });
    }
    let mut r_shadow = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut restarts = 0usize;
    let mut iter = 0usize;
    while iter < max_iter {
        iter += 1;
        let rho_new = dot(&r_shadow, &r);
        if rho_new.abs() < 1e-300 || omega.abs() < 1e-300 {
            // Lanczos breakdown: restart with the current residual
            restarts += 1;
            if restarts > 10 {
                break;
            }
            r_shadow.copy_from_slice(&r);
            p.iter_mut().for_each(|z| *z = 0.0);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pre.apply(&p, &mut p_hat);
        a.matvec(&p_hat, &mut v);
        let denom = dot(&r_shadow, &v);
        if denom.abs() < 1e-300 {
            restarts += 1;
            if restarts > 10 {
                break;
            }
            r_shadow.copy_from_slice(&r);
            p.iter_mut().for_each(|z| *z = 0.0);
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            continue;
        }
        alpha = rho / denom;
        // s = r - alpha v (reuse r)
        for i in 0..n {
            r[i] -= alpha * v[i];
        }
        if norm2(&r) <= target {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            rnorm = norm2(&r);
            return Ok(SolveStats {
                iterations: iter,
                residual: rnorm,
            });
        }
        pre.apply(&r, &mut s_hat);
        a.matvec(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &r) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
        }
        for i in 0..n {
            r[i] -= omega * t[i];
        }
        rnorm = norm2(&r);
        if rnorm <= target {
            return Ok(SolveStats {
                iterations: iter,
                residual: rnorm,
            });
        }
    }
    Err(MfgError::LinearSolve {
        residual: rnorm / bnorm,
        iterations: iter,
    })
}

/// Smallest eigenpair of a matrix that is self-adjoint in the inner product
/// <x, y>_W = sum w_i x_i y_i, by inverse iteration on (A - shift I). The
/// shift must lie strictly below the smallest eigenvalue. Returns the
/// W-normalized eigenvector with nonnegative mean orientation.
pub fn smallest_eigenpair(
    a: &Csr,
    weights: &[f64],
    shift: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(f64, Vec<f64>)> {
    let n = a.n();
    let mut shifted = a.clone();
    shifted.shift_diagonal(-shift);
    let pre = Precond::ilu(&shifted)?;
    let mut x = vec![1.0; n];
    let wdot = |u: &[f64], v: &[f64]| -> f64 {
        u.iter()
            .zip(v)
            .zip(weights)
            .map(|((a, b), w)| a * b * w)
            .sum()
    };
    let mut y = vec![0.0; n];
    let mut ax = vec![0.0; n];
    let mut lambda;
    let mut last_res = f64::INFINITY;
    let inner_tol = (0.1 * tol).max(1e-13);
    for _ in 0..max_iter {
        let nrm = wdot(&x, &x).sqrt();
        if !(nrm > 0.0) {
            return Err(MfgError::LinearSolve {
                residual: f64::NAN,
                iterations: 0,
            });
        }
        x.iter_mut().for_each(|v| *v /= nrm);
        y.copy_from_slice(&x);
        bicgstab(&shifted, &x, &mut y, &pre, inner_tol, 20 * n + 200)?;
        let ynrm = wdot(&y, &y).sqrt();
        y.iter_mut().for_each(|v| *v /= ynrm);
        a.matvec(&y, &mut ax);
        lambda = wdot(&y, &ax);
        // W-norm of the eigen-residual A y - lambda y
        let res = {
            let mut s = 0.0;
            for i in 0..n {
                let d = ax[i] - lambda * y[i];
                s += weights[i] * d * d;
            }
            s.sqrt()
        };
        x.copy_from_slice(&y);
        last_res = res;
        if res <= tol * (1.0 + lambda.abs()) {
            let orient: f64 = x.iter().zip(weights).map(|(v, w)| v * w).sum();
            if orient < 0.0 {
                x.iter_mut().for_each(|v| *v = -*v);
            }
            return Ok((lambda, x));
        }
    }
    Err(MfgError::LinearSolve {
        residual: last_res,
        iterations: max_iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize, lower: f64, diag: f64, upper: f64) -> Csr {
        let mut b = CsrBuilder::new(n);
        for i in 0..n {
            if i > 0 {
                b.add(i, i - 1, lower);
            }
            b.add(i, i, diag);
            if i + 1 < n {
                b.add(i, i + 1, upper);
            }
        }
        b.build()
    }

    #[test]
    fn builder_sorts_and_merges_duplicates() {
        let mut b = CsrBuilder::new(3);
        b.add(2, 0, 1.0);
        b.add(0, 2, 3.0);
        b.add(0, 0, 1.0);
        b.add(0, 0, 1.5);
        b.add(1, 1, 2.0);
        let a = b.build();
        assert_eq!(a.nnz(), 4);
        assert_eq!(a.get(0, 0), 2.5);
        assert_eq!(a.get(0, 2), 3.0);
        assert_eq!(a.get(2, 0), 1.0);
        let x = [1.0, 2.0, 3.0];
        let mut y = [0.0; 3];
        a.matvec(&x, &mut y);
        assert_eq!(y, [2.5 + 9.0, 4.0, 1.0]);
    }

    #[test]
    fn empty_rows_are_handled() {
        let mut b = CsrBuilder::new(4);
        b.add(0, 0, 1.0);
        b.add(3, 3, 2.0);
        let a = b.build();
        let x = [1.0; 4];
        let mut y = [0.0; 4];
        a.matvec(&x, &mut y);
        assert_eq!(y, [1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn ilu0_is_exact_on_tridiagonal() {
        let n = 50;
        let a = tridiag(n, -1.0, 2.1, -1.0);
        let f = Ilu0::new(&a).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut z = vec![0.0; n];
        f.solve(&b, &mut z);
        let mut r = vec![0.0; n];
        a.matvec(&z, &mut r);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-10, "row {i}");
        }
    }

    #[test]
    fn bicgstab_solves_spd_system() {
        let n = 200;
        let a = tridiag(n, -1.0, 2.0, -1.0);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).cos()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&x_true, &mut b);
        for pre in [Precond::Identity, Precond::jacobi(&a), Precond::ilu(&a).unwrap()] {
            let mut x = vec![0.0; n];
            let stats = bicgstab(&a, &b, &mut x, &pre, 1e-12, 4000).unwrap();
            let err: f64 = x
                .iter()
                .zip(&x_true)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-7, "err {err} after {} iters", stats.iterations);
        }
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_system() {
        // upwind convection-diffusion: -u'' + 20 u' on a grid, M-matrix
        let n = 300;
        let h = 1.0 / (n as f64 + 1.0);
        let conv = 20.0;
        let a = tridiag(
            n,
            -1.0 / (h * h) - conv / h,
            2.0 / (h * h) + conv / h,
            -1.0 / (h * h),
        );
        let x_true: Vec<f64> = (0..n).map(|i| ((i as f64) * h * 3.0).sin()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&x_true, &mut b);
        let pre = Precond::ilu(&a).unwrap();
        let mut x = vec![0.0; n];
        bicgstab(&a, &b, &mut x, &pre, 1e-13, 2000).unwrap();
        let err: f64 = x
            .iter()
            .zip(&x_true)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn smallest_eigenpair_of_dirichlet_laplacian() {
        // tridiag(-1, 2, -1)/h^2 has eigenvalues (2 - 2 cos(k pi h)) / h^2,
        // h = 1/(n+1), smallest at k = 1
        let n = 80;
        let h = 1.0 / (n as f64 + 1.0);
        let a = tridiag(n, -1.0 / (h * h), 2.0 / (h * h), -1.0 / (h * h));
        let w = vec![h; n];
        let (lam, v) = smallest_eigenpair(&a, &w, -1.0, 1e-11, 200).unwrap();
        let expected = (2.0 - 2.0 * (std::f64::consts::PI * h).cos()) / (h * h);
        assert!((lam - expected).abs() < 1e-7 * expected, "{lam} vs {expected}");
        // eigenvector proportional to sin(pi x), positive after orientation
        assert!(v.iter().all(|&vi| vi > 0.0));
    }

    #[test]
    fn shift_diagonal_changes_only_diagonal() {
        let mut a = tridiag(5, -1.0, 2.0, -1.0);
        a.shift_diagonal(0.5);
        assert_eq!(a.get(2, 2), 2.5);
        assert_eq!(a.get(2, 1), -1.0);
    }
}
