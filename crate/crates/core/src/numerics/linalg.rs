//! Factorisations on small dense matrices: Jacobi SVD and eigensolver,
//! Householder QR, Gauss-Jordan inverse, matrix square root and exponential,
//! and a power iteration for symmetric operators.

use super::matrix::{dot_slices, Matrix};
use crate::error::{invalid, shape, Error, Result};

const JACOBI_MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `m = U · diag(S) · Vt`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.dot(&self.vt)
    }

    /// Number of singular values above `1e-10 · S_max`.
    pub fn rank(&self) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        if smax == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > 1e-10 * smax).count()
    }

    pub fn condition_number(&self) -> f64 {
        match (self.s.first(), self.s.last()) {
            (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
            (Some(_), Some(_)) => f64::INFINITY,
            _ => 1.0,
        }
    }
}

/// Thin SVD via one-sided (Hestenes) Jacobi rotations.
///
/// Singular values come out descending. Columns of `U` belonging to zero
/// singular values are completed to an orthonormal set, and each column of
/// `U` is signed so its first nonzero entry is non-negative.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        // m = (U S Vt)ᵀ = V S Uᵀ; re-sign so that the new U (old V) obeys the convention.
        let mut out = SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        };
        fix_signs(&mut out);
        return Ok(out);
    }
    let (rows, cols) = m.shape();
    // Work on columns: store Aᵀ so each column is a contiguous row.
    let mut a = m.transpose();
    let mut v = Matrix::identity(cols);
    let eps = f64::EPSILON;
    let mut converged = cols < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot_slices(a.row(p), a.row(p));
                let beta = dot_slices(a.row(q), a.row(q));
                let gamma = dot_slices(a.row(p), a.row(q));
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut a, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence("jacobi svd", JACOBI_MAX_SWEEPS));
    }

    let norms: Vec<f64> = (0..cols).map(|j| dot_slices(a.row(j), a.row(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let smax = order.first().map_or(0.0, |&j| norms[j]);
    let tiny = smax * 1e-14 * (rows.max(cols) as f64) + f64::MIN_POSITIVE;
    let mut u = Matrix::zeros(rows, cols);
    let mut s = Vec::with_capacity(cols);
    let mut vt = Matrix::zeros(cols, cols);
    let mut pending = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sj = norms[j];
        if sj > tiny {
            let col: Vec<f64> = a.row(j).iter().map(|x| x / sj).collect();
            u.set_column(k, &col);
            s.push(sj);
        } else {
            pending.push(k);
            s.push(0.0);
        }
        vt.row_mut(k).copy_from_slice(v.row(j));
    }
    complete_columns(&mut u, &pending);
    let mut out = SvdResult { u, s, vt };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.as_mut_slice();
    for k in 0..cols {
        let x = data[p * cols + k];
        let y = data[q * cols + k];
        data[p * cols + k] = c * x - s * y;
        data[q * cols + k] = s * x + c * y;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to every
/// other column, by Gram-Schmidt against the standard basis.
fn complete_columns(u: &mut Matrix, pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|k| !pending.contains(k)).collect();
    for &k in pending {
        let mut best: Option<Vec<f64>> = None;
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for _ in 0..2 {
                for &f in &filled {
                    let col = u.column(f);
                    let proj = dot_slices(&col, &cand);
                    for (c, x) in cand.iter_mut().zip(&col) {
                        *c -= proj * x;
                    }
                }
            }
            let n = dot_slices(&cand, &cand).sqrt();
            if n > 1e-6 {
                best = Some(cand.iter().map(|c| c / n).collect());
                break;
            }
        }
        if let Some(col) = best {
            u.set_column(k, &col);
            filled.push(k);
        }
    }
}

fn fix_signs(svd: &mut SvdResult) {
    let (rows, k) = svd.u.shape();
    for j in 0..k {
        let scale = (0..rows).fold(0.0f64, |m, i| m.max(svd.u[(i, j)].abs()));
        let first = (0..rows)
            .map(|i| svd.u[(i, j)])
            .find(|x| x.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE));
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..rows {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for x in svd.vt.row_mut(j) {
                *x = -*x;
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, matching `values`.
    pub vectors: Matrix,
}

impl SymEigen {
    /// `Q f(Λ) Qᵀ`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let q = &self.vectors;
        let n = q.rows();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        Matrix::from_fn(n, n, |i, j| (0..n).map(|k| q[(i, k)] * fl[k] * q[(j, k)]).sum())
    }
}

/// Cyclic Jacobi eigensolver. The input is symmetrised first; callers should
/// only pass matrices that are symmetric up to rounding.
pub fn sym_eigen(m: &Matrix) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(shape("sym_eigen needs a square matrix"));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("sym_eigen input"));
    }
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut q = Matrix::identity(n);
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        let total = a.frobenius_sq();
        if off <= 1e-30 * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = c * akp - s * akr;
                    a[(k, r)] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = c * apk - s * ark;
                    a[(r, k)] = s * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence("jacobi eigensolver", JACOBI_MAX_SWEEPS));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, k| q[(i, order[k])]);
    Ok(SymEigen { values, vectors })
}

/// Householder QR of a tall matrix; returns the thin `Q` (rows×cols) and the
/// upper-triangular `R` (cols×cols).
pub fn qr(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (rows, cols) = m.shape();
    if rows < cols {
        return Err(shape(format!("qr needs rows >= cols, got {rows}x{cols}")));
    }
    let mut r = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for k in 0..cols {
        let mut v: Vec<f64> = (k..rows).map(|i| r[(i, k)]).collect();
        let norm = dot_slices(&v, &v).sqrt();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vn = dot_slices(&v, &v).sqrt();
        if vn == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        for x in v.iter_mut() {
            *x /= vn;
        }
        for j in 0..cols {
            let proj: f64 = (k..rows).map(|i| v[i - k] * r[(i, j)]).sum();
            for i in k..rows {
                r[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
        reflectors.push(v);
    }
    let mut q = Matrix::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 });
    for k in (0..cols).rev() {
        let v = &reflectors[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..cols {
            let proj: f64 = (k..rows).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..rows {
                q[(i, j)] -= 2.0 * v[i - k] * proj;
            }
        }
    }
    let r = Matrix::from_fn(cols, cols, |i, j| if j >= i { r[(i, j)] } else { 0.0 });
    Ok((q, r))
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(shape("inverse needs a square matrix"));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap_or(col);
        let p = a[(pivot, col)];
        if p.abs() <= 1e-14 * scale {
            return Err(Error::Singular(f64::INFINITY));
        }
        if pivot != col {
            for k in 0..n {
                let (x, y) = (a[(col, k)], a[(pivot, k)]);
                a[(col, k)] = y;
                a[(pivot, k)] = x;
                let (x, y) = (inv[(col, k)], inv[(pivot, k)]);
                inv[(col, k)] = y;
                inv[(pivot, k)] = x;
            }
        }
        for k in 0..n {
            a[(col, k)] /= p;
            inv[(col, k)] /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[(i, col)];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[(i, k)] -= f * a[(col, k)];
                inv[(i, k)] -= f * inv[(col, k)];
            }
        }
    }
    Ok(inv)
}

/// Inverse that additionally rejects matrices with condition number above `max_cond`.
pub fn checked_inverse(m: &Matrix, max_cond: f64) -> Result<Matrix> {
    let c = condition_number(m)?;
    if c > max_cond {
        return Err(Error::Singular(c));
    }
    inverse(m)
}

pub fn condition_number(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.condition_number())
}

/// Symmetric PSD square root. Eigenvalues in `[-1e-12·max(1, λ_max), 0)` are
/// clamped to zero; anything more negative is rejected.
pub fn sqrtm_psd(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eigen(m)?;
    let lmax = eig.values.first().copied().unwrap_or(0.0);
    let floor = -1e-12 * lmax.abs().max(1.0);
    if let Some(&lmin) = eig.values.last() {
        if lmin < floor {
            return Err(Error::NotPsd(lmin));
        }
    }
    Ok(eig.map_values(|l| l.max(0.0).sqrt()))
}

/// Inverse square root of a symmetric positive-definite matrix.
pub fn inv_sqrtm_pd(m: &Matrix) -> Result<Matrix> {
    let eig = sym_eigen(m)?;
    let lmax = eig.values.first().copied().unwrap_or(0.0);
    match eig.values.last() {
        Some(&lmin) if lmin <= 1e-14 * lmax.abs().max(f64::MIN_POSITIVE) => {
            Err(Error::Singular(lmax / lmin.max(0.0)))
        }
        _ => Ok(eig.map_values(|l| 1.0 / l.sqrt())),
    }
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(shape("expm needs a square matrix"));
    }
    let n = m.rows();
    let norm = m.frobenius();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let a = m.scale(0.5f64.powi(squarings as i32));
    let mut term = Matrix::identity(n);
    let mut sum = Matrix::identity(n);
    for k in 1..=20 {
        term = term.dot(&a).scale(1.0 / k as f64);
        sum += &term;
        if term.max_abs() < 1e-18 * sum.max_abs() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.dot(&sum);
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite("expm result"));
    }
    Ok(sum)
}

/// Outcome of [`power_iteration`].
#[derive(Debug, Clone)]
pub struct PowerIteration {
    pub lambda: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Dominant eigenpair of a symmetric operator given only its action.
///
/// Stops once the Rayleigh quotient moves by less than `tol` between
/// iterations. The start vector is drawn from a fixed seed so results are
/// reproducible. On hitting `max_iter` the best estimate is returned with
/// `converged = false`.
pub fn power_iteration<F>(apply: F, dim: usize, tol: f64, max_iter: usize) -> Result<PowerIteration>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = super::rng::Rng::new(0x5eed_cafe);
    let start: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    power_iteration_from(apply, start, tol, max_iter)
}

/// [`power_iteration`] from a caller-provided start vector.
pub fn power_iteration_from<F>(
    mut apply: F,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<PowerIteration>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let dim = start.len();
    if dim == 0 {
        return Err(invalid("power iteration on a zero-dimensional operator"));
    }
    if tol <= 0.0 || max_iter == 0 {
        return Err(invalid("power iteration needs tol > 0 and max_iter >= 1"));
    }
    let mut v = start;
    let n0 = dot_slices(&v, &v).sqrt();
    if n0 == 0.0 {
        return Err(invalid("power iteration start vector is zero"));
    }
    v.iter_mut().for_each(|x| *x /= n0);
    let mut lambda = f64::NAN;
    for it in 1..=max_iter {
        let w = apply(&v)?;
        if w.len() != dim {
            return Err(shape("operator changed dimension"));
        }
        let next = dot_slices(&v, &w);
        let wn = dot_slices(&w, &w).sqrt();
        if !next.is_finite() || !wn.is_finite() {
            return Err(Error::NonFinite("power iteration"));
        }
        if wn == 0.0 {
            return Ok(PowerIteration { lambda: 0.0, vector: v, iterations: it, converged: true });
        }
        let done = (next - lambda).abs() < tol;
        lambda = next;
        v = w.iter().map(|x| x / wn).collect();
        if done {
            return Ok(PowerIteration { lambda, vector: v, iterations: it, converged: true });
        }
    }
    Ok(PowerIteration { lambda, vector: v, iterations: max_iter, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{gaussian_matrix, Rng};

    fn orthonormal_cols_err(m: &Matrix) -> f64 {
        (m.tr_dot(m) - Matrix::identity(m.cols())).max_abs()
    }

    #[test]
    fn svd_small_cases() {
        let s = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(s.s, vec![1.0, 1.0, 1.0]);

        let s = svd(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(s.s, vec![3.0, 1.0]);
        assert!((s.u.clone() - Matrix::identity(2)).max_abs() < 1e-15);
        assert!((s.vt.clone() - Matrix::identity(2)).max_abs() < 1e-15);

        let m = Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let s = svd(&m).unwrap();
        assert!((s.s[0] - 2.0).abs() < 1e-15 && s.s[1] == 0.0);
        assert!(orthonormal_cols_err(&s.u) < 1e-12);
        assert!(s.reconstruct().rel_diff(&m) < 1e-12);
        assert_eq!(s.rank(), 1);
    }

    #[test]
    fn svd_wide_and_tall() {
        let mut rng = Rng::new(3);
        for (r, c) in [(8, 5), (5, 8), (1, 4), (4, 1), (6, 6)] {
            let m = gaussian_matrix(&mut rng, r, c, None).unwrap();
            let s = svd(&m).unwrap();
            assert!(s.reconstruct().rel_diff(&m) < 1e-12, "{r}x{c}");
            assert!(orthonormal_cols_err(&s.u) < 1e-12);
            assert!(orthonormal_cols_err(&s.vt.transpose()) < 1e-12);
            assert!(s.s.windows(2).all(|w| w[0] >= w[1]));
            for j in 0..s.u.cols() {
                let first = s.u.column(j).into_iter().find(|x| x.abs() > 1e-12).unwrap();
                assert!(first > 0.0);
            }
        }
    }

    #[test]
    fn svd_rejects_nan() {
        let mut m = Matrix::zeros(2, 2);
        m.as_mut_slice()[0] = f64::NAN;
        assert!(svd(&m).is_err());
    }

    #[test]
    fn eigen_and_roots() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eigen(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        let r = sqrtm_psd(&m).unwrap();
        assert!(r.dot(&r).rel_diff(&m) < 1e-13);
        let ir = inv_sqrtm_pd(&m).unwrap();
        assert!(ir.dot(&r).rel_diff(&Matrix::identity(2)) < 1e-13);
        let neg = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(sqrtm_psd(&neg), Err(Error::NotPsd(_))));
        let marginal = Matrix::from_diag(&[1.0, -1e-14]);
        assert_eq!(sqrtm_psd(&marginal).unwrap()[(1, 1)], 0.0);
    }

    #[test]
    fn qr_and_inverse() {
        let mut rng = Rng::new(9);
        let m = gaussian_matrix(&mut rng, 6, 4, None).unwrap();
        let (q, r) = qr(&m).unwrap();
        assert!(orthonormal_cols_err(&q) < 1e-13);
        assert!(q.dot(&r).rel_diff(&m) < 1e-13);
        let sq = gaussian_matrix(&mut rng, 5, 5, None).unwrap();
        let inv = inverse(&sq).unwrap();
        assert!((sq.dot(&inv) - Matrix::identity(5)).max_abs() < 1e-10);
        assert!(inverse(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn expm_of_diagonal_and_rotation() {
        let e = expm(&Matrix::from_diag(&[1.0, -2.0])).unwrap();
        assert!((e[(0, 0)] - 1f64.exp()).abs() < 1e-13);
        assert!((e[(1, 1)] - (-2f64).exp()).abs() < 1e-14);
        let gen = Matrix::from_rows(&[vec![0.0, -3.0], vec![3.0, 0.0]]).unwrap();
        let rot = expm(&gen).unwrap();
        assert!((rot[(0, 0)] - 3f64.cos()).abs() < 1e-12);
        assert!((rot[(1, 0)] - 3f64.sin()).abs() < 1e-12);
    }

    fn dense_op(m: &Matrix) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + '_ {
        move |v| Ok(m.mat_vec(v))
    }

    #[test]
    fn power_iteration_examples() {
        let a = Matrix::from_diag(&[5.0, 1.0]);
        let p = power_iteration(dense_op(&a), 2, 1e-12, 1000).unwrap();
        assert!(p.converged && (p.lambda - 5.0).abs() < 1e-9);
        let b = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let p = power_iteration(dense_op(&b), 2, 1e-12, 1000).unwrap();
        assert!((p.lambda - 3.0).abs() < 1e-9);
        let id = Matrix::identity(7);
        let p = power_iteration(dense_op(&id), 7, 1e-12, 10).unwrap();
        assert!((p.lambda - 1.0).abs() < 1e-12);
        let norm: f64 = p.vector.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_reports_non_convergence() {
        // Equal-magnitude eigenvalues of opposite sign never settle.
        let a = Matrix::from_diag(&[1.0, -1.0]);
        let p = power_iteration_from(dense_op(&a), vec![1.0, 1.0], 1e-12, 5).unwrap();
        assert!(p.lambda.is_finite());
        assert!(p.iterations == 5 || p.converged);
    }
}
