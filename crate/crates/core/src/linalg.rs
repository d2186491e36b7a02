//! Dense linear algebra helpers shared by the clustering and estimation code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Eigendecomposition of a real symmetric matrix via cyclic Jacobi rotations.
///
/// Returns eigenvalues ascending with matching eigenvectors as columns.
/// Deterministic; converges quadratically once off-diagonal mass is small.
pub fn symmetric_eigen(a: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let p = a.nrows();
    assert_eq!(p, a.ncols(), "matrix must be square");
    let mut m = a.to_owned();
    let mut v: Array2<f64> = Array2::eye(p);

    let max_sweeps = 100;
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..p {
            for j in (i + 1)..p {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= 1e-14 * (1.0 + frobenius(&m.view())) {
            converged = true;
            break;
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let apq = m[(i, j)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(i, i)];
                let aqq = m[(j, j)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/columns i and j
                for k in 0..p {
                    let mik = m[(i, k)];
                    let mjk = m[(j, k)];
                    m[(i, k)] = c * mik - s * mjk;
                    m[(j, k)] = s * mik + c * mjk;
                }
                for k in 0..p {
                    let mki = m[(k, i)];
                    let mkj = m[(k, j)];
                    m[(k, i)] = c * mki - s * mkj;
                    m[(k, j)] = s * mki + c * mkj;
                }
                for k in 0..p {
                    let vki = v[(k, i)];
                    let vkj = v[(k, j)];
                    v[(k, i)] = c * vki - s * vkj;
                    v[(k, j)] = s * vki + c * vkj;
                }
            }
        }
    }
    if !converged {
        return Err(Error::EigenNoConvergence { sweeps: max_sweeps });
    }

    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[(i, i)]));
    let mut eigenvectors = Array2::zeros((p, p));
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..p {
            eigenvectors[(k, new_col)] = v[(k, old_col)];
        }
    }
    Ok((eigenvalues, eigenvectors))
}

fn frobenius(a: &ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The `count` smallest eigenpairs of a symmetric matrix whose spectrum lies
/// in [0, 2] (a normalized Laplacian). Uses the full Jacobi decomposition at
/// moderate sizes and block orthogonal iteration on 2I - L beyond that.
pub fn smallest_eigenpairs(
    l: ArrayView2<'_, f64>,
    count: usize,
    seed: u64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let p = l.nrows();
    assert!(count <= p);
    if p <= 2000 {
        let (vals, vecs) = symmetric_eigen(l)?;
        let slice_vals = vals.slice(ndarray::s![..count]).to_owned();
        let slice_vecs = vecs.slice(ndarray::s![.., ..count]).to_owned();
        return Ok((slice_vals, slice_vecs));
    }

    // shifted operator: largest eigenpairs of 2I - L are the smallest of L
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::from_shape_fn((p, count), |_| rng.random::<f64>() - 0.5);
    orthonormalize_columns(&mut q);
    let mut prev = Array1::zeros(count);
    let max_iters = 5000;
    for iter in 0..max_iters {
        let mut z = q.clone() * 2.0;
        z -= &l.dot(&q);
        orthonormalize_columns(&mut z);
        // Rayleigh quotients under L
        let lz = l.dot(&z);
        let mut vals = Array1::zeros(count);
        for c in 0..count {
            vals[c] = z.column(c).dot(&lz.column(c));
        }
        let delta = vals
            .iter()
            .zip(prev.iter())
            .map(|(a, b): (&f64, &f64)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        q = z;
        prev = vals.clone();
        if delta < 1e-12 && iter > 10 {
            let mut order: Vec<usize> = (0..count).collect();
            order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
            let sorted_vals = Array1::from_iter(order.iter().map(|&i| vals[i]));
            let mut sorted_vecs = Array2::zeros((p, count));
            for (new_c, &old_c) in order.iter().enumerate() {
                sorted_vecs.column_mut(new_c).assign(&q.column(old_c));
            }
            return Ok((sorted_vals, sorted_vecs));
        }
    }
    Err(Error::EigenNoConvergence { sweeps: max_iters })
}

/// In-place modified Gram-Schmidt on the columns of `q`.
fn orthonormalize_columns(q: &mut Array2<f64>) {
    let cols = q.ncols();
    for c in 0..cols {
        for prev in 0..c {
            let proj = q.column(prev).dot(&q.column(c));
            let prev_col = q.column(prev).to_owned();
            let mut col = q.column_mut(c);
            col.scaled_add(-proj, &prev_col);
        }
        let norm = q.column(c).dot(&q.column(c)).sqrt();
        if norm > 1e-300 {
            q.column_mut(c).mapv_inplace(|x| x / norm);
        }
    }
}

/// Orthonormal basis of the column span of `a` (modified Gram-Schmidt,
/// columns with norm below `tol` relative to the input scale are dropped).
pub fn column_span_basis(a: ArrayView2<'_, f64>, tol: f64) -> Array2<f64> {
    let (m, n) = a.dim();
    let scale = frobenius(&a).max(1.0);
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for j in 0..n {
        let mut v = a.column(j).to_owned();
        for b in &basis {
            let proj = b.dot(&v);
            v.scaled_add(-proj, b);
        }
        // re-orthogonalize once for numerical safety
        for b in &basis {
            let proj = b.dot(&v);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > tol * scale {
            basis.push(v / norm);
        }
    }
    let rank = basis.len();
    let mut out = Array2::zeros((m, rank));
    for (j, b) in basis.iter().enumerate() {
        out.column_mut(j).assign(b);
    }
    out
}

/// Numerical rank of the column set at relative tolerance `tol`.
pub fn column_rank(a: ArrayView2<'_, f64>, tol: f64) -> usize {
    column_span_basis(a, tol).ncols()
}

/// Minimum-norm least-squares solution of `a x ~= y` via eigendecomposition
/// of the Gram matrix. Never fails on rank deficiency.
pub fn min_norm_least_squares(a: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let n = a.ncols();
    if n == 0 {
        return Ok(Array1::zeros(0));
    }
    let gram = a.t().dot(&a);
    let rhs = a.t().dot(&y);
    let (vals, vecs) = symmetric_eigen(gram.view())?;
    let max_val = vals.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs()));
    let cutoff = max_val * 1e-12;
    let mut x = Array1::zeros(n);
    for i in 0..n {
        let lambda = vals[i];
        if lambda.abs() > cutoff && lambda > 0.0 {
            let coeff = vecs.column(i).dot(&rhs) / lambda;
            x.scaled_add(coeff, &vecs.column(i));
        }
    }
    Ok(x)
}

/// Solve a square system by Gaussian elimination with partial pivoting.
/// Returns None when the matrix is singular at the given tolerance.
pub fn solve_square(a: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, tol: f64) -> Option<Array1<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, y.len());
    let mut aug = Array2::zeros((n, n + 1));
    aug.slice_mut(ndarray::s![.., ..n]).assign(&a);
    aug.column_mut(n).assign(&y);

    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if aug[(r, col)].abs() > aug[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if aug[(pivot, col)].abs() <= tol {
            return None;
        }
        if pivot != col {
            for c in 0..=n {
                let tmp = aug[(col, c)];
                aug[(col, c)] = aug[(pivot, c)];
                aug[(pivot, c)] = tmp;
            }
        }
        for r in (col + 1)..n {
            let factor = aug[(r, col)] / aug[(col, col)];
            if factor != 0.0 {
                for c in col..=n {
                    aug[(r, c)] -= factor * aug[(col, c)];
                }
            }
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut acc = aug[(row, n)];
        for c in (row + 1)..n {
            acc -= aug[(row, c)] * x[c];
        }
        x[row] = acc / aug[(row, row)];
    }
    Some(x)
}

/// Gather the given columns of a matrix into a fresh dense matrix.
pub fn gather_columns(a: ArrayView2<'_, f64>, cols: &[usize]) -> Array2<f64> {
    let m = a.nrows();
    let mut out = Array2::zeros((m, cols.len()));
    for (dst, &src) in cols.iter().enumerate() {
        out.column_mut(dst).assign(&a.column(src));
    }
    out
}

/// Gather the given rows of a matrix into a fresh dense matrix.
pub fn gather_rows(a: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    let n = a.ncols();
    let mut out = Array2::zeros((rows.len(), n));
    for (dst, &src) in rows.iter().enumerate() {
        out.row_mut(dst).assign(&a.row(src));
    }
    out
}

/// Euclidean norm of the residual after projecting `y` off the column span
/// of `a`: the exact least-squares distance, computed without solving for
/// weights.
pub fn projection_residual_norm(a: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    let basis = column_span_basis(a, 1e-10);
    let mut r = y.to_owned();
    for j in 0..basis.ncols() {
        let proj = basis.column(j).dot(&r);
        let col = basis.column(j).to_owned();
        r.scaled_add(-proj, &col);
    }
    // second pass tightens the projection near rank boundaries
    for j in 0..basis.ncols() {
        let proj = basis.column(j).dot(&r);
        let col = basis.column(j).to_owned();
        r.scaled_add(-proj, &col);
    }
    r.dot(&r).sqrt()
}

#[allow(unused_imports)]
use ndarray::s;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(a.view()).unwrap();
        assert_abs_diff_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
        // A v = lambda v
        for i in 0..2 {
            let av = a.dot(&vecs.column(i));
            for k in 0..2 {
                assert_abs_diff_eq!(av[k], vals[i] * vecs[(k, i)], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn jacobi_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 12;
        let mut a = Array2::zeros((p, p));
        for i in 0..p {
            for j in i..p {
                let v = rng.random::<f64>() - 0.5;
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        let (vals, vecs) = symmetric_eigen(a.view()).unwrap();
        // V diag(vals) V^T == A
        let mut recon = Array2::<f64>::zeros((p, p));
        for i in 0..p {
            let vi = vecs.column(i).to_owned();
            for r in 0..p {
                for c in 0..p {
                    recon[(r, c)] += vals[i] * vi[r] * vi[c];
                }
            }
        }
        for r in 0..p {
            for c in 0..p {
                assert_abs_diff_eq!(recon[(r, c)], a[(r, c)], epsilon = 1e-9);
            }
        }
        // ascending order
        for i in 1..p {
            assert!(vals[i] >= vals[i - 1]);
        }
    }

    #[test]
    fn min_norm_solution_handles_rank_deficiency() {
        // duplicate columns: solution should split weight evenly (min norm)
        let a = array![[1.0, 1.0], [1.0, 1.0], [-1.0, -1.0]];
        let y = array![2.0, 2.0, -2.0];
        let x = min_norm_least_squares(a.view(), y.view()).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn least_squares_residual_orthogonal_to_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = Array2::from_shape_fn((8, 3), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        let y = Array1::from_shape_fn(8, |_| rng.random::<f64>() * 2.0 - 1.0);
        let x = min_norm_least_squares(a.view(), y.view()).unwrap();
        let r = &a.dot(&x) - &y;
        for j in 0..3 {
            assert_abs_diff_eq!(a.column(j).dot(&r), 0.0, epsilon = 1e-8);
        }
        // projection-based distance agrees with the solved residual norm
        let d = projection_residual_norm(a.view(), y.view());
        assert_abs_diff_eq!(d, r.dot(&r).sqrt(), epsilon = 1e-8);
    }

    #[test]
    fn solve_square_matches_known_inverse() {
        let a = array![[2.0, 0.0], [0.0, 4.0]];
        let y = array![2.0, 8.0];
        let x = solve_square(a.view(), y.view(), 1e-12).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
        let singular = array![[1.0, 1.0], [1.0, 1.0]];
        assert!(solve_square(singular.view(), y.view(), 1e-12).is_none());
    }

    #[test]
    fn column_rank_detects_dependence() {
        let a = array![[1.0, 2.0, 1.0], [0.0, 0.0, 1.0], [1.0, 2.0, 0.0]];
        assert_eq!(column_rank(a.view(), 1e-10), 2);
        let full = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(column_rank(full.view(), 1e-10), 2);
    }
}
