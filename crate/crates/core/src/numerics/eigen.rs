use super::Matrix;
use crate::error::{Error, Result};

/// Largest order accepted by the Jacobi solver.
pub const MAX_JACOBI_ORDER: usize = 256;
/// Asymmetry tolerated (and averaged away) before eigensolves.
pub const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

fn check_symmetric(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!("expected a square matrix, got {}x{}", m.rows(), m.cols())));
    }
    if m.rows() == 0 || m.rows() > MAX_JACOBI_ORDER {
        return Err(Error::Shape(format!(
            "order {} outside 1..={MAX_JACOBI_ORDER}",
            m.rows()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Shape("matrix has non-finite entries".into()));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::Shape(format!("matrix is asymmetric by {asym:e}")));
    }
    Ok(m.symmetrized())
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
///
/// Sweeps continue until the off-diagonal Frobenius norm drops below `tol`,
/// which bounds the error of every returned eigenvalue by `tol`.
pub fn symmetric_eigenvalues(m: &Matrix, tol: f64) -> Result<Vec<f64>> {
    let mut a = check_symmetric(m)?;
    let n = a.rows();
    let tol = tol.max(0.0);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) < tol || n == 1 {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                rotated = true;
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    let new_rp = c * arp - s * arq;
                    let new_rq = s * arp + c * arq;
                    a[(r, p)] = new_rp;
                    a[(p, r)] = new_rp;
                    a[(r, q)] = new_rq;
                    a[(q, r)] = new_rq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix, accurate to `tol`.
pub fn min_eigenvalue(m: &Matrix, tol: f64) -> Result<f64> {
    Ok(symmetric_eigenvalues(m, tol)?[0])
}

/// Solves `M x = b` for symmetric positive definite `M` by Cholesky factorization.
pub fn solve_spd(m: &Matrix, b: &Matrix) -> Result<Matrix> {
    let sym = check_symmetric(m)?;
    let n = sym.rows();
    if b.rows() != n {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, expected {n}",
            b.rows()
        )));
    }
    let lambda_min = min_eigenvalue(&sym, 1e-13)?;
    if lambda_min <= 1e-10 {
        return Err(Error::Definiteness { eigenvalue: lambda_min });
    }

    // Lower-triangular factor, row-major.
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = sym[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 {
            return Err(Error::Definiteness { eigenvalue: lambda_min });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = sym[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }

    let mut x = b.clone();
    for col in 0..b.cols() {
        // L y = b
        for i in 0..n {
            let mut v = x[(i, col)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = v / l[(i, i)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = x[(i, col)];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = v / l[(i, i)];
        }
    }
    Ok(x)
}
