//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Relative singular-value cutoff used for ranks and pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-10;

fn cutoff(singular: &DVector<f64>, rows: usize, cols: usize) -> f64 {
    let smax = singular.iter().cloned().fold(0.0, f64::max);
    smax * RANK_RTOL * rows.max(cols) as f64
}

/// Minimum-norm least-squares solution of `a x ≈ b` and the numerical rank of `a`.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    if a.nrows() == 0 || a.ncols() == 0 {
        return (DVector::zeros(a.ncols()), 0);
    }
    let svd = a.clone().svd(true, true);
    let eps = cutoff(&svd.singular_values, a.nrows(), a.ncols());
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if rank == 0 {
        return (DVector::zeros(a.ncols()), 0);
    }
    let x = svd.solve(b, eps).expect("u and v were computed");
    (x, rank)
}

/// Moore–Penrose inverse of a symmetric positive semidefinite matrix, plus its rank.
pub fn psd_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let smax = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, |acc: f64, x| acc.max(x.abs()));
    let eps = smax * RANK_RTOL * n as f64;
    let mut out = DMatrix::zeros(n, n);
    let mut rank = 0;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > eps {
            rank += 1;
            let u = eig.eigenvectors.column(i);
            out += (u * u.transpose()) / lam;
        }
    }
    (out, rank)
}

/// `x^T m x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

pub fn to_dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Rows stacked into a matrix with `d` columns.
pub fn stack_rows<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, d: usize) -> DMatrix<f64> {
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.iter().copied()).collect();
    DMatrix::from_row_slice(flat.len() / d.max(1), d, &flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstsq_picks_minimum_norm() {
        // x1 + x2 = 2 has minimum-norm solution (1, 1)
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let (x, rank) = min_norm_lstsq(&a, &DVector::from_vec(vec![2.0]));
        assert_eq!(rank, 1);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_one() {
        let u = DVector::from_vec(vec![3.0, 4.0]);
        let m = &u * u.transpose();
        let (p, rank) = psd_pinv(&m);
        assert_eq!(rank, 1);
        // u^T (u u^T)^+ u = 1
        assert!((quad_form(&p, &u) - 1.0).abs() < 1e-12);
    }
}
