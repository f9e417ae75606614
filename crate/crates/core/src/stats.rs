//! Sample moments, Pearson correlation and linear CCA.

use crate::linalg::{cholesky, solve_triangular, sym_eigen, LinalgError, Matrix};

pub fn column_means(x: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols()).map(|c| x.col(c).iter().sum::<f64>() / n).collect()
}

/// Unbiased sample cross-covariance of the columns of `x` and `y`.
pub fn cross_covariance(x: &Matrix, y: &Matrix) -> Matrix {
    assert_eq!(x.rows(), y.rows(), "row counts differ");
    let (mx, my) = (column_means(x), column_means(y));
    let n = x.rows();
    let mut c = Matrix::zeros(x.cols(), y.cols());
    for r in 0..n {
        let (xr, yr) = (x.row(r), y.row(r));
        for i in 0..x.cols() {
            let dx = xr[i] - mx[i];
            for j in 0..y.cols() {
                c[(i, j)] += dx * (yr[j] - my[j]);
            }
        }
    }
    c.scale(1.0 / (n.max(2) - 1) as f64)
}

pub fn covariance(x: &Matrix) -> Matrix {
    let mut c = cross_covariance(x, x);
    c.symmetrize();
    c
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len().max(2) - 1) as f64
}

/// Standard error of the mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Pearson correlation, clamped to `[-1, 1]`. Zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Least-squares slope of `y` on `x` with its standard error.
pub fn ols_slope(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my - slope * (a - mx)).powi(2))
        .sum();
    let dof = (x.len() as f64 - 2.0).max(1.0);
    (slope, (resid / dof / sxx).sqrt())
}

/// Linear canonical correlation analysis between two views.
#[derive(Debug, Clone)]
pub struct Cca {
    /// Canonical correlations, descending.
    pub corrs: Vec<f64>,
    /// Columns map centred `x` rows to unit-variance canonical variates.
    pub x_dirs: Matrix,
    pub y_dirs: Matrix,
    pub x_mean: Vec<f64>,
    pub y_mean: Vec<f64>,
}

impl Cca {
    pub fn mean_corr(&self) -> f64 {
        mean(&self.corrs)
    }
}

/// Ridge added to each view's covariance before whitening.
pub const CCA_RIDGE: f64 = 1e-9;

/// CCA via whitening and an eigendecomposition of `M Mᵀ`, `M = Lx⁻¹ Cxy Ly⁻ᵀ`.
///
/// Returns `min(p, q)` pairs; `y_dirs` is completed by Gram-Schmidt where a
/// correlation vanishes so that all variates stay unit-variance and uncorrelated.
pub fn cca(x: &Matrix, y: &Matrix) -> Result<Cca, LinalgError> {
    let (p, q) = (x.cols(), y.cols());
    let r = p.min(q);
    let lx = cholesky(&covariance(x).add_diag(CCA_RIDGE))?;
    let ly = cholesky(&covariance(y).add_diag(CCA_RIDGE))?;
    let cxy = cross_covariance(x, y);
    // M = Lx⁻¹ Cxy Ly⁻ᵀ = (Ly⁻¹ (Lx⁻¹ Cxy)ᵀ)ᵀ
    let t = solve_triangular(&lx, &cxy, false)?;
    let m = solve_triangular(&ly, &t.transpose(), false)?.transpose();
    let (vals, u) = sym_eigen(&m.matmul_t(&m)?)?;
    let corrs: Vec<f64> = vals[..r].iter().map(|v| v.max(0.0).sqrt().min(1.0)).collect();
    let u = u.slice_cols(0, r);

    let mut v = m.t_matmul(&u)?;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r);
    for i in 0..r {
        let mut col = v.col(i);
        if corrs[i] < 1e-8 {
            col = (0..q).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
        }
        for attempt in 0..=q {
            for b in &basis {
                let proj = crate::linalg::dot(&col, b);
                col.iter_mut().zip(b).for_each(|(c, bv)| *c -= proj * bv);
            }
            let norm = crate::linalg::dot(&col, &col).sqrt();
            if norm > 1e-8 {
                col.iter_mut().for_each(|c| *c /= norm);
                break;
            }
            col = (0..q).map(|j| if j == attempt % q { 1.0 } else { 0.0 }).collect();
        }
        basis.push(col);
    }
    for (i, b) in basis.iter().enumerate() {
        for j in 0..q {
            v[(j, i)] = b[j];
        }
    }
    Ok(Cca {
        corrs,
        x_dirs: solve_triangular(&lx, &u, true)?,
        y_dirs: solve_triangular(&ly, &v, true)?,
        x_mean: column_means(x),
        y_mean: column_means(y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::rng_stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(variance(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
        let (s, se) = ols_slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]);
        assert!((s - 2.0).abs() < 1e-15 && se < 1e-12);
    }

    #[test]
    fn cca_recovers_planted_correlations() {
        let mut rng = rng_stream(3, 0);
        let n = 20_000;
        let rhos = [0.9, 0.5, 0.0];
        let mut x = Matrix::zeros(n, 3);
        let mut y = Matrix::zeros(n, 3);
        for r in 0..n {
            for (i, rho) in rhos.iter().enumerate() {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                x[(r, i)] = a;
                y[(r, i)] = rho * a + (1.0 - rho * rho).sqrt() * b;
            }
        }
        // mix the views so CCA has to undo the rotation
        let mix = Matrix::from_rows(&[[1.0, 0.5, 0.0], [0.2, 1.0, 0.3], [0.0, -0.4, 2.0]]);
        let x = x.matmul(&mix).unwrap();
        let y = y.matmul(&mix.transpose()).unwrap();
        let c = cca(&x, &y).unwrap();
        for (got, want) in c.corrs.iter().zip(rhos) {
            assert!((got - want).abs() < 0.03, "{got} vs {want}");
        }
        let cx = x.matmul(&c.x_dirs).unwrap();
        let cy = y.matmul(&c.y_dirs).unwrap();
        let cov_x = covariance(&cx);
        assert!(cov_x.max_abs_diff(&Matrix::identity(3)) < 1e-8);
        assert!(covariance(&cy).max_abs_diff(&Matrix::identity(3)) < 1e-8);
        let cross = cross_covariance(&cx, &cy);
        for i in 0..3 {
            assert!((cross[(i, i)] - c.corrs[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cca_on_identical_views_is_one() {
        let mut rng = rng_stream(4, 0);
        let x = Matrix::from_fn(500, 2, |_, _| rng.sample(StandardNormal));
        let c = cca(&x, &x).unwrap();
        assert!(c.corrs.iter().all(|r| *r > 0.999));
    }
}
