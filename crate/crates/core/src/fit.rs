//! Small weighted least-squares fits with standard errors and a condition
//! number for the column-scaled design.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub stderr: Vec<f64>,
    /// 2-norm condition number of the design with unit-norm columns.
    pub condition: f64,
    pub rss: f64,
    pub dof: usize,
}

/// Minimize `sum_i w_i (y_i - sum_k c_k X_k[i])^2`. Weights default to one.
pub fn least_squares(columns: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>) -> Result<LinearFit> {
    let k = columns.len();
    let n = y.len();
    if k == 0 || columns.iter().any(|c| c.len() != n) {
        bail!(InvalidParameter, "design columns must be non-empty and match the data length");
    }
    if n < k {
        bail!(InvalidParameter, "{n} points cannot determine {k} coefficients");
    }
    let sw: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != n || w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                bail!(InvalidParameter, "weights must be finite, non-negative and match the data");
            }
            w.iter().map(|v| math::sqrt(*v)).collect()
        }
        None => vec![1.0; n],
    };
    // weighted, column-normalized design
    let mut q: Vec<Vec<f64>> = columns
        .iter()
        .map(|c| c.iter().zip(&sw).map(|(x, s)| x * s).collect::<Vec<f64>>())
        .collect();
    let mut scale = vec![0.0; k];
    for j in 0..k {
        let nrm = math::sqrt(q[j].iter().map(|v| v * v).sum::<f64>());
        if !(nrm > 0.0 && nrm.is_finite()) {
            bail!(IllConditioned, "design column {j} is zero or non-finite");
        }
        scale[j] = nrm;
        for v in q[j].iter_mut() {
            *v /= nrm;
        }
    }
    let yw: Vec<f64> = y.iter().zip(&sw).map(|(a, s)| a * s).collect();

    // condition number from the Gram matrix of the normalized columns
    let mut gram = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let d: f64 = q[a].iter().zip(&q[b]).map(|(x, z)| x * z).sum();
            gram[a][b] = d;
            gram[b][a] = d;
        }
    }
    let eig = symmetric_eigenvalues(gram);
    let (lmin, lmax) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let condition = if lmin <= 0.0 { f64::INFINITY } else { math::sqrt(lmax / lmin) };

    // modified Gram-Schmidt QR
    let mut r = vec![vec![0.0; k]; k];
    for j in 0..k {
        for i in 0..j {
            let d: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
            r[i][j] = d;
            for t in 0..n {
                let v = q[i][t];
                q[j][t] -= d * v;
            }
        }
        let nrm = math::sqrt(q[j].iter().map(|v| v * v).sum::<f64>());
        if nrm < 1e-14 {
            bail!(IllConditioned, "design columns are linearly dependent (condition {condition:.3e})");
        }
        r[j][j] = nrm;
        for v in q[j].iter_mut() {
            *v /= nrm;
        }
    }
    let qty: Vec<f64> = (0..k).map(|j| q[j].iter().zip(&yw).map(|(a, b)| a * b).sum()).collect();
    let mut c = vec![0.0; k];
    for j in (0..k).rev() {
        let mut s = qty[j];
        for i in j + 1..k {
            s -= r[j][i] * c[i];
        }
        c[j] = s / r[j][j];
    }
    let mut rss = 0.0;
    for i in 0..n {
        let mut pred = 0.0;
        for j in 0..k {
            pred += columns[j][i] * c[j] / scale[j];
        }
        let e = (y[i] - pred) * sw[i];
        rss += e * e;
    }
    // (R^T R)^{-1} diagonal via R^{-1}
    let mut rinv = vec![vec![0.0; k]; k];
    for j in 0..k {
        rinv[j][j] = 1.0 / r[j][j];
        for i in (0..j).rev() {
            let mut s = 0.0;
            for l in i + 1..=j {
                s += r[i][l] * rinv[l][j];
            }
            rinv[i][j] = -s / r[i][i];
        }
    }
    let dof = n - k;
    let sigma2 = if dof > 0 { rss / dof as f64 } else { 0.0 };
    let stderr: Vec<f64> = (0..k)
        .map(|j| {
            let v: f64 = (j..k).map(|l| rinv[j][l] * rinv[j][l]).sum();
            math::sqrt(sigma2 * v) / scale[j]
        })
        .collect();
    let coef: Vec<f64> = (0..k).map(|j| c[j] / scale[j]).collect();
    if coef.iter().any(|v| !v.is_finite()) {
        bail!(NonFinite, "least-squares coefficients are not finite");
    }
    Ok(LinearFit { coef, stderr, condition, rss, dof })
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if math::abs(a[p][q]) < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (math::abs(theta) + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Straight-line fit `y = a + b x`; returns `(a, b, se_a, se_b)`.
pub fn line_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, f64)> {
    let ones = vec![1.0; x.len()];
    let f = least_squares(&[ones, x.to_vec()], y, None)?;
    Ok((f.coef[0], f.coef[1], f.stderr[0], f.stderr[1]))
}

/// About `count` distinct integers spread logarithmically over `[lo, hi]`.
pub fn log_grid(lo: usize, hi: usize, count: usize) -> Vec<usize> {
    if lo == 0 || hi < lo || count == 0 {
        return Vec::new();
    }
    if count == 1 || hi == lo {
        return vec![lo];
    }
    let (a, b) = (math::ln(lo as f64), math::ln(hi as f64));
    let mut out: Vec<usize> = Vec::with_capacity(count);
    for k in 0..count {
        let v = math::exp(a + (b - a) * k as f64 / (count - 1) as f64);
        let n = (libm::round(v) as usize).clamp(lo, hi);
        if out.last() != Some(&n) {
            out.push(n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_polynomial() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = x.iter().map(|t| 1.5 - 2.0 * t + 0.25 * t * t).collect();
        let cols = vec![vec![1.0; 50], x.clone(), x.iter().map(|t| t * t).collect()];
        let f = least_squares(&cols, &y, None).unwrap();
        assert!((f.coef[0] - 1.5).abs() < 1e-12);
        assert!((f.coef[1] + 2.0).abs() < 1e-12);
        assert!((f.coef[2] - 0.25).abs() < 1e-12);
        assert!(f.rss < 1e-20);
    }

    #[test]
    fn line_fit_standard_error_matches_textbook() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.1, 1.9, 3.2, 3.9, 5.1];
        let (a, b, _, se_b) = line_fit(&x, &y).unwrap();
        // closed forms
        let xm = 3.0;
        let ym = y.iter().sum::<f64>() / 5.0;
        let sxx: f64 = x.iter().map(|v| (v - xm) * (v - xm)).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(u, v)| (u - xm) * (v - ym)).sum();
        let bb = sxy / sxx;
        let aa = ym - bb * xm;
        let rss: f64 = x.iter().zip(&y).map(|(u, v)| (v - aa - bb * u).powi(2)).sum();
        assert!((a - aa).abs() < 1e-12 && (b - bb).abs() < 1e-12);
        assert!((se_b - (rss / 3.0 / sxx).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn collinear_design_is_flagged() {
        let x: Vec<f64> = (1..20).map(|i| i as f64).collect();
        let cols = vec![x.clone(), x.iter().map(|v| 2.0 * v).collect()];
        assert!(least_squares(&cols, &x, None).is_err());
        let near: Vec<f64> = x.iter().map(|v| v * (1.0 + 1e-9 * v)).collect();
        let f = least_squares(&[x.clone(), near], &x, None);
        if let Ok(f) = f {
            assert!(f.condition > 1e6);
        }
    }

    #[test]
    fn jacobi_eigenvalues() {
        let mut e = symmetric_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn log_grid_is_increasing() {
        let g = log_grid(100, 10_000, 50);
        assert_eq!(g[0], 100);
        assert_eq!(*g.last().unwrap(), 10_000);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
