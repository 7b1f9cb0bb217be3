//! Least squares through column-pivoted Householder QR.
//!
//! Features are centered (which removes the intercept column from the
//! factorization) and scaled to unit norm before pivoting, so the rank
//! cutoff is relative. Columns that fall below the cutoff get coefficient 0.

use super::{Dataset, ModelParams, PowerModel};
use crate::error::{Error, Result};

/// Residual column norm, relative to a unit column, below which a column
/// counts as linearly dependent on the ones already chosen.
const RANK_TOL: f64 = 1e-10;

pub fn fit_ols(data: &Dataset) -> Result<PowerModel> {
    let n = data.n_samples();
    let d = data.n_features();
    if n < d + 1 {
        return Err(Error::Underdetermined {
            samples: n,
            params: d + 1,
        });
    }
    PowerModel::timed(data, || {
        let (coefficients, intercept, rank) = solve(data);
        Ok(ModelParams::Ols {
            coefficients,
            intercept,
            rank,
        })
    })
}

fn solve(data: &Dataset) -> (Vec<f64>, f64, usize) {
    let n = data.n_samples();
    let d = data.n_features();
    let nf = n as f64;

    let y_mean = data.targets().iter().sum::<f64>() / nf;
    let mut y: Vec<f64> = data.targets().iter().map(|t| t - y_mean).collect();

    // column-major centered design
    let mut means = vec![0.0; d];
    for row in data.rows() {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    means.iter_mut().for_each(|m| *m /= nf);
    let mut a = vec![0.0; n * d];
    for (i, row) in data.rows().enumerate() {
        for j in 0..d {
            a[j * n + i] = row[j] - means[j];
        }
    }
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let col = &mut a[j * n..(j + 1) * n];
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        scale[j] = norm;
        if norm > 0.0 {
            col.iter_mut().for_each(|x| *x /= norm);
        }
    }

    // perm[k] = original column sitting at position k
    let mut perm: Vec<usize> = (0..d).collect();
    let mut rank = 0;
    for k in 0..d.min(n) {
        let norm_below = |a: &[f64], j: usize| a[j * n + k..(j + 1) * n].iter().map(|x| x * x).sum::<f64>();
        let (best, best_sq) = (k..d)
            .map(|j| (j, if scale[perm[j]] > 0.0 { norm_below(&a, j) } else { 0.0 }))
            .fold((k, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
        if best_sq.sqrt() <= RANK_TOL {
            break;
        }
        if best != k {
            for i in 0..n {
                a.swap(k * n + i, best * n + i);
            }
            perm.swap(k, best);
        }

        let norm = best_sq.sqrt();
        let x0 = a[k * n + k];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k * n + k..(k + 1) * n].to_vec();
        v[0] -= alpha;
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq > 0.0 {
            let reflect = |col: &mut [f64]| {
                let dot: f64 = v.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
                let f = 2.0 * dot / vnorm_sq;
                col.iter_mut().zip(&v).for_each(|(c, vi)| *c -= f * vi);
            };
            for j in k + 1..d {
                reflect(&mut a[j * n + k..(j + 1) * n]);
            }
            reflect(&mut y[k..]);
        }
        a[k * n + k] = alpha;
        for i in k + 1..n {
            a[k * n + i] = 0.0;
        }
        rank += 1;
    }

    // back substitution on the leading rank x rank block of R
    let mut z = vec![0.0; rank];
    for k in (0..rank).rev() {
        let mut s = y[k];
        for (j, zj) in z.iter().enumerate().take(rank).skip(k + 1) {
            s -= a[j * n + k] * zj;
        }
        z[k] = s / a[k * n + k];
    }

    let mut coef = vec![0.0; d];
    for k in 0..rank {
        let j = perm[k];
        coef[j] = z[k] / scale[j];
    }
    let intercept = y_mean - coef.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>();
    (coef, intercept, rank)
}
