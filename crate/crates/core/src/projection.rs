//! Two-dimensional PCA of sentence vectors by power iteration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::l2_norm;

pub const POWER_TOL: f64 = 1e-9;
const MAX_ITERS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// One `[x, y]` per input row.
    pub points: Vec<[f64; 2]>,
    pub components: [Vec<f64>; 2],
    /// Variance along each component.
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
    /// Share of total variance captured by both components.
    pub explained: f64,
}

fn mat_vec(c: &[f64], d: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|r| {
            c[r * d..(r + 1) * d]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant eigenpair of the symmetric `d × d` matrix `c`.
fn power_iteration(c: &[f64], d: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d)
        .map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64)
        .collect();
    let norm = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    for _ in 0..MAX_ITERS {
        let w = mat_vec(c, d, &v);
        let norm = l2_norm(&w);
        if norm == 0.0 {
            return (0.0, v);
        }
        let mut next: Vec<f64> = w.iter().map(|x| x / norm).collect();
        canonical_sign(&mut next);
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < POWER_TOL {
            break;
        }
    }
    let cv = mat_vec(c, d, &v);
    let lambda = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
    (lambda, v)
}

/// Centers `rows` and projects them onto the top two principal axes.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    if rows.len() < 3 {
        return Err(Error::contract(format!(
            "projection needs at least 3 vectors, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::dim(
            "projection needs equal-length vectors of width ≥ 2",
        ));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += r[i] * r[j] / n;
            }
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (l1, v1) = power_iteration(&cov, d);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let (l2, v2) = power_iteration(&deflated, d);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let points = centered
        .iter()
        .map(|r| [dot(r, &v1), dot(r, &v2)])
        .collect();
    let explained = if total_variance > 0.0 {
        (l1 + l2) / total_variance
    } else {
        0.0
    };
    Ok(Projection {
        points,
        components: [v1, v2],
        eigenvalues: [l1, l2],
        total_variance,
        explained,
    })
}
