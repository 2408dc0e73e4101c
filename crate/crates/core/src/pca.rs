//! Two-component PCA by power iteration, for 2-D embedding exports.
//!
//! Deterministic: the iteration starts from a fixed internal generator
//! stream, the second component is re-orthogonalized against the first
//! every step (Gram–Schmidt deflation), and each component's sign is fixed
//! by making its largest-magnitude coordinate positive.

use crate::error::{Error, Result};
use crate::rng::Stream;

const PCA_SEED: u64 = 0x9e3779b97f4a7c15;
const MAX_ITERS: usize = 500;
const TOL: f64 = 1e-13;

/// A fitted 2-component model.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Unit-norm principal directions, orthogonal to each other.
    pub components: [Vec<f64>; 2],
    /// Fraction of total variance captured by each component.
    pub explained: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// `y = C·v` for the dense symmetric matrix `C` (row-major `d×d`).
fn matvec(c: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| dot(&c[i * d..(i + 1) * d], v)).collect()
}

fn power_iterate(c: &[f64], d: usize, orth: Option<&[f64]>, rng: &mut Stream) -> Result<(Vec<f64>, f64)> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal(1.0)).collect();
    if let Some(prev) = orth {
        let p = dot(&v, prev);
        for i in 0..d {
            v[i] -= p * prev[i];
        }
    }
    if normalize(&mut v) == 0.0 {
        return Err(Error::degenerate("power iteration started at zero".to_string()));
    }
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let mut next = matvec(c, &v, d);
        if let Some(prev) = orth {
            let p = dot(&next, prev);
            for i in 0..d {
                next[i] -= p * prev[i];
            }
        }
        let norm = normalize(&mut next);
        if norm == 0.0 {
            // No variance left in this subspace.
            return Ok((v, 0.0));
        }
        let delta: f64 =
            v.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        v = next;
        lambda = norm;
        if delta < TOL {
            break;
        }
    }
    Ok((v, lambda))
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Fit on `n` rows of width `dim` (flat row-major input).
pub fn fit_pca2(rows: &[f64], n: usize, dim: usize) -> Result<Pca2> {
    if n < 2 || dim < 2 {
        return Err(Error::contract(format!("PCA needs at least 2 rows and 2 dims, got {n}x{dim}")));
    }
    if rows.len() != n * dim {
        return Err(Error::shape("fit_pca2", format!("{} values for {n}x{dim}", rows.len())));
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for i in 0..dim {
            mean[i] += rows[r * dim + i];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Covariance (dim × dim); dim stays small here so the dense form is fine.
    let mut cov = vec![0.0; dim * dim];
    for r in 0..n {
        for i in 0..dim {
            let xi = rows[r * dim + i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += xi * (rows[r * dim + j] - mean[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= (n - 1) as f64;
    }
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace <= 0.0 {
        return Err(Error::degenerate("no variance in the input rows".to_string()));
    }

    let mut rng = Stream::new(PCA_SEED, 0);
    let (mut v1, l1) = power_iterate(&cov, dim, None, &mut rng)?;
    let (mut v2, l2) = power_iterate(&cov, dim, Some(&v1), &mut rng)?;
    fix_sign(&mut v1);
    fix_sign(&mut v2);
    Ok(Pca2 {
        dim,
        mean,
        components: [v1, v2],
        explained: [l1 / trace, l2 / trace],
    })
}

impl Pca2 {
    /// Project one row onto the two components.
    pub fn project(&self, row: &[f64]) -> Result<(f64, f64)> {
        if row.len() != self.dim {
            return Err(Error::shape(
                "pca_project",
                format!("row has {} dims, model has {}", row.len(), self.dim),
            ));
        }
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok((dot(&centered, &self.components[0]), dot(&centered, &self.components[1])))
    }
}

// ── tests ────────────────────────────────────────────────────────────────────
