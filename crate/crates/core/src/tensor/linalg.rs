//! Thin SVD (Householder QR followed by one-sided Jacobi on the triangular
//! factor) and the pseudo-inverse least-squares solver built on it.

use crate::error::{Error, Result};

use super::DenseTensor;

const JACOBI_EPS: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Rank-r factors `a ≈ u · diag(s) · vᵀ`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `d1 × r`, orthonormal columns.
    pub u: DenseTensor,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `d2 × r`, orthonormal columns.
    pub v: DenseTensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DenseTensor {
        let (m, n, r) = (self.u.rows(), self.v.rows(), self.s.len());
        let (u, v) = (self.u.data(), self.v.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..r {
                let a = u[i * r + k] * self.s[k];
                if a == 0.0 {
                    continue;
                }
                let row = &mut out[i * n..(i + 1) * n];
                for (j, o) in row.iter_mut().enumerate() {
                    *o += a * v[j * r + k];
                }
            }
        }
        DenseTensor::new(vec![m, n], out).expect("consistent shape")
    }
}

struct ThinSvd {
    u: Vec<Vec<f64>>,
    s: Vec<f64>,
    v: Vec<Vec<f64>>,
}

fn columns_of(a: &DenseTensor) -> Vec<Vec<f64>> {
    (0..a.cols()).map(|j| a.column(j)).collect()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn thin_svd(a: &DenseTensor) -> Result<ThinSvd> {
    let (m, n) = (a.rows(), a.cols());
    if m >= n {
        svd_tall(columns_of(a), m)
    } else {
        let t = svd_tall(columns_of(&a.transpose()?), n)?;
        Ok(ThinSvd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// SVD of an `m × n` matrix given as `n` columns, `m ≥ n`.
fn svd_tall(mut cols: Vec<Vec<f64>>, m: usize) -> Result<ThinSvd> {
    let n = cols.len();

    // Householder QR, reflectors kept for forming U later.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &cols[k][k..];
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            reflectors.push((Vec::new(), 0.0));
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            reflectors.push((Vec::new(), 0.0));
            continue;
        }
        let beta = 2.0 / vv;
        for col in cols.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let f = beta * dot(&v, seg);
            if f != 0.0 {
                for (s, vi) in seg.iter_mut().zip(&v) {
                    *s -= f * vi;
                }
            }
        }
        reflectors.push((v, beta));
    }
    // Columns of R (upper triangle of the transformed columns).
    let mut w: Vec<Vec<f64>> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (0..n).map(|i| if i <= j { c[i] } else { 0.0 }).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut norms: Vec<f64> = w.iter().map(|c| dot(c, c)).collect();
    // Columns below this squared norm are numerically zero and never rotated.
    let negligible = norms.iter().sum::<f64>() * 1e-30;
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&w[p], &w[q]);
                if gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = w.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                norms[p] = dot(&w[p], &w[p]);
                norms[q] = dot(&w[q], &w[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let smax = order.first().map_or(0.0, |&i| sigma[i]);
    let cutoff = smax * 1e-14;

    let mut s = Vec::with_capacity(n);
    let mut ur: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &j in &order {
        s.push(sigma[j]);
        vs.push(v[j].clone());
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            ur.push(w[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            pending.push(ur.len());
            ur.push(vec![0.0; n]);
        }
    }
    complete_orthonormal(&mut ur, &pending);

    // U = Q · [U_R; 0]
    let u = ur
        .into_iter()
        .map(|col| {
            let mut y = col;
            y.resize(m, 0.0);
            for (k, (rv, beta)) in reflectors.iter().enumerate().rev() {
                if *beta == 0.0 {
                    continue;
                }
                let seg = &mut y[k..];
                let f = beta * dot(rv, seg);
                for (yi, vi) in seg.iter_mut().zip(rv) {
                    *yi -= f * vi;
                }
            }
            y
        })
        .collect();

    Ok(ThinSvd { u, s, v: vs })
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the columns listed in `pending` with unit vectors orthogonal to all
/// other columns, drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0usize;
    for &slot in pending {
        loop {
            assert!(candidate < dim, "cannot complete an orthonormal basis");
            let mut x = vec![0.0; dim];
            x[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == slot || (pending.contains(&j) && c.iter().all(|v| *v == 0.0)) {
                        continue;
                    }
                    let f = dot(&x, c);
                    for (xi, ci) in x.iter_mut().zip(c) {
                        *xi -= f * ci;
                    }
                }
            }
            let norm = dot(&x, &x).sqrt();
            if norm > 0.5 {
                cols[slot] = x.into_iter().map(|v| v / norm).collect();
                break;
            }
        }
    }
}

fn to_matrix(cols: &[Vec<f64>], rows: usize) -> DenseTensor {
    let r = cols.len();
    let mut data = vec![0.0; rows * r];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * r + j] = *v;
        }
    }
    DenseTensor::new(vec![rows, r], data).expect("consistent shape")
}

/// Best rank-`r` approximation factors of a 2-d tensor.
pub fn truncated_svd(a: &DenseTensor, r: usize) -> Result<SvdResult> {
    if a.order() != 2 {
        return Err(Error::shape(format!(
            "truncated_svd needs a 2-d tensor, got {:?}",
            a.shape()
        )));
    }
    let max = a.rows().min(a.cols());
    if r == 0 || r > max {
        return Err(Error::Rank {
            rank: r,
            min: 1,
            max,
        });
    }
    let full = thin_svd(a)?;
    Ok(SvdResult {
        u: to_matrix(&full.u[..r], a.rows()),
        s: full.s[..r].to_vec(),
        v: to_matrix(&full.v[..r], a.cols()),
    })
}

/// Minimum-norm minimizer of `‖a·x − b‖_F`.
pub fn solve_least_squares(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    if a.order() != 2 || b.order() != 2 || a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "least squares needs 2-d operands with equal rows, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, n, k) = (a.rows(), a.cols(), b.cols());
    let svd = thin_svd(a)?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    let tol = smax * (m.max(n) as f64) * f64::EPSILON;
    let mut x = vec![0.0; n * k];
    for ((u, v), &s) in svd.u.iter().zip(&svd.v).zip(&svd.s) {
        if s <= tol || s == 0.0 {
            continue;
        }
        for c in 0..k {
            let proj: f64 = (0..m).map(|i| u[i] * b.data()[i * k + c]).sum::<f64>() / s;
            if proj == 0.0 {
                continue;
            }
            for (row, vr) in v.iter().enumerate() {
                x[row * k + c] += vr * proj;
            }
        }
    }
    DenseTensor::new(vec![n, k], x)
}
