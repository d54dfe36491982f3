//! Batched matrix exponentials `exp(t G)` from one eigendecomposition, and
//! the divided-difference gradient of `sum_m <M_m, exp(t_m G)>`.
//!
//! `G` is diagonalized once as `U diag(lambda) U^{-1}` (complex Schur form
//! followed by back-substitution for the eigenvectors). Each additional `t`
//! then costs `O(l^2)` scalar exponentials and products. When the
//! eigenvector matrix is too ill-conditioned the forward pass falls back to
//! nalgebra's scaling-and-squaring Padé exponential and the gradient to
//! central finite differences.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{mismatch, Error, Result};

/// Eigenvector condition numbers above this disable the spectral path.
pub const MAX_CONDITION: f64 = 1e8;

const RECONSTRUCTION_TOL: f64 = 1e-8;
const IMAG_TOL: f64 = 1e-8;
const DEGENERATE_REL_TOL: f64 = 1e-8;
const FD_REL_STEP: f64 = 1e-6;

/// Cached eigendecomposition of a real square matrix.
#[derive(Debug, Clone)]
pub struct EigenCache {
    g: DMatrix<f64>,
    eigenvalues: DVector<Complex64>,
    u: DMatrix<Complex64>,
    u_inv: DMatrix<Complex64>,
    condition: f64,
    usable: bool,
}

fn norm1(a: &DMatrix<Complex64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Eigenvectors of an upper-triangular matrix, one per column.
fn triangular_eigenvectors(t: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let l = t.nrows();
    let scale = t.iter().fold(0.0f64, |s, v| s.max(v.norm()));
    let smin = (f64::EPSILON * scale).max(f64::MIN_POSITIVE);
    let mut v = DMatrix::<Complex64>::zeros(l, l);
    for k in 0..l {
        let lk = t[(k, k)];
        v[(k, k)] = Complex64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                s += t[(i, j)] * v[(j, k)];
            }
            let mut denom = t[(i, i)] - lk;
            if denom.norm() < smin {
                denom = Complex64::new(smin, 0.0);
            }
            v[(i, k)] = -s / denom;
        }
    }
    v
}

impl EigenCache {
    pub fn new(g: &DMatrix<f64>) -> Result<Self> {
        let l = g.nrows();
        if g.ncols() != l || l == 0 {
            return Err(mismatch(format!("expected a square matrix, got {:?}", g.shape())));
        }
        let gc: DMatrix<Complex64> = g.map(|v| Complex64::new(v, 0.0));
        let unusable = |g: &DMatrix<f64>| Self {
            g: g.clone(),
            eigenvalues: DVector::zeros(l),
            u: DMatrix::identity(l, l),
            u_inv: DMatrix::identity(l, l),
            condition: f64::INFINITY,
            usable: false,
        };
        if !g.iter().all(|v| v.is_finite()) {
            return Ok(unusable(g));
        }
        let Some(schur) = nalgebra::Schur::try_new(gc, f64::EPSILON, 10_000) else {
            return Ok(unusable(g));
        };
        let (q, t) = schur.unpack();
        let eigenvalues = t.diagonal();
        let mut u = &q * triangular_eigenvectors(&t);
        for mut col in u.column_iter_mut() {
            let norm = col.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if norm > 0.0 {
                col /= Complex64::new(norm, 0.0);
            }
        }
        let Some(u_inv) = u.clone().try_inverse() else {
            return Ok(unusable(g));
        };
        let condition = norm1(&u) * norm1(&u_inv);
        let residual = (&u * &u_inv - DMatrix::<Complex64>::identity(l, l))
            .iter()
            .fold(0.0f64, |s, v| s.max(v.norm()));
        let usable = condition.is_finite() && condition <= MAX_CONDITION && residual <= RECONSTRUCTION_TOL;
        Ok(Self {
            g: g.clone(),
            eigenvalues,
            u,
            u_inv,
            condition,
            usable,
        })
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn eigenvalues(&self) -> &DVector<Complex64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<Complex64> {
        &self.u
    }

    pub fn eigenvectors_inv(&self) -> &DMatrix<Complex64> {
        &self.u_inv
    }

    /// 1-norm condition estimate of the eigenvector matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Whether the spectral path is used (otherwise Padé / finite differences).
    pub fn is_usable(&self) -> bool {
        self.usable
    }

    fn spectral(&self, diag: impl Fn(Complex64) -> Complex64) -> DMatrix<Complex64> {
        let l = self.dim();
        let w: Vec<Complex64> = self.eigenvalues.iter().map(|&v| diag(v)).collect();
        DMatrix::from_fn(l, l, |i, j| {
            (0..l).map(|r| self.u[(i, r)] * w[r] * self.u_inv[(r, j)]).sum()
        })
    }

    /// `exp(t G)`.
    pub fn expm(&self, t: f64) -> Result<DMatrix<f64>> {
        if t == 0.0 {
            return Ok(DMatrix::identity(self.dim(), self.dim()));
        }
        if self.usable {
            let full = self.spectral(|lam| (lam * t).exp());
            let re = full.map(|v| v.re);
            let scale = re.amax().max(1.0);
            let imag = full.iter().fold(0.0f64, |s, v| s.max(v.im.abs()));
            if imag <= IMAG_TOL * scale && re.iter().all(|v| v.is_finite()) {
                return Ok(re);
            }
        }
        pade_expm(&self.g, t)
    }
}

fn pade_expm(g: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let e = (g * t).exp();
    if e.iter().all(|v| v.is_finite()) {
        Ok(e)
    } else {
        Err(Error::DefectiveMatrix)
    }
}

/// `exp(t G)` for every `t` in `tlist`, sharing one diagonalization.
pub fn expm_multi(g: &DMatrix<f64>, tlist: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let cache = EigenCache::new(g)?;
    tlist.iter().map(|&t| cache.expm(t)).collect()
}

fn expm1(z: Complex64) -> Complex64 {
    if z.norm() < 1e-5 {
        z * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0)))
    } else {
        z.exp() - 1.0
    }
}

/// `(e^{t a} - e^{t b}) / (a - b)`, with the confluent limit `t e^{t a}` when
/// `|a - b| < 1e-8 (1 + |a|)`.
pub fn divided_difference(a: Complex64, b: Complex64, t: f64) -> Complex64 {
    let delta = a - b;
    if delta.norm() < DEGENERATE_REL_TOL * (1.0 + a.norm()) {
        return (a * t).exp() * t;
    }
    (b * t).exp() * expm1(delta * t) / delta
}

/// Gradient of `sum_m <M_m, exp(t_m G)>` with respect to `G` and to each `t_m`.
pub fn expm_grad(
    cache: &EigenCache,
    cotangents: &[DMatrix<f64>],
    tlist: &[f64],
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let l = cache.dim();
    if cotangents.len() != tlist.len() {
        return Err(mismatch(format!(
            "{} cotangents for {} times",
            cotangents.len(),
            tlist.len()
        )));
    }
    if let Some(bad) = cotangents.iter().find(|m| m.shape() != (l, l)) {
        return Err(mismatch(format!("cotangent of shape {:?}, expected ({l}, {l})", bad.shape())));
    }
    if !cache.usable {
        return fd_expm_grad(&cache.g, cotangents, tlist);
    }

    let u = &cache.u;
    let ui = &cache.u_inv;
    let lam = &cache.eigenvalues;
    let mut h = DMatrix::<Complex64>::zeros(l, l);
    let mut grad_t = Vec::with_capacity(tlist.len());
    for (m, &t) in cotangents.iter().zip(tlist) {
        let mc = m.map(|v| Complex64::new(v, 0.0));
        let sandwiched = u.transpose() * &mc * ui.transpose();
        for i in 0..l {
            for j in 0..l {
                h[(i, j)] += divided_difference(lam[i], lam[j], t) * sandwiched[(i, j)];
            }
        }
        // d/dt exp(tG) = U diag(lambda e^{lambda t}) U^{-1}
        let deriv = cache.spectral(|v| v * (v * t).exp());
        let gt: Complex64 = mc.iter().zip(deriv.iter()).map(|(a, b)| a * b).sum();
        grad_t.push(gt.re);
    }
    let grad_g = (ui.transpose() * h * u.transpose()).map(|v| v.re);
    Ok((grad_g, grad_t))
}

fn fd_expm_grad(g: &DMatrix<f64>, cotangents: &[DMatrix<f64>], tlist: &[f64]) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let l = g.nrows();
    let objective = |gm: &DMatrix<f64>| -> Result<f64> {
        let mut acc = 0.0;
        for (m, &t) in cotangents.iter().zip(tlist) {
            acc += m.dot(&pade_expm(gm, t)?);
        }
        Ok(acc)
    };
    let mut grad_g = DMatrix::zeros(l, l);
    let mut probe = g.clone();
    for j in 0..l {
        for i in 0..l {
            let h = FD_REL_STEP * (1.0 + g[(i, j)].abs());
            probe[(i, j)] = g[(i, j)] + h;
            let up = objective(&probe)?;
            probe[(i, j)] = g[(i, j)] - h;
            let dn = objective(&probe)?;
            probe[(i, j)] = g[(i, j)];
            grad_g[(i, j)] = (up - dn) / (2.0 * h);
        }
    }
    let grad_t = cotangents
        .iter()
        .zip(tlist)
        .map(|(m, &t)| Ok(m.dot(&(g * pade_expm(g, t)?))))
        .collect::<Result<Vec<f64>>>()?;
    Ok((grad_g, grad_t))
}
