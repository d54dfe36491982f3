//! Dense, deliberately naive reference computations.
//!
//! Nothing here shares code with the linear-time paths in `leggp`: matrix
//! exponentials go through nalgebra's Padé routine, Gaussians are handled with
//! full covariance matrices, and quadrature is plain adaptive Simpson.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

pub fn randn_mat<R: Rng>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

pub fn randn_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random SPD block-tridiagonal matrix `W W^T` with `W` block lower
/// bidiagonal and well-conditioned diagonal blocks. Returns diagonal blocks
/// and lower off-diagonal blocks.
pub fn random_spd_btd<R: Rng>(m: usize, l: usize, rng: &mut R) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let wd: Vec<DMatrix<f64>> = (0..m)
        .map(|_| randn_mat(l, l, 0.3, rng) + DMatrix::identity(l, l) * 1.5)
        .collect();
    let wo: Vec<DMatrix<f64>> = (0..m.saturating_sub(1)).map(|_| randn_mat(l, l, 0.5, rng)).collect();
    // W has W[i,i] = wd[i], W[i+1,i] = wo[i]
    let mut diag = Vec::with_capacity(m);
    let mut off = Vec::with_capacity(m.saturating_sub(1));
    for i in 0..m {
        let mut d = &wd[i] * wd[i].transpose();
        if i > 0 {
            d += &wo[i - 1] * wo[i - 1].transpose();
        }
        diag.push((&d + d.transpose()) * 0.5);
        if i + 1 < m {
            off.push(&wo[i] * wd[i].transpose());
        }
    }
    (diag, off)
}

pub fn assemble_dense(diag: &[DMatrix<f64>], off: &[DMatrix<f64>]) -> DMatrix<f64> {
    let m = diag.len();
    let l = diag[0].nrows();
    let mut out = DMatrix::zeros(m * l, m * l);
    for i in 0..m {
        out.view_mut((i * l, i * l), (l, l)).copy_from(&diag[i]);
        if i + 1 < m {
            out.view_mut(((i + 1) * l, i * l), (l, l)).copy_from(&off[i]);
            out.view_mut((i * l, (i + 1) * l), (l, l)).copy_from(&off[i].transpose());
        }
    }
    out
}

/// `exp(-|tau| G / 2)` (transposed for negative `tau`) via Padé.
pub fn peg_cov(tau: f64, n: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let g = n * n.transpose() + r - r.transpose();
    let e = (g * (-tau.abs() / 2.0)).exp();
    if tau < 0.0 {
        e.transpose()
    } else {
        e
    }
}

/// Gram matrix of latent values at `times`: block `(i, j)` is `Cov(z(t_i), z(t_j))`.
pub fn peg_gram(times: &[f64], n: &DMatrix<f64>, r: &DMatrix<f64>) -> DMatrix<f64> {
    let l = n.nrows();
    let m = times.len();
    let mut out = DMatrix::zeros(m * l, m * l);
    for i in 0..m {
        for j in 0..m {
            let c = if i == j {
                DMatrix::identity(l, l)
            } else {
                peg_cov(times[i] - times[j], n, r)
            };
            out.view_mut((i * l, j * l), (l, l)).copy_from(&c);
        }
    }
    out
}

/// Block-diagonal observation operator selecting `B z(t_{idx[k]})` per row.
pub fn obs_operator(idx: &[usize], n_latent_times: usize, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, l) = b.shape();
    let mut out = DMatrix::zeros(idx.len() * n, n_latent_times * l);
    for (k, &i) in idx.iter().enumerate() {
        out.view_mut((k * n, i * l), (n, l)).copy_from(b);
    }
    out
}

pub fn block_diag_repeat(a: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(count * n, count * n);
    for k in 0..count {
        out.view_mut((k * n, k * n), (n, n)).copy_from(a);
    }
    out
}

pub fn mvn_logpdf(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("covariance not positive definite");
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let alpha = chol.solve(x);
    -0.5 * (x.dot(&alpha) + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Observations for a LEG model given as distinct latent times plus an index map.
pub struct DenseLeg<'a> {
    pub times: &'a [f64],
    pub idx: &'a [usize],
    pub n: &'a DMatrix<f64>,
    pub r: &'a DMatrix<f64>,
    pub b: &'a DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

impl DenseLeg<'_> {
    pub fn obs_cov(&self) -> DMatrix<f64> {
        let sigma = peg_gram(self.times, self.n, self.r);
        let bt = obs_operator(self.idx, self.times.len(), self.b);
        &bt * sigma * bt.transpose() + block_diag_repeat(&self.noise, self.idx.len())
    }

    pub fn loglik(&self, x: &DVector<f64>) -> f64 {
        mvn_logpdf(x, &self.obs_cov())
    }

    /// Posterior of latents at `query` times (any order, may include observed times).
    pub fn latent_posterior(&self, x: &DVector<f64>, query: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let l = self.n.nrows();
        let mut all: Vec<f64> = self.times.to_vec();
        all.extend_from_slice(query);
        let sigma = peg_gram(&all, self.n, self.r);
        let nt = self.times.len();
        let bt = obs_operator(self.idx, nt, self.b);
        let s_obs = sigma.view((0, 0), (nt * l, nt * l)).clone_owned();
        let s_qo = sigma.view((nt * l, 0), (query.len() * l, nt * l)).clone_owned();
        let s_qq = sigma
            .view((nt * l, nt * l), (query.len() * l, query.len() * l))
            .clone_owned();
        let cov_x = &bt * &s_obs * bt.transpose() + block_diag_repeat(&self.noise, self.idx.len());
        let cross = s_qo * bt.transpose();
        let chol = cov_x.cholesky().expect("observation covariance not PD");
        let mean = &cross * chol.solve(x);
        let cov = s_qq - &cross * chol.solve(&cross.transpose());
        (mean, cov)
    }
}

/// Central finite differences of a scalar function.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let dn = f(&probe);
            probe[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Adaptive Simpson quadrature of a scalar function.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Exact draw of a zero-mean stationary scalar GP on the grid `0, dt, 2dt, ...`
/// by circulant embedding. Panics if the embedding has a materially negative
/// eigenvalue (tiny negative round-off is clipped).
pub fn sample_stationary_grid<K: Fn(f64) -> f64, R: Rng>(kernel: K, m: usize, dt: f64, rng: &mut R) -> Vec<f64> {
    let size = 2 * m;
    let mut row: Vec<Complex64> = (0..size)
        .map(|k| {
            let lag = k.min(size - k) as f64 * dt;
            Complex64::new(kernel(lag), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(size).process(&mut row);
    let scale = row.iter().fold(0.0f64, |s, v| s.max(v.re.abs()));
    let weights: Vec<f64> = row
        .iter()
        .map(|v| {
            assert!(v.re > -1e-8 * scale, "circulant embedding is not PSD: {}", v.re);
            (v.re.max(0.0) / size as f64).sqrt()
        })
        .collect();
    let mut w: Vec<Complex64> = weights
        .iter()
        .map(|&s| {
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            Complex64::new(a * s, b * s)
        })
        .collect();
    planner.plan_fft_forward(size).process(&mut w);
    // real part is one exact draw
    w.iter().take(m).map(|v| v.re).collect()
}
