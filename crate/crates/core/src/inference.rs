//! Likelihood, posterior, prediction and simulation for LEG models.
//!
//! Everything goes through the block-tridiagonal posterior precision
//! `J = Sigma^{-1} + sum_k B^T S^{-1} B` (one term per observation at each
//! time), with `S = Lambda Lambda^T + jitter I`, so the cost is linear in the
//! number of distinct times.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::btd::{self, BlockTridiag};
use crate::error::{mismatch, Error, Result};
use crate::kernel::{prior_precision, psd_factor, LegParams, PegKernel};

/// Noise Cholesky pivots below this fraction of the largest pivot count as
/// singular.
const NOISE_PIVOT_RATIO: f64 = 1e-8;

/// Observations of an `n`-dimensional series at distinct, increasing times.
/// Several rows may share a time; `idx[k]` is the time index of row `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    times: Vec<f64>,
    values: DMatrix<f64>,
    idx: Vec<usize>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: DMatrix<f64>, idx: Vec<usize>) -> Result<Self> {
        if times.is_empty() || values.nrows() == 0 {
            return Err(Error::EmptyInput);
        }
        if values.ncols() == 0 {
            return Err(mismatch("observations need at least one column"));
        }
        if let Some(i) = (1..times.len()).find(|&i| !(times[i] > times[i - 1])) {
            return Err(Error::UnsortedInput { index: i });
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("times must be finite".into()));
        }
        if idx.len() != values.nrows() {
            return Err(mismatch(format!("{} index entries for {} rows", idx.len(), values.nrows())));
        }
        if idx.iter().any(|&i| i >= times.len()) {
            return Err(mismatch("index entry out of range"));
        }
        if let Some(k) = (1..idx.len()).find(|&k| idx[k] < idx[k - 1]) {
            return Err(Error::UnsortedInput { index: k });
        }
        Ok(Self { times, values, idx })
    }

    /// Distinct observation times.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Observation rows, one per entry of [`TimeSeries::idx`].
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn idx(&self) -> &[usize] {
        &self.idx
    }

    pub fn obs_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Number of observation rows.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// Time stamp of every observation row.
    pub fn row_times(&self) -> Vec<f64> {
        self.idx.iter().map(|&i| self.times[i]).collect()
    }

    fn gaps(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Groups rows observed at identical times. `raw_times` must be sorted.
pub fn dedup(raw_times: &[f64], raw_values: &DMatrix<f64>) -> Result<TimeSeries> {
    if raw_times.is_empty() {
        return Err(Error::EmptyInput);
    }
    if raw_times.len() != raw_values.nrows() {
        return Err(mismatch(format!(
            "{} times for {} observation rows",
            raw_times.len(),
            raw_values.nrows()
        )));
    }
    if let Some(i) = (1..raw_times.len()).find(|&i| !(raw_times[i] >= raw_times[i - 1])) {
        return Err(Error::UnsortedInput { index: i });
    }
    let mut times = Vec::new();
    let mut idx = Vec::with_capacity(raw_times.len());
    for &t in raw_times {
        if times.last() != Some(&t) {
            times.push(t);
        }
        idx.push(times.len() - 1);
    }
    TimeSeries::new(times, raw_values.clone(), idx)
}

struct Noise {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet: f64,
    /// `B^T S^{-1}`, `l x n`.
    bt_sinv: DMatrix<f64>,
    /// `B^T S^{-1} B`.
    info: DMatrix<f64>,
}

impl Noise {
    fn new(p: &LegParams, jitter: f64) -> Result<Self> {
        if !(jitter >= 0.0) {
            return Err(Error::InvalidConfig(format!("jitter must be non-negative, got {jitter}")));
        }
        let n = p.obs_dim();
        let s = p.noise_cov() + DMatrix::identity(n, n) * jitter;
        let chol = s.cholesky().ok_or(Error::SingularNoise)?;
        let pivots = chol.l_dirty().diagonal();
        let (lo, hi) = pivots.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(lo > NOISE_PIVOT_RATIO * hi) {
            return Err(Error::SingularNoise);
        }
        let logdet = 2.0 * pivots.iter().map(|v| v.ln()).sum::<f64>();
        let bt_sinv = chol.solve(&p.b).transpose();
        let info = &bt_sinv * &p.b;
        let info = (&info + info.transpose()) * 0.5;
        Ok(Self {
            chol,
            logdet,
            bt_sinv,
            info,
        })
    }
}

struct System {
    j_post: BlockTridiag,
    h: Vec<f64>,
    prior_logdet: f64,
    quad_noise: f64,
    noise_logdet: f64,
}

fn check_dims(ts: &TimeSeries, p: &LegParams) -> Result<()> {
    if ts.obs_dim() != p.obs_dim() {
        return Err(mismatch(format!(
            "series has {} columns, model observes {}",
            ts.obs_dim(),
            p.obs_dim()
        )));
    }
    Ok(())
}

fn build_system(ts: &TimeSeries, p: &LegParams, peg: &PegKernel, jitter: f64) -> Result<System> {
    check_dims(ts, p)?;
    let noise = Noise::new(p, jitter)?;
    let l = p.rank();
    let l2 = l * l;
    let (mut j_post, prior_logdet) = prior_precision(&ts.gaps(), peg)?;
    let mut h = vec![0.0; ts.times.len() * l];
    let mut quad_noise = 0.0;
    let diag = j_post.diag_raw_mut();
    for (k, &i) in ts.idx.iter().enumerate() {
        let x = ts.values.row(k).transpose();
        quad_noise += x.dot(&noise.chol.solve(&x));
        let hk = &noise.bt_sinv * &x;
        for (dst, src) in h[i * l..(i + 1) * l].iter_mut().zip(hk.iter()) {
            *dst += src;
        }
        for (dst, src) in diag[i * l2..(i + 1) * l2].iter_mut().zip(noise.info.iter()) {
            *dst += src;
        }
    }
    Ok(System {
        j_post,
        h,
        prior_logdet,
        quad_noise,
        noise_logdet: noise.logdet,
    })
}

/// Exact log-density of the observations.
///
/// Uses the Woodbury identity for the quadratic form and the matrix
/// determinant lemma for `log det(B Sigma B^T + S)`:
/// `log det S_all - log det Sigma^{-1} + log det J`.
pub fn log_likelihood(ts: &TimeSeries, p: &LegParams, jitter: f64) -> Result<f64> {
    let peg = p.peg()?;
    log_likelihood_with(ts, p, &peg, jitter)
}

pub(crate) fn log_likelihood_with(ts: &TimeSeries, p: &LegParams, peg: &PegKernel, jitter: f64) -> Result<f64> {
    let sys = build_system(ts, p, peg, jitter)?;
    let (hjh, logdet_post) = btd::mahal_and_logdet(&sys.j_post, &sys.h)?;
    let rows = ts.len() as f64;
    let n = ts.obs_dim() as f64;
    let quad = sys.quad_noise - hjh;
    let logdet = rows * sys.noise_logdet - sys.prior_logdet + logdet_post;
    Ok(-0.5 * (quad + rows * n * (2.0 * PI).ln() + logdet))
}

/// Posterior means and covariance blocks of the latents at the distinct times.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    /// `m x l`; row `i` is `E[z(t_i) | x]`.
    pub means: DMatrix<f64>,
    /// `Cov(z(t_i) | x)`.
    pub cov_diag: Vec<DMatrix<f64>>,
    /// `Cov(z(t_i), z(t_{i+1}) | x)`.
    pub cov_offdiag: Vec<DMatrix<f64>>,
}

impl PosteriorSummary {
    pub fn mean(&self, i: usize) -> DVector<f64> {
        self.means.row(i).transpose()
    }
}

pub fn posterior(ts: &TimeSeries, p: &LegParams, jitter: f64) -> Result<PosteriorSummary> {
    let peg = p.peg()?;
    posterior_with(ts, p, &peg, jitter)
}

fn posterior_with(ts: &TimeSeries, p: &LegParams, peg: &PegKernel, jitter: f64) -> Result<PosteriorSummary> {
    let sys = build_system(ts, p, peg, jitter)?;
    let l = p.rank();
    let m = ts.times.len();
    let cr = btd::decompose(&sys.j_post)?;
    let mu = cr.solve(&sys.h)?;
    let (diag, lower) = cr.inverse_blocks();
    let cov_diag = diag.into_iter().map(|d| (&d + d.transpose()) * 0.5).collect();
    Ok(PosteriorSummary {
        means: DMatrix::from_fn(m, l, |i, a| mu[i * l + a]),
        cov_diag,
        cov_offdiag: lower.into_iter().map(|o| o.transpose()).collect(),
    })
}

/// Gaussian marginal of one latent or observation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMarginal {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn symmetric(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

/// Marginal of `z(t)` when `z(t) = A z_s + e` with `e ~ N(0, I - A A^T)`
/// independent of `z_s ~ N(mu, P)`.
fn propagate(a: &DMatrix<f64>, mu: &DVector<f64>, cov: &DMatrix<f64>) -> LatentMarginal {
    let l = a.nrows();
    LatentMarginal {
        mean: a * mu,
        cov: symmetric(a * cov * a.transpose() + DMatrix::identity(l, l) - a * a.transpose()),
    }
}

/// `K^{-1} rhs` for a PSD `K`, through the pseudo-inverse when `K` is
/// singular (a degenerate joint, for example a latent with no decorrelation).
fn solve_psd(k: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = k.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    let pinv = k
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pinv * rhs)
}

/// Marginal of `z(t)` for `t_i < t < t_{i+1}`.
///
/// Under the prior, `(z(t), z_i, z_{i+1})` is jointly Gaussian with
/// `k = Cov(z(t), [z_i; z_{i+1}]) = [C(t - t_i), C(t_{i+1} - t)^T]` and
/// `K = Cov([z_i; z_{i+1}]) = [[I, C(d)^T], [C(d), I]]`. The Markov property
/// makes `z(t)` independent of the other latents given the pair, so with
/// `W = k K^{-1}`:
/// `z(t) | pair ~ N(W pair, I - W k^T)`, and averaging over the posterior
/// of the pair gives mean `W mu_pair` and covariance
/// `I - W k^T + W P_pair W^T`.
fn interpolate(
    peg: &PegKernel,
    dt: (f64, f64),
    mu_pair: &DVector<f64>,
    p_pair: &DMatrix<f64>,
) -> Result<LatentMarginal> {
    let l = peg.rank();
    let (d1, d2) = dt;
    let mut k = DMatrix::zeros(l, 2 * l);
    k.view_mut((0, 0), (l, l)).copy_from(&peg.cov(d1)?);
    k.view_mut((0, l), (l, l)).copy_from(&peg.cov(-d2)?);
    let cd = peg.cov(d1 + d2)?;
    let mut big = DMatrix::identity(2 * l, 2 * l);
    big.view_mut((l, 0), (l, l)).copy_from(&cd);
    big.view_mut((0, l), (l, l)).copy_from(&cd.transpose());
    let w = solve_psd(big, &k.transpose())?.transpose();
    let cov = DMatrix::identity(l, l) - &w * k.transpose() + &w * p_pair * w.transpose();
    Ok(LatentMarginal {
        mean: &w * mu_pair,
        cov: symmetric(cov),
    })
}

/// Posterior marginals of `z(t)` at arbitrary targets.
pub fn predict_latent(ts: &TimeSeries, p: &LegParams, targets: &[f64], jitter: f64) -> Result<Vec<LatentMarginal>> {
    let peg = p.peg()?;
    let post = posterior_with(ts, p, &peg, jitter)?;
    let times = &ts.times;
    let l = p.rank();
    let last = times.len() - 1;
    let one = |&t: &f64| -> Result<LatentMarginal> {
        if !t.is_finite() {
            return Err(Error::InvalidConfig(format!("target time {t} is not finite")));
        }
        match times.binary_search_by(|probe| probe.total_cmp(&t)) {
            Ok(i) => Ok(LatentMarginal {
                mean: post.mean(i),
                cov: post.cov_diag[i].clone(),
            }),
            Err(0) => {
                let a = peg.cov(times[0] - t)?.transpose();
                Ok(propagate(&a, &post.mean(0), &post.cov_diag[0]))
            }
            Err(i) if i > last => {
                let a = peg.cov(t - times[last])?;
                Ok(propagate(&a, &post.mean(last), &post.cov_diag[last]))
            }
            Err(i) => {
                let lo = i - 1;
                let mut mu = DVector::zeros(2 * l);
                mu.rows_mut(0, l).copy_from(&post.mean(lo));
                mu.rows_mut(l, l).copy_from(&post.mean(i));
                let mut pp = DMatrix::zeros(2 * l, 2 * l);
                pp.view_mut((0, 0), (l, l)).copy_from(&post.cov_diag[lo]);
                pp.view_mut((l, l), (l, l)).copy_from(&post.cov_diag[i]);
                pp.view_mut((0, l), (l, l)).copy_from(&post.cov_offdiag[lo]);
                pp.view_mut((l, 0), (l, l)).copy_from(&post.cov_offdiag[lo].transpose());
                interpolate(&peg, (t - times[lo], times[i] - t), &mu, &pp)
            }
        }
    };
    targets.par_iter().map(one).collect()
}

/// Posterior predictive moments of `x(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `B E[z(t) | x]`.
    pub mean: DVector<f64>,
    /// `B Cov(z(t) | x) B^T`.
    pub uncertainty: DMatrix<f64>,
    /// `uncertainty + Lambda Lambda^T`.
    pub predictive_var: DMatrix<f64>,
}

pub fn posterior_predictive(ts: &TimeSeries, p: &LegParams, targets: &[f64], jitter: f64) -> Result<Vec<Prediction>> {
    let noise = p.noise_cov();
    let latent = predict_latent(ts, p, targets, jitter)?;
    Ok(latent
        .into_iter()
        .map(|z| {
            let uncertainty = symmetric(&p.b * z.cov * p.b.transpose());
            Prediction {
                mean: &p.b * z.mean,
                predictive_var: &uncertainty + &noise,
                uncertainty,
            }
        })
        .collect())
}

/// Output of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub series: TimeSeries,
    /// `m x l`, the latent path at the distinct times.
    pub latents: DMatrix<f64>,
}

/// Draws one path by exact Markov sampling.
///
/// `noise` supplies standard normals, consumed in time order: `l` values for
/// each distinct time's latent, then `n` for each observation at that time.
/// Repeated entries of `times` become separate rows sharing one latent.
pub fn simulate<I: Iterator<Item = f64>>(times: &[f64], p: &LegParams, noise: I) -> Result<Simulation> {
    if times.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (l, n) = (p.rank(), p.obs_dim());
    let placeholder = DMatrix::zeros(times.len(), n);
    let layout = dedup(times, &placeholder)?;
    let peg = p.peg()?;
    let mut noise = noise;
    let mut drawn = 0usize;
    let mut draw = |k: usize| -> Result<DVector<f64>> {
        let mut v = DVector::zeros(k);
        for x in v.iter_mut() {
            *x = noise.next().ok_or(Error::InsufficientNoise { drawn })?;
            drawn += 1;
        }
        Ok(v)
    };

    let m = layout.times.len();
    let mut latents = DMatrix::zeros(m, l);
    let mut values = DMatrix::zeros(times.len(), n);
    let mut z = DVector::zeros(l);
    let mut row = 0;
    for i in 0..m {
        let eps = draw(l)?;
        z = if i == 0 {
            eps
        } else {
            let a = peg.cov(layout.times[i] - layout.times[i - 1])?;
            let q = DMatrix::identity(l, l) - &a * a.transpose();
            &a * &z + psd_factor(&q) * eps
        };
        latents.row_mut(i).copy_from(&z.transpose());
        while row < times.len() && layout.idx[row] == i {
            let x = &p.b * &z + &p.lambda * draw(n)?;
            values.row_mut(row).copy_from(&x.transpose());
            row += 1;
        }
    }
    Ok(Simulation {
        series: TimeSeries::new(layout.times, values, layout.idx)?,
        latents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn ou(lambda: f64) -> LegParams {
        LegParams::new(scalar(2f64.sqrt()), scalar(0.0), scalar(1.0), scalar(lambda)).unwrap()
    }

    #[test]
    fn dedup_cases() {
        let v = DMatrix::zeros(3, 1);
        let ts = dedup(&[1.0, 2.0, 3.0], &v).unwrap();
        assert_eq!(ts.idx(), &[0, 1, 2]);
        let ts = dedup(&[1.0, 1.0, 2.0], &v).unwrap();
        assert_eq!(ts.times(), &[1.0, 2.0]);
        assert_eq!(ts.idx(), &[0, 0, 1]);
        assert_eq!(dedup(&[2.0, 1.0], &DMatrix::zeros(2, 1)).unwrap_err(), Error::UnsortedInput { index: 1 });
        assert_eq!(dedup(&[], &DMatrix::zeros(0, 1)).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn single_point_likelihood() {
        let lam = 0.7;
        let ts = dedup(&[0.0], &scalar(1.3)).unwrap();
        let ll = log_likelihood(&ts, &ou(lam), 0.0).unwrap();
        let var = 1.0 + lam * lam;
        let expect = -0.5 * (1.3 * 1.3 / var + (2.0 * PI * var).ln());
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn singular_noise_is_reported() {
        let ts = dedup(&[0.0], &scalar(1.0)).unwrap();
        assert_eq!(log_likelihood(&ts, &ou(0.0), 0.0).unwrap_err(), Error::SingularNoise);
        assert!(log_likelihood(&ts, &ou(0.0), 1e-3).is_ok());
    }

    #[test]
    fn scalar_posterior() {
        let sigma: f64 = 0.5;
        let ts = dedup(&[0.0], &scalar(2.0)).unwrap();
        let post = posterior(&ts, &ou(sigma), 0.0).unwrap();
        let s2 = sigma * sigma;
        assert!((post.means[(0, 0)] - 2.0 / (1.0 + s2)).abs() < 1e-14);
        assert!((post.cov_diag[0][(0, 0)] - s2 / (1.0 + s2)).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_simulation() {
        let p = ou(0.3);
        let sim = simulate(&[0.0, 0.5, 0.5, 2.0], &p, std::iter::repeat(0.0)).unwrap();
        assert!(sim.series.values().iter().all(|&v| v == 0.0));
        assert_eq!(sim.series.idx(), &[0, 1, 1, 2]);
        assert!(matches!(
            simulate(&[0.0, 1.0], &p, std::iter::repeat(0.0).take(3)),
            Err(Error::InsufficientNoise { drawn: 3 })
        ));
    }
}
