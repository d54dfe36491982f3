//! PEG/LEG covariance kernels, their spectra, the block-tridiagonal prior
//! precision, and conversions from Celerite and Cauchy spectral-mixture
//! kernels.
//!
//! A PEG process with parameters `(N, R)` is the stationary Markov Gaussian
//! process with identity marginal covariance and
//! `Cov(z(t + tau), z(t)) = exp(-tau G / 2)` for `tau >= 0`, where
//! `G = N N^T + R - R^T`. A LEG process observes it through `x = B z + noise`
//! with noise covariance `Lambda Lambda^T`.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::btd::BlockTridiag;
use crate::error::{mismatch, Error, Result};
use crate::matexp::EigenCache;

/// Gaps shorter than this are rejected by [`precision_blocks`].
pub const MIN_GAP: f64 = 1e-12;

/// Parameters of a LEG model. Every real value is admissible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsDoc", into = "ParamsDoc")]
pub struct LegParams {
    /// Diffusion factor `N`, `l x l`.
    pub n: DMatrix<f64>,
    /// Rotation factor `R`, `l x l`.
    pub r: DMatrix<f64>,
    /// Observation map `B`, `n x l`.
    pub b: DMatrix<f64>,
    /// Noise factor `Lambda`, `n x n`.
    pub lambda: DMatrix<f64>,
}

/// Row-major JSON layout of [`LegParams`].
#[derive(Serialize, Deserialize)]
struct ParamsDoc {
    #[serde(rename = "N")]
    n: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Lambda")]
    lambda: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(mismatch(format!("{name} must be a non-empty rectangular 2-D array")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl TryFrom<ParamsDoc> for LegParams {
    type Error = Error;

    fn try_from(doc: ParamsDoc) -> Result<Self> {
        LegParams::new(
            from_rows("N", &doc.n)?,
            from_rows("R", &doc.r)?,
            from_rows("B", &doc.b)?,
            from_rows("Lambda", &doc.lambda)?,
        )
    }
}

impl From<LegParams> for ParamsDoc {
    fn from(p: LegParams) -> Self {
        ParamsDoc {
            n: to_rows(&p.n),
            r: to_rows(&p.r),
            b: to_rows(&p.b),
            lambda: to_rows(&p.lambda),
        }
    }
}

impl LegParams {
    pub fn new(n: DMatrix<f64>, r: DMatrix<f64>, b: DMatrix<f64>, lambda: DMatrix<f64>) -> Result<Self> {
        let l = n.nrows();
        let obs = b.nrows();
        if l == 0 || obs == 0 {
            return Err(mismatch("rank and observation dimension must be at least 1"));
        }
        if n.shape() != (l, l) || r.shape() != (l, l) {
            return Err(mismatch(format!(
                "N {:?} and R {:?} must be square of the same size",
                n.shape(),
                r.shape()
            )));
        }
        if b.ncols() != l {
            return Err(mismatch(format!("B has {} columns, rank is {l}", b.ncols())));
        }
        if lambda.shape() != (obs, obs) {
            return Err(mismatch(format!("Lambda is {:?}, expected ({obs}, {obs})", lambda.shape())));
        }
        if ![&n, &r, &b, &lambda].iter().all(|m| m.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidConfig("parameters must be finite".into()));
        }
        Ok(Self { n, r, b, lambda })
    }

    /// Latent dimension `l`.
    pub fn rank(&self) -> usize {
        self.n.nrows()
    }

    /// Observation dimension `n`.
    pub fn obs_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn g(&self) -> DMatrix<f64> {
        g_matrix(&self.n, &self.r).expect("validated shapes")
    }

    /// `Lambda Lambda^T`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        &self.lambda * self.lambda.transpose()
    }

    pub fn peg(&self) -> Result<PegKernel> {
        PegKernel::new(&self.n, &self.r)
    }
}

/// `G = N N^T + R - R^T`.
pub fn g_matrix(n: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !n.is_square() || n.shape() != r.shape() {
        return Err(mismatch(format!(
            "N {:?} and R {:?} must be square of the same size",
            n.shape(),
            r.shape()
        )));
    }
    Ok(n * n.transpose() + r - r.transpose())
}

/// PEG kernel with a cached eigendecomposition of `G`, so many lags share
/// one diagonalization.
#[derive(Debug, Clone)]
pub struct PegKernel {
    cache: EigenCache,
}

impl PegKernel {
    pub fn new(n: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let g = g_matrix(n, r)?;
        Ok(Self {
            cache: EigenCache::new(&g)?,
        })
    }

    pub fn rank(&self) -> usize {
        self.cache.dim()
    }

    pub fn g(&self) -> &DMatrix<f64> {
        self.cache.matrix()
    }

    pub fn cache(&self) -> &EigenCache {
        &self.cache
    }

    /// `exp(-tau G / 2)` for `tau >= 0`, `C(-tau)^T` for `tau < 0`.
    pub fn cov(&self, tau: f64) -> Result<DMatrix<f64>> {
        if tau == 0.0 {
            Ok(DMatrix::identity(self.rank(), self.rank()))
        } else if tau > 0.0 {
            self.cache.expm(-tau / 2.0)
        } else {
            Ok(self.cache.expm(tau / 2.0)?.transpose())
        }
    }
}

pub fn c_peg(tau: f64, n: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    PegKernel::new(n, r)?.cov(tau)
}

/// `B C_PEG(tau) B^T + [tau == 0] Lambda Lambda^T`.
pub fn c_leg(tau: f64, p: &LegParams) -> Result<DMatrix<f64>> {
    c_leg_many(&[tau], p).map(|mut v| v.remove(0))
}

pub fn c_leg_many(taus: &[f64], p: &LegParams) -> Result<Vec<DMatrix<f64>>> {
    let peg = p.peg()?;
    taus.iter()
        .map(|&tau| {
            let mut c = &p.b * peg.cov(tau)? * p.b.transpose();
            if tau == 0.0 {
                c += p.noise_cov();
            }
            Ok(c)
        })
        .collect()
}

/// Factor `F` with `F F^T = S` for a symmetric PSD `S`: Cholesky when it
/// succeeds, otherwise a clipped symmetric eigen factor.
pub(crate) fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (s + s.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        return ch.l();
    }
    let eig = sym.symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

/// Parameters whose kernel is the sum of the two input kernels.
pub fn leg_sum(p1: &LegParams, p2: &LegParams) -> Result<LegParams> {
    if p1.obs_dim() != p2.obs_dim() {
        return Err(mismatch(format!(
            "observation dimensions differ: {} vs {}",
            p1.obs_dim(),
            p2.obs_dim()
        )));
    }
    let (l1, l2) = (p1.rank(), p2.rank());
    let direct_sum = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(l1 + l2, l1 + l2);
        out.view_mut((0, 0), (l1, l1)).copy_from(a);
        out.view_mut((l1, l1), (l2, l2)).copy_from(b);
        out
    };
    let mut b = DMatrix::zeros(p1.obs_dim(), l1 + l2);
    b.view_mut((0, 0), (p1.obs_dim(), l1)).copy_from(&p1.b);
    b.view_mut((0, l1), (p1.obs_dim(), l2)).copy_from(&p2.b);
    let lambda = psd_factor(&(p1.noise_cov() + p2.noise_cov()));
    LegParams::new(direct_sum(&p1.n, &p2.n), direct_sum(&p1.r, &p2.r), b, lambda)
}

/// Spectral density `M(omega)` of the PEG kernel, normalized so that
/// `C(tau) = int e^{-i omega tau} M(omega) d omega`.
pub fn peg_spectrum(omega: f64, n: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<Complex64>> {
    let g = g_matrix(n, r)?;
    let l = g.nrows();
    let nnt = n * n.transpose();
    let eig = nnt.symmetric_eigenvalues();
    let top = eig.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let bottom = eig.iter().fold(f64::INFINITY, |s, &v| s.min(v));
    if !(bottom > 1e-12 * top.max(1.0)) {
        return Err(Error::SingularResolvent);
    }
    let iw = Complex64::new(0.0, omega);
    let eye = DMatrix::<Complex64>::identity(l, l);
    let half = g.map(|v| Complex64::new(v / 2.0, 0.0));
    let a = (&half - &eye * iw).try_inverse().ok_or(Error::SingularResolvent)?;
    let b = (half.transpose() + &eye * iw).try_inverse().ok_or(Error::SingularResolvent)?;
    Ok((a + b) * Complex64::new(1.0 / (2.0 * PI), 0.0))
}

/// One Celerite term `a e^{-c tau} cos(d tau) + b e^{-c tau} sin(d tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CeleriteTerm {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl CeleriteTerm {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self { a, b, c, d }
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a >= 0.0 && self.c >= 0.0 && (self.b * self.d).abs() <= self.a * self.c
    }

    pub fn eval(&self, tau: f64) -> f64 {
        celerite_eval(tau, self)
    }
}

pub fn celerite_eval(tau: f64, term: &CeleriteTerm) -> f64 {
    let tau = tau.abs();
    let decay = (-term.c * tau).exp();
    term.a * decay * (term.d * tau).cos() + term.b * decay * (term.d * tau).sin()
}

/// Rank-2 LEG parameters reproducing a positive-definite Celerite term.
///
/// With `alpha = b d / a` and `beta = sqrt(d^2 + alpha^2)`, the choice
/// `G / 2 = [[c - alpha, beta], [-beta, c + alpha]]`, `B = (sqrt(a), 0)` gives
/// `B exp(-tau G / 2) B^T = e^{-c tau}(a cos(d tau) + b sin(d tau))`, since
/// `G / 2 - c I` is traceless with determinant `d^2`. The symmetric part of
/// `G` is `diag(2c - 2 alpha, 2c + 2 alpha)`, PSD exactly when `|b d| <= a c`.
pub fn celerite_to_leg(term: &CeleriteTerm) -> Result<LegParams> {
    let CeleriteTerm { a, b, c, d } = *term;
    if !term.is_positive_definite() || !(a > 0.0) {
        return Err(Error::NotPositiveDefiniteTerm { a, b, c, d });
    }
    let alpha = b * d / a;
    let beta = (d * d + alpha * alpha).sqrt();
    let n1 = (2.0 * c - 2.0 * alpha).max(0.0).sqrt();
    let n2 = (2.0 * c + 2.0 * alpha).max(0.0).sqrt();
    LegParams::new(
        DMatrix::from_row_slice(2, 2, &[n1, 0.0, 0.0, n2]),
        DMatrix::from_row_slice(2, 2, &[0.0, 2.0 * beta, 0.0, 0.0]),
        DMatrix::from_row_slice(1, 2, &[a.sqrt(), 0.0]),
        DMatrix::zeros(1, 1),
    )
}

/// Base density of a spectral-mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralBase {
    Cauchy,
    Gaussian,
}

/// One spectral-mixture component: spectrum `b b^* gamma K(gamma (xi - mu))`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmComponent {
    pub b: DVector<Complex64>,
    pub mu: f64,
    pub gamma: f64,
    pub base: SpectralBase,
}

/// Spectral-mixture kernel value. Cauchy components evaluate in closed form
/// through the Cauchy characteristic function `e^{-i mu tau - |tau| / gamma}`.
pub fn sm_eval(tau: f64, components: &[SmComponent]) -> Result<DMatrix<Complex64>> {
    let n = components
        .first()
        .map(|c| c.b.len())
        .ok_or_else(|| mismatch("no spectral-mixture components"))?;
    let mut out = DMatrix::<Complex64>::zeros(n, n);
    for comp in components {
        if comp.base != SpectralBase::Cauchy {
            return Err(Error::UnsupportedBase(format!("{:?}", comp.base)));
        }
        if comp.b.len() != n {
            return Err(mismatch("components have different observation dimensions"));
        }
        let phase = Complex64::new(-tau.abs() / comp.gamma, -comp.mu * tau).exp();
        out += &comp.b * comp.b.adjoint() * phase;
    }
    Ok(out)
}

/// The conjugate pair of components whose kernel is
/// `Re(b b^* e^{-i mu tau - |tau| / gamma})`.
pub fn simple_real_sm(b: &DVector<Complex64>, mu: f64, gamma: f64) -> Result<Vec<SmComponent>> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
    }
    let w = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    Ok(vec![
        SmComponent {
            b: b * w,
            mu,
            gamma,
            base: SpectralBase::Cauchy,
        },
        SmComponent {
            b: b.map(|v| v.conj()) * w,
            mu: -mu,
            gamma,
            base: SpectralBase::Cauchy,
        },
    ])
}

/// Rank-2 LEG parameters reproducing the simple real Cauchy SM kernel:
/// `N = sqrt(2 / gamma) I`, `R = mu [[0, 1], [-1, 0]]`, `B = (Re b, Im b)`.
pub fn sm_to_leg(b: &DVector<Complex64>, mu: f64, gamma: f64) -> Result<LegParams> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
    }
    let n = b.len();
    let bt = DMatrix::from_fn(n, 2, |i, j| if j == 0 { b[i].re } else { b[i].im });
    LegParams::new(
        DMatrix::identity(2, 2) * (2.0 / gamma).sqrt(),
        DMatrix::from_row_slice(2, 2, &[0.0, mu, -mu, 0.0]),
        bt,
        DMatrix::zeros(n, n),
    )
}

/// Per-gap quantities of the PEG Markov chain: transition `A = C(d)`,
/// `Q^{-1} = (I - A A^T)^{-1}`, the lower off-diagonal precision block
/// `-Q^{-1} A`, the forward contribution `A^T Q^{-1} A` and `log det Q`.
struct GapTerms {
    q_inv: DMatrix<f64>,
    off: DMatrix<f64>,
    a_t_q_inv_a: DMatrix<f64>,
    logdet_q: f64,
}

fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}

fn gap_terms(peg: &PegKernel, gap: f64, index: usize) -> Result<GapTerms> {
    let l = peg.rank();
    let a = peg.cov(gap)?;
    let q = DMatrix::identity(l, l) - &a * a.transpose();
    let chol = symmetrize(q)
        .cholesky()
        .ok_or(Error::IllConditionedGap { index, gap })?;
    let logdet_q = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    if !logdet_q.is_finite() {
        return Err(Error::IllConditionedGap { index, gap });
    }
    let q_inv_a = chol.solve(&a);
    let q_inv = symmetrize(chol.inverse());
    Ok(GapTerms {
        off: -&q_inv_a,
        a_t_q_inv_a: symmetrize(a.transpose() * &q_inv_a),
        q_inv,
        logdet_q,
    })
}

/// Below this many distinct gaps the per-gap terms are computed serially.
const PAR_MIN_GAPS: usize = 256;

/// Block-tridiagonal inverse of the PEG Gram matrix at times separated by
/// `gaps` (`m - 1` positive values for `m` times).
///
/// Diagonal block `i` is `Q_{i-1}^{-1} + A_i^T Q_i^{-1} A_i`, where the
/// first term is `I` at the first time and the second vanishes at the last
/// (the infinite boundary gaps); off-diagonal block `(i + 1, i)` is
/// `-Q_i^{-1} A_i`. Repeated gap values share one evaluation.
pub fn precision_blocks(gaps: &[f64], n: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<BlockTridiag> {
    let peg = PegKernel::new(n, r)?;
    prior_precision(gaps, &peg).map(|(j, _)| j)
}

/// [`precision_blocks`] plus `log det` of the precision, which for the
/// Markov chain is `-sum_i log det Q_i`.
pub fn prior_precision(gaps: &[f64], peg: &PegKernel) -> Result<(BlockTridiag, f64)> {
    use rayon::prelude::*;

    let l = peg.rank();
    let l2 = l * l;
    let m = gaps.len() + 1;
    let mut distinct: HashMap<u64, usize> = HashMap::new();
    let mut first_use: Vec<(usize, f64)> = Vec::new();
    let mut which = Vec::with_capacity(gaps.len());
    for (index, &gap) in gaps.iter().enumerate() {
        if !(gap >= MIN_GAP) || !gap.is_finite() {
            return Err(Error::IllConditionedGap { index, gap });
        }
        let slot = *distinct.entry(gap.to_bits()).or_insert_with(|| {
            first_use.push((index, gap));
            first_use.len() - 1
        });
        which.push(slot);
    }
    let terms: Vec<Result<GapTerms>> = if first_use.len() >= PAR_MIN_GAPS {
        first_use.par_iter().map(|&(i, g)| gap_terms(peg, g, i)).collect()
    } else {
        first_use.iter().map(|&(i, g)| gap_terms(peg, g, i)).collect()
    };
    // first_use is in index order, so this reports the earliest bad gap
    let terms: Vec<GapTerms> = terms.into_iter().collect::<Result<_>>()?;

    let eye = DMatrix::<f64>::identity(l, l);
    let mut diag = Vec::with_capacity(m * l2);
    let mut off = Vec::with_capacity(gaps.len() * l2);
    let mut logdet = 0.0;
    for i in 0..m {
        let mut block = if i == 0 { eye.clone() } else { terms[which[i - 1]].q_inv.clone() };
        if i + 1 < m {
            let t = &terms[which[i]];
            block += &t.a_t_q_inv_a;
            off.extend_from_slice(t.off.as_slice());
            logdet -= t.logdet_q;
        }
        diag.extend_from_slice(block.as_slice());
    }
    Ok((BlockTridiag::new(l, diag, off)?, logdet))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn g_matrix_cases() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert_eq!(g_matrix(&eye, &DMatrix::zeros(2, 2)).unwrap(), eye);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let g = g_matrix(&DMatrix::zeros(2, 2), &r).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]));
        assert!(g_matrix(&eye, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn c_peg_scalar() {
        let n = scalar(2f64.sqrt());
        let r = scalar(0.0);
        assert_eq!(c_peg(0.0, &n, &r).unwrap(), scalar(1.0));
        assert!((c_peg(1.0, &n, &r).unwrap()[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn c_leg_scalar_and_zero_lag() {
        let p = LegParams::new(scalar(2f64.sqrt()), scalar(0.0), scalar(1.0), scalar(0.0)).unwrap();
        assert!((c_leg(2.0, &p).unwrap()[(0, 0)] - (-2f64).exp()).abs() < 1e-15);
        let p = LegParams::new(scalar(1.0), scalar(0.3), scalar(2.0), scalar(0.5)).unwrap();
        assert!((c_leg(0.0, &p).unwrap()[(0, 0)] - 4.25).abs() < 1e-15);
    }

    #[test]
    fn scalar_spectrum_is_cauchy_shaped() {
        let (n, r) = (scalar(2.0), scalar(0.0));
        for w in [0.0, 0.5, 3.0, -7.0] {
            let m = peg_spectrum(w, &n, &r).unwrap()[(0, 0)];
            assert!((m.re - (2.0 / PI) / (4.0 + w * w)).abs() < 1e-15);
            assert!(m.im.abs() < 1e-15);
        }
        assert_eq!(peg_spectrum(1.0, &scalar(0.0), &r).unwrap_err(), Error::SingularResolvent);
    }

    #[test]
    fn celerite_values() {
        let t = CeleriteTerm::new(1.5, 0.2, 0.7, 0.3);
        assert_eq!(celerite_eval(0.0, &t), 1.5);
        let t = CeleriteTerm::new(2.0, 0.0, 0.5, 0.0);
        assert!((celerite_eval(1.3, &t) - 2.0 * (-0.65f64).exp()).abs() < 1e-15);
        let t = CeleriteTerm::new(1.0, 0.0, 1.0, PI);
        assert!((celerite_eval(1.0, &t) + (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn celerite_rejects_non_pd() {
        let t = CeleriteTerm::new(1.0, 3.0, 1.0, 1.0);
        assert!(!t.is_positive_definite());
        assert!(matches!(celerite_to_leg(&t), Err(Error::NotPositiveDefiniteTerm { .. })));
        assert!(celerite_to_leg(&CeleriteTerm::new(0.0, 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn celerite_ou_case_is_diagonal() {
        let p = celerite_to_leg(&CeleriteTerm::new(1.0, 0.0, 1.0, 0.0)).unwrap();
        assert!((p.n[(0, 0)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.rank(), 2);
        assert_eq!(p.lambda, scalar(0.0));
    }

    #[test]
    fn sm_single_component() {
        let comp = SmComponent {
            b: DVector::from_element(1, Complex64::new(1.0, 0.0)),
            mu: 0.0,
            gamma: 1.0,
            base: SpectralBase::Cauchy,
        };
        for tau in [0.0, 0.4, -1.2] {
            let v = sm_eval(tau, std::slice::from_ref(&comp)).unwrap()[(0, 0)];
            assert!((v.re - (-tau.abs()).exp()).abs() < 1e-15 && v.im.abs() < 1e-15);
        }
        let gauss = SmComponent {
            base: SpectralBase::Gaussian,
            ..comp
        };
        assert!(matches!(sm_eval(0.0, &[gauss]), Err(Error::UnsupportedBase(_))));
    }

    #[test]
    fn simple_real_sm_cosine() {
        let b = DVector::from_element(1, Complex64::new(1.0, 0.0));
        let pair = simple_real_sm(&b, 2.0, 1.0).unwrap();
        for tau in [0.0, 0.3, 1.0, 2.2] {
            let v = sm_eval(tau, &pair).unwrap()[(0, 0)];
            assert!((v.re - (2.0 * tau).cos() * (-tau).exp()).abs() < 1e-15);
            assert!(v.im.abs() < 1e-15);
        }
    }

    #[test]
    fn leg_sum_ranks_add() {
        let p2 = LegParams::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), DMatrix::zeros(1, 2), scalar(0.1)).unwrap();
        let p3 = LegParams::new(DMatrix::identity(3, 3), DMatrix::zeros(3, 3), DMatrix::zeros(1, 3), scalar(0.2)).unwrap();
        let s = leg_sum(&p2, &p3).unwrap();
        assert_eq!(s.rank(), 5);
        assert!((s.noise_cov()[(0, 0)] - 0.05).abs() < 1e-15);
        let q = LegParams::new(DMatrix::identity(1, 1), scalar(0.0), DMatrix::zeros(2, 1), DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(leg_sum(&p2, &q), Err(Error::DimensionMismatch(_))));
        // zero noise on both sides still yields a valid factor
        assert_eq!(leg_sum(&q, &q).unwrap().lambda, DMatrix::zeros(2, 2));
    }

    #[test]
    fn precision_single_and_pair() {
        let (n, r) = (scalar(2f64.sqrt()), scalar(0.0));
        let j = precision_blocks(&[], &n, &r).unwrap();
        assert_eq!(j.block_count(), 1);
        assert_eq!(j.diag_block(0), scalar(1.0));

        let d: f64 = 0.8;
        let rho = (-d).exp();
        let j = precision_blocks(&[d], &n, &r).unwrap();
        let s = 1.0 - rho * rho;
        assert!((j.diag_block(0)[(0, 0)] - 1.0 / s).abs() < 1e-13);
        assert!((j.diag_block(1)[(0, 0)] - 1.0 / s).abs() < 1e-13);
        assert!((j.offdiag_block(0)[(0, 0)] + rho / s).abs() < 1e-13);
    }

    #[test]
    fn precision_rejects_tiny_gap() {
        let (n, r) = (scalar(1.0), scalar(0.0));
        assert!(matches!(
            precision_blocks(&[0.5, 1e-13], &n, &r),
            Err(Error::IllConditionedGap { index: 1, .. })
        ));
        assert!(precision_blocks(&[0.5, -1.0], &n, &r).is_err());
    }

    #[test]
    fn params_json_layout() {
        let p = LegParams::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(1, 2, &[0.5, -0.5]),
            scalar(0.1),
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"N":[[1.0,2.0],[3.0,4.0]],"R":[[0.0,0.0],[0.0,0.0]],"B":[[0.5,-0.5]],"Lambda":[[0.1]]}"#);
        let back: LegParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let bad = r#"{"N":[[1.0]],"R":[[0.0]],"B":[[1.0,2.0]],"Lambda":[[0.1]]}"#;
        assert!(serde_json::from_str::<LegParams>(bad).is_err());
    }
}
