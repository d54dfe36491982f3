//! Maximum-likelihood fitting by BFGS over the unconstrained entries of
//! `(N, R, B, Lambda)`.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::inference::{log_likelihood_with, TimeSeries};
use crate::kernel::LegParams;

const ARMIJO: f64 = 1e-4;
const CONTRACTION: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;
/// A non-finite finite-difference probe is retried with half the step this
/// many times.
const MAX_STEP_HALVINGS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub rank: usize,
    pub max_iter: usize,
    /// Stop when the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    pub seed: u64,
    /// Fit only the diagonal of `Lambda`.
    pub diag_lambda: bool,
    /// Relative central-difference step.
    pub fd_step: f64,
    pub jitter: f64,
}

impl FitConfig {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            max_iter: 200,
            grad_tol: 1e-6,
            seed: 0,
            diag_lambda: false,
            fd_step: 1e-6,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidConfig("fd_step must be positive".into()));
        }
        if !(self.grad_tol >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::InvalidConfig("grad_tol and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Best parameters evaluated.
    pub params: LegParams,
    /// Objective at the start and after every accepted step.
    pub nats_trajectory: Vec<f64>,
    pub final_nats: f64,
    /// Gradient infinity-norm at the last iterate.
    pub grad_norm: f64,
    pub n_obj_evals: usize,
    pub n_grad_evals: usize,
    pub status: FitStatus,
    pub message: String,
}

/// Starting point: `N = I`, `R` entries `N(0, 0.2)` (standard deviation
/// `sqrt(0.2)`), `B` entries with standard deviation `1 / sqrt(l)`,
/// `Lambda = 0.1 I`.
pub fn init_params(rank: usize, obs_dim: usize, seed: u64) -> LegParams {
    assert!(rank >= 1 && obs_dim >= 1, "rank and observation dimension must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_dist = Normal::new(0.0, 0.2f64.sqrt()).expect("valid sd");
    let b_dist = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("valid sd");
    let r = DMatrix::from_row_iterator(rank, rank, (0..rank * rank).map(|_| r_dist.sample(&mut rng)));
    let b = DMatrix::from_row_iterator(obs_dim, rank, (0..obs_dim * rank).map(|_| b_dist.sample(&mut rng)));
    LegParams::new(
        DMatrix::identity(rank, rank),
        r,
        b,
        DMatrix::identity(obs_dim, obs_dim) * 0.1,
    )
    .expect("consistent shapes")
}

/// Flat parameter vector: row-major `N`, `R`, `B`, then `Lambda` (only its
/// diagonal when `diag_lambda`).
pub fn flatten(p: &LegParams, diag_lambda: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for m in [&p.n, &p.r, &p.b] {
        out.extend(m.transpose().iter());
    }
    if diag_lambda {
        out.extend(p.lambda.diagonal().iter());
    } else {
        out.extend(p.lambda.transpose().iter());
    }
    out
}

pub fn flat_len(rank: usize, obs_dim: usize, diag_lambda: bool) -> usize {
    2 * rank * rank + obs_dim * rank + if diag_lambda { obs_dim } else { obs_dim * obs_dim }
}

pub fn unflatten(theta: &[f64], rank: usize, obs_dim: usize, diag_lambda: bool) -> Result<LegParams> {
    let (l, n) = (rank, obs_dim);
    if theta.len() != flat_len(l, n, diag_lambda) {
        return Err(mismatch(format!(
            "flat vector has {} entries, expected {}",
            theta.len(),
            flat_len(l, n, diag_lambda)
        )));
    }
    let (nm, rest) = theta.split_at(l * l);
    let (rm, rest) = rest.split_at(l * l);
    let (bm, lm) = rest.split_at(n * l);
    let lambda = if diag_lambda {
        DMatrix::from_diagonal(&DVector::from_column_slice(lm))
    } else {
        DMatrix::from_row_slice(n, n, lm)
    };
    LegParams::new(
        DMatrix::from_row_slice(l, l, nm),
        DMatrix::from_row_slice(l, l, rm),
        DMatrix::from_row_slice(n, l, bm),
        lambda,
    )
}

/// Sum with a fixed pairwise tree, so the result does not depend on how the
/// terms were computed.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        k => pairwise_sum(&v[..k / 2]) + pairwise_sum(&v[k / 2..]),
    }
}

/// Negative total log-likelihood of independent series, in nats.
pub fn objective(series: &[TimeSeries], p: &LegParams, jitter: f64) -> Result<f64> {
    let peg = p.peg()?;
    let per: Vec<f64> = series
        .par_iter()
        .map(|ts| log_likelihood_with(ts, p, &peg, jitter).map(|ll| -ll))
        .collect::<Result<_>>()?;
    let total = pairwise_sum(&per);
    debug!("objective {total:.6} nats ({:.6} per observation)", total / total_obs(series) as f64);
    Ok(total)
}

fn total_obs(series: &[TimeSeries]) -> usize {
    series.iter().map(TimeSeries::len).sum::<usize>().max(1)
}

/// Objective at a flat vector; errors and non-finite values become `None`.
fn try_objective(series: &[TimeSeries], theta: &[f64], rank: usize, cfg: &FitConfig) -> Option<f64> {
    let p = unflatten(theta, rank, series[0].obs_dim(), cfg.diag_lambda).ok()?;
    objective(series, &p, cfg.jitter).ok().filter(|v| v.is_finite())
}

/// Central finite-difference gradient of [`objective`] in the [`flatten`]
/// layout, with step `fd_step (1 + |theta_i|)` per coordinate.
pub fn gradient(series: &[TimeSeries], p: &LegParams, cfg: &FitConfig) -> Result<Vec<f64>> {
    check_series(series, p.obs_dim())?;
    let theta = flatten(p, cfg.diag_lambda);
    gradient_flat(series, &theta, p.rank(), cfg)
}

fn gradient_flat(series: &[TimeSeries], theta: &[f64], rank: usize, cfg: &FitConfig) -> Result<Vec<f64>> {
    (0..theta.len())
        .into_par_iter()
        .map(|i| {
            let mut h = cfg.fd_step * (1.0 + theta[i].abs());
            let mut probe = theta.to_vec();
            for _ in 0..=MAX_STEP_HALVINGS {
                probe[i] = theta[i] + h;
                let up = try_objective(series, &probe, rank, cfg);
                probe[i] = theta[i] - h;
                let dn = try_objective(series, &probe, rank, cfg);
                if let (Some(up), Some(dn)) = (up, dn) {
                    return Ok((up - dn) / (2.0 * h));
                }
                h *= 0.5;
            }
            Err(Error::NonFiniteObjective { coordinate: i })
        })
        .collect()
}

fn check_series(series: &[TimeSeries], obs_dim: usize) -> Result<()> {
    if series.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(ts) = series.iter().find(|ts| ts.obs_dim() != obs_dim) {
        return Err(mismatch(format!(
            "series have {} and {} columns",
            obs_dim,
            ts.obs_dim()
        )));
    }
    Ok(())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |s, x| s.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with an inverse-Hessian update and Armijo backtracking.
///
/// Starts from `init` when given, otherwise from [`init_params`] with
/// `cfg.seed`. Always returns the best parameters evaluated; a numeric
/// failure after the first evaluation ends the run with
/// [`FitStatus::LineSearchFailure`].
pub fn fit(series: &[TimeSeries], cfg: &FitConfig, init: Option<&LegParams>) -> Result<FitResult> {
    cfg.validate()?;
    if series.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = series[0].obs_dim();
    check_series(series, n)?;
    let p0 = match init {
        Some(p) => {
            if p.rank() != cfg.rank || p.obs_dim() != n {
                return Err(mismatch(format!(
                    "initial parameters have rank {} and observation dimension {}, expected {} and {n}",
                    p.rank(),
                    p.obs_dim(),
                    cfg.rank
                )));
            }
            p.clone()
        }
        None => init_params(cfg.rank, n, cfg.seed),
    };
    let rank = cfg.rank;
    let mut theta = flatten(&p0, cfg.diag_lambda);
    let dim = theta.len();
    let mut f = objective(series, &unflatten(&theta, rank, n, cfg.diag_lambda)?, cfg.jitter)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective { coordinate: 0 });
    }
    let mut n_obj = 1;
    let mut n_grad = 0;
    let mut best = (f, theta.clone());
    let mut trajectory = vec![f];

    let finish = |best: (f64, Vec<f64>), trajectory, grad_norm, n_obj, n_grad, status, message: String| {
        info!("fit finished: {message}");
        Ok(FitResult {
            params: unflatten(&best.1, rank, n, cfg.diag_lambda)?,
            nats_trajectory: trajectory,
            final_nats: best.0,
            grad_norm,
            n_obj_evals: n_obj,
            n_grad_evals: n_grad,
            status,
            message,
        })
    };

    let mut g = match gradient_flat(series, &theta, rank, cfg) {
        Ok(g) => g,
        Err(e) => {
            return finish(best, trajectory, f64::NAN, n_obj, n_grad, FitStatus::LineSearchFailure, e.to_string())
        }
    };
    n_grad += 1;
    n_obj += 2 * dim;
    let mut hinv = DMatrix::<f64>::identity(dim, dim);
    let mut fresh = true;

    for iter in 0..cfg.max_iter {
        let gnorm = inf_norm(&g);
        if gnorm <= cfg.grad_tol {
            let msg = format!("gradient norm {gnorm:.3e} below tolerance after {iter} iterations");
            return finish(best, trajectory, gnorm, n_obj, n_grad, FitStatus::Converged, msg);
        }
        let gv = DVector::from_column_slice(&g);
        let mut d: Vec<f64> = (-(&hinv * &gv)).iter().copied().collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(dim, dim);
            fresh = true;
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut alpha = if fresh { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let cand: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + alpha * di).collect();
            n_obj += 1;
            if let Some(fc) = try_objective(series, &cand, rank, cfg) {
                if fc < best.0 {
                    best = (fc, cand.clone());
                }
                if fc <= f + ARMIJO * alpha * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            alpha *= CONTRACTION;
        }
        let Some((cand, fc)) = accepted else {
            let msg = format!("line search failed at iteration {iter}");
            return finish(best, trajectory, gnorm, n_obj, n_grad, FitStatus::LineSearchFailure, msg);
        };
        let g_new = match gradient_flat(series, &cand, rank, cfg) {
            Ok(g) => g,
            Err(e) => {
                let msg = format!("gradient failed at iteration {iter}: {e}");
                return finish(best, trajectory, gnorm, n_obj, n_grad, FitStatus::LineSearchFailure, msg);
            }
        };
        n_grad += 1;
        n_obj += 2 * dim;

        let s = DVector::from_iterator(dim, cand.iter().zip(&theta).map(|(a, b)| a - b));
        let y = DVector::from_iterator(dim, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                hinv = DMatrix::identity(dim, dim) * (sy / y.dot(&y));
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T, expanded
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        theta = cand;
        f = fc;
        g = g_new;
        trajectory.push(f);
        debug!("iteration {iter}: {f:.6} nats, |g| {:.3e}", inf_norm(&g));
    }
    let gnorm = inf_norm(&g);
    let status = if gnorm <= cfg.grad_tol { FitStatus::Converged } else { FitStatus::MaxIter };
    let msg = format!("stopped after {} iterations, gradient norm {gnorm:.3e}", cfg.max_iter);
    finish(best, trajectory, gnorm, n_obj, n_grad, status, msg)
}

/// Best of `restarts` fits seeded `cfg.seed, cfg.seed + 1, ...`.
pub fn fit_restarts(series: &[TimeSeries], cfg: &FitConfig, restarts: usize) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    for k in 0..restarts.max(1) {
        let run_cfg = FitConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let res = fit(series, &run_cfg, None)?;
        info!("restart {k}: {:.6} nats ({:?})", res.final_nats, res.status);
        if best.as_ref().is_none_or(|b| res.final_nats < b.final_nats) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one run"))
}
