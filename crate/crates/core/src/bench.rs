//! Wall-time scaling of the PEG likelihood.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::Serialize;

use crate::btd;
use crate::error::{Error, Result};
use crate::kernel::{prior_precision, PegKernel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchPoint {
    pub m: usize,
    pub median_seconds: f64,
}

/// Log-density of the PEG latents at `z = 0` on the given times:
/// `-(m l log(2 pi) - log det J) / 2` with `J` the prior precision.
pub fn peg_log_density_at_zero(times: &[f64], peg: &PegKernel) -> Result<f64> {
    if times.is_empty() {
        return Err(Error::EmptyInput);
    }
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let (j, _) = prior_precision(&gaps, peg)?;
    let zeros = vec![0.0; times.len() * peg.rank()];
    let (mahal, logdet) = btd::mahal_and_logdet(&j, &zeros)?;
    let dim = zeros.len() as f64;
    Ok(-0.5 * (mahal + dim * (2.0 * std::f64::consts::PI).ln() - logdet))
}

/// Random rank-`l` PEG model and `m` irregular times (unit-mean
/// exponential gaps), both determined by `seed`.
pub fn bench_problem(rank: usize, m: usize, seed: u64) -> Result<(PegKernel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.2f64.sqrt()).expect("valid sd");
    let r = DMatrix::from_fn(rank, rank, |_, _| normal.sample(&mut rng));
    let peg = PegKernel::new(&DMatrix::identity(rank, rank), &r)?;
    let exp = Exp::new(1.0).expect("valid rate");
    let mut t = 0.0;
    let times = (0..m)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect();
    Ok((peg, times))
}

/// Median wall time of [`peg_log_density_at_zero`] at each size.
pub fn bench_likelihood(rank: usize, sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<BenchPoint>> {
    if rank == 0 || repeats == 0 {
        return Err(Error::InvalidConfig("rank and repeats must be at least 1".into()));
    }
    sizes
        .iter()
        .map(|&m| {
            let (peg, times) = bench_problem(rank, m, seed)?;
            let mut secs = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                let v = peg_log_density_at_zero(&times, &peg)?;
                secs.push(start.elapsed().as_secs_f64());
                std::hint::black_box(v);
            }
            Ok(BenchPoint {
                m,
                median_seconds: median(&mut secs),
            })
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares slope of `log(seconds)` against `log(m)`.
pub fn loglog_slope(points: &[BenchPoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.m as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.median_seconds.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<BenchPoint> = (10..15)
            .map(|k| BenchPoint {
                m: 1 << k,
                median_seconds: 1e-9 * (1u64 << k) as f64,
            })
            .collect();
        assert!((loglog_slope(&pts) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_latents_density() {
        // widely separated times decouple the latents
        let peg = PegKernel::new(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        let v = peg_log_density_at_zero(&[0.0, 1e3, 2e3], &peg).unwrap();
        assert!((v + 3.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
