//! File formats: series CSV, parameter JSON, prediction CSV, time specs.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use leggp::kernel::LegParams;
use leggp::{dedup, TimeSeries};
use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Parameter file: the four matrices plus optional free-form metadata.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    #[serde(flatten)]
    pub params: LegParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

pub fn read_params(path: &Path) -> Result<LegParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ParamsFile =
        serde_json::from_str(&text).with_context(|| format!("parsing parameter file {}", path.display()))?;
    Ok(file.params)
}

pub fn write_params(path: &Path, params: &LegParams, meta: Option<serde_json::Value>) -> Result<()> {
    let file = ParamsFile {
        params: params.clone(),
        meta,
    };
    write_json(path, &file)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// 17 significant digits, which round-trips every double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Raw rows of a `t,x1,...,xn` CSV: times and an `m x n` value matrix.
pub struct RawSeries {
    pub times: Vec<f64>,
    pub values: DMatrix<f64>,
}

pub fn read_series_csv(path: &Path) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = reader.headers()?.clone();
    if header.len() < 2 || header.get(0) != Some("t") {
        bail!("{}: header must be `t,x1,...,xn`", path.display());
    }
    let n = header.len() - 1;
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: malformed row {}", path.display(), line + 1))?;
        if rec.len() != n + 1 {
            bail!("{}: row {} has {} fields, expected {}", path.display(), line + 1, rec.len(), n + 1);
        }
        let mut parsed = rec.iter().map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| anyhow!("{}: row {}: `{f}` is not a finite number", path.display(), line + 1))
        });
        let t = parsed.next().expect("non-empty record")?;
        let x = parsed.collect::<Result<Vec<f64>>>()?;
        rows.push((t, x));
    }
    if rows.is_empty() {
        bail!("{}: no observations", path.display());
    }
    if rows.windows(2).any(|w| w[1].0 < w[0].0) {
        warn!("{}: rows are not sorted by t; sorting them", path.display());
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let m = rows.len();
    Ok(RawSeries {
        times: rows.iter().map(|r| r.0).collect(),
        values: DMatrix::from_fn(m, n, |i, j| rows[i].1[j]),
    })
}

pub fn read_series(path: &Path) -> Result<TimeSeries> {
    let raw = read_series_csv(path)?;
    Ok(dedup(&raw.times, &raw.values)?)
}

pub fn write_series_csv(out: &mut dyn Write, times: &[f64], values: &DMatrix<f64>) -> Result<()> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=values.ncols()).map(|j| format!("x{j}")))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, t) in times.iter().enumerate() {
        let row: Vec<String> = std::iter::once(fmt_f64(*t))
            .chain(values.row(i).iter().map(|v| fmt_f64(*v)))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Parses `t0:t1:step` (inclusive of `t1` up to rounding) or a
/// comma-separated list of times.
pub fn parse_times(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| anyhow!("`{s}` is not a finite number"))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [a, b, step] => {
            let (t0, t1, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || t1 < t0 {
                bail!("time range `{spec}` needs t0 <= t1 and a positive step");
            }
            let count = ((t1 - t0) / step + 1e-9).floor() as usize + 1;
            if count > 100_000_000 {
                bail!("time range `{spec}` has too many points");
            }
            Ok((0..count).map(|k| t0 + k as f64 * step).collect())
        }
        [_] => spec.split(',').map(num).collect(),
        _ => bail!("time spec `{spec}` must be `t0:t1:step` or a comma-separated list"),
    }
}

/// One time per non-empty line; a leading `t` header line is skipped.
pub fn read_times_file(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .filter(|(i, l)| !(*i == 0 && *l == "t"))
        .map(|(_, l)| {
            let first = l.split(',').next().unwrap_or(l);
            first
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| anyhow!("{}: `{l}` is not a finite time", path.display()))
        })
        .collect()
}

/// Parses a comma-separated list of exactly `k` numbers.
pub fn parse_list(spec: &str, k: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow!("`{s}` is not a number")))
        .collect::<Result<_>>()?;
    if v.len() != k {
        bail!("expected {k} comma-separated numbers, got `{spec}`");
    }
    Ok(v)
}

/// Parses `2^a..2^b` (every power of two in between), or a comma-separated
/// list of sizes, each optionally written as `2^k`.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let one = |s: &str| -> Result<usize> {
        let s = s.trim();
        if let Some(exp) = s.strip_prefix("2^") {
            let e: u32 = exp.parse().map_err(|_| anyhow!("bad exponent in `{s}`"))?;
            if e >= usize::BITS - 1 {
                bail!("size `{s}` is too large");
            }
            Ok(1usize << e)
        } else {
            s.parse().map_err(|_| anyhow!("`{s}` is not a size"))
        }
    };
    let sizes = if let Some((a, b)) = spec.split_once("..") {
        let (lo, hi) = (one(a)?, one(b)?);
        if !lo.is_power_of_two() || !hi.is_power_of_two() || lo > hi {
            bail!("range `{spec}` must be `2^a..2^b` with a <= b");
        }
        (lo.trailing_zeros()..=hi.trailing_zeros()).map(|e| 1usize << e).collect()
    } else {
        spec.split(',').map(one).collect::<Result<Vec<_>>>()?
    };
    if sizes.iter().any(|&m| m < 2) {
        bail!("sizes must be at least 2");
    }
    Ok(sizes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_ranges() {
        assert_eq!(parse_times("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_times("0:0.3:0.1").unwrap().len(), 4);
        assert_eq!(parse_times("1.5, 2, 7").unwrap(), vec![1.5, 2.0, 7.0]);
        assert!(parse_times("0:1:0").is_err());
        assert!(parse_times("1:0:0.1").is_err());
        assert!(parse_times("a:b").is_err());
    }

    #[test]
    fn size_specs() {
        assert_eq!(parse_sizes("2^3..2^5").unwrap(), vec![8, 16, 32]);
        assert_eq!(parse_sizes("100,2^4").unwrap(), vec![100, 16]);
        assert!(parse_sizes("2^5..2^3").is_err());
        assert!(parse_sizes("1").is_err());
    }

    #[test]
    fn float_format_roundtrips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }
}
