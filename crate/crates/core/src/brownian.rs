//! Monte Carlo Brownian motion: sampled paths, quadratic variation
//! (`dB^2 = dt`) and expectation checks of Itō's lemma.
//!
//! Increments are `sqrt(dt) * Z` with `Z` standard normal (ziggurat
//! transform of the ChaCha8 stream). Path `k` of an ensemble always uses
//! PRNG stream `k`, and ensemble sums run over fixed-size chunks combined in
//! chunk order, so serial and parallel runs give identical bits.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const CHUNK: usize = 256;

/// A sampled scalar Brownian path on a time grid starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    t: Vec<f64>,
    b: Vec<f64>,
}

impl BrownianPath {
    pub fn new(t: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if t.len() != b.len() || t.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: "non-empty time grid and values of equal length".into(),
                got: format!("{} times, {} values", t.len(), b.len()),
            });
        }
        if t[0] != 0.0 || b[0] != 0.0 {
            return Err(Error::BadConfig(
                "a Brownian path starts at t = 0 with B_0 = 0".into(),
            ));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::BadConfig(
                "time grid must be strictly increasing".into(),
            ));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Brownian path".into()));
        }
        Ok(Self { t, b })
    }

    pub fn times(&self) -> &[f64] {
        &self.t
    }

    pub fn values(&self) -> &[f64] {
        &self.b
    }

    pub fn horizon(&self) -> f64 {
        *self.t.last().expect("non-empty")
    }

    pub fn terminal(&self) -> f64 {
        *self.b.last().expect("non-empty")
    }
}

fn check_grid(horizon: f64, n_steps: usize) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) || n_steps == 0 {
        return Err(Error::BadConfig(format!(
            "Brownian sampling needs T > 0 and n_steps >= 1 (T={horizon}, n_steps={n_steps})"
        )));
    }
    Ok(())
}

fn fill_path(horizon: f64, n_steps: usize, seed: u64, stream: u64, b: &mut [f64]) {
    let sd = (horizon / n_steps as f64).sqrt();
    let mut rng = rng::stream(seed, stream);
    b[0] = 0.0;
    for k in 1..=n_steps {
        let z: f64 = StandardNormal.sample(&mut rng);
        b[k] = b[k - 1] + sd * z;
    }
}

/// Uniform grid `dt = T / n_steps`, Gaussian increments, PRNG stream 0.
pub fn sample_path(horizon: f64, n_steps: usize, seed: u64) -> Result<BrownianPath> {
    sample_path_stream(horizon, n_steps, seed, 0)
}

pub fn sample_path_stream(
    horizon: f64,
    n_steps: usize,
    seed: u64,
    stream: u64,
) -> Result<BrownianPath> {
    check_grid(horizon, n_steps)?;
    let dt = horizon / n_steps as f64;
    let t: Vec<f64> = (0..=n_steps).map(|k| k as f64 * dt).collect();
    let mut b = vec![0.0; n_steps + 1];
    fill_path(horizon, n_steps, seed, stream, &mut b);
    BrownianPath::new(t, b)
}

/// Sum of squared increments.
pub fn quadratic_variation(path: &BrownianPath) -> f64 {
    path.b
        .windows(2)
        .map(|w| (w[1] - w[0]) * (w[1] - w[0]))
        .sum()
}

/// Per-ensemble statistics, with per-path quantities indexed by path.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    /// `B_T` per path.
    pub terminal: Vec<f64>,
    /// `B_{t_m}` per path at the grid point `m = n_steps / 2`.
    pub midpoint: Vec<f64>,
    pub quadratic_variation: Vec<f64>,
    pub time: Vec<f64>,
    /// Unbiased sample variance of `B_t` across paths at every grid time.
    pub variance_by_time: Vec<f64>,
}

struct ChunkAcc {
    terminal: Vec<f64>,
    midpoint: Vec<f64>,
    qv: Vec<f64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Samples `n_paths` paths without retaining them, keeping only what the
/// checks need.
pub fn sample_ensemble(
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<EnsembleSummary> {
    check_grid(horizon, n_steps)?;
    if n_paths < 2 {
        return Err(Error::BadConfig(
            "an ensemble needs at least 2 paths".into(),
        ));
    }
    let mid = n_steps / 2;
    let chunks: Vec<ChunkAcc> = (0..n_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n_paths);
            let mut acc = ChunkAcc {
                terminal: Vec::with_capacity(hi - lo),
                midpoint: Vec::with_capacity(hi - lo),
                qv: Vec::with_capacity(hi - lo),
                sum: vec![0.0; n_steps + 1],
                sum_sq: vec![0.0; n_steps + 1],
            };
            let mut b = vec![0.0; n_steps + 1];
            for path in lo..hi {
                fill_path(horizon, n_steps, seed, path as u64, &mut b);
                acc.terminal.push(b[n_steps]);
                acc.midpoint.push(b[mid]);
                acc.qv
                    .push(b.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum());
                for (k, v) in b.iter().enumerate() {
                    acc.sum[k] += v;
                    acc.sum_sq[k] += v * v;
                }
            }
            acc
        })
        .collect();

    let mut terminal = Vec::with_capacity(n_paths);
    let mut midpoint = Vec::with_capacity(n_paths);
    let mut qv = Vec::with_capacity(n_paths);
    let mut sum = vec![0.0; n_steps + 1];
    let mut sum_sq = vec![0.0; n_steps + 1];
    for c in chunks {
        terminal.extend(c.terminal);
        midpoint.extend(c.midpoint);
        qv.extend(c.qv);
        for k in 0..=n_steps {
            sum[k] += c.sum[k];
            sum_sq[k] += c.sum_sq[k];
        }
    }
    let np = n_paths as f64;
    let variance_by_time = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, s2)| ((s2 - s * s / np) / (np - 1.0)).max(0.0))
        .collect();
    let dt = horizon / n_steps as f64;
    Ok(EnsembleSummary {
        horizon,
        n_steps,
        n_paths,
        terminal,
        midpoint,
        quadratic_variation: qv,
        time: (0..=n_steps).map(|k| k as f64 * dt).collect(),
        variance_by_time,
    })
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Pearson correlation of two equally long samples.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, vx) = mean_var(xs);
    let (my, vy) = mean_var(ys);
    let cov = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (xs.len() as f64 - 1.0);
    cov / (vx * vy).sqrt()
}

/// Ordinary least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Test functions `f(t, B_t)` with known expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItoFunction {
    /// `B_t^2`; drift `1/2 f'' = 1`, so `E = t`.
    Square,
    /// `B_t^3`; drift `3 B_t` has zero mean, so `E = 0`.
    Cube,
    /// `exp(B_t - t/2)`; `f_t + 1/2 f_BB = 0`, so `E = 1`.
    ExpMartingale,
}

impl ItoFunction {
    pub fn eval(self, t: f64, b: f64) -> f64 {
        match self {
            Self::Square => b * b,
            Self::Cube => b * b * b,
            Self::ExpMartingale => (b - 0.5 * t).exp(),
        }
    }

    /// `E[f(T, B_T)]` obtained by integrating the Itō drift.
    pub fn expectation(self, horizon: f64) -> f64 {
        match self {
            Self::Square => horizon,
            Self::Cube => 0.0,
            Self::ExpMartingale => 1.0,
        }
    }

    /// Standard deviation of `f(T, B_T)` itself, for Monte Carlo error budgets.
    pub fn std_dev(self, horizon: f64) -> f64 {
        match self {
            Self::Square => (2.0 * horizon * horizon).sqrt(),
            Self::Cube => (15.0 * horizon.powi(3)).sqrt(),
            Self::ExpMartingale => (horizon.exp() - 1.0).sqrt(),
        }
    }
}

impl FromStr for ItoFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "square" => Ok(Self::Square),
            "cube" => Ok(Self::Cube),
            "exp-martingale" | "exp" => Ok(Self::ExpMartingale),
            _ => Err(Error::UnknownFunction(s.to_string())),
        }
    }
}

impl fmt::Display for ItoFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Square => "square",
            Self::Cube => "cube",
            Self::ExpMartingale => "exp-martingale",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoReport {
    pub function: ItoFunction,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub mc_expectation: f64,
    pub analytic_expectation: f64,
    pub abs_error: f64,
    /// Three standard errors of the Monte Carlo mean.
    pub three_sigma: f64,
}

pub fn ito_check(
    function: ItoFunction,
    horizon: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<ItoReport> {
    let ens = sample_ensemble(horizon, n_steps, n_paths, seed)?;
    Ok(ito_from_ensemble(function, &ens))
}

/// Evaluates one test function on an already sampled ensemble.
pub fn ito_from_ensemble(function: ItoFunction, ens: &EnsembleSummary) -> ItoReport {
    let t = ens.horizon;
    let mc = ens
        .terminal
        .iter()
        .map(|b| function.eval(t, *b))
        .sum::<f64>()
        / ens.n_paths as f64;
    let analytic = function.expectation(t);
    ItoReport {
        function,
        horizon: t,
        n_steps: ens.n_steps,
        n_paths: ens.n_paths,
        mc_expectation: mc,
        analytic_expectation: analytic,
        abs_error: (mc - analytic).abs(),
        three_sigma: 3.0 * function.std_dev(t) / (ens.n_paths as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_starts_at_origin_and_is_reproducible() {
        let p = sample_path(2.0, 100, 4).unwrap();
        assert_eq!(p.values()[0], 0.0);
        assert_eq!(p.times()[0], 0.0);
        assert_eq!(p.times().len(), 101);
        assert!((p.horizon() - 2.0).abs() < 1e-15);
        assert_eq!(p, sample_path(2.0, 100, 4).unwrap());
        assert_ne!(p, sample_path(2.0, 100, 5).unwrap());
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(sample_path(0.0, 10, 1).is_err());
        assert!(sample_path(1.0, 0, 1).is_err());
        assert!(BrownianPath::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(BrownianPath::new(vec![0.0, 1.0], vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn quadratic_variation_examples() {
        let flat = BrownianPath::new(vec![0.0, 0.5, 1.0], vec![0.0; 3]).unwrap();
        assert_eq!(quadratic_variation(&flat), 0.0);
        let n = 400;
        let horizon = 3.0;
        let dt = horizon / n as f64;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
        let b: Vec<f64> = (0..=n).map(|k| k as f64 * dt.sqrt()).collect();
        let qv = quadratic_variation(&BrownianPath::new(t, b).unwrap());
        assert!((qv - horizon).abs() < 1e-12);
    }

    #[test]
    fn ensemble_matches_individual_paths() {
        let ens = sample_ensemble(1.0, 50, 600, 21).unwrap();
        for k in [0usize, 255, 256, 599] {
            let p = sample_path_stream(1.0, 50, 21, k as u64).unwrap();
            assert_eq!(ens.terminal[k], p.terminal());
            assert_eq!(ens.midpoint[k], p.values()[25]);
            assert_eq!(ens.quadratic_variation[k], quadratic_variation(&p));
        }
        assert_eq!(ens.variance_by_time[0], 0.0);
    }

    #[test]
    fn ensemble_is_deterministic() {
        let a = sample_ensemble(1.0, 20, 1000, 3).unwrap();
        let b = sample_ensemble(1.0, 20, 1000, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn function_ids() {
        assert_eq!(
            "square".parse::<ItoFunction>().unwrap(),
            ItoFunction::Square
        );
        assert_eq!(
            "EXP_MARTINGALE".parse::<ItoFunction>().unwrap(),
            ItoFunction::ExpMartingale
        );
        assert!(matches!(
            "sine".parse::<ItoFunction>(),
            Err(Error::UnknownFunction(_))
        ));
        assert_eq!(ItoFunction::Cube.to_string(), "cube");
    }

    #[test]
    fn ito_square_small_ensemble() {
        let r = ito_check(ItoFunction::Square, 1.0, 200, 10_000, 7).unwrap();
        assert_eq!(r.analytic_expectation, 1.0);
        assert!(r.abs_error <= 0.05, "{r:?}");
    }
}
