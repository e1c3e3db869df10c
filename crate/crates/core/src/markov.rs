//! Transition matrices, random walks and the diffusion limit of the lattice walk.
//!
//! Row convention: `m[i][j] = Pr(j | i)`. A distribution (column vector)
//! evolves as `p_{t+1} = m^T p_t`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng as _, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// Row-sum tolerance for a freshly validated transition matrix.
pub const ROW_SUM_TOL: f64 = 1e-12;
/// Row-sum tolerance for products of transition matrices.
pub const POWER_ROW_SUM_TOL: f64 = 1e-10;
/// Negative entries above this are rounding noise and get clamped to zero.
pub const NEGATIVE_FLOOR: f64 = -1e-15;

/// Row-stochastic `n x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    m: Array2<f64>,
}

impl TransitionMatrix {
    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.m.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.m
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.m.row(i)
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_defect(&self) -> f64 {
        self.m
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Validates `m` at the default row-sum tolerance of `1e-12`.
pub fn validate_transition(m: Array2<f64>) -> Result<TransitionMatrix> {
    validate_transition_with_tol(m, ROW_SUM_TOL)
}

pub fn validate_transition_with_tol(mut m: Array2<f64>, tol: f64) -> Result<TransitionMatrix> {
    let (rows, cols) = m.dim();
    if rows == 0 || rows != cols {
        return Err(Error::ShapeMismatch {
            expected: "non-empty square matrix".into(),
            got: format!("{rows}x{cols}"),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("transition matrix".into()));
    }
    for ((row, col), &value) in m.indexed_iter() {
        if value < NEGATIVE_FLOOR {
            return Err(Error::NegativeEntry { row, col, value });
        }
    }
    for (row, r) in m.rows().into_iter().enumerate() {
        let sum = r.sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::RowSumViolation { row, sum, tol });
        }
    }
    m.mapv_inplace(|x| x.clamp(0.0, 1.0));
    Ok(TransitionMatrix { m })
}

/// `m^k` by binary powering.
pub fn k_step(m: &TransitionMatrix, k: u32) -> Result<TransitionMatrix> {
    if k == 0 {
        return Err(Error::BadConfig("k_step needs k >= 1".into()));
    }
    let mut result: Option<Array2<f64>> = None;
    let mut base = m.m.clone();
    let mut e = k;
    loop {
        if e & 1 == 1 {
            result = Some(match result {
                None => base.clone(),
                Some(r) => r.dot(&base),
            });
        }
        e >>= 1;
        if e == 0 {
            break;
        }
        base = base.dot(&base);
    }
    let mut out = result.expect("k >= 1 sets at least one bit");
    out.mapv_inplace(|x| x.clamp(0.0, 1.0));
    Ok(TransitionMatrix { m: out })
}

fn check_distribution(p: ArrayView1<'_, f64>, tol: f64) -> Result<()> {
    if let Some((i, v)) = p
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < -tol)
    {
        return Err(Error::NotADistribution(format!("entry {i} is {v}")));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::NotADistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// `(m^T)^t p0`.
pub fn evolve_distribution(
    m: &TransitionMatrix,
    p0: ArrayView1<'_, f64>,
    t: usize,
) -> Result<Array1<f64>> {
    if p0.len() != m.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("distribution over {} states", m.n()),
            got: p0.len().to_string(),
        });
    }
    check_distribution(p0, ROW_SUM_TOL)?;
    let mt = m.m.t();
    let mut p = p0.to_owned();
    for _ in 0..t {
        p = mt.dot(&p);
    }
    Ok(p)
}

/// Inverse-CDF draw from a categorical row. Falls back to the last state
/// with positive mass when rounding leaves `u` past the final partial sum.
fn categorical(row: ArrayView1<'_, f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &w) in row.iter().enumerate() {
        if w > 0.0 {
            last_positive = j;
            acc += w;
            if u < acc {
                return j;
            }
        }
    }
    last_positive
}

/// Walk of `steps` transitions starting at `start`, drawn from stream 0 of `seed`.
pub fn sample_walk(
    m: &TransitionMatrix,
    start: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    sample_walk_stream(m, start, steps, seed, 0)
}

/// Same as [`sample_walk`] but on an explicit PRNG stream, so that walker `i`
/// of an ensemble is reproducible on its own.
pub fn sample_walk_stream(
    m: &TransitionMatrix,
    start: usize,
    steps: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<usize>> {
    if start >= m.n() {
        return Err(Error::IndexOutOfRange {
            id: start,
            vocab: m.n(),
        });
    }
    let mut rng = rng::stream(seed, stream);
    let mut path = Vec::with_capacity(steps + 1);
    let mut state = start;
    path.push(state);
    for _ in 0..steps {
        state = categorical(m.row(state), rng.random::<f64>());
        path.push(state);
    }
    Ok(path)
}

/// Empirical `k`-step transition frequencies from `walks_per_state` walks
/// out of every state. Row `i` estimates row `i` of `m^k`.
pub fn empirical_k_step(
    m: &TransitionMatrix,
    k: usize,
    walks_per_state: usize,
    seed: u64,
) -> Array2<f64> {
    let n = m.n();
    let mut counts = Array2::<f64>::zeros((n, n));
    for start in 0..n {
        let ends: Vec<usize> = (0..walks_per_state)
            .into_par_iter()
            .map(|w| {
                let stream = (start * walks_per_state + w) as u64;
                *sample_walk_stream(m, start, k, seed, stream)
                    .expect("start < n")
                    .last()
                    .expect("walk is non-empty")
            })
            .collect();
        for end in ends {
            counts[[start, end]] += 1.0;
        }
    }
    counts / walks_per_state as f64
}

/// Symmetric `±h` lattice walk with time step `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub h: f64,
    pub tau: f64,
}

impl DiffusionSpec {
    pub fn new(h: f64, tau: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite() && tau > 0.0 && tau.is_finite()) {
            return Err(Error::BadConfig(format!(
                "diffusion needs h > 0 and tau > 0 (h={h}, tau={tau})"
            )));
        }
        Ok(Self { h, tau })
    }

    /// `D = h^2 / (2 tau)`.
    pub fn coefficient(&self) -> f64 {
        self.h * self.h / (2.0 * self.tau)
    }
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        Self { h: 1.0, tau: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub n_steps: usize,
    pub n_walkers: usize,
    pub diffusion_coefficient: f64,
    pub horizon: f64,
    pub ks_statistic: f64,
    pub empirical_variance: f64,
    pub analytic_variance: f64,
}

#[derive(Debug, Clone)]
pub struct DiffusionOutcome {
    pub report: DiffusionReport,
    /// Terminal position of every walker, indexed by walker.
    pub terminal_positions: Vec<f64>,
}

/// Net displacement, in lattice units, of `n_steps` fair `±1` steps. Each
/// random bit is one step.
fn lattice_displacement(rng: &mut rng::Rng, n_steps: usize) -> i64 {
    let mut ups = 0u64;
    let mut left = n_steps;
    while left > 0 {
        let bits = rng.next_u64();
        let take = left.min(64);
        let masked = if take == 64 {
            bits
        } else {
            bits & ((1u64 << take) - 1)
        };
        ups += u64::from(masked.count_ones());
        left -= take;
    }
    2 * ups as i64 - n_steps as i64
}

/// Kolmogorov-Smirnov distance between the empirical CDF of `samples` and a
/// continuous `cdf`. Ties are handled by evaluating both one-sided limits at
/// every distinct value.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let x = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == x {
            j += 1;
        }
        let f = cdf(x);
        sup = sup
            .max((f - i as f64 / n).abs())
            .max((j as f64 / n - f).abs());
        i = j;
    }
    sup
}

/// Simulates `n_walkers` independent symmetric walks and compares the
/// terminal distribution with the diffusion kernel `N(0, 2 D T)`,
/// `T = n_steps * tau`.
pub fn diffusion_limit_check(
    spec: DiffusionSpec,
    n_steps: usize,
    n_walkers: usize,
    seed: u64,
) -> Result<DiffusionOutcome> {
    if n_steps == 0 || n_walkers < 2 {
        return Err(Error::BadConfig(
            "diffusion check needs n_steps >= 1 and n_walkers >= 2".into(),
        ));
    }
    let h = spec.h;
    let terminal_positions: Vec<f64> = (0..n_walkers as u64)
        .into_par_iter()
        .map(|w| {
            let mut rng = rng::stream(seed, w);
            h * lattice_displacement(&mut rng, n_steps) as f64
        })
        .collect();

    let n = n_walkers as f64;
    let mean = terminal_positions.iter().sum::<f64>() / n;
    let empirical_variance = terminal_positions
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / (n - 1.0);

    let horizon = n_steps as f64 * spec.tau;
    let d = spec.coefficient();
    let target_var = 2.0 * d * horizon;
    let gauss = Normal::new(0.0, target_var.sqrt()).map_err(|e| Error::BadConfig(e.to_string()))?;
    let ks = ks_statistic(&terminal_positions, |x| gauss.cdf(x));

    Ok(DiffusionOutcome {
        report: DiffusionReport {
            n_steps,
            n_walkers,
            diffusion_coefficient: d,
            horizon,
            ks_statistic: ks,
            empirical_variance,
            analytic_variance: n_steps as f64 * h * h,
        },
        terminal_positions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn chain3() -> TransitionMatrix {
        validate_transition(array![[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]]).unwrap()
    }

    #[test]
    fn validation_examples() {
        assert!(validate_transition(Array2::eye(3)).is_ok());
        assert!(validate_transition(array![[0.5, 0.5], [0.25, 0.75]]).is_ok());
        assert!(matches!(
            validate_transition(array![[0.6, 0.6], [0.5, 0.5]]),
            Err(Error::RowSumViolation { row: 0, .. })
        ));
        assert!(matches!(
            validate_transition(array![[1.1, -0.1], [0.5, 0.5]]),
            Err(Error::NegativeEntry { row: 0, col: 1, .. })
        ));
        assert!(validate_transition(array![[0.5, 0.5, 0.0]]).is_err());
    }

    #[test]
    fn tiny_negatives_are_clamped() {
        let t = validate_transition(array![[1.0 + 5e-16, -5e-16], [0.0, 1.0]]).unwrap();
        assert_eq!(t.as_array()[[0, 1]], 0.0);
        assert_eq!(t.as_array()[[0, 0]], 1.0);
    }

    #[test]
    fn k_step_examples() {
        let m = chain3();
        assert_eq!(k_step(&m, 1).unwrap(), m);
        let flip = validate_transition(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(
            k_step(&flip, 2).unwrap().into_inner(),
            Array2::<f64>::eye(2)
        );
        assert!(k_step(&m, 0).is_err());
        let m5 = k_step(&m, 5).unwrap();
        let direct = m.m.dot(&m.m).dot(&m.m).dot(&m.m).dot(&m.m);
        assert!((m5.into_inner() - direct).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn evolve_examples() {
        let p0 = array![0.1, 0.7, 0.2];
        let id = validate_transition(Array2::eye(3)).unwrap();
        assert_eq!(evolve_distribution(&id, p0.view(), 9).unwrap(), p0);
        let half = validate_transition(array![[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let out = evolve_distribution(&half, array![0.9, 0.1].view(), 1).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15 && (out[1] - 0.5).abs() < 1e-15);
        let ds =
            validate_transition(array![[0.2, 0.3, 0.5], [0.5, 0.2, 0.3], [0.3, 0.5, 0.2]]).unwrap();
        let u = Array1::from_elem(3, 1.0 / 3.0);
        for t in [1, 4, 17] {
            let out = evolve_distribution(&ds, u.view(), t).unwrap();
            assert!(out.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-14));
        }
        assert!(matches!(
            evolve_distribution(&ds, array![0.5, 0.6, -0.1].view(), 1),
            Err(Error::NotADistribution(_))
        ));
    }

    #[test]
    fn walk_examples() {
        let id = validate_transition(Array2::eye(4)).unwrap();
        assert_eq!(sample_walk(&id, 2, 5, 1).unwrap(), vec![2; 6]);
        let flip = validate_transition(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(sample_walk(&flip, 0, 5, 1).unwrap(), vec![0, 1, 0, 1, 0, 1]);
        assert!(sample_walk(&flip, 2, 5, 1).is_err());
        let m = chain3();
        assert_eq!(
            sample_walk(&m, 0, 50, 9).unwrap(),
            sample_walk(&m, 0, 50, 9).unwrap()
        );
    }

    #[test]
    fn one_step_frequencies_match_rows() {
        let m = chain3();
        let emp = empirical_k_step(&m, 1, 100_000, 11);
        let worst = (&emp - m.as_array())
            .iter()
            .fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(worst <= 0.01, "max deviation {worst}");
    }

    #[test]
    fn ks_statistic_handles_ties() {
        // two equal atoms at 0 against the standard normal: ECDF jumps 0 -> 1 at 0
        let gauss = Normal::new(0.0, 1.0).unwrap();
        let ks = ks_statistic(&[0.0, 0.0], |x| gauss.cdf(x));
        assert!((ks - 0.5).abs() < 1e-15);
    }

    #[test]
    fn diffusion_coefficient_is_definitional() {
        let spec = DiffusionSpec::new(1.0, 1.0).unwrap();
        assert_eq!(spec.coefficient(), 0.5);
        assert!(DiffusionSpec::new(0.0, 1.0).is_err());
        let out = diffusion_limit_check(spec, 100, 20_000, 3).unwrap();
        assert_eq!(out.report.diffusion_coefficient, 0.5);
        assert_eq!(out.report.analytic_variance, 100.0);
        assert!((out.report.empirical_variance / 100.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn lattice_displacement_parity() {
        let mut r = rng::stream(1, 1);
        for steps in [1usize, 63, 64, 65, 200] {
            let x = lattice_displacement(&mut r, steps);
            assert_eq!((x + steps as i64) % 2, 0);
            assert!(x.unsigned_abs() as usize <= steps);
        }
    }

    fn random_chain(n: usize, seed: u64) -> TransitionMatrix {
        let mut r = rng::stream(seed, 0);
        let raw = Array2::from_shape_simple_fn((n, n), || r.random::<f64>() + 1e-3);
        let sums = raw.sum_axis(ndarray::Axis(1));
        let m = Array2::from_shape_fn((n, n), |(i, j)| raw[[i, j]] / sums[i]);
        validate_transition(m).unwrap()
    }

    proptest! {
        #[test]
        fn powers_stay_stochastic(n in 1usize..7, k in 1u32..=64, seed in 0u64..500) {
            let m = random_chain(n, seed);
            let mk = k_step(&m, k).unwrap();
            prop_assert!(validate_transition_with_tol(mk.into_inner(), POWER_ROW_SUM_TOL).is_ok());
        }

        #[test]
        fn chapman_kolmogorov(n in 1usize..7, s in 0usize..20, t in 0usize..20, seed in 0u64..500) {
            let m = random_chain(n, seed);
            let p0 = Array1::from_elem(n, 1.0 / n as f64);
            let direct = evolve_distribution(&m, p0.view(), s + t).unwrap();
            let mid = evolve_distribution(&m, p0.view(), s).unwrap();
            let composed = evolve_distribution(&m, mid.view(), t).unwrap();
            for (a, b) in direct.iter().zip(composed.iter()) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}
