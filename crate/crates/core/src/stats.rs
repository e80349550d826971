//! Statistical machinery used by the metrics and the experiment harness:
//! normal/chi-square tails, proportion tests, trend tests, isotonic
//! regression, and the energy-distance two-sample test with a permutation
//! threshold.
//!
//! Everything here is deterministic given an explicit RNG.

use alloc::vec;
use alloc::vec::Vec;

use libm::{erf, erfc, exp, fabs, log, pow, sqrt};
use rand::Rng;

use crate::{Error, Result};

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / core::f64::consts::SQRT_2)
}

/// Standard normal survival function, 1 - CDF.
#[inline]
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / core::f64::consts::SQRT_2)
}

/// Two-sided normal tail probability.
#[inline]
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(fabs(z) / core::f64::consts::SQRT_2)
}

/// Half-width of the normal-approximation binomial confidence interval
/// at the given two-sided level (e.g. 0.99).
pub fn binomial_ci_half_width(p: f64, n: usize, level: f64) -> f64 {
    let z = normal_quantile(0.5 + level / 2.0);
    z * sqrt((p * (1.0 - p)).max(0.0) / n as f64)
}

/// Inverse standard normal CDF (Acklam's rational approximation,
/// refined with one Halley step; |error| < 1e-12 over (0, 1)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0,1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let x = if p < 0.02425 {
        let q = sqrt(-2.0 * log(p));
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 0.97575 {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = sqrt(-2.0 * log(1.0 - p));
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // One Halley refinement against the forward CDF.
    let e = normal_cdf(x) - p;
    let u = e * sqrt(2.0 * core::f64::consts::PI) * exp(x * x / 2.0);
    x - u / (1.0 + x * u / 2.0)
}

/// Regularized lower incomplete gamma P(a, x), series/continued-fraction mix.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series representation
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if fabs(term) < fabs(sum) * 1e-15 {
                break;
            }
        }
        sum * exp(-x + a * log(x) - libm::lgamma(a))
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma Q(a, x) via Lentz continued fraction.
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / 1e-300;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if fabs(d) < 1e-300 {
            d = 1e-300;
        }
        c = b + an / c;
        if fabs(c) < 1e-300 {
            c = 1e-300;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if fabs(delta - 1.0) < 1e-15 {
            break;
        }
    }
    exp(-x + a * log(x) - libm::lgamma(a)) * h
}

/// Chi-square survival function with `k` degrees of freedom.
pub fn chi_square_sf(x: f64, k: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - gamma_p(k as f64 / 2.0, x / 2.0)
}

/// Chi-square goodness-of-fit test against given expected probabilities.
/// Returns (statistic, p-value).
pub fn chi_square_gof(counts: &[usize], expected_probs: &[f64]) -> Result<(f64, f64)> {
    if counts.len() != expected_probs.len() {
        return Err(Error::ShapeMismatch {
            expected: expected_probs.len(),
            got: counts.len(),
        });
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptySamples);
    }
    let mut stat = 0.0;
    for (&c, &p) in counts.iter().zip(expected_probs) {
        let e = p * n as f64;
        if e <= 0.0 {
            return Err(Error::InvalidParameter("expected count is zero".into()));
        }
        let d = c as f64 - e;
        stat += d * d / e;
    }
    Ok((stat, chi_square_sf(stat, counts.len() - 1)))
}

/// Direction of a one-sided alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Greater,
    Less,
    TwoSided,
}

/// Two-proportion z-test with pooled variance.
///
/// `Tail::Greater` tests `p1 > p2`. Returns (z, p-value).
pub fn two_proportion_test(x1: usize, n1: usize, x2: usize, n2: usize, tail: Tail) -> (f64, f64) {
    let p1 = x1 as f64 / n1 as f64;
    let p2 = x2 as f64 / n2 as f64;
    let pool = (x1 + x2) as f64 / (n1 + n2) as f64;
    let se = sqrt(pool * (1.0 - pool) * (1.0 / n1 as f64 + 1.0 / n2 as f64));
    if se == 0.0 {
        // degenerate: all successes or all failures in both samples
        return (0.0, 1.0);
    }
    let z = (p1 - p2) / se;
    let p = match tail {
        Tail::Greater => normal_sf(z),
        Tail::Less => normal_cdf(z),
        Tail::TwoSided => normal_two_sided(z),
    };
    (z, p)
}

/// Two-sample z-test on means using sample standard deviations
/// (Welch form; adequate at the sample sizes used here).
pub fn mean_difference_test(
    m1: f64,
    s1: f64,
    n1: usize,
    m2: f64,
    s2: f64,
    n2: usize,
    tail: Tail,
) -> (f64, f64) {
    let se = sqrt(s1 * s1 / n1 as f64 + s2 * s2 / n2 as f64);
    if se == 0.0 {
        return (0.0, 1.0);
    }
    let z = (m1 - m2) / se;
    let p = match tail {
        Tail::Greater => normal_sf(z),
        Tail::Less => normal_cdf(z),
        Tail::TwoSided => normal_two_sided(z),
    };
    (z, p)
}

/// One cell of a trend test: `score` is the ordered dose (e.g. a guidance
/// scale), with either success counts or a mean response.
#[derive(Debug, Clone, Copy)]
pub struct TrendCell {
    pub score: f64,
    pub n: usize,
    /// successes for proportion trends
    pub successes: usize,
    /// mean and sample standard deviation for mean trends
    pub mean: f64,
    pub sd: f64,
}

/// Cochran–Armitage test for a monotone trend in proportions.
/// `Tail::Greater` tests for an increasing trend. Returns (z, p).
pub fn proportion_trend_test(cells: &[TrendCell], tail: Tail) -> (f64, f64) {
    let total_n: f64 = cells.iter().map(|c| c.n as f64).sum();
    let total_x: f64 = cells.iter().map(|c| c.successes as f64).sum();
    let p_bar = total_x / total_n;
    let s_bar = cells.iter().map(|c| c.n as f64 * c.score).sum::<f64>() / total_n;
    let t: f64 = cells
        .iter()
        .map(|c| c.successes as f64 * (c.score - s_bar))
        .sum();
    let var: f64 = p_bar
        * (1.0 - p_bar)
        * cells
            .iter()
            .map(|c| c.n as f64 * (c.score - s_bar) * (c.score - s_bar))
            .sum::<f64>();
    if var <= 0.0 {
        return (0.0, 1.0);
    }
    let z = t / sqrt(var);
    let p = match tail {
        Tail::Greater => normal_sf(z),
        Tail::Less => normal_cdf(z),
        Tail::TwoSided => normal_two_sided(z),
    };
    (z, p)
}

/// Linear-contrast trend test on cell means; the contrast weights are the
/// centered scores, variance from per-cell SEMs. Returns (z, p).
pub fn mean_trend_test(cells: &[TrendCell], tail: Tail) -> (f64, f64) {
    let total_n: f64 = cells.iter().map(|c| c.n as f64).sum();
    let s_bar = cells.iter().map(|c| c.n as f64 * c.score).sum::<f64>() / total_n;
    let t: f64 = cells.iter().map(|c| (c.score - s_bar) * c.mean).sum();
    let var: f64 = cells
        .iter()
        .map(|c| {
            let w = c.score - s_bar;
            w * w * c.sd * c.sd / c.n as f64
        })
        .sum();
    if var <= 0.0 {
        return (0.0, 1.0);
    }
    let z = t / sqrt(var);
    let p = match tail {
        Tail::Greater => normal_sf(z),
        Tail::Less => normal_cdf(z),
        Tail::TwoSided => normal_two_sided(z),
    };
    (z, p)
}

/// Weighted isotonic (non-decreasing) regression by pool-adjacent-violators.
pub fn isotonic_fit(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // each block: (weighted mean, weight, run length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() >= 2 {
            let b = blocks[blocks.len() - 1];
            let a = blocks[blocks.len() - 2];
            if a.0 <= b.0 {
                break;
            }
            let w = a.1 + b.1;
            let m = (a.0 * a.1 + b.0 * b.1) / w;
            blocks.pop();
            blocks.pop();
            blocks.push((m, w, a.2 + b.2));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (m, _, len) in blocks {
        out.extend(core::iter::repeat_n(m, len));
    }
    out
}

/// Verdict of [`isotonic_trend_test`]: the sequence must be consistent with
/// a non-decreasing curve (no cell deviates from the isotonic fit by more
/// than its own `level` confidence half-width) and the trend itself must be
/// significant.
#[derive(Debug, Clone)]
pub struct TrendVerdict {
    pub z: f64,
    pub p: f64,
    /// largest |observed - isotonic fit| measured in per-cell sigmas
    pub max_violation_sigmas: f64,
    pub monotone_consistent: bool,
}

/// Isotonic trend test for proportions over ordered cells.
///
/// Combines a Cochran–Armitage test for an increasing trend with a check
/// that the observed proportions are consistent with the non-decreasing
/// isotonic fit at the given confidence level.
pub fn isotonic_trend_test(cells: &[TrendCell], level: f64) -> TrendVerdict {
    let (z, p) = proportion_trend_test(cells, Tail::Greater);
    let values: Vec<f64> = cells
        .iter()
        .map(|c| c.successes as f64 / c.n as f64)
        .collect();
    let weights: Vec<f64> = cells.iter().map(|c| c.n as f64).collect();
    let fit = isotonic_fit(&values, &weights);
    let zq = normal_quantile(0.5 + level / 2.0);
    let mut worst = 0.0f64;
    for ((obs, fitted), cell) in values.iter().zip(&fit).zip(cells) {
        let p0 = fitted.clamp(1e-9, 1.0 - 1e-9);
        let se = sqrt(p0 * (1.0 - p0) / cell.n as f64);
        let dev = fabs(obs - fitted) / se;
        worst = worst.max(dev);
    }
    TrendVerdict {
        z,
        p,
        max_violation_sigmas: worst,
        monotone_consistent: worst <= zq,
    }
}

/// Same consistency check for cell means (SEM-based).
pub fn isotonic_mean_trend_test(cells: &[TrendCell], level: f64) -> TrendVerdict {
    let (z, p) = mean_trend_test(cells, Tail::Greater);
    let values: Vec<f64> = cells.iter().map(|c| c.mean).collect();
    let weights: Vec<f64> = cells.iter().map(|c| c.n as f64).collect();
    let fit = isotonic_fit(&values, &weights);
    let zq = normal_quantile(0.5 + level / 2.0);
    let mut worst = 0.0f64;
    for ((obs, fitted), cell) in values.iter().zip(&fit).zip(cells) {
        let se = cell.sd / sqrt(cell.n as f64);
        if se > 0.0 {
            worst = worst.max(fabs(obs - fitted) / se);
        }
    }
    TrendVerdict {
        z,
        p,
        max_violation_sigmas: worst,
        monotone_consistent: worst <= zq,
    }
}

/// Energy distance between two multivariate samples.
///
/// This is the V-statistic form, i.e. the exact energy distance between the
/// two empirical distributions: `2 E|a-b| - E|a-a'| - E|b-b'|` with all
/// pairs included. It is non-negative and zero iff the empirical sets are
/// identical.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySamples);
    }
    let dim = a[0].len();
    for x in a.iter().chain(b.iter()) {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: x.len(),
            });
        }
    }
    let refs_a: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
    let refs_b: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
    Ok(energy_statistic(&refs_a, &refs_b))
}

#[inline]
fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    sqrt(s)
}

fn energy_statistic(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let n = a.len() as f64;
    let m = b.len() as f64;
    let mut xy = 0.0;
    for xi in a {
        for yj in b {
            xy += euclidean(xi, yj);
        }
    }
    let mut xx = 0.0;
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            xx += euclidean(a[i], a[j]);
        }
    }
    let mut yy = 0.0;
    for i in 0..b.len() {
        for j in (i + 1)..b.len() {
            yy += euclidean(b[i], b[j]);
        }
    }
    2.0 * xy / (n * m) - 2.0 * xx / (n * n) - 2.0 * yy / (m * m)
}

/// Result of the permutation test on the energy distance.
#[derive(Debug, Clone)]
pub struct PermutationOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
}

impl PermutationOutcome {
    /// True when the observed statistic sits below the permutation threshold
    /// at the given level (e.g. 0.05 for the 95% threshold).
    pub fn below_threshold(&self, level: f64) -> bool {
        self.p_value > level
    }
}

/// Permutation two-sample test on the energy distance.
///
/// Pools both samples, reassigns labels `n_permutations` times, and reports
/// the add-one p-value `(1 + #{perm >= observed}) / (B + 1)`.
///
/// All pairwise distances are computed once into a matrix; a permuted
/// statistic then only needs the cross-group sum, because with the pooled
/// total `S` and the group row-sum `P_A = 2*xx + xy` fixed identities give
/// `xx = (P_A - xy) / 2` and `yy = (2S - P_A - xy) / 2`.
pub fn energy_permutation_test<R: Rng>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    n_permutations: usize,
    rng: &mut R,
) -> Result<PermutationOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySamples);
    }
    let observed = energy_distance(a, b)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b.iter()).map(Vec::as_slice).collect();
    let n_pool = pooled.len();
    let n = a.len();
    let m = b.len();

    // distances stored in f32 (sums accumulate in f64); the permuted and
    // observed statistics are both computed from this matrix so the
    // comparison is internally consistent
    let mut dmat = vec![0f32; n_pool * n_pool];
    let mut row_sums = vec![0f64; n_pool];
    let mut total = 0f64;
    for i in 0..n_pool {
        for j in (i + 1)..n_pool {
            let d = euclidean(pooled[i], pooled[j]) as f32;
            dmat[i * n_pool + j] = d;
            dmat[j * n_pool + i] = d;
            row_sums[i] += f64::from(d);
            row_sums[j] += f64::from(d);
            total += f64::from(d);
        }
    }
    let stat_from_matrix = |idx_a: &[usize], in_a: &[bool]| -> f64 {
        let mut xy = 0f64;
        let mut p_a = 0f64;
        for &i in idx_a {
            p_a += row_sums[i];
            let row = &dmat[i * n_pool..(i + 1) * n_pool];
            for (j, &d) in row.iter().enumerate() {
                if !in_a[j] {
                    xy += f64::from(d);
                }
            }
        }
        let xx = (p_a - xy) / 2.0;
        let yy = (2.0 * total - p_a - xy) / 2.0;
        let (nf, mf) = (n as f64, m as f64);
        2.0 * xy / (nf * mf) - 2.0 * xx / (nf * nf) - 2.0 * yy / (mf * mf)
    };

    let mut idx: Vec<usize> = (0..n_pool).collect();
    let mut in_a = vec![false; n_pool];
    for flag in in_a.iter_mut().take(n) {
        *flag = true;
    }
    let observed_mat = stat_from_matrix(&idx[..n], &in_a);
    let mut extreme = 0usize;
    for _ in 0..n_permutations {
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        in_a.iter_mut().for_each(|v| *v = false);
        for &i in &idx[..n] {
            in_a[i] = true;
        }
        if stat_from_matrix(&idx[..n], &in_a) >= observed_mat {
            extreme += 1;
        }
    }
    Ok(PermutationOutcome {
        statistic: observed,
        p_value: (extreme as f64 + 1.0) / (n_permutations as f64 + 1.0),
        n_permutations,
    })
}

/// Mean and population standard deviation of a slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, sqrt(var))
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0))
}

/// log(sum(exp(xs))) with the usual max shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + log(xs.iter().map(|&x| exp(x - m)).sum::<f64>())
}

/// erf is re-exported for callers that need raw Gaussian tails.
pub fn gauss_erf(x: f64) -> f64 {
    erf(x)
}

/// x^y convenience.
pub fn powf(x: f64, y: f64) -> f64 {
    pow(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use alloc::vec;
    use rand_distr::StandardNormal;

    #[test]
    fn normal_cdf_reference_points() {
        assert!(fabs(normal_cdf(0.0) - 0.5) < 1e-15);
        assert!(fabs(normal_cdf(1.959963984540054) - 0.975) < 1e-9);
        assert!(fabs(normal_sf(2.326347874040841) - 0.01) < 1e-9);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-6, 0.005, 0.025, 0.3, 0.5, 0.9, 0.975, 0.995, 1.0 - 1e-6] {
            let z = normal_quantile(p);
            assert!(fabs(normal_cdf(z) - p) < 1e-12, "p = {p}");
        }
    }

    #[test]
    fn gamma_p_against_closed_forms() {
        // P(1, x) = 1 - exp(-x)
        for &x in &[0.1, 0.5, 1.0, 3.0, 10.0] {
            assert!(fabs(gamma_p(1.0, x) - (1.0 - exp(-x))) < 1e-12);
        }
        // P(1/2, x) = erf(sqrt(x))
        for &x in &[0.2, 1.0, 4.0] {
            assert!(fabs(gamma_p(0.5, x) - erf(sqrt(x))) < 1e-12);
        }
    }

    #[test]
    fn chi_square_sf_closed_form() {
        // k = 2: sf(x) = exp(-x/2)
        for &x in &[0.5, 2.0, 5.991, 12.0] {
            assert!(fabs(chi_square_sf(x, 2) - exp(-x / 2.0)) < 1e-12);
        }
        // classic 5% critical values
        assert!(fabs(chi_square_sf(3.841458820694124, 1) - 0.05) < 1e-9);
        assert!(fabs(chi_square_sf(9.487729036781154, 4) - 0.05) < 1e-9);
    }

    #[test]
    fn two_proportion_basics() {
        let (z, p) = two_proportion_test(50, 100, 50, 100, Tail::TwoSided);
        assert_eq!(z, 0.0);
        assert!(fabs(p - 1.0) < 1e-15);
        let (z, p) = two_proportion_test(80, 100, 50, 100, Tail::Greater);
        assert!(z > 4.0);
        assert!(p < 1e-4);
    }

    #[test]
    fn trend_test_hand_case() {
        let cells = [
            TrendCell {
                score: 0.0,
                n: 10,
                successes: 2,
                mean: 0.0,
                sd: 0.0,
            },
            TrendCell {
                score: 1.0,
                n: 10,
                successes: 5,
                mean: 0.0,
                sd: 0.0,
            },
            TrendCell {
                score: 2.0,
                n: 10,
                successes: 8,
                mean: 0.0,
                sd: 0.0,
            },
        ];
        let (z, p) = proportion_trend_test(&cells, Tail::Greater);
        // T = 6, Var = 0.25 * 20 = 5, z = 6/sqrt(5)
        assert!(fabs(z - 6.0 / sqrt(5.0)) < 1e-12);
        assert!(p < 0.01);
        let (_, p_flat) = proportion_trend_test(
            &[
                TrendCell {
                    score: 0.0,
                    n: 100,
                    successes: 50,
                    mean: 0.0,
                    sd: 0.0,
                },
                TrendCell {
                    score: 1.0,
                    n: 100,
                    successes: 50,
                    mean: 0.0,
                    sd: 0.0,
                },
            ],
            Tail::Greater,
        );
        assert!(p_flat > 0.45);
    }

    #[test]
    fn pava_pools_violators() {
        let fit = isotonic_fit(&[3.0, 1.0, 2.0], &[1.0, 1.0, 1.0]);
        assert_eq!(fit, vec![2.0, 2.0, 2.0]);
        let fit = isotonic_fit(&[1.0, 3.0, 2.0], &[1.0, 1.0, 1.0]);
        assert_eq!(fit, vec![1.0, 2.5, 2.5]);
        // already monotone: untouched
        let fit = isotonic_fit(&[1.0, 2.0, 5.0], &[1.0, 2.0, 1.0]);
        assert_eq!(fit, vec![1.0, 2.0, 5.0]);
    }

    #[test]
    fn energy_distance_zero_iff_identical() {
        let a = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let d = energy_distance(&a, &a).unwrap();
        assert!(fabs(d) < 1e-12);
        let b = vec![vec![5.0, 1.0], vec![7.0, -1.0], vec![5.5, 0.5]];
        assert!(energy_distance(&a, &b).unwrap() > 1.0);
    }

    #[test]
    fn energy_permutation_separates_and_accepts() {
        let mut rng = derive_rng(11, &[0]);
        let a: Vec<Vec<f64>> = (0..120)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let b: Vec<Vec<f64>> = (0..120)
            .map(|_| vec![rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let c: Vec<Vec<f64>> = (0..120)
            .map(|_| vec![3.0 + rng.sample::<f64, _>(StandardNormal)])
            .collect();
        let mut prng = derive_rng(11, &[1]);
        let same = energy_permutation_test(&a, &b, 199, &mut prng).unwrap();
        assert!(same.below_threshold(0.05), "p = {}", same.p_value);
        let diff = energy_permutation_test(&a, &c, 199, &mut prng).unwrap();
        assert!(!diff.below_threshold(0.05), "p = {}", diff.p_value);
    }

    #[test]
    fn log_sum_exp_stability() {
        assert!(fabs(log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + log(2.0))) < 1e-12);
        assert!(fabs(log_sum_exp(&[0.0, 0.0, 0.0]) - log(3.0)) < 1e-15);
    }
}
