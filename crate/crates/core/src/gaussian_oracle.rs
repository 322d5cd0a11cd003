//! Closed-form ground truth for isotropic Gaussian data `N(m, σ² I_d)`.
//!
//! Under the VE forward process the marginals stay Gaussian,
//! `p_t = N(m, (σ² + σ̄_t²) I)`, so the score is explicit and the
//! exponential-integrator sampler driven by the exact score produces Gaussian
//! iterates whose laws, and hence the terminal KL, are available in closed form.
//!
//! Notation used below: `s_j = σ̄²_{T - t←_j}` is the variance level seen by
//! backward step `j` (`s_0 = σ̄_T²`, `s_N = σ̄_δ²`), `v_j = σ² + s_j`, and
//! `Δ_j = s_j - s_{j+1}`.

use crate::error::{Error, Result};
use crate::numeric::{r_minus_one_minus_ln, rel_diff, sum_ascending, CompensatedSum};
use crate::schedules::{TimeGrid, VarianceSchedule};

/// Agreement required between closed-form and recursive iterate laws.
pub const ITERATE_LAW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    mean: Vec<f64>,
    sigma_sq: f64,
}

impl GaussianData {
    pub fn new(mean: Vec<f64>, sigma_sq: f64) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::invalid("Gaussian data needs d >= 1"));
        }
        if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
            return Err(Error::invalid(format!("data variance must be positive, got {sigma_sq}")));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("data mean must be finite"));
        }
        Ok(Self { mean, sigma_sq })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn mean_norm_sq(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum()
    }

    /// `m₂² = ‖m‖² + d σ²`.
    pub fn second_moment(&self) -> f64 {
        self.mean_norm_sq() + self.dim() as f64 * self.sigma_sq
    }

    /// Per-coordinate variance of `p_t`.
    pub fn marginal_variance(&self, schedule: &VarianceSchedule, t: f64) -> f64 {
        self.sigma_sq + schedule.sigma_bar_sq(t)
    }
}

/// `∇ log p_t(x) = -(x - m) / (σ² + σ̄_t²)`.
pub fn analytic_score(data: &GaussianData, schedule: &VarianceSchedule, t: f64, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), data.dim(), "analytic_score: dimension mismatch");
    let var = data.marginal_variance(schedule, t);
    x.iter().zip(&data.mean).map(|(xi, mi)| -(xi - mi) / var).collect()
}

/// Laws `N(m_j, Σ_j I)` of the backward iterates `Ȳ_{t←_j}`, `j = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateLaw {
    pub means: Vec<Vec<f64>>,
    pub cov_scalars: Vec<f64>,
}

impl IterateLaw {
    pub fn terminal_mean(&self) -> &[f64] {
        self.means.last().expect("iterate law is never empty")
    }

    pub fn terminal_cov(&self) -> f64 {
        *self.cov_scalars.last().expect("iterate law is never empty")
    }
}

/// Variance levels `s_j = σ̄²_{t_{N-j}}` in backward order.
fn backward_levels(grid: &TimeGrid, schedule: &VarianceSchedule) -> Vec<f64> {
    (0..=grid.steps())
        .map(|j| schedule.sigma_bar_sq(grid.reversed_time(j)))
        .collect()
}

fn closed_form_law(data: &GaussianData, s: &[f64]) -> IterateLaw {
    let sig2 = data.sigma_sq;
    let v0 = sig2 + s[0];
    let mut means = Vec::with_capacity(s.len());
    let mut covs = Vec::with_capacity(s.len());
    // running Σ_{l<j} Δ_l / v_{l+1}²
    let mut acc = CompensatedSum::new();
    for j in 0..s.len() {
        if j > 0 {
            let vl = sig2 + s[j];
            acc += (s[j - 1] - s[j]) / (vl * vl);
        }
        let vj = sig2 + s[j];
        // m_j = (σ̄_T² - s_j) / (σ² + σ̄_T²) · m
        let coef = (s[0] - s[j]) / v0;
        means.push(data.mean.iter().map(|m| coef * m).collect());
        covs.push(vj * vj * (s[0] / (v0 * v0) + acc.value()));
    }
    IterateLaw {
        means,
        cov_scalars: covs,
    }
}

fn recursive_law(data: &GaussianData, s: &[f64]) -> IterateLaw {
    let sig2 = data.sigma_sq;
    let d = data.dim();
    let mut means = vec![vec![0.0; d]];
    let mut covs = vec![s[0]];
    for j in 0..s.len() - 1 {
        let inc = s[j] - s[j + 1];
        let pull = inc / (sig2 + s[j]);
        let a = 1.0 - pull;
        let prev = &means[j];
        let next: Vec<f64> = prev
            .iter()
            .zip(&data.mean)
            .map(|(mj, m)| a * mj + pull * m)
            .collect();
        means.push(next);
        covs.push(a * a * covs[j] + inc);
    }
    IterateLaw {
        means,
        cov_scalars: covs,
    }
}

/// Closed-form iterate laws, verified against the one-step recursion.
pub fn iterate_law(data: &GaussianData, grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<IterateLaw> {
    let s = backward_levels(grid, schedule);
    let closed = closed_form_law(data, &s);
    let rec = recursive_law(data, &s);
    let mean_scale = data.mean_norm_sq().sqrt();
    for j in 0..s.len() {
        let dc = rel_diff(closed.cov_scalars[j], rec.cov_scalars[j], 0.0);
        if dc > ITERATE_LAW_TOLERANCE {
            return Err(Error::Internal(format!(
                "iterate covariance mismatch at step {j}: closed {} vs recursion {} (rel {dc:e})",
                closed.cov_scalars[j], rec.cov_scalars[j]
            )));
        }
        for (a, b) in closed.means[j].iter().zip(&rec.means[j]) {
            let dm = rel_diff(*a, *b, mean_scale);
            if dm > ITERATE_LAW_TOLERANCE {
                return Err(Error::Internal(format!(
                    "iterate mean mismatch at step {j}: closed {a} vs recursion {b} (rel {dm:e})"
                )));
            }
        }
    }
    Ok(closed)
}

/// `KL(N(μ_a, c_a I_d) | N(μ_b, c_b I_d)) = (d/2)(r - 1 - ln r) + ‖μ_a - μ_b‖² / (2 c_b)`
/// with `r = c_a / c_b`.
pub fn gaussian_kl(mean_a: &[f64], cov_a: f64, mean_b: &[f64], cov_b: f64, d: usize) -> Result<f64> {
    if !(cov_a > 0.0 && cov_b > 0.0) {
        return Err(Error::invalid(format!(
            "covariance scalars must be positive, got {cov_a} and {cov_b}"
        )));
    }
    if mean_a.len() != d || mean_b.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: if mean_a.len() != d { mean_a.len() } else { mean_b.len() },
            context: "gaussian_kl means",
        });
    }
    let dist_sq: f64 = mean_a.iter().zip(mean_b).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * d as f64 * r_minus_one_minus_ln(cov_a / cov_b) + dist_sq / (2.0 * cov_b))
}

/// Terminal KL with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlBreakdown {
    pub e_sigma: f64,
    pub variance_term: f64,
    pub mean_term: f64,
    /// `KL(p_δ | q_{T-δ})` from the closed form in `E_σ`.
    pub kl: f64,
    /// Same quantity from the generic Gaussian KL against the iterate law.
    pub crosscheck: f64,
}

/// `E_σ` with `E_σ⁻¹ = (σ² + σ̄_δ²)[σ̄_T²/(σ² + σ̄_T²)² + Σ_j Δ_j/(σ² + s_{j+1})²]`.
pub fn e_sigma(data: &GaussianData, grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<f64> {
    let s = backward_levels(grid, schedule);
    e_sigma_from_levels(data.sigma_sq, &s)
}

fn e_sigma_from_levels(sig2: f64, s: &[f64]) -> Result<f64> {
    let n = s.len() - 1;
    let v0 = sig2 + s[0];
    let mut terms = Vec::with_capacity(n + 1);
    terms.push(s[0] / (v0 * v0));
    for j in 0..n {
        let v = sig2 + s[j + 1];
        terms.push((s[j] - s[j + 1]) / (v * v));
    }
    let inv = (sig2 + s[n]) * sum_ascending(&terms);
    if !(inv.is_finite() && inv > 0.0) {
        return Err(Error::Internal(format!("non-finite E_sigma^-1 = {inv}")));
    }
    Ok(1.0 / inv)
}

pub fn kl_breakdown(data: &GaussianData, grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<KlBreakdown> {
    let s = backward_levels(grid, schedule);
    let n = s.len() - 1;
    let sig2 = data.sigma_sq;
    let e = e_sigma_from_levels(sig2, &s)?;
    let d = data.dim() as f64;
    let v_t = sig2 + s[0];
    let v_delta = sig2 + s[n];
    let variance_term = 0.5 * d * r_minus_one_minus_ln(e);
    let mean_term = 0.5 * data.mean_norm_sq() * v_delta * e / (v_t * v_t);
    let kl = variance_term + mean_term;
    if !kl.is_finite() {
        return Err(Error::Internal("non-finite exact KL".into()));
    }

    let law = iterate_law(data, grid, schedule)?;
    let crosscheck = gaussian_kl(data.mean(), v_delta, law.terminal_mean(), law.terminal_cov(), data.dim())?;
    Ok(KlBreakdown {
        e_sigma: e,
        variance_term,
        mean_term,
        kl,
        crosscheck,
    })
}

/// `KL(p_δ | q_{T-δ})` for the exact-score sampler.
pub fn exact_kl(data: &GaussianData, grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<f64> {
    Ok(kl_breakdown(data, grid, schedule)?.kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{adaptive_simpson, SimpsonOptions};
    use crate::schedules::GridKind;

    fn song_exp(smin: f64, smax: f64, n: usize) -> (VarianceSchedule, TimeGrid) {
        let s = VarianceSchedule::song(smin, smax).unwrap();
        let g = TimeGrid::build(&s, GridKind::Exponential, n).unwrap();
        (s, g)
    }

    #[test]
    fn score_vanishes_at_mean() {
        let data = GaussianData::new(vec![1.0, -2.0], 0.3).unwrap();
        let s = VarianceSchedule::edm(0.002, 80.0).unwrap();
        assert_eq!(analytic_score(&data, &s, 0.7, &[1.0, -2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn score_direct_substitution() {
        let data = GaussianData::new(vec![0.0], 1.0).unwrap();
        let s = VarianceSchedule::edm(0.002, 80.0).unwrap();
        assert_eq!(analytic_score(&data, &s, 1.0, &[2.0]), vec![-1.0]);
    }

    #[test]
    fn score_is_gradient_of_log_density() {
        let data = GaussianData::new(vec![0.3, -1.1, 2.0], 0.49).unwrap();
        let s = VarianceSchedule::song(0.01, 10.0).unwrap();
        let log_density = |t: f64, x: &[f64]| {
            let v = data.marginal_variance(&s, t);
            let q: f64 = x.iter().zip(data.mean()).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * q / v - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * v).ln()
        };
        for (t, x) in [(0.2, [1.0, 0.5, -0.3]), (5.0, [-2.0, 3.0, 0.1])] {
            let score = analytic_score(&data, &s, t, &x);
            for k in 0..3 {
                let h = 1e-5;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (log_density(t, &xp) - log_density(t, &xm)) / (2.0 * h);
                assert!(rel_diff(fd, score[k], 1e-3) <= 1e-7, "{fd} vs {}", score[k]);
            }
        }
    }

    #[test]
    fn zero_mean_stays_zero() {
        let data = GaussianData::new(vec![0.0; 3], 0.5).unwrap();
        let (s, g) = song_exp(0.01, 5.0, 12);
        let law = iterate_law(&data, &g, &s).unwrap();
        assert!(law.means.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(law.cov_scalars[0], s.sigma_bar_sq(g.horizon()));
    }

    #[test]
    fn degenerate_grid_is_initialization() {
        let data = GaussianData::new(vec![1.0, 2.0], 0.5).unwrap();
        let s = VarianceSchedule::edm(0.5, 3.0).unwrap();
        let g = TimeGrid::from_times(vec![3.0]).unwrap();
        let law = iterate_law(&data, &g, &s).unwrap();
        assert_eq!(law.means, vec![vec![0.0, 0.0]]);
        assert_eq!(law.cov_scalars, vec![9.0]);
    }

    #[test]
    fn terminal_covariance_matches_hand_recursion() {
        // d=1, σ=0.5, exponential grid N=4 between σ̄ = 0.1 and 2
        let data = GaussianData::new(vec![0.0], 0.25).unwrap();
        let (s, g) = song_exp(0.1, 2.0, 4);
        let levels: Vec<f64> = (0..=4).rev().map(|k| g.t(k)).collect();
        let mut cov = levels[0];
        for j in 0..4 {
            let inc = levels[j] - levels[j + 1];
            let a = 1.0 - inc / (0.25 + levels[j]);
            cov = a * a * cov + inc;
        }
        let law = iterate_law(&data, &g, &s).unwrap();
        assert!(rel_diff(law.terminal_cov(), cov, 0.0) < 1e-14);
    }

    #[test]
    fn gaussian_kl_basics() {
        assert_eq!(gaussian_kl(&[1.0, 2.0], 0.7, &[1.0, 2.0], 0.7, 2).unwrap(), 0.0);
        assert_eq!(gaussian_kl(&[0.0], 1.0, &[1.0], 1.0, 1).unwrap(), 0.5);
        assert!(gaussian_kl(&[0.0], 0.0, &[1.0], 1.0, 1).is_err());
        assert!(gaussian_kl(&[0.0], 1.0, &[1.0], -1.0, 1).is_err());
    }

    #[test]
    fn gaussian_kl_matches_quadrature_in_one_dimension() {
        let cases = [(0.3, 0.8, -0.4, 1.7), (0.0, 2.5, 1.0, 0.6), (-1.2, 0.05, -1.0, 0.09)];
        for (ma, ca, mb, cb) in cases {
            let logpdf = |x: f64, m: f64, c: f64| -0.5 * (x - m) * (x - m) / c - 0.5 * (2.0 * std::f64::consts::PI * c).ln();
            let integrand = |x: f64| {
                let lp = logpdf(x, ma, ca);
                lp.exp() * (lp - logpdf(x, mb, cb))
            };
            let w = 14.0 * ca.sqrt();
            let quad = adaptive_simpson(integrand, ma - w, ma + w, SimpsonOptions::default()).unwrap();
            let closed = gaussian_kl(&[ma], ca, &[mb], cb, 1).unwrap();
            assert!(rel_diff(quad, closed, 0.0) < 1e-6, "{quad} vs {closed}");
        }
    }

    #[test]
    fn exact_kl_equals_generic_gaussian_kl() {
        let data = GaussianData::new(vec![0.7, -0.2], 0.64).unwrap();
        for n in [1, 5, 40] {
            let (s, g) = song_exp(0.002, 80.0, n);
            let b = kl_breakdown(&data, &g, &s).unwrap();
            assert!(b.kl >= 0.0);
            assert!(rel_diff(b.kl, b.crosscheck, 0.0) <= 1e-10, "{b:?}");
        }
    }

    #[test]
    fn kl_vanishes_when_e_sigma_is_one() {
        // For N=1, E_σ grows from below one (σ -> 0) without bound (σ -> ∞); bisect on σ².
        let (s, g) = song_exp(0.5, 3.0, 1);
        let e_of = |sig2: f64| e_sigma(&GaussianData::new(vec![0.0, 0.0], sig2).unwrap(), &g, &s).unwrap();
        let (mut lo, mut hi) = (1e-8, 1e4);
        assert!(e_of(lo) < 1.0 && e_of(hi) > 1.0);
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            if e_of(mid) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let data = GaussianData::new(vec![0.0, 0.0], lo).unwrap();
        let b = kl_breakdown(&data, &g, &s).unwrap();
        assert!((b.e_sigma - 1.0).abs() < 1e-14);
        assert!(b.kl < 1e-27, "{}", b.kl);
        assert!(b.kl >= 0.0);
    }

    #[test]
    fn kl_non_increasing_under_exponential_refinement() {
        let data = GaussianData::new(vec![1.0, 0.0], 1.0).unwrap();
        let kls: Vec<f64> = [25, 50, 100, 200]
            .iter()
            .map(|&n| {
                let (s, g) = song_exp(0.002, 80.0, n);
                exact_kl(&data, &g, &s).unwrap()
            })
            .collect();
        assert!(kls.windows(2).all(|w| w[1] <= w[0]), "{kls:?}");
    }

    #[test]
    fn rejects_invalid_data() {
        assert!(GaussianData::new(vec![], 1.0).is_err());
        assert!(GaussianData::new(vec![0.0], 0.0).is_err());
        assert!(GaussianData::new(vec![f64::NAN], 1.0).is_err());
        let g = GaussianData::new(vec![1.0, 0.0], 1.0).unwrap();
        assert_eq!(g.second_moment(), 3.0);
    }
}
