//! Variance schedules, time grids, diffusion coefficients and loss weightings.
//!
//! Forward time runs over `0 < t_0 < t_1 < ... < t_N = T` with `δ = t_0`. The
//! backward (sampling) clock is `t←_j = T - t_{N-j}`, so backward step `j` covers
//! forward times `[t_{N-j-1}, t_{N-j}]`. Everything here is stored in forward
//! order; backward quantities are derived by index reflection.

use std::fmt;

use crate::error::{Error, Result};

/// Functional form of `σ̄_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceKind {
    /// `σ̄_t = t`.
    Edm,
    /// `σ̄_t = √t`.
    Song,
}

impl VarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            VarianceKind::Edm => "edm",
            VarianceKind::Song => "song",
        }
    }

    #[inline]
    pub fn sigma_bar(self, t: f64) -> f64 {
        match self {
            VarianceKind::Edm => t,
            VarianceKind::Song => t.sqrt(),
        }
    }

    #[inline]
    pub fn sigma_bar_sq(self, t: f64) -> f64 {
        match self {
            VarianceKind::Edm => t * t,
            VarianceKind::Song => t,
        }
    }

    /// Inverse of [`VarianceKind::sigma_bar`].
    #[inline]
    pub fn time_of(self, sigma_bar: f64) -> f64 {
        match self {
            VarianceKind::Edm => sigma_bar,
            VarianceKind::Song => sigma_bar * sigma_bar,
        }
    }

    /// `σ_t² = ½ d(σ̄_t²)/dt` (zero drift, so `σ̄_t² = 2∫₀ᵗ σ_s² ds`).
    #[inline]
    pub fn diffusion_sq(self, t: f64) -> f64 {
        match self {
            VarianceKind::Edm => t,
            VarianceKind::Song => 0.5,
        }
    }
}

impl fmt::Display for VarianceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSchedule {
    pub kind: VarianceKind,
    pub sigma_bar_min: f64,
    pub sigma_bar_max: f64,
}

impl VarianceSchedule {
    pub fn new(kind: VarianceKind, sigma_bar_min: f64, sigma_bar_max: f64) -> Result<Self> {
        if !(sigma_bar_min.is_finite() && sigma_bar_max.is_finite()) {
            return Err(Error::invalid("sigma_bar bounds must be finite"));
        }
        if !(sigma_bar_min > 0.0 && sigma_bar_min < sigma_bar_max) {
            return Err(Error::invalid(format!(
                "need 0 < sigma_bar_min < sigma_bar_max, got {sigma_bar_min} and {sigma_bar_max}"
            )));
        }
        Ok(Self {
            kind,
            sigma_bar_min,
            sigma_bar_max,
        })
    }

    pub fn edm(sigma_bar_min: f64, sigma_bar_max: f64) -> Result<Self> {
        Self::new(VarianceKind::Edm, sigma_bar_min, sigma_bar_max)
    }

    pub fn song(sigma_bar_min: f64, sigma_bar_max: f64) -> Result<Self> {
        Self::new(VarianceKind::Song, sigma_bar_min, sigma_bar_max)
    }

    #[inline]
    pub fn sigma_bar(&self, t: f64) -> f64 {
        self.kind.sigma_bar(t)
    }

    #[inline]
    pub fn sigma_bar_sq(&self, t: f64) -> f64 {
        self.kind.sigma_bar_sq(t)
    }

    /// Forward time at which `σ̄ = sigma_bar_min`, i.e. `δ`.
    pub fn t_min(&self) -> f64 {
        self.kind.time_of(self.sigma_bar_min)
    }

    /// Forward time at which `σ̄ = sigma_bar_max`, i.e. `T`.
    pub fn t_max(&self) -> f64 {
        self.kind.time_of(self.sigma_bar_max)
    }
}

/// `σ_t²` for the schedule.
pub fn diffusion_coeff_sq(schedule: &VarianceSchedule, t: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::invalid(format!("diffusion coefficient needs t > 0, got {t}")));
    }
    Ok(schedule.kind.diffusion_sq(t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridKind {
    Polynomial { rho: f64 },
    Exponential,
    /// Explicit user-supplied times.
    Custom,
}

impl GridKind {
    pub fn name(&self) -> &'static str {
        match self {
            GridKind::Polynomial { .. } => "poly",
            GridKind::Exponential => "exp",
            GridKind::Custom => "custom",
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            GridKind::Polynomial { rho } => Some(*rho),
            _ => None,
        }
    }
}

/// Strictly increasing forward times `t_0 < ... < t_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    kind: GridKind,
}

impl TimeGrid {
    /// Builds one of the two standard grids: polynomial time with `σ̄_t = t`, or
    /// exponential time with `σ̄_t = √t`.
    pub fn build(schedule: &VarianceSchedule, kind: GridKind, n: usize) -> Result<Self> {
        match (kind, schedule.kind) {
            (GridKind::Polynomial { .. }, VarianceKind::Edm)
            | (GridKind::Exponential, VarianceKind::Song) => {}
            (GridKind::Custom, _) => {
                return Err(Error::invalid("custom grids are built with TimeGrid::from_times"))
            }
            (g, v) => {
                return Err(Error::UnsupportedPairing {
                    grid: g.name(),
                    variance: v.name(),
                })
            }
        }
        Self::build_experimental(schedule, kind, n)
    }

    /// Like [`TimeGrid::build`] but accepts any grid/variance pairing. The grid
    /// is laid out between `δ = σ̄⁻¹(σ̄_min)` and `T = σ̄⁻¹(σ̄_max)` in time.
    pub fn build_experimental(schedule: &VarianceSchedule, kind: GridKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("time grid needs N >= 1 steps"));
        }
        let (delta, horizon) = (schedule.t_min(), schedule.t_max());
        let nf = n as f64;
        let mut times = Vec::with_capacity(n + 1);
        match kind {
            GridKind::Polynomial { rho } => {
                if !(rho >= 1.0) || !rho.is_finite() {
                    return Err(Error::invalid(format!("polynomial grid needs rho >= 1, got {rho}")));
                }
                let hi = horizon.powf(1.0 / rho);
                let lo = delta.powf(1.0 / rho);
                for j in 0..=n {
                    let frac = (n - j) as f64 / nf;
                    times.push((hi - (hi - lo) * frac).powf(rho));
                }
            }
            GridKind::Exponential => {
                // T (δ/T)^{(N-j)/N}, evaluated in log space
                let (ln_hi, ln_lo) = (horizon.ln(), delta.ln());
                for j in 0..=n {
                    let frac = (n - j) as f64 / nf;
                    times.push((ln_hi + frac * (ln_lo - ln_hi)).exp());
                }
            }
            GridKind::Custom => {
                return Err(Error::invalid("custom grids are built with TimeGrid::from_times"))
            }
        }
        times[0] = delta;
        times[n] = horizon;
        let grid = Self { times, kind };
        grid.check_increasing()?;
        Ok(grid)
    }

    /// Wraps explicit times. A single time is allowed (zero-step degenerate grid).
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::invalid("time grid needs at least one point"));
        }
        if times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::invalid("grid times must be positive and finite"));
        }
        let grid = Self {
            times,
            kind: GridKind::Custom,
        };
        grid.check_increasing()?;
        Ok(grid)
    }

    fn check_increasing(&self) -> Result<()> {
        if let Some(k) = self.times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::invalid(format!(
                "grid times not strictly increasing at index {}: {} then {}",
                k,
                self.times[k],
                self.times[k + 1]
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    pub fn t(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// `δ = t_0`.
    pub fn delta(&self) -> f64 {
        self.times[0]
    }

    /// `T = t_N`.
    pub fn horizon(&self) -> f64 {
        self.times[self.steps()]
    }

    /// Forward step length `t_j - t_{j-1}` for `j >= 1`.
    #[inline]
    pub fn forward_step(&self, j: usize) -> f64 {
        self.times[j] - self.times[j - 1]
    }

    /// Backward clock `t←_j = T - t_{N-j}`.
    pub fn backward_time(&self, j: usize) -> f64 {
        let n = self.steps();
        if j == 0 {
            0.0
        } else {
            self.horizon() - self.times[n - j]
        }
    }

    pub fn backward_times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|j| self.backward_time(j)).collect()
    }

    /// Forward time `T - t←_j = t_{N-j}` seen by backward step `j`.
    #[inline]
    pub fn reversed_time(&self, j: usize) -> f64 {
        self.times[self.steps() - j]
    }

    /// `γ_j = t←_{j+1} - t←_j = t_{N-j} - t_{N-j-1}`.
    #[inline]
    pub fn gamma(&self, j: usize) -> f64 {
        let n = self.steps();
        self.times[n - j] - self.times[n - j - 1]
    }

    pub fn sigma_bars(&self, schedule: &VarianceSchedule) -> Vec<f64> {
        self.times.iter().map(|&t| schedule.sigma_bar(t)).collect()
    }
}

/// Parameters of the EDM total weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmWeighting {
    pub p_mean: f64,
    pub p_std: f64,
    pub sigma_data: f64,
}

impl Default for EdmWeighting {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_data: 0.5,
        }
    }
}

/// `β_EDM(σ̄) = exp(-(ln σ̄ - P_mean)² / (2 P_std²)) · (σ̄² + σ_data²) / (σ̄ σ_data²)`.
pub fn edm_total_weighting(sigma_bar: f64, params: &EdmWeighting) -> Result<f64> {
    if !(sigma_bar > 0.0) {
        return Err(Error::invalid(format!("sigma_bar must be positive, got {sigma_bar}")));
    }
    if !(params.p_std > 0.0 && params.sigma_data > 0.0) {
        return Err(Error::invalid("P_std and sigma_data must be positive"));
    }
    let z = (sigma_bar.ln() - params.p_mean) / params.p_std;
    let sd2 = params.sigma_data * params.sigma_data;
    Ok((-0.5 * z * z).exp() * (sigma_bar * sigma_bar + sd2) / (sigma_bar * sd2))
}

/// Per-gridpoint weighting `w(t_j)` and total weighting
/// `β_j = w(t_j)(t_j - t_{j-1}) / σ̄_{t_j}`, both indexed `j = 1..=N` (stored at `j-1`).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingSpec {
    pub w: Vec<f64>,
    pub beta: Vec<f64>,
}

impl WeightingSpec {
    /// Recovers `w` from a prescribed total weighting.
    pub fn from_total(beta: Vec<f64>, grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<Self> {
        let n = grid.steps();
        if beta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: beta.len(),
                context: "total weighting length",
            });
        }
        if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::invalid("total weighting entries must be positive and finite"));
        }
        let mut w = Vec::with_capacity(n);
        for (k, &b) in beta.iter().enumerate() {
            let j = k + 1;
            let dt = grid.forward_step(j);
            if !(dt > 0.0) {
                return Err(Error::invalid(format!("zero-length step at j = {j}")));
            }
            w.push(b * schedule.sigma_bar(grid.t(j)) / dt);
        }
        Ok(Self { w, beta })
    }

    /// `β_j = scale · β_EDM(σ̄_{t_j})`.
    pub fn edm(
        grid: &TimeGrid,
        schedule: &VarianceSchedule,
        params: &EdmWeighting,
        scale: f64,
    ) -> Result<Self> {
        let beta = (1..=grid.steps())
            .map(|j| edm_total_weighting(schedule.sigma_bar(grid.t(j)), params).map(|b| scale * b))
            .collect::<Result<Vec<_>>>()?;
        Self::from_total(beta, grid, schedule)
    }

    /// `β_j ≡ 1`.
    pub fn uniform(grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<Self> {
        Self::from_total(vec![1.0; grid.steps()], grid, schedule)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `w(t_j)(t_j - t_{j-1}) / σ̄_{t_j}` recomputed from `w`.
    pub fn recompute_total(&self, grid: &TimeGrid, schedule: &VarianceSchedule) -> Vec<f64> {
        self.w
            .iter()
            .enumerate()
            .map(|(k, &w)| w * grid.forward_step(k + 1) / schedule.sigma_bar(grid.t(k + 1)))
            .collect()
    }

    /// Convergence-rate factors `w(t_j)(t_j - t_{j-1}) σ̄_{t_j}`.
    pub fn rate_factors(&self, grid: &TimeGrid, schedule: &VarianceSchedule) -> Vec<f64> {
        self.w
            .iter()
            .enumerate()
            .map(|(k, &w)| w * grid.forward_step(k + 1) * schedule.sigma_bar(grid.t(k + 1)))
            .collect()
    }

    /// `Σ_j w(t_j)(t_j - t_{j-1}) σ̄_{t_j}`; reported only, no threshold is enforced.
    pub fn normalization_sum(&self, grid: &TimeGrid, schedule: &VarianceSchedule) -> f64 {
        self.rate_factors(grid, schedule).iter().sum()
    }

    /// `max_j σ²_{t_j} / w(t_j)`, the factor multiplying the training error in
    /// the combined KL bound.
    pub fn score_factor(&self, grid: &TimeGrid, schedule: &VarianceSchedule) -> f64 {
        self.w
            .iter()
            .enumerate()
            .map(|(k, &w)| schedule.kind.diffusion_sq(grid.t(k + 1)) / w)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
