//! KL error decomposition for the VE sampler, schedule-comparison factors and
//! iteration-complexity formulas.
//!
//! Suppressed order constants are set to 1 throughout; every quantity here is
//! an order quantity, not a calibrated bound.
//!
//! Index convention: backward step `j` sees forward time `t_{N-j}`, so
//! `s_j = σ̄²(t_{N-j})` and `γ_j = t_{N-j} - t_{N-j-1}`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian_oracle::{analytic_score, kl_breakdown, GaussianData};
use crate::numeric::{rel_diff, CompensatedSum};
use crate::quadrature::{adaptive_simpson, SimpsonOptions};
use crate::sampler::{trajectory_rng, ScoreFn};
use crate::schedules::{
    edm_total_weighting, EdmWeighting, GridKind, TimeGrid, VarianceKind, VarianceSchedule, WeightingSpec,
};
use crate::training::DataSource;

/// Closed-form and quadrature integrals must agree to this relative error.
pub const QUADRATURE_CROSSCHECK_TOL: f64 = 1e-9;

/// Initialization error `E_I = m₂² / σ̄_T²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitError {
    pub value: f64,
    /// The Gaussian-convolution lemma's sharper `m₂² / (2 σ̄_T²)`.
    pub lemma: f64,
}

pub fn compute_e_init(m2_sq: f64, sigma_bar_t: f64) -> Result<InitError> {
    if !(m2_sq >= 0.0 && m2_sq.is_finite()) {
        return Err(Error::invalid(format!("m2^2 must be finite and >= 0, got {m2_sq}")));
    }
    if !(sigma_bar_t > 0.0 && sigma_bar_t.is_finite()) {
        return Err(Error::invalid(format!("sigma_bar_T must be positive, got {sigma_bar_t}")));
    }
    let value = m2_sq / (sigma_bar_t * sigma_bar_t);
    Ok(InitError {
        value,
        lemma: 0.5 * value,
    })
}

/// The three discretization-error terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscError {
    /// `d Σ_j γ_j ∫ σ⁴/σ̄⁴` over each backward step.
    pub step_term: f64,
    /// `m₂² ∫_0^{t←_1} σ² / σ̄_T⁴`.
    pub first_step_term: f64,
    /// `(m₂² + d) Σ_{j=1}^{N-1} (1 - e^{-s_j})(s_j² - s_{j+1}s_{j-1}) / (s_{j-1} s_j²)`.
    pub mismatch_term: f64,
    pub total: f64,
    /// `step_term` with every integral evaluated by adaptive quadrature.
    pub step_term_quadrature: f64,
    /// `first_step_term` with its integral evaluated by adaptive quadrature.
    pub first_step_term_quadrature: f64,
}

/// `∫_a^b σ_u⁴ / σ̄_u⁴ du` in closed form.
fn ratio_integral(kind: VarianceKind, a: f64, b: f64) -> f64 {
    // EDM: σ² = u, σ̄ = u, integrand 1/u². Song: σ² = 1/2, σ̄² = u, integrand 1/(4u²).
    let base = (b - a) / (a * b);
    match kind {
        VarianceKind::Edm => base,
        VarianceKind::Song => 0.25 * base,
    }
}

fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64> {
    adaptive_simpson(f, a, b, SimpsonOptions::default())
}

pub fn compute_e_disc(grid: &TimeGrid, schedule: &VarianceSchedule, m2_sq: f64, d: usize) -> Result<DiscError> {
    if !(m2_sq >= 0.0 && m2_sq.is_finite()) {
        return Err(Error::invalid(format!("m2^2 must be finite and >= 0, got {m2_sq}")));
    }
    let n = grid.steps();
    let kind = schedule.kind;
    let df = d as f64;
    let level = |j: usize| schedule.sigma_bar_sq(grid.reversed_time(j));
    let ratio = |u: f64| {
        let s2 = kind.diffusion_sq(u);
        let sb2 = kind.sigma_bar_sq(u);
        (s2 * s2) / (sb2 * sb2)
    };

    let mut closed = CompensatedSum::new();
    let mut numeric = CompensatedSum::new();
    for j in 0..n {
        let (a, b) = (grid.reversed_time(j + 1), grid.reversed_time(j));
        let gamma = grid.gamma(j);
        closed += gamma * ratio_integral(kind, a, b);
        numeric += gamma * quad(ratio, a, b)?;
    }
    let step_term = df * closed.value();
    let step_term_quadrature = df * numeric.value();

    let (first_step_term, first_step_term_quadrature) = if n == 0 {
        (0.0, 0.0)
    } else {
        let s_t = level(0);
        let (a, b) = (grid.reversed_time(1), grid.reversed_time(0));
        // ∫ σ² du = (σ̄²(b) - σ̄²(a)) / 2
        let exact = 0.5 * (s_t - level(1));
        let numeric = quad(|u| kind.diffusion_sq(u), a, b)?;
        let denom = s_t * s_t;
        (m2_sq * exact / denom, m2_sq * numeric / denom)
    };

    for (label, c, q) in [
        ("step", step_term, step_term_quadrature),
        ("first-step", first_step_term, first_step_term_quadrature),
    ] {
        if rel_diff(c, q, 0.0) > QUADRATURE_CROSSCHECK_TOL {
            return Err(Error::Internal(format!(
                "E_D {label} term: closed form {c} vs quadrature {q} disagree"
            )));
        }
    }

    let mut mismatch = CompensatedSum::new();
    for j in 1..n {
        let (prev, cur, next) = (level(j - 1), level(j), level(j + 1));
        mismatch += (-(-cur).exp_m1()) * (cur * cur - next * prev) / (prev * cur * cur);
    }
    let mismatch_term = (m2_sq + df) * mismatch.value();

    let total = step_term + first_step_term + mismatch_term;
    if !total.is_finite() {
        return Err(Error::Internal("non-finite discretization error".into()));
    }
    Ok(DiscError {
        step_term,
        first_step_term,
        mismatch_term,
        total,
        step_term_quadrature,
        first_step_term_quadrature,
    })
}

/// Monte-Carlo estimate of the score error with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreError {
    pub value: f64,
    pub std_error: f64,
    pub samples_per_step: usize,
}

/// `E_S = Σ_j γ_j σ²(t_{N-j}) E_{Y ~ p_{t_{N-j}}} ‖S(t_{N-j}, Y) - ∇log p_{t_{N-j}}(Y)‖²`,
/// with `Y` drawn exactly from the Gaussian marginal. Sample `k` of step `j`
/// uses RNG stream `j · mc_samples + k`.
pub fn compute_e_score(
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
    score: &dyn ScoreFn,
    source: &DataSource,
    mc_samples: usize,
    seed: u64,
) -> Result<ScoreError> {
    let data = source
        .as_gaussian()
        .ok_or_else(|| Error::Unsupported("score error needs the true score; only Gaussian data has one".into()))?;
    if mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be >= 1"));
    }
    let d = data.dim();
    if score.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: score.dim(),
            context: "score dimension vs data",
        });
    }
    let mut value = CompensatedSum::new();
    let mut variance = 0.0;
    for j in 0..grid.steps() {
        let t = grid.reversed_time(j);
        let weight = grid.gamma(j) * schedule.kind.diffusion_sq(t);
        let sd = data.marginal_variance(schedule, t).sqrt();
        let sq: Vec<f64> = (0..mc_samples)
            .into_par_iter()
            .map(|k| {
                let mut rng = trajectory_rng(seed, j * mc_samples + k);
                let y: Vec<f64> = data
                    .mean()
                    .iter()
                    .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let s = score.eval(t, &y)?;
                let truth = analytic_score(data, schedule, t, &y);
                Ok(s.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum())
            })
            .collect::<Result<_>>()?;
        let mean = sq.iter().sum::<f64>() / mc_samples as f64;
        value += weight * mean;
        if mc_samples > 1 {
            let var = sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (mc_samples - 1) as f64;
            variance += weight * weight * var / mc_samples as f64;
        }
    }
    Ok(ScoreError {
        value: value.value(),
        std_error: variance.sqrt(),
        samples_per_step: mc_samples,
    })
}

/// Closed-form `max_j σ²(t_j)/w(t_j)` of the two standard designs under the
/// EDM total weighting, with the prefactor `C₄` set to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Table2 {
    pub poly_factor: f64,
    pub exp_factor: f64,
}

pub fn table2_quantities(n: usize, rho: f64, sigma_min: f64, sigma_max: f64) -> Result<Table2> {
    if n == 0 {
        return Err(Error::invalid("N must be >= 1"));
    }
    if !(sigma_min > 0.0 && sigma_max > sigma_min && rho >= 1.0) {
        return Err(Error::invalid("need 0 < sigma_min < sigma_max and rho >= 1"));
    }
    let nf = n as f64;
    let (hi, lo) = (sigma_max.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
    let poly_factor = sigma_max - (hi - (hi - lo) / nf).powf(rho);
    let ratio = (sigma_min * sigma_min) / (sigma_max * sigma_max);
    let exp_factor = 0.5 * (sigma_max - sigma_max * ratio.powf(1.0 / nf));
    Ok(Table2 {
        poly_factor,
        exp_factor,
    })
}

/// `C₄ = 1 / β_EDM(σ̄_max)`, the prefactor dropped by [`table2_quantities`].
pub fn table2_prefactor(sigma_max: f64, params: &EdmWeighting) -> Result<f64> {
    Ok(1.0 / edm_total_weighting(sigma_max, params)?)
}

/// Brute-force `max_j σ²(t_j)/w(t_j)` over the standard grid of `kind` under
/// `β_j = β_EDM(σ̄_{t_j})`.
pub fn table2_brute_force(
    kind: GridKind,
    n: usize,
    sigma_min: f64,
    sigma_max: f64,
    params: &EdmWeighting,
) -> Result<f64> {
    let schedule = match kind {
        GridKind::Polynomial { .. } => VarianceSchedule::edm(sigma_min, sigma_max)?,
        GridKind::Exponential => VarianceSchedule::song(sigma_min, sigma_max)?,
        GridKind::Custom => return Err(Error::invalid("brute force needs a standard grid")),
    };
    let grid = TimeGrid::build(&schedule, kind, n)?;
    let w = WeightingSpec::edm(&grid, &schedule, params, 1.0)?;
    Ok(w.score_factor(&grid, &schedule))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleFamily {
    Polynomial,
    Exponential,
}

/// Iteration-complexity prefactors with order constants set to 1:
/// polynomial `(m₂²∨d)/d · ρ² (σ̄_max/σ̄_min)^{1/ρ} σ̄_max²`,
/// exponential `(m₂²∨d)/d · ln(σ̄_max/σ̄_min)² σ̄_max²`.
pub fn iteration_complexity(
    family: ScheduleFamily,
    m2_sq: f64,
    d: usize,
    rho: f64,
    sigma_min: f64,
    sigma_max: f64,
) -> Result<f64> {
    if !(sigma_min > 0.0 && sigma_max > sigma_min) {
        return Err(Error::invalid("need 0 < sigma_min < sigma_max"));
    }
    let df = d as f64;
    let lead = m2_sq.max(df);
    let prefactor = if lead == 0.0 { 0.0 } else { lead / df };
    let ratio = sigma_max / sigma_min;
    Ok(match family {
        ScheduleFamily::Polynomial => {
            if !(rho > 0.0) {
                return Err(Error::invalid("rho must be positive"));
            }
            prefactor * rho * rho * ratio.powf(1.0 / rho) * sigma_max * sigma_max
        }
        ScheduleFamily::Exponential => prefactor * ratio.ln().powi(2) * sigma_max * sigma_max,
    })
}

/// `ρ* = ½ ln(σ̄_max / σ̄_min)`, the minimizer of the polynomial complexity.
pub fn optimal_rho(sigma_min: f64, sigma_max: f64) -> f64 {
    0.5 * (sigma_max / sigma_min).ln()
}

/// Term structure of the combined bound under the EDM designs, `a` the
/// polynomial exponent. The training term is kept symbolic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorollaryTerms {
    pub a: f64,
    /// `m₂² / T²`
    pub init: f64,
    /// `d a² T^{1/a} / (δ^{1/a} N)`
    pub disc_leading: f64,
    /// `(m₂² + d)(a² T^{1/a}/(δ^{1/a} N) + a³ T^{2/a}/(δ^{2/a} N²))`
    pub disc_mixed: f64,
}

pub const COROLLARY_TRAINING_TERM: &str = "(1/N)(C9 + (1 - C8 h m d^((a0-1)/2) / (n^3 N^2))^K)";

pub fn corollary_terms(a: f64, m2_sq: f64, d: usize, delta: f64, horizon: f64, n: usize) -> CorollaryTerms {
    let nf = n as f64;
    let r = (horizon / delta).powf(1.0 / a);
    CorollaryTerms {
        a,
        init: m2_sq / (horizon * horizon),
        disc_leading: d as f64 * a * a * r / nf,
        disc_mixed: (m2_sq + d as f64) * (a * a * r / nf + a.powi(3) * r * r / (nf * nf)),
    }
}

/// Everything [`full_error_report`] consumes.
#[derive(Debug, Clone, Copy)]
pub struct ReportRequest<'a> {
    pub grid: &'a TimeGrid,
    pub schedule: &'a VarianceSchedule,
    pub m2_sq: f64,
    pub d: usize,
    /// Needed for the score factor whenever `eps_train > 0`.
    pub weighting: Option<&'a WeightingSpec>,
    pub eps_train: f64,
    /// Gaussian mode: enables the exact KL column.
    pub oracle: Option<&'a GaussianData>,
    pub e_score: Option<ScoreError>,
    /// Polynomial exponent for the corollary term structure, when requested.
    pub corollary_a: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub n: usize,
    pub e_init: InitError,
    pub e_disc: DiscError,
    pub e_score: Option<ScoreError>,
    pub kl_exact: Option<f64>,
    pub score_factor: Option<f64>,
    pub eps_train: f64,
    /// `E_I + E_D + score_factor · ε_train`.
    pub bound: f64,
    /// `bound / kl_exact` in Gaussian mode.
    pub bound_to_kl: Option<f64>,
    pub complexity_poly: f64,
    pub complexity_exp: f64,
    pub optimal_rho: f64,
    pub corollary: Option<CorollaryTerms>,
}

pub fn full_error_report(req: &ReportRequest) -> Result<ErrorReport> {
    let grid = req.grid;
    let schedule = req.schedule;
    let sigma_t = schedule.sigma_bar(grid.horizon());
    let e_init = compute_e_init(req.m2_sq, sigma_t)?;
    let e_disc = compute_e_disc(grid, schedule, req.m2_sq, req.d)?;
    if !(req.eps_train >= 0.0) {
        return Err(Error::invalid("eps_train must be >= 0"));
    }
    let score_factor = req.weighting.map(|w| w.score_factor(grid, schedule));
    let training = match score_factor {
        _ if req.eps_train == 0.0 => 0.0,
        Some(f) => f * req.eps_train,
        None => return Err(Error::MissingComponent("weighting (needed for the score factor)")),
    };
    let bound = e_init.value + e_disc.total + training;
    let kl_exact = match req.oracle {
        Some(data) => {
            if data.dim() != req.d {
                return Err(Error::DimensionMismatch {
                    expected: req.d,
                    actual: data.dim(),
                    context: "oracle dimension",
                });
            }
            Some(kl_breakdown(data, grid, schedule)?.kl)
        }
        None => None,
    };
    let bound_to_kl = kl_exact.and_then(|kl| (kl > 0.0).then(|| bound / kl));
    let (smin, smax) = (schedule.sigma_bar_min, schedule.sigma_bar_max);
    let rho = grid.kind().rho().unwrap_or(7.0);
    let complexity_poly = iteration_complexity(ScheduleFamily::Polynomial, req.m2_sq, req.d, rho, smin, smax)?;
    let complexity_exp = iteration_complexity(ScheduleFamily::Exponential, req.m2_sq, req.d, rho, smin, smax)?;
    let corollary = req
        .corollary_a
        .map(|a| corollary_terms(a, req.m2_sq, req.d, smin, smax, grid.steps()));
    Ok(ErrorReport {
        n: grid.steps(),
        e_init,
        e_disc,
        e_score: req.e_score,
        kl_exact,
        score_factor,
        eps_train: req.eps_train,
        bound,
        bound_to_kl,
        complexity_poly,
        complexity_exp,
        optimal_rho: optimal_rho(smin, smax),
        corollary,
    })
}

impl ErrorReport {
    /// Flat `(column, value)` pairs for tabular export; absent values are empty.
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        vec![
            ("N", self.n.to_string()),
            ("E_I", format!("{:e}", self.e_init.value)),
            ("E_I_lemma", format!("{:e}", self.e_init.lemma)),
            ("E_D", format!("{:e}", self.e_disc.total)),
            ("E_D_step", format!("{:e}", self.e_disc.step_term)),
            ("E_D_first_step", format!("{:e}", self.e_disc.first_step_term)),
            ("E_D_mismatch", format!("{:e}", self.e_disc.mismatch_term)),
            ("E_S", opt(self.e_score.map(|s| s.value))),
            ("E_S_stderr", opt(self.e_score.map(|s| s.std_error))),
            ("score_factor", opt(self.score_factor)),
            ("eps_train", format!("{:e}", self.eps_train)),
            ("bound", format!("{:e}", self.bound)),
            ("exact_kl", opt(self.kl_exact)),
            ("bound_to_kl", opt(self.bound_to_kl)),
            ("complexity_poly", format!("{:e}", self.complexity_poly)),
            ("complexity_exp", format!("{:e}", self.complexity_exp)),
            ("optimal_rho", format!("{}", self.optimal_rho)),
        ]
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "KL(p_delta | q_(T-delta)) <~ E_I + E_D + max_j sigma^2/w * (eps_train + eps_n + eps_est + eps_approx)")?;
        writeln!(f, "  N                      {}", self.n)?;
        writeln!(f, "  E_I                    {:.6e}   (lemma form {:.6e})", self.e_init.value, self.e_init.lemma)?;
        writeln!(f, "  E_D                    {:.6e}", self.e_disc.total)?;
        writeln!(f, "    step integrals       {:.6e}", self.e_disc.step_term)?;
        writeln!(f, "    first step           {:.6e}", self.e_disc.first_step_term)?;
        writeln!(f, "    variance mismatch    {:.6e}", self.e_disc.mismatch_term)?;
        match self.score_factor {
            Some(s) => writeln!(f, "  max_j sigma^2/w        {s:.6e}")?,
            None => writeln!(f, "  max_j sigma^2/w        (no weighting given)")?,
        }
        writeln!(f, "  eps_train              {:.6e}", self.eps_train)?;
        writeln!(f, "  eps_n, eps_est, eps_approx   symbolic, not estimated")?;
        if let Some(s) = self.e_score {
            writeln!(f, "  E_S (Monte Carlo)      {:.6e} +/- {:.2e}", s.value, s.std_error)?;
        }
        writeln!(f, "  bound E_I+E_D+sf*eps   {:.6e}", self.bound)?;
        if let Some(kl) = self.kl_exact {
            writeln!(f, "  exact KL (Gaussian)    {kl:.6e}")?;
        }
        if let Some(r) = self.bound_to_kl {
            writeln!(f, "  bound / exact KL       {r:.4}")?;
        }
        writeln!(f, "  complexity poly        {:.6e}", self.complexity_poly)?;
        writeln!(f, "  complexity exp         {:.6e}", self.complexity_exp)?;
        writeln!(f, "  optimal rho            {:.4}", self.optimal_rho)?;
        if let Some(c) = self.corollary {
            writeln!(f, "  EDM-design terms (a = {}):", c.a)?;
            writeln!(f, "    m2^2/T^2                                  {:.6e}", c.init)?;
            writeln!(f, "    d a^2 T^(1/a) / (delta^(1/a) N)           {:.6e}", c.disc_leading)?;
            writeln!(f, "    (m2^2+d)(a^2 r/N + a^3 r^2/N^2)           {:.6e}", c.disc_mixed)?;
            writeln!(f, "    {COROLLARY_TRAINING_TERM}   symbolic")?;
        }
        Ok(())
    }
}
