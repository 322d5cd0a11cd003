//! Exponential-integrator sampler for the reverse VE SDE.
//!
//! Backward step `j` (`0 ≤ j < N`) evaluates the score at forward time
//! `t_{N-j}` and moves
//!
//! ```text
//! Y ← Y + Δ_j · score(t_{N-j}, Y) + √Δ_j · U,   Δ_j = σ̄²(t_{N-j}) - σ̄²(t_{N-j-1})
//! ```
//!
//! which integrates the diffusion coefficient over the step exactly.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian_oracle::{analytic_score, GaussianData};
use crate::schedules::{TimeGrid, VarianceSchedule};
use crate::score_net::{AugmentedInput, ScoreNet};

/// Score approximation `(t, y) ↦ s(t, y)` at forward time `t`.
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, y: &[f64]) -> Result<Vec<f64>>;
}

/// Exact score of Gaussian data.
#[derive(Debug, Clone)]
pub struct AnalyticScore {
    pub data: GaussianData,
    pub schedule: VarianceSchedule,
}

impl ScoreFn for AnalyticScore {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn eval(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok(analytic_score(&self.data, &self.schedule, t, y))
    }
}

/// Trained network, fed `[y; σ̄_t]`.
#[derive(Debug, Clone)]
pub struct NetScore {
    pub net: ScoreNet,
    pub schedule: VarianceSchedule,
}

impl ScoreFn for NetScore {
    fn dim(&self) -> usize {
        self.net.data_dim()
    }

    fn eval(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(&AugmentedInput::new(y.to_vec(), self.schedule.sigma_bar(t)))?;
        Ok(out.to_vec())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroScore(pub usize);

impl ScoreFn for ZeroScore {
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, _t: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; y.len()])
    }
}

/// Adapts a closure.
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> ScoreFn for FnScore<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: f64, y: &[f64]) -> Result<Vec<f64>> {
        Ok((self.f)(t, y))
    }
}

/// `Δ_j = σ̄²(t_{N-j}) - σ̄²(t_{N-j-1})` for `j = 0..N`.
pub fn increments(grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<Vec<f64>> {
    let n = grid.steps();
    (0..n)
        .map(|j| {
            let v = schedule.sigma_bar_sq(grid.reversed_time(j)) - schedule.sigma_bar_sq(grid.reversed_time(j + 1));
            if v < 0.0 || !v.is_finite() {
                Err(Error::NegativeIncrement { step: j, value: v })
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// One backward step with caller-supplied standard Gaussian noise `u`.
pub fn step_with_noise(
    y: &[f64],
    j: usize,
    score: &dyn ScoreFn,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
    u: &[f64],
) -> Result<Vec<f64>> {
    let n = grid.steps();
    if j >= n {
        return Err(Error::invalid(format!("step index {j} out of range for N = {n}")));
    }
    if y.len() != u.len() || y.len() != score.dim() {
        return Err(Error::DimensionMismatch {
            expected: score.dim(),
            actual: y.len(),
            context: "sampler state length",
        });
    }
    let t = grid.reversed_time(j);
    let delta = schedule.sigma_bar_sq(t) - schedule.sigma_bar_sq(grid.reversed_time(j + 1));
    if delta < 0.0 || !delta.is_finite() {
        return Err(Error::NegativeIncrement { step: j, value: delta });
    }
    let s = score.eval(t, y)?;
    let sd = delta.sqrt();
    Ok(y.iter()
        .zip(&s)
        .zip(u)
        .map(|((&yk, &sk), &uk)| yk + delta * sk + sd * uk)
        .collect())
}

pub fn step<R: Rng + ?Sized>(
    y: &[f64],
    j: usize,
    score: &dyn ScoreFn,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let u: Vec<f64> = (0..y.len()).map(|_| rng.sample(StandardNormal)).collect();
    step_with_noise(y, j, score, grid, schedule, &u)
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub grid: TimeGrid,
    pub schedule: VarianceSchedule,
    pub trajectories: usize,
    pub seed: u64,
}

/// The RNG for trajectory `idx`: the seed's ChaCha8 stream number `idx`.
pub fn trajectory_rng(seed: u64, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx as u64);
    rng
}

/// Runs all `N` steps from `Y_0 ~ N(0, σ̄_T² I)` and returns the terminal states,
/// one row per trajectory. Trajectories run in parallel; each owns its RNG
/// stream, so output does not depend on scheduling.
pub fn sample(config: &SamplerConfig, score: &dyn ScoreFn) -> Result<Array2<f64>> {
    let d = score.dim();
    let grid = &config.grid;
    let schedule = &config.schedule;
    increments(grid, schedule)?;
    let sigma_t = schedule.sigma_bar(grid.horizon());
    let rows: Vec<Vec<f64>> = (0..config.trajectories)
        .into_par_iter()
        .map(|idx| {
            let mut rng = trajectory_rng(config.seed, idx);
            let mut y: Vec<f64> = (0..d)
                .map(|_| sigma_t * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for j in 0..grid.steps() {
                y = step(&y, j, score, grid, schedule, &mut rng)?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteTrajectory(idx));
                }
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((config.trajectories, d));
    for (mut row, y) in out.axis_iter_mut(Axis(0)).zip(rows) {
        row.assign(&Array1::from(y));
    }
    Ok(out)
}

/// Per-coordinate sample moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub count: usize,
    pub mean: Vec<f64>,
    /// Unbiased per-coordinate variances.
    pub var: Vec<f64>,
    /// Standard errors of the means.
    pub mean_se: Vec<f64>,
}

impl Moments {
    pub fn from_samples(samples: &Array2<f64>) -> Option<Self> {
        let count = samples.nrows();
        if count < 2 {
            return None;
        }
        let mean = samples.mean_axis(Axis(0))?;
        let var = samples.var_axis(Axis(0), 1.0);
        let mean_se = var.iter().map(|v| (v / count as f64).sqrt()).collect();
        Some(Self {
            count,
            mean: mean.to_vec(),
            var: var.to_vec(),
            mean_se,
        })
    }

    /// Average of the per-coordinate variances, the isotropic fit.
    pub fn isotropic_var(&self) -> f64 {
        self.var.iter().sum::<f64>() / self.var.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_oracle::iterate_law;
    use crate::numeric::CompensatedSum;
    use crate::schedules::GridKind;

    fn song_exp(n: usize) -> (VarianceSchedule, TimeGrid) {
        let s = VarianceSchedule::song(0.01, 10.0).unwrap();
        let g = TimeGrid::build(&s, GridKind::Exponential, n).unwrap();
        (s, g)
    }

    #[test]
    fn increments_telescope() {
        for (s, g) in [
            song_exp(100),
            {
                let s = VarianceSchedule::edm(0.002, 80.0).unwrap();
                let g = TimeGrid::build(&s, GridKind::Polynomial { rho: 7.0 }, 137).unwrap();
                (s, g)
            },
        ] {
            let inc = increments(&g, &s).unwrap();
            let total: f64 = inc.iter().copied().collect::<CompensatedSum>().value();
            let expected = s.sigma_bar_sq(g.horizon()) - s.sigma_bar_sq(g.delta());
            let ulp = f64::EPSILON * expected;
            assert!((total - expected).abs() <= 8.0 * ulp, "{total} vs {expected}");
            assert!(inc.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zero_score_zero_noise_is_identity() {
        let (s, g) = song_exp(5);
        let y = vec![0.3, -2.0];
        let out = step_with_noise(&y, 2, &ZeroScore(2), &g, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(out, y);
        assert!(step_with_noise(&y, 5, &ZeroScore(2), &g, &s, &[0.0, 0.0]).is_err());
        assert!(step_with_noise(&y, 0, &ZeroScore(3), &g, &s, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn analytic_step_matches_hand_update() {
        let (s, g) = song_exp(4);
        let data = GaussianData::new(vec![1.5], 0.25).unwrap();
        let score = AnalyticScore {
            data: data.clone(),
            schedule: s,
        };
        let y = [0.7];
        let u = [0.4];
        let t = g.reversed_time(1);
        let delta = s.sigma_bar_sq(t) - s.sigma_bar_sq(g.reversed_time(2));
        let v = 0.25 + s.sigma_bar_sq(t);
        let expected = 0.7 + delta * (-(0.7 - 1.5) / v) + delta.sqrt() * 0.4;
        let got = step_with_noise(&y, 1, &score, &g, &s, &u).unwrap();
        assert!((got[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_and_deterministic() {
        let (s, g) = song_exp(10);
        let mut cfg = SamplerConfig {
            grid: g,
            schedule: s,
            trajectories: 0,
            seed: 1,
        };
        assert_eq!(sample(&cfg, &ZeroScore(3)).unwrap().dim(), (0, 3));
        cfg.trajectories = 64;
        let a = sample(&cfg, &ZeroScore(3)).unwrap();
        let b = sample(&cfg, &ZeroScore(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_step_zero_score_variance() {
        // Y_1 = Y_0 + √Δ U with Y_0 ~ N(0, σ̄_T²): variance σ̄_T² + Δ_0
        let s = VarianceSchedule::song(0.5, 2.0).unwrap();
        let g = TimeGrid::build(&s, GridKind::Exponential, 1).unwrap();
        let cfg = SamplerConfig {
            grid: g.clone(),
            schedule: s,
            trajectories: 40_000,
            seed: 5,
        };
        let m = Moments::from_samples(&sample(&cfg, &ZeroScore(2)).unwrap()).unwrap();
        let expected = s.sigma_bar_sq(g.horizon()) + increments(&g, &s).unwrap()[0];
        for v in &m.var {
            // relative sd of a variance estimate is √(2/n) ≈ 0.7%
            assert!((v / expected - 1.0).abs() < 0.03, "{v} vs {expected}");
        }
    }

    #[test]
    fn one_step_mean_is_zero_for_centered_data() {
        let (s, g) = song_exp(20);
        let data = GaussianData::new(vec![0.0; 2], 1.0).unwrap();
        let score = AnalyticScore { data, schedule: s };
        let sigma_t = s.sigma_bar(g.horizon());
        let mut sum = [0.0; 2];
        let n = 20_000;
        for idx in 0..n {
            let mut rng = trajectory_rng(3, idx);
            let y0: Vec<f64> = (0..2).map(|_| sigma_t * rng.sample::<f64, _>(StandardNormal)).collect();
            let y1 = step(&y0, 0, &score, &g, &s, &mut rng).unwrap();
            sum[0] += y1[0];
            sum[1] += y1[1];
        }
        let law = iterate_law(&score.data, &g, &s).unwrap();
        let se = (law.cov_scalars[1] / n as f64).sqrt();
        for v in sum {
            assert!((v / n as f64).abs() < 4.0 * se);
        }
    }

    #[test]
    fn moments_match_iterate_law() {
        let (s, g) = song_exp(30);
        let data = GaussianData::new(vec![1.0, -0.5], 0.36).unwrap();
        let score = AnalyticScore {
            data: data.clone(),
            schedule: s,
        };
        let cfg = SamplerConfig {
            grid: g.clone(),
            schedule: s,
            trajectories: 50_000,
            seed: 11,
        };
        let mom = Moments::from_samples(&sample(&cfg, &score).unwrap()).unwrap();
        let law = iterate_law(&data, &g, &s).unwrap();
        for k in 0..2 {
            assert!((mom.mean[k] - law.terminal_mean()[k]).abs() <= 4.0 * mom.mean_se[k]);
            assert!((mom.var[k] / law.terminal_cov() - 1.0).abs() <= 0.05);
        }
    }

    #[test]
    fn translation_shifts_paths_by_mean_recursion() {
        let (s, g) = song_exp(25);
        let m = vec![2.0, -1.0, 0.5];
        let shifted = GaussianData::new(m.clone(), 0.5).unwrap();
        let centered = GaussianData::new(vec![0.0; 3], 0.5).unwrap();
        let cfg = SamplerConfig {
            grid: g.clone(),
            schedule: s,
            trajectories: 200,
            seed: 9,
        };
        let a = sample(&cfg, &AnalyticScore { data: shifted.clone(), schedule: s }).unwrap();
        let b = sample(&cfg, &AnalyticScore { data: centered, schedule: s }).unwrap();
        let law = iterate_law(&shifted, &g, &s).unwrap();
        for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
            for k in 0..3 {
                let diff = ra[k] - rb[k];
                assert!((diff - law.terminal_mean()[k]).abs() < 1e-9, "{diff}");
            }
        }
    }

    #[test]
    fn net_score_feeds_sigma_bar() {
        let s = VarianceSchedule::edm(0.1, 4.0).unwrap();
        let net = ScoreNet::init(2, 16, 1, 0).unwrap();
        let ns = NetScore {
            net: net.clone(),
            schedule: s,
        };
        let y = [0.2, -0.3];
        let direct = net.forward(&AugmentedInput::new(y.to_vec(), 2.5)).unwrap();
        assert_eq!(ns.eval(2.5, &y).unwrap(), direct.to_vec());
    }

    #[test]
    fn non_finite_trajectory_is_reported() {
        let (s, g) = song_exp(3);
        let cfg = SamplerConfig {
            grid: g,
            schedule: s,
            trajectories: 4,
            seed: 0,
        };
        let bad = FnScore {
            dim: 1,
            f: |_t: f64, _y: &[f64]| vec![f64::NAN],
        };
        assert!(matches!(sample(&cfg, &bad), Err(Error::NonFiniteTrajectory(_))));
    }
}
