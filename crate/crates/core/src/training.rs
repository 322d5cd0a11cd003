//! Training set construction, full-batch gradient descent on the empirical
//! denoising objective, and convergence diagnostics.
//!
//! The noise draws `ξ_ij` are made once per batch and held fixed, so the
//! objective minimized by [`gd_run`] is a deterministic function of the
//! hidden weights.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian_oracle::GaussianData;
use crate::schedules::{TimeGrid, VarianceSchedule, WeightingSpec};
use crate::score_net::{AugmentedInput, ScoreNet};

/// Where the clean samples `x_i` come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// `N(m, σ² I)`.
    Gaussian(GaussianData),
    /// Equal-weight mixture of `N(+offset, σ² I)` and `N(-offset, σ² I)`.
    Mixture { offset: Vec<f64>, sigma: f64 },
    /// Rows read from a CSV file; the first `n` rows form the batch.
    File { path: PathBuf, rows: Vec<Vec<f64>> },
}

impl DataSource {
    pub fn gaussian(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
        }
        Ok(Self::Gaussian(GaussianData::new(mean, sigma * sigma)?))
    }

    pub fn mixture(offset: Vec<f64>, sigma: f64) -> Result<Self> {
        if offset.is_empty() || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mixture offset must be a nonempty finite vector"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("mixture sigma must be positive, got {sigma}")));
        }
        Ok(Self::Mixture { offset, sigma })
    }

    /// Reads comma-separated rows of exactly `d` numbers; `#` starts a comment line.
    pub fn from_csv(path: &Path, d: usize) -> Result<Self> {
        let data_err = |message: String| Error::Data {
            path: path.to_path_buf(),
            message,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_path(path)
            .map_err(|e| data_err(e.to_string()))?;
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| data_err(e.to_string()))?;
            if record.len() != d {
                return Err(data_err(format!("row {} has {} columns, expected {d}", line + 1, record.len())));
            }
            let row = record
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| data_err(format!("row {}: {e}", line + 1)))?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(data_err(format!("row {} has a non-finite entry", line + 1)));
            }
            rows.push(row);
        }
        Ok(Self::File {
            path: path.to_path_buf(),
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.dim(),
            Self::Mixture { offset, .. } => offset.len(),
            Self::File { rows, .. } => rows.first().map_or(0, Vec::len),
        }
    }

    /// The closed-form law, when there is one.
    pub fn as_gaussian(&self) -> Option<&GaussianData> {
        match self {
            Self::Gaussian(g) => Some(g),
            _ => None,
        }
    }
}

/// Fixed training inputs `X_ij = x_i + σ̄_{t_j} ξ_ij` augmented with `σ̄_{t_j}`.
///
/// Column `i·N + j` of `inputs` and `noise` holds pair `(i, j+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    x: Array2<f64>,
    xi: Array2<f64>,
    sigma_bars: Vec<f64>,
    inputs: Array2<f64>,
    seed: u64,
}

impl TrainBatch {
    /// `x` is `n × d`; `xi[i][j]` is the length-`d` noise for pair `(i, j+1)`.
    pub fn from_parts(x: Array2<f64>, xi: Vec<Vec<Vec<f64>>>, sigma_bars: Vec<f64>, seed: u64) -> Result<Self> {
        let (n, d) = x.dim();
        let big_n = sigma_bars.len();
        if xi.len() != n || xi.iter().any(|r| r.len() != big_n || r.iter().any(|v| v.len() != d)) {
            return Err(Error::invalid("noise array must be n x N x d"));
        }
        let mut flat = Array2::zeros((d, n * big_n));
        for (i, row) in xi.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                flat.column_mut(i * big_n + j).assign(&ArrayView1::from(v.as_slice()));
            }
        }
        Self::assemble(x, flat, sigma_bars, seed)
    }

    fn assemble(x: Array2<f64>, xi: Array2<f64>, sigma_bars: Vec<f64>, seed: u64) -> Result<Self> {
        if sigma_bars.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("sigma_bars must be positive and finite"));
        }
        let (n, d) = x.dim();
        let big_n = sigma_bars.len();
        let mut inputs = Array2::zeros((d + 1, n * big_n));
        for i in 0..n {
            for (j, &sb) in sigma_bars.iter().enumerate() {
                let c = i * big_n + j;
                for k in 0..d {
                    inputs[[k, c]] = x[[i, k]] + sb * xi[[k, c]];
                }
                inputs[[d, c]] = sb;
            }
        }
        Ok(Self {
            x,
            xi,
            sigma_bars,
            inputs,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Number of time indices `N`.
    pub fn time_count(&self) -> usize {
        self.sigma_bars.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn sigma_bars(&self) -> &[f64] {
        &self.sigma_bars
    }

    /// `(d+1) × nN` network inputs.
    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    /// `ξ_{i, j+1}` for zero-based `j`.
    pub fn noise(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.xi.column(i * self.time_count() + j)
    }

    pub fn input(&self, i: usize, j: usize) -> AugmentedInput {
        let c = i * self.time_count() + j;
        let d = self.dim();
        AugmentedInput::new(self.inputs.column(c).iter().take(d).copied().collect(), self.sigma_bars[j])
    }

    /// Batch with samples reordered so that new sample `k` is old sample `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let big_n = self.time_count();
        let mut x = Array2::zeros(self.x.dim());
        let mut xi = Array2::zeros(self.xi.dim());
        for (k, &p) in perm.iter().enumerate() {
            x.row_mut(k).assign(&self.x.row(p));
            for j in 0..big_n {
                xi.column_mut(k * big_n + j).assign(&self.xi.column(p * big_n + j));
            }
        }
        Self::assemble(x, xi, self.sigma_bars.clone(), self.seed).expect("permutation keeps a valid batch")
    }
}

/// Draws `n` samples and `n × N` noise vectors; `σ̄` is taken at `t_1 … t_N`.
///
/// Draw order is fixed: all `x_i` first, then `ξ_ij` with `i` outer, `j`
/// middle, coordinate inner.
pub fn make_batch(
    source: &DataSource,
    n: usize,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
    seed: u64,
) -> Result<TrainBatch> {
    if n == 0 {
        return Err(Error::invalid("batch needs n >= 1 samples"));
    }
    let d = source.dim();
    if d == 0 {
        return Err(Error::invalid("data source has dimension 0"));
    }
    let big_n = grid.steps();
    if big_n == 0 {
        return Err(Error::invalid("training grid needs N >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, d));
    match source {
        DataSource::Gaussian(g) => {
            let sd = g.sigma_sq().sqrt();
            for i in 0..n {
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    x[[i, k]] = g.mean()[k] + sd * z;
                }
            }
        }
        DataSource::Mixture { offset, sigma } => {
            for i in 0..n {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    x[[i, k]] = sign * offset[k] + sigma * z;
                }
            }
        }
        DataSource::File { path, rows } => {
            if rows.len() < n {
                return Err(Error::Data {
                    path: path.clone(),
                    message: format!("file has {} rows, batch needs {n}", rows.len()),
                });
            }
            for (i, row) in rows.iter().take(n).enumerate() {
                x.row_mut(i).assign(&ArrayView1::from(row.as_slice()));
            }
        }
    }
    let mut xi = Array2::zeros((d, n * big_n));
    for c in 0..n * big_n {
        for k in 0..d {
            xi[[k, c]] = rng.sample(StandardNormal);
        }
    }
    let sigma_bars = (1..=big_n).map(|j| schedule.sigma_bar(grid.t(j))).collect();
    TrainBatch::assemble(x, xi, sigma_bars, seed)
}

/// Per-evaluation diagnostics of the convergence-rate structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostic {
    pub step: usize,
    /// Pairs `(i, j)` (zero-based `i`, one-based `j`) attaining `max f(θ; i, j)`.
    pub argmax_set: Vec<(usize, usize)>,
    /// One-based `j*`, the argmax-set member with the largest rate factor.
    pub j_star: usize,
    /// `w(t_{j*})(t_{j*} - t_{j*-1}) σ̄_{t_{j*}}`.
    pub rate_factor: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: ScoreNet,
    pub step: usize,
    pub lr: f64,
    /// `(k, L(θ^(k)))` for consecutive `k` starting at 0.
    pub loss_trace: Vec<(usize, f64)>,
    /// `f(θ; i, j)` at the last evaluation, `n × N`.
    pub per_term_loss: Array2<f64>,
    pub diagnostics: Vec<StepDiagnostic>,
}

impl TrainState {
    pub fn new(net: ScoreNet, lr: f64) -> Self {
        Self {
            net,
            step: 0,
            lr,
            loss_trace: Vec::new(),
            per_term_loss: Array2::zeros((0, 0)),
            diagnostics: Vec::new(),
        }
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.loss_trace.last().map(|&(_, l)| l)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_trace.first().map(|&(_, l)| l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxSteps,
    /// Loss exceeded ten times its initial value or became non-finite.
    Diverged,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            Self::Converged => "converged",
            Self::MaxSteps => "max_steps",
            Self::Diverged => "diverged",
        }
    }
}

const DIVERGENCE_FACTOR: f64 = 10.0;

fn diagnose(step: usize, per_term: &Array2<f64>, rate: &[f64]) -> StepDiagnostic {
    let max = per_term.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let argmax_set: Vec<(usize, usize)> = per_term
        .indexed_iter()
        .filter(|(_, &v)| v == max)
        .map(|((i, j), _)| (i, j + 1))
        .collect();
    let (j_star, rate_factor) = argmax_set
        .iter()
        .map(|&(_, j)| (j, rate[j - 1]))
        .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
    StepDiagnostic {
        step,
        argmax_set,
        j_star,
        rate_factor,
    }
}

/// Full-batch gradient descent `θ^(k+1) = θ^(k) - h ∇L(θ^(k))` on `W_1 … W_L`.
///
/// At least one update is taken. Stops after the first update whose loss is
/// `≤ eps_train`, after `max_steps` updates, or on divergence. Resuming with a
/// state that already has a trace continues its step numbering.
pub fn gd_run(
    state: &mut TrainState,
    batch: &TrainBatch,
    weighting: &WeightingSpec,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
    max_steps: usize,
    eps_train: f64,
) -> Result<StopReason> {
    if state.net.depth() == 0 {
        return Err(Error::invalid("training needs at least one hidden layer (L >= 1)"));
    }
    if !(state.lr >= 0.0 && state.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", state.lr)));
    }
    if max_steps == 0 {
        return Err(Error::invalid("max_steps must be >= 1"));
    }
    if !(eps_train > 0.0) {
        return Err(Error::invalid("eps_train must be positive"));
    }
    if grid.steps() != batch.time_count() {
        return Err(Error::DimensionMismatch {
            expected: batch.time_count(),
            actual: grid.steps(),
            context: "grid steps vs batch time indices",
        });
    }
    let rate = weighting.rate_factors(grid, schedule);

    let mut current = state.net.loss_and_grad(batch, weighting)?;
    if state.loss_trace.is_empty() {
        state.loss_trace.push((state.step, current.loss));
        state.diagnostics.push(diagnose(state.step, &current.per_term, &rate));
    }
    state.per_term_loss = current.per_term.clone();
    let initial = state.initial_loss().expect("trace is nonempty");

    for _ in 0..max_steps {
        let h = state.lr;
        for (w, g) in state.net.hidden_mut().iter_mut().zip(&current.grads) {
            w.scaled_add(-h, g);
        }
        state.step += 1;
        current = match state.net.loss_and_grad(batch, weighting) {
            Ok(lg) => lg,
            Err(Error::NumericalFailure { .. }) => return Ok(StopReason::Diverged),
            Err(e) => return Err(e),
        };
        state.loss_trace.push((state.step, current.loss));
        state.diagnostics.push(diagnose(state.step, &current.per_term, &rate));
        state.per_term_loss = current.per_term.clone();
        if !current.loss.is_finite() || current.loss > DIVERGENCE_FACTOR * initial {
            return Ok(StopReason::Diverged);
        }
        if current.loss <= eps_train {
            return Ok(StopReason::Converged);
        }
    }
    Ok(StopReason::MaxSteps)
}

/// Default step size `0.1 · nN / (m · min_j w(t_j)(t_j - t_{j-1}) σ̄_{t_j})`.
pub fn default_lr(
    n: usize,
    width: usize,
    weighting: &WeightingSpec,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
) -> f64 {
    let min_rate = weighting
        .rate_factors(grid, schedule)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    0.1 * (n * weighting.len()) as f64 / (width as f64 * min_rate)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reason: StopReason,
    /// Number of restarts with a halved step size.
    pub halvings: usize,
}

/// Runs [`gd_run`] from `initial`, restarting from the same initial weights with
/// `h / 2` whenever a run diverges, at most `max_halvings` times.
#[allow(clippy::too_many_arguments)]
pub fn train_with_halving(
    initial: &ScoreNet,
    lr: f64,
    batch: &TrainBatch,
    weighting: &WeightingSpec,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
    max_steps: usize,
    eps_train: f64,
    max_halvings: usize,
) -> Result<TrainOutcome> {
    let mut h = lr;
    let mut halvings = 0;
    loop {
        let mut state = TrainState::new(initial.clone(), h);
        let reason = gd_run(&mut state, batch, weighting, grid, schedule, max_steps, eps_train)?;
        if reason != StopReason::Diverged || halvings == max_halvings {
            return Ok(TrainOutcome {
                state,
                reason,
                halvings,
            });
        }
        h *= 0.5;
        halvings += 1;
    }
}

/// Consecutive loss ratios paired with the `j*(k)` diagnostics of step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayTrace {
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
    /// `L(θ^(k+1)) / L(θ^(k))`.
    pub ratios: Vec<f64>,
    pub j_star: Vec<usize>,
    pub rate_factor: Vec<f64>,
}

pub fn decay_ratio_trace(state: &TrainState) -> Result<DecayTrace> {
    if state.loss_trace.len() < 2 {
        return Err(Error::invalid("decay ratios need at least two recorded losses"));
    }
    let k = state.loss_trace.len() - 1;
    let mut out = DecayTrace {
        steps: Vec::with_capacity(k),
        losses: Vec::with_capacity(k),
        ratios: Vec::with_capacity(k),
        j_star: Vec::with_capacity(k),
        rate_factor: Vec::with_capacity(k),
    };
    for (idx, w) in state.loss_trace.windows(2).enumerate() {
        let ratio = if w[0].1 == w[1].1 { 1.0 } else { w[1].1 / w[0].1 };
        out.steps.push(w[0].0);
        out.losses.push(w[0].1);
        out.ratios.push(ratio);
        match state.diagnostics.get(idx) {
            Some(diag) => {
                out.j_star.push(diag.j_star);
                out.rate_factor.push(diag.rate_factor);
            }
            None => {
                out.j_star.push(0);
                out.rate_factor.push(f64::NAN);
            }
        }
    }
    Ok(out)
}

/// Geometric mean of the decay ratios.
pub fn geometric_mean_ratio(trace: &DecayTrace) -> f64 {
    let s: f64 = trace.ratios.iter().map(|r| r.ln()).sum();
    (s / trace.ratios.len() as f64).exp()
}

/// Residual norm `‖σ̄ S(θ; [x + σ̄ξ; σ̄]) + ξ‖` over `sigma_grid`.
pub fn bell_shape_probe(net: &ScoreNet, x: &[f64], xi: &[f64], sigma_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if x.len() != xi.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: xi.len(),
            context: "probe noise length",
        });
    }
    if sigma_grid.iter().any(|s| !(*s > 0.0)) || sigma_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("probe sigma grid must be positive and ascending"));
    }
    let xi_v = ArrayView1::from(xi);
    sigma_grid
        .iter()
        .map(|&sb| {
            let input: Vec<f64> = x.iter().zip(xi).map(|(a, e)| a + sb * e).collect();
            let s = net.forward(&AugmentedInput::new(input, sb))?;
            let r: Array1<f64> = s * sb + xi_v;
            Ok((sb, r.dot(&r).sqrt()))
        })
        .collect()
}

/// Total weighting that makes the sample-averaged per-term loss equal across
/// `j` at the given network, normalized to `Σ_j β_j = N`.
pub fn equalizing_weighting(
    net: &ScoreNet,
    batch: &TrainBatch,
    grid: &TimeGrid,
    schedule: &VarianceSchedule,
) -> Result<WeightingSpec> {
    let unit = WeightingSpec::uniform(grid, schedule)?;
    let lg = net.loss_and_grad(batch, &unit)?;
    let means = lg.per_term.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    if means.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::invalid("equalizing weighting needs a positive residual at every time"));
    }
    let inv: Vec<f64> = means.iter().map(|m| 1.0 / m).collect();
    let norm = inv.len() as f64 / inv.iter().sum::<f64>();
    WeightingSpec::from_total(inv.into_iter().map(|b| b * norm).collect(), grid, schedule)
}
