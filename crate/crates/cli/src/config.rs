//! Experiment configuration: a TOML file with fixed blocks. Unknown keys are
//! rejected, and every present block is validated before anything runs.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};
use vesde::schedules::{EdmWeighting, GridKind, TimeGrid, VarianceKind, VarianceSchedule, WeightingSpec};
use vesde::training::DataSource;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for parallel sections; 0 lets rayon decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub schedule: ScheduleBlock,
    pub data: DataBlock,
    pub net: Option<NetBlock>,
    pub train: Option<TrainBlock>,
    pub sample: Option<SampleBlock>,
    pub oracle: Option<OracleBlock>,
    pub compare: Option<CompareBlock>,
    pub probe: Option<ProbeBlock>,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceName {
    Edm,
    Song,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridName {
    Poly,
    Exp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub variance: VarianceName,
    pub grid: GridName,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub steps: usize,
    /// Allows the off-diagonal (variance, grid) pairings.
    #[serde(default)]
    pub experimental: bool,
}

fn default_rho() -> f64 {
    7.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceName {
    Gaussian,
    Mixture,
    File,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataBlock {
    pub source: SourceName,
    pub d: usize,
    pub n: usize,
    /// Gaussian mean, or the mixture offset. Defaults to zeros (Gaussian only).
    pub mean: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub sigma: f64,
    pub path: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetBlock {
    pub m: usize,
    #[serde(rename = "L")]
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingName {
    Edm,
    Uniform,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    /// Overrides the default step size.
    pub lr: Option<f64>,
    pub max_steps: usize,
    /// Stop once the loss is at or below this; `inf` stops after one update.
    pub eps_train: f64,
    #[serde(default = "default_weighting")]
    pub weighting: WeightingName,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
}

fn default_weighting() -> WeightingName {
    WeightingName::Edm
}

fn default_halvings() -> usize {
    64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Oracle,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Csv,
    Binary,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBlock {
    pub trajectories: usize,
    pub score: ScoreSource,
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: SampleFormat,
}

fn default_format() -> SampleFormat {
    SampleFormat::Csv
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBlock {
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    pub steps: Vec<usize>,
    /// `ρ` values for the polynomial-complexity sweep.
    #[serde(default)]
    pub rho_sweep: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBlock {
    /// Ascending `σ̄` values; defaults to 25 log-spaced points over `[1e-4, sigma_max]`.
    pub sigma_grid: Option<Vec<f64>>,
    /// Probe a saved network instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
}

/// A parsed config with the SHA-256 of its source text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
    /// Directory relative paths in the config are resolved against.
    pub base_dir: PathBuf,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base_dir)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        config.validate()?;
        Ok(Self {
            config,
            hash: hex::encode(Sha256::digest(text.as_bytes())),
            base_dir,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

impl ExperimentConfig {
    /// Checks every present block. Cross-block requirements of individual
    /// subcommands are checked by [`ExperimentConfig::require`].
    pub fn validate(&self) -> Result<(), CliError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name must be nonempty"));
        }
        let s = &self.schedule;
        self.variance_schedule()?;
        if !(s.rho >= 1.0 && s.rho.is_finite()) {
            return Err(invalid(format!("schedule.rho must be >= 1, got {}", s.rho)));
        }
        if s.steps == 0 {
            return Err(invalid("schedule.steps must be >= 1"));
        }
        self.grid_for(s.steps)?;

        let d = &self.data;
        if d.d == 0 {
            return Err(invalid("data.d must be >= 1"));
        }
        if d.n == 0 {
            return Err(invalid("data.n must be >= 1"));
        }
        if !(d.sigma > 0.0 && d.sigma.is_finite()) {
            return Err(invalid(format!("data.sigma must be positive, got {}", d.sigma)));
        }
        if let Some(m) = &d.mean {
            if m.len() != d.d {
                return Err(invalid(format!("data.mean has {} entries, data.d = {}", m.len(), d.d)));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(invalid("data.mean entries must be finite"));
            }
        }
        match d.source {
            SourceName::File if d.path.is_none() => return Err(invalid("data.source = \"file\" needs data.path")),
            SourceName::Mixture if d.mean.is_none() => {
                return Err(invalid("data.source = \"mixture\" needs data.mean (the component offset)"))
            }
            SourceName::Gaussian | SourceName::Mixture if d.path.is_some() => {
                return Err(invalid("data.path is only used with data.source = \"file\""))
            }
            _ => {}
        }

        if let Some(net) = &self.net {
            if net.m == 0 {
                return Err(invalid("net.m must be >= 1"));
            }
        }
        if let Some(t) = &self.train {
            if let Some(lr) = t.lr {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return Err(invalid(format!("train.lr must be finite and >= 0, got {lr}")));
                }
            }
            if t.max_steps == 0 {
                return Err(invalid("train.max_steps must be >= 1"));
            }
            if !(t.eps_train > 0.0) {
                return Err(invalid(format!("train.eps_train must be positive, got {}", t.eps_train)));
            }
        }
        if let Some(sm) = &self.sample {
            match (sm.score, &sm.checkpoint) {
                (ScoreSource::Checkpoint, None) => {
                    return Err(invalid("sample.score = \"checkpoint\" needs sample.checkpoint"))
                }
                (ScoreSource::Oracle, Some(_)) => {
                    return Err(invalid("sample.checkpoint is only used with sample.score = \"checkpoint\""))
                }
                (ScoreSource::Oracle, None) if self.data.source != SourceName::Gaussian => {
                    return Err(invalid("sample.score = \"oracle\" needs Gaussian data"))
                }
                _ => {}
            }
        }
        if let Some(o) = &self.oracle {
            if o.steps.contains(&0) {
                return Err(invalid("oracle.steps entries must be >= 1"));
            }
        }
        if let Some(c) = &self.compare {
            if c.steps.contains(&0) {
                return Err(invalid("compare.steps entries must be >= 1"));
            }
            if c.rho_sweep.iter().any(|r| !(*r >= 1.0 && r.is_finite())) {
                return Err(invalid("compare.rho_sweep entries must be >= 1"));
            }
        }
        if let Some(p) = &self.probe {
            if let Some(g) = &p.sigma_grid {
                if g.is_empty() || g.iter().any(|s| !(*s > 0.0 && s.is_finite())) || g.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(invalid("probe.sigma_grid must be nonempty, positive and strictly ascending"));
                }
            }
        }
        Ok(())
    }

    pub fn variance_schedule(&self) -> Result<VarianceSchedule, CliError> {
        let kind = match self.schedule.variance {
            VarianceName::Edm => VarianceKind::Edm,
            VarianceName::Song => VarianceKind::Song,
        };
        VarianceSchedule::new(kind, self.schedule.sigma_min, self.schedule.sigma_max)
            .map_err(|e| invalid(format!("schedule: {e}")))
    }

    pub fn grid_kind(&self) -> GridKind {
        match self.schedule.grid {
            GridName::Poly => GridKind::Polynomial { rho: self.schedule.rho },
            GridName::Exp => GridKind::Exponential,
        }
    }

    /// The configured grid with `n` steps, honoring the experimental flag.
    pub fn grid_for(&self, n: usize) -> Result<TimeGrid, CliError> {
        let sched = self.variance_schedule()?;
        let built = if self.schedule.experimental {
            TimeGrid::build_experimental(&sched, self.grid_kind(), n)
        } else {
            TimeGrid::build(&sched, self.grid_kind(), n)
        };
        built.map_err(|e| invalid(format!("schedule: {e}")))
    }

    pub fn data_source(&self, loaded: &LoadedConfig) -> Result<DataSource, CliError> {
        let d = &self.data;
        let source = match d.source {
            SourceName::Gaussian => DataSource::gaussian(d.mean.clone().unwrap_or_else(|| vec![0.0; d.d]), d.sigma)?,
            SourceName::Mixture => DataSource::mixture(d.mean.clone().unwrap_or_default(), d.sigma)?,
            SourceName::File => {
                let path = loaded.resolve(d.path.as_deref().expect("validated"));
                DataSource::from_csv(&path, d.d)?
            }
        };
        Ok(source)
    }

    pub fn weighting(&self, grid: &TimeGrid, schedule: &VarianceSchedule) -> Result<WeightingSpec, CliError> {
        let kind = self.train.as_ref().map_or(WeightingName::Edm, |t| t.weighting);
        let w = match kind {
            WeightingName::Edm => WeightingSpec::edm(grid, schedule, &EdmWeighting::default(), 1.0)?,
            WeightingName::Uniform => WeightingSpec::uniform(grid, schedule)?,
        };
        Ok(w)
    }

    pub fn require<'a, T>(&self, block: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        block
            .as_ref()
            .ok_or_else(|| invalid(format!("this subcommand needs a [{name}] block")))
    }
}
