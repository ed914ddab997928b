//! Run configuration: one JSON document, with command-line flags taking
//! precedence over the fields they name.

use std::path::{Path, PathBuf};

use detmlp::estimate::FitConfig;
use detmlp::mlp::WeightVector;
use detmlp::simulate::{GeneratorSpec, InputLaw, NoiseFamily, StatisticKind};
use detmlp::{Architecture, Dataset, ParameterMask, SymMatrix};
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_reps() -> usize {
    100
}

fn default_statistics() -> Vec<StatisticKind> {
    vec![StatisticKind::LogDet, StatisticKind::SumSquares]
}

/// Data-generating process, with the architecture taken from the run config.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub true_weights: Vec<f64>,
    /// Noise covariance as a list of rows.
    pub noise_cov: Vec<Vec<f64>>,
    #[serde(default = "gaussian")]
    pub noise_family: NoiseFamily,
    #[serde(default = "standard_gaussian")]
    pub input_law: InputLaw,
    pub n: usize,
}

fn gaussian() -> NoiseFamily {
    NoiseFamily::Gaussian
}

fn standard_gaussian() -> InputLaw {
    InputLaw::StandardGaussian
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; when present it must agree with the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    pub architecture: Architecture,
    /// CSV file, resolved against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Free coordinates of the restricted model (`true` = free).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seeds both data generation and the random restarts.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<StatisticKind>,
}

/// Flag values that override config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub reps: Option<usize>,
}

pub enum DataSource {
    File(Dataset),
    Generated(GeneratorSpec),
}

/// Config after parsing, overriding and checking; nothing here has touched
/// the output directory yet.
pub struct Resolved {
    pub config: RunConfig,
    pub data: DataSource,
    pub restricted: Option<ParameterMask>,
}

impl Resolved {
    pub fn dataset(&self) -> detmlp::Result<Dataset> {
        match &self.data {
            DataSource::File(d) => Ok(d.clone()),
            DataSource::Generated(spec) => detmlp::simulate::generate(spec),
        }
    }

    pub fn generator(&self) -> Option<&GeneratorSpec> {
        match &self.data {
            DataSource::Generated(spec) => Some(spec),
            DataSource::File(_) => None,
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.config.seed,
            ..self.config.fit.clone()
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn load(path: &Path, command: &str, overrides: &Overrides) -> Result<Resolved, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
    let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| {
        invalid(format!(
            "{}: line {}, column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })?;

    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if let Some(reps) = overrides.reps {
        config.reps = reps;
    }
    match &config.command {
        Some(c) if c != command => {
            return Err(invalid(format!(
                "field `command`: config is for `{c}` but `{command}` was requested"
            )));
        }
        _ => config.command = Some(command.to_string()),
    }

    let arch = config.architecture;
    arch.validate()
        .map_err(|e| invalid(format!("field `architecture`: {e}")))?;
    FitConfig {
        seed: config.seed,
        ..config.fit.clone()
    }
    .validate()
    .map_err(|e| invalid(format!("field `fit`: {e}")))?;

    let data = match (&config.dataset_path, &config.generator) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(invalid("exactly one of `dataset_path` and `generator` must be given"));
        }
        (Some(rel), None) => {
            let base = path.parent().unwrap_or(Path::new("."));
            let full = base.join(rel);
            config.dataset_path = Some(full.clone());
            let data =
                Dataset::load(&full).map_err(|e| invalid(format!("field `dataset_path` ({}): {e}", full.display())))?;
            data.check_architecture(&arch)
                .map_err(|e| invalid(format!("field `dataset_path`: {e}")))?;
            DataSource::File(data)
        }
        (None, Some(g)) => DataSource::Generated(generator_spec(g, arch, config.seed)?),
    };

    let restricted = match &config.mask {
        None => None,
        Some(free) => Some(ParameterMask::new(arch, free.clone()).map_err(|e| invalid(format!("field `mask`: {e}")))?),
    };

    match command {
        "test" | "simulate" => {
            let mask = restricted
                .as_ref()
                .ok_or_else(|| invalid(format!("`{command}` needs field `mask`")))?;
            if mask.pinned_count() == 0 {
                return Err(invalid(
                    "field `mask`: the restricted model must pin at least one coordinate",
                ));
            }
        }
        _ => {}
    }
    if command == "simulate" {
        if !matches!(data, DataSource::Generated(_)) {
            return Err(invalid("`simulate` needs field `generator`"));
        }
        if config.reps == 0 {
            return Err(invalid("field `reps` must be positive"));
        }
        if config.statistics.is_empty() {
            return Err(invalid("field `statistics` must name at least one statistic"));
        }
    }
    Ok(Resolved {
        config,
        data,
        restricted,
    })
}

fn generator_spec(g: &GeneratorConfig, arch: Architecture, seed: u64) -> Result<GeneratorSpec, CliError> {
    let true_weights = WeightVector::new(arch, g.true_weights.clone())
        .map_err(|e| invalid(format!("field `generator.true_weights`: {e}")))?;
    let d = g.noise_cov.len();
    if g.noise_cov.iter().any(|row| row.len() != d) {
        return Err(invalid("field `generator.noise_cov`: rows must form a square matrix"));
    }
    let entries: Vec<f64> = g.noise_cov.iter().flatten().copied().collect();
    let noise_cov =
        SymMatrix::from_row_major(d, entries).map_err(|e| invalid(format!("field `generator.noise_cov`: {e}")))?;
    let spec = GeneratorSpec {
        true_weights,
        noise_cov,
        noise_family: g.noise_family,
        input_law: g.input_law,
        n: g.n,
        seed,
    };
    spec.validate()
        .map_err(|e| invalid(format!("field `generator`: {e}")))?;
    detmlp::linalg::cholesky(&spec.noise_cov)
        .map_err(|_| invalid("field `generator.noise_cov`: matrix is not positive definite"))?;
    if g.n < arch.output_dim + 1 {
        return Err(invalid(format!(
            "field `generator.n`: need at least {} samples",
            arch.output_dim + 1
        )));
    }
    Ok(spec)
}
