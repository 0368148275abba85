//! Configuration files of the command-line harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sasmc::experiments::{Experiment1Settings, Experiment3Settings, PriorSettings, Setup};
use sasmc::forward::{build_default_geometry, Geometry};
use sasmc::kernels::KernelSettings;
use sasmc::smc::SmcSettings;

use crate::CliError;

/// Version stamped into every file the harness writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Where the head geometry comes from: `{"seed": n}` builds the default
/// geometry, `{"file": "path"}` loads a geometry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySource {
    Seed(u64),
    File(PathBuf),
}

impl Default for GeometrySource {
    fn default() -> Self {
        GeometrySource::Seed(0)
    }
}

impl GeometrySource {
    pub fn resolve_paths(&mut self, base: &Path) {
        if let GeometrySource::File(p) = self {
            *p = resolve(base, p);
        }
    }

    pub fn load(&self) -> Result<Geometry, CliError> {
        match self {
            GeometrySource::Seed(seed) => Ok(build_default_geometry(*seed)),
            GeometrySource::File(path) => {
                require_file(path, "geometry")?;
                Ok(Geometry::load(path)?)
            }
        }
    }

    pub fn setup(&self) -> Result<Setup, CliError> {
        Ok(Setup::new(self.load()?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub sigma_q: f64,
    /// Noise std; when absent the dataset's recorded noise level is used.
    pub sigma_e: Option<f64>,
    pub poisson_lambda: f64,
    pub d_max: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let prior = PriorSettings::default();
        Self {
            sigma_q: prior.sigma_q,
            sigma_e: None,
            poisson_lambda: prior.poisson_lambda,
            d_max: prior.d_max,
        }
    }
}

impl ModelSection {
    pub fn prior(&self) -> PriorSettings {
        PriorSettings {
            sigma_q: self.sigma_q,
            poisson_lambda: self.poisson_lambda,
            d_max: self.d_max,
        }
    }
}

/// Input of `sasmc run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    #[serde(default)]
    pub geometry: GeometrySource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub smc: SmcSettings,
    #[serde(default)]
    pub kernels: KernelSettings,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
}

/// Settings of the variance study as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Exp2Section {
    pub runs: usize,
    pub particle_count: usize,
    pub moment_step_fraction: f64,
    pub scenario_seed: u64,
}

impl Default for Exp2Section {
    fn default() -> Self {
        Self {
            runs: 50,
            particle_count: 100,
            moment_step_fraction: 0.1,
            scenario_seed: 7,
        }
    }
}

/// Input of the experiment verbs. Every field is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub geometry: GeometrySource,
    pub prior: PriorSettings,
    pub smc: SmcSettings,
    pub kernels: KernelSettings,
    pub exp1: Experiment1Settings,
    pub exp2: Exp2Section,
    pub exp3: Experiment3Settings,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!(
            "{what} file {} does not exist",
            path.display()
        )))
    }
}

/// Reads a JSON config. Relative paths inside it are later resolved against
/// the returned directory.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, PathBuf), CliError> {
    require_file(path, "config")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((value, base))
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("configs serialize");
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
