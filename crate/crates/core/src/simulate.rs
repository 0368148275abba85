//! Synthetic datasets: random dipole placements, smooth time courses and
//! white sensor noise.

use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{LeadField, SourceGrid};
use crate::model::{DipoleConfig, TimeSeriesData};
use crate::rng::{stream, Purpose};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Placement attempts before giving up on the separation constraint.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

/// Noise level used when a scenario does not set one, relative to the peak
/// absolute value of the clean data.
pub const DEFAULT_RELATIVE_NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n_dipoles: usize,
    #[serde(default)]
    pub correlated: bool,
    #[serde(default = "default_n_time")]
    pub n_time: usize,
    /// Absolute noise std in field units. Defaults to 5% of the clean peak.
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default = "default_min_separation")]
    pub min_separation: f64,
    pub seed: u64,
    /// Peak strength per dipole, moment units. Defaults to 1 for all.
    #[serde(default)]
    pub peak_strength: Option<Vec<f64>>,
    /// Fixed grid indices instead of random placement.
    #[serde(default)]
    pub locations: Option<Vec<usize>>,
    /// Fixed orientations instead of uniform draws; normalized on use.
    #[serde(default)]
    pub orientations: Option<Vec<[f64; 3]>>,
}

fn default_n_time() -> usize {
    30
}

fn default_min_separation() -> f64 {
    0.01
}

impl ScenarioSpec {
    pub fn new(n_dipoles: usize, correlated: bool, seed: u64) -> Self {
        Self {
            n_dipoles,
            correlated,
            n_time: default_n_time(),
            noise_std: None,
            min_separation: default_min_separation(),
            seed,
            peak_strength: None,
            locations: None,
            orientations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_dipoles;
        if n == 0 {
            return Err(Error::Config("n_dipoles must be positive".into()));
        }
        if self.n_time == 0 {
            return Err(Error::Config("n_time must be positive".into()));
        }
        if let Some(s) = self.noise_std {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "noise_std must be nonnegative, got {s}"
                )));
            }
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::Config("min_separation must be nonnegative".into()));
        }
        let check_len = |name: &str, len: usize| {
            if len != n {
                Err(Error::Config(format!(
                    "{name} has {len} entries for {n} dipoles"
                )))
            } else {
                Ok(())
            }
        };
        if let Some(p) = &self.peak_strength {
            check_len("peak_strength", p.len())?;
            if p.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("peak strengths must be positive".into()));
            }
        }
        if let Some(l) = &self.locations {
            check_len("locations", l.len())?;
        }
        if let Some(o) = &self.orientations {
            check_len("orientations", o.len())?;
            if o.iter().any(|v| Vector3::from(*v).norm() == 0.0) {
                return Err(Error::Config("orientations must be nonzero".into()));
            }
        }
        Ok(())
    }

    fn strengths(&self) -> Vec<f64> {
        self.peak_strength
            .clone()
            .unwrap_or_else(|| vec![1.0; self.n_dipoles])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueDipole {
    pub index: usize,
    pub orientation: [f64; 3],
    pub peak_strength: f64,
    /// Moment norm per time point.
    pub strength: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: DipoleConfig,
    /// In generation order, which also fixes the temporal order of the
    /// uncorrelated bumps.
    pub dipoles: Vec<TrueDipole>,
    /// Per time point, `3 d` moment components in `config` order.
    pub moments: Vec<Vec<f64>>,
    pub clean: TimeSeriesData,
    pub noisy: TimeSeriesData,
    pub noise_std: f64,
}

impl GroundTruth {
    /// Strength curves in `config` order.
    pub fn strengths_in_config_order(&self) -> Vec<Vec<f64>> {
        self.config
            .indices()
            .iter()
            .map(|c| {
                self.dipoles
                    .iter()
                    .find(|d| d.index == *c)
                    .expect("dipole in config")
                    .strength
                    .clone()
            })
            .collect()
    }
}

/// Unit-peak time courses. Correlated scenarios share one `sin^2` bump over
/// the whole window; otherwise dipole `k` gets a bump on its own segment of
/// width `n_time / n`, so supports are disjoint.
pub fn time_courses(n_dipoles: usize, n_time: usize, correlated: bool) -> Vec<Vec<f64>> {
    let bump = |t: usize, start: f64, width: f64| {
        let x = (t as f64 + 0.5 - start) / width;
        if x > 0.0 && x < 1.0 {
            (std::f64::consts::PI * x).sin().powi(2)
        } else {
            0.0
        }
    };
    let normalize = |v: Vec<f64>| {
        let max = v.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            v.into_iter().map(|x| x / max).collect()
        } else {
            v
        }
    };
    let width = n_time as f64 / n_dipoles as f64;
    (0..n_dipoles)
        .map(|k| {
            let course = if correlated {
                (0..n_time).map(|t| bump(t, 0.0, n_time as f64)).collect()
            } else {
                (0..n_time)
                    .map(|t| bump(t, k as f64 * width, width))
                    .collect()
            };
            normalize(course)
        })
        .collect()
}

fn place<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    grid: &SourceGrid,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let reach = spec.min_separation * (1.0 - 1e-9);
    let separated = |v: &[usize]| {
        v.iter().enumerate().all(|(i, &a)| {
            v[i + 1..]
                .iter()
                .all(|&b| a != b && grid.distance(a, b) >= reach)
        })
    };
    if let Some(fixed) = &spec.locations {
        if let Some(bad) = fixed.iter().find(|&&c| c >= grid.len()) {
            return Err(Error::Config(format!(
                "location {bad} outside grid of {}",
                grid.len()
            )));
        }
        if !separated(fixed) {
            return Err(Error::Config(
                "fixed locations violate the minimum separation".into(),
            ));
        }
        return Ok(fixed.clone());
    }
    if spec.n_dipoles > grid.len() {
        return Err(Error::InvalidInput("more dipoles than grid points".into()));
    }
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let picks = rand::seq::index::sample(rng, grid.len(), spec.n_dipoles).into_vec();
        if separated(&picks) {
            return Ok(picks);
        }
    }
    Err(Error::InvalidInput(format!(
        "no placement of {} dipoles {} m apart found in {MAX_PLACEMENT_ATTEMPTS} attempts",
        spec.n_dipoles, spec.min_separation
    )))
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        let n: f64 = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Draws a dataset from `spec`. Deterministic per `spec.seed`.
pub fn generate(
    spec: &ScenarioSpec,
    grid: &SourceGrid,
    lead_field: &LeadField,
) -> Result<GroundTruth> {
    spec.validate()?;
    if lead_field.grid_size() != grid.len() {
        return Err(Error::Config("lead field and grid sizes differ".into()));
    }
    let mut rng = stream(spec.seed, 0, 0, Purpose::Simulate);
    let locations = place(spec, grid, &mut rng)?;
    let orientations: Vec<Vector3<f64>> = match &spec.orientations {
        Some(o) => o.iter().map(|v| Vector3::from(*v).normalize()).collect(),
        None => (0..spec.n_dipoles).map(|_| unit_vector(&mut rng)).collect(),
    };
    let peaks = spec.strengths();
    let courses = time_courses(spec.n_dipoles, spec.n_time, spec.correlated);

    let dipoles: Vec<TrueDipole> = (0..spec.n_dipoles)
        .map(|k| TrueDipole {
            index: locations[k],
            orientation: orientations[k].into(),
            peak_strength: peaks[k],
            strength: courses[k].iter().map(|s| s * peaks[k]).collect(),
        })
        .collect();

    let config = DipoleConfig::new(locations.clone())?;
    let n_s = lead_field.sensor_count();
    let mut clean = DMatrix::zeros(n_s, spec.n_time);
    let mut moments = vec![vec![0.0; 3 * spec.n_dipoles]; spec.n_time];
    for dipole in &dipoles {
        let slot = config
            .indices()
            .iter()
            .position(|&c| c == dipole.index)
            .expect("placed index");
        let field = lead_field.block(dipole.index) * Vector3::from(dipole.orientation);
        for (t, (&s, moment)) in dipole.strength.iter().zip(moments.iter_mut()).enumerate() {
            for j in 0..3 {
                moment[3 * slot + j] = s * dipole.orientation[j];
            }
            clean.column_mut(t).axpy(s, &field, 1.0);
        }
    }

    let noise_std = spec.noise_std.unwrap_or_else(|| {
        DEFAULT_RELATIVE_NOISE * clean.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    });
    let mut noisy = clean.clone();
    if noise_std > 0.0 {
        let mut noise_rng = stream(spec.seed, 1, 0, Purpose::Simulate);
        for v in noisy.iter_mut() {
            let z: f64 = noise_rng.sample(StandardNormal);
            *v += noise_std * z;
        }
    }
    Ok(GroundTruth {
        config,
        dipoles,
        moments,
        clean: TimeSeriesData::new(clean)?,
        noisy: TimeSeriesData::new(noisy)?,
        noise_std,
    })
}

/// Centered slices of `data`. A window of length `L` starts
/// `floor((L - 1) / 2)` samples before `center`.
pub fn window(
    data: &TimeSeriesData,
    center: usize,
    lengths: &[usize],
) -> Result<Vec<TimeSeriesData>> {
    lengths
        .iter()
        .map(|&len| {
            let before = len.saturating_sub(1) / 2;
            if len == 0 || center < before || center - before + len > data.n_time() {
                return Err(Error::InvalidInput(format!(
                    "window of length {len} around sample {center} does not fit in {} samples",
                    data.n_time()
                )));
            }
            data.slice(center - before, len)
        })
        .collect()
}

/// Stored ground truth of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub config: DipoleConfig,
    pub dipoles: Vec<TrueDipole>,
    pub moments: Vec<Vec<f64>>,
    /// Noise-free data, row-major `n_sensors x n_time`.
    pub clean: Vec<f64>,
}

/// JSON layout of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub n_sensors: usize,
    pub n_time: usize,
    /// Row-major `n_sensors x n_time`.
    pub data: Vec<f64>,
    #[serde(default)]
    pub noise_std: Option<f64>,
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub truth: Option<TruthRecord>,
}

impl DatasetFile {
    pub fn from_truth(spec: &ScenarioSpec, truth: &GroundTruth) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            n_sensors: truth.noisy.n_sensors(),
            n_time: truth.noisy.n_time(),
            data: truth.noisy.to_row_major(),
            noise_std: Some(truth.noise_std),
            scenario: Some(spec.clone()),
            truth: Some(TruthRecord {
                config: truth.config.clone(),
                dipoles: truth.dipoles.clone(),
                moments: truth.moments.clone(),
                clean: truth.clean.to_row_major(),
            }),
        }
    }

    pub fn data(&self) -> Result<TimeSeriesData> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported dataset schema version {}",
                self.schema_version
            )));
        }
        TimeSeriesData::from_row_major(self.n_sensors, self.n_time, &self.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
