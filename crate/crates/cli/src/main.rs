//! `sasmc`: simulate MEG datasets, run the semi-analytic sampler on them and
//! reproduce the three simulation studies.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sasmc::estimate::{discrepancy, Discrepancy, PosteriorSummary};
use sasmc::experiments::{
    analyze, experiment1, experiment2, experiment2_scenario, experiment3, write_rows_csv,
    AnalysisSettings, Experiment2Settings, PriorSettings,
};
use sasmc::forward::build_default_geometry;
use sasmc::full_smc::{FullKernelSettings, STD_THRESHOLD};
use sasmc::kernels::KernelSettings;
use sasmc::model::DipoleConfig;
use sasmc::simulate::{DatasetFile, ScenarioSpec, TruthRecord, DATASET_SCHEMA_VERSION};
use sasmc::smc::SmcSettings;

use config::{
    config_hash, file_hash, read_json, require_file, resolve, GeometrySource, ModelSection,
    RunConfig, StudyConfig, SCHEMA_VERSION,
};

/// Fraction of above-threshold grid points on which the semi-analytic
/// sampler must have the smaller spread.
const VARIANCE_TARGET: f64 = 0.8;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<sasmc::Error> for CliError {
    fn from(e: sasmc::Error) -> Self {
        if e.is_configuration() {
            Self::config(e.to_string())
        } else {
            Self::runtime(e.to_string())
        }
    }
}

#[derive(Parser)]
#[command(
    name = "sasmc",
    version,
    about = "Semi-analytic SMC for multi-dipole MEG source estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of particles.
    #[arg(long)]
    particles: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default geometry to a file.
    Geometry {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dataset from a scenario file.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Geometry file; the default geometry is used otherwise.
        #[arg(long)]
        geometry: Option<PathBuf>,
    },
    /// Analyze one dataset.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Localization accuracy over the six dipole groups.
    Exp1 {
        #[command(flatten)]
        common: Common,
        /// Datasets per group.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Spread of the intensity over repeated runs of both samplers.
    Exp2 {
        #[command(flatten)]
        common: Common,
        /// Repetitions of each sampler.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run time against window length.
    Exp3 {
        #[command(flatten)]
        common: Common,
        /// Window lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Geometry { seed, out } => cmd_geometry(seed, out),
        Command::Simulate { common, geometry } => cmd_simulate(&common, geometry),
        Command::Run { common } => cmd_run(&common),
        Command::Exp1 { common, replicates } => cmd_exp1(&common, replicates),
        Command::Exp2 { common, runs } => cmd_exp2(&common, runs),
        Command::Exp3 { common, lengths } => cmd_exp3(&common, lengths),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn output_dir(flag: &Option<PathBuf>, from_config: &Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = flag
        .clone()
        .or_else(|| from_config.clone())
        .unwrap_or_else(|| PathBuf::from("sasmc-out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(())
}

fn header(command: &str, hash: &str) -> Vec<String> {
    vec![
        format!("schema_version={SCHEMA_VERSION}"),
        format!("command={command}"),
        format!("config_hash={hash}"),
    ]
}

fn written<T>(path: &Path, result: sasmc::Result<T>) -> Result<T, CliError> {
    let value =
        result.map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(value)
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    schema_version: u32,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn cmd_geometry(seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    let dir = output_dir(&out, &None)?;
    let path = dir.join("geometry.json");
    written(&path, build_default_geometry(seed).save(&path))
}

fn cmd_simulate(common: &Common, geometry: Option<PathBuf>) -> Result<(), CliError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("simulate needs --config SCENARIO"))?;
    let (mut spec, _): (ScenarioSpec, _) = read_json(path)?;
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let source = match geometry {
        Some(p) => GeometrySource::File(p),
        None => GeometrySource::default(),
    };
    let setup = source.setup()?;
    let truth = setup.generate(&spec)?;
    let dir = output_dir(&common.out, &None)?;

    let dataset = DatasetFile::from_truth(&spec, &truth);
    write_json(&dir.join("dataset.json"), &dataset)?;
    let record = dataset
        .truth
        .clone()
        .expect("simulated datasets carry their truth");
    let hash = config_hash(&(&spec, &source));
    write_json(
        &dir.join("truth.json"),
        &Stamped::<&TruthRecord> {
            schema_version: SCHEMA_VERSION,
            config_hash: &hash,
            body: &record,
        },
    )
}

/// The parts of a run configuration that determine its results.
#[derive(Serialize)]
struct EffectiveRun<'a> {
    dataset_sha256: &'a str,
    geometry: &'a GeometrySource,
    model: ModelSection,
    smc: SmcSettings,
    kernels: KernelSettings,
}

#[derive(Serialize)]
struct SummaryBody<'a> {
    dataset: &'a Path,
    summary: &'a PosteriorSummary,
}

#[derive(Serialize)]
struct DiscrepancyBody<'a> {
    delta_d: i64,
    /// Meters; absent when either configuration is empty.
    delta_c: Option<f64>,
    truth: &'a DipoleConfig,
    estimate: &'a DipoleConfig,
}

fn cmd_run(common: &Common) -> Result<(), CliError> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("run needs --config FILE"))?;
    let (mut cfg, base): (RunConfig, _) = read_json(path)?;
    cfg.dataset = resolve(&base, &cfg.dataset);
    cfg.geometry.resolve_paths(&base);
    if let Some(out) = &cfg.out {
        cfg.out = Some(resolve(&base, out));
    }
    if let Some(seed) = common.seed.or(cfg.seed) {
        cfg.smc.master_seed = seed;
    }
    cfg.smc.workers = common.workers.or(cfg.workers).or(cfg.smc.workers);
    if let Some(particles) = common.particles {
        cfg.smc.particle_count = particles;
    }

    require_file(&cfg.dataset, "dataset")?;
    let dataset = DatasetFile::load(&cfg.dataset)?;
    if dataset.schema_version != DATASET_SCHEMA_VERSION {
        return Err(CliError::config(format!(
            "dataset schema_version {} is not supported (expected {DATASET_SCHEMA_VERSION})",
            dataset.schema_version
        )));
    }
    let data = dataset.data()?;
    let setup = cfg.geometry.setup()?;
    if data.n_sensors() != setup.geometry.sensors.len() {
        return Err(CliError::config(format!(
            "dataset has {} sensors but the geometry has {}",
            data.n_sensors(),
            setup.geometry.sensors.len()
        )));
    }
    let sigma_e = cfg.model.sigma_e.or(dataset.noise_std).ok_or_else(|| {
        CliError::config("model.sigma_e is required when the dataset records no noise_std")
    })?;
    if !(sigma_e > 0.0 && sigma_e.is_finite()) {
        return Err(CliError::config(format!(
            "sigma_e must be positive, got {sigma_e}"
        )));
    }

    let model = ModelSection {
        sigma_e: Some(sigma_e),
        ..cfg.model
    };
    let dataset_sha256 = file_hash(&cfg.dataset)?;
    let hash = config_hash(&EffectiveRun {
        dataset_sha256: &dataset_sha256,
        geometry: &cfg.geometry,
        model,
        smc: SmcSettings {
            workers: None,
            ..cfg.smc
        },
        kernels: cfg.kernels,
    });
    let settings = AnalysisSettings {
        prior: cfg.model.prior(),
        smc: cfg.smc,
        kernels: cfg.kernels,
    };
    let analysis = analyze(&setup, &data, sigma_e, &settings)?;

    let dir = output_dir(&common.out, &cfg.out)?;
    write_json(
        &dir.join("config.json"),
        &Stamped {
            schema_version: SCHEMA_VERSION,
            config_hash: &hash,
            body: &cfg,
        },
    )?;
    write_json(
        &dir.join("summary.json"),
        &Stamped {
            schema_version: SCHEMA_VERSION,
            config_hash: &hash,
            body: SummaryBody {
                dataset: &cfg.dataset,
                summary: &analysis.summary,
            },
        },
    )?;
    let lines = header("run", &hash);
    let trace_path = dir.join("trace.csv");
    written(&trace_path, analysis.trace.write_csv(&trace_path, &lines))?;

    if let Some(truth) = &dataset.truth {
        let estimate = analysis.summary.estimated_config()?;
        let Discrepancy { delta_d, delta_c } = discrepancy(&truth.config, &estimate, setup.grid());
        write_json(
            &dir.join("discrepancy.json"),
            &Stamped {
                schema_version: SCHEMA_VERSION,
                config_hash: &hash,
                body: DiscrepancyBody {
                    delta_d,
                    delta_c,
                    truth: &truth.config,
                    estimate: &estimate,
                },
            },
        )?;
    }
    println!(
        "estimated {} dipole(s) at grid indices {:?}, {} iterations",
        analysis.summary.d_hat,
        analysis
            .summary
            .locations_hat
            .iter()
            .map(|l| l.index)
            .collect::<Vec<_>>(),
        analysis.trace.iterations()
    );
    Ok(())
}

/// Reads the optional study config and applies the shared flags.
fn study_config(common: &Common) -> Result<StudyConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let (mut cfg, base): (StudyConfig, _) = read_json(path)?;
            cfg.geometry.resolve_paths(&base);
            if let Some(out) = &cfg.out {
                cfg.out = Some(resolve(&base, out));
            }
            cfg
        }
        None => StudyConfig::default(),
    };
    if let Some(seed) = common.seed.or(cfg.seed) {
        cfg.smc.master_seed = seed;
    }
    cfg.smc.workers = common.workers.or(cfg.workers).or(cfg.smc.workers);
    Ok(cfg)
}

fn study_hash(cfg: &StudyConfig) -> String {
    let mut key = cfg.clone();
    key.out = None;
    key.workers = None;
    key.seed = None;
    key.smc.workers = None;
    config_hash(&key)
}

fn analysis_settings(
    prior: PriorSettings,
    smc: SmcSettings,
    kernels: KernelSettings,
) -> AnalysisSettings {
    AnalysisSettings {
        prior,
        smc,
        kernels,
    }
}

fn cmd_exp1(common: &Common, replicates: Option<usize>) -> Result<(), CliError> {
    let mut cfg = study_config(common)?;
    if let Some(r) = replicates {
        cfg.exp1.replicates = r;
    }
    if let Some(p) = common.particles {
        cfg.smc.particle_count = p;
    }
    if cfg.exp1.replicates == 0 {
        return Err(CliError::config("exp1 needs at least one replicate"));
    }
    let hash = study_hash(&cfg);
    let setup = cfg.geometry.setup()?;
    let report = experiment1(
        &setup,
        &cfg.exp1,
        &analysis_settings(cfg.prior, cfg.smc, cfg.kernels),
    )?;

    let dir = output_dir(&common.out, &cfg.out)?;
    let lines = header("exp1", &hash);
    let table = dir.join("exp1_table.csv");
    written(&table, report.write_table_csv(&table, &lines))?;
    let strengths = dir.join("exp1_strengths.csv");
    written(&strengths, report.write_strengths_csv(&strengths, &lines))?;
    write_json(
        &dir.join("exp1_datasets.json"),
        &Stamped {
            schema_version: SCHEMA_VERSION,
            config_hash: &hash,
            body: &report,
        },
    )?;
    for g in &report.groups {
        println!(
            "{:<16} delta_d {:+.2} +- {:.2}   delta_c {:.2} +- {:.2} mm",
            g.group,
            g.mean_delta_d,
            g.std_delta_d,
            1e3 * g.mean_delta_c,
            1e3 * g.std_delta_c
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct Exp2Summary {
    runs: usize,
    particles: usize,
    threshold: f64,
    above_threshold: usize,
    fraction_semi_not_larger: f64,
    target: f64,
    met: bool,
}

fn cmd_exp2(common: &Common, runs: Option<usize>) -> Result<(), CliError> {
    let mut cfg = study_config(common)?;
    if let Some(r) = runs {
        cfg.exp2.runs = r;
    }
    if let Some(p) = common.particles {
        cfg.exp2.particle_count = p;
    }
    let hash = study_hash(&cfg);
    let setup = cfg.geometry.setup()?;
    let spec = experiment2_scenario(setup.grid(), cfg.exp2.scenario_seed);
    let smc = SmcSettings {
        particle_count: cfg.exp2.particle_count,
        ..cfg.smc
    };
    let study = Experiment2Settings {
        runs: cfg.exp2.runs,
        full_kernels: FullKernelSettings {
            dipole: cfg.kernels,
            moment_step_fraction: cfg.exp2.moment_step_fraction,
        },
    };
    let (_, report) = experiment2(
        &setup,
        &spec,
        &study,
        &analysis_settings(cfg.prior, smc, cfg.kernels),
    )?;

    let dir = output_dir(&common.out, &cfg.out)?;
    let mut lines = header("exp2", &hash);
    lines.push(format!(
        "joint sampler: birth draws the moment from the prior; moment random walk with step {} sigma_q",
        cfg.exp2.moment_step_fraction
    ));
    let std_path = dir.join("exp2_std.csv");
    written(&std_path, report.write_csv(&std_path, &lines))?;
    let met =
        !report.above_threshold.is_empty() && report.fraction_semi_not_larger >= VARIANCE_TARGET;
    write_json(
        &dir.join("exp2_summary.json"),
        &Stamped {
            schema_version: SCHEMA_VERSION,
            config_hash: &hash,
            body: Exp2Summary {
                runs: report.runs,
                particles: report.particles,
                threshold: STD_THRESHOLD,
                above_threshold: report.above_threshold.len(),
                fraction_semi_not_larger: report.fraction_semi_not_larger,
                target: VARIANCE_TARGET,
                met,
            },
        },
    )?;
    println!(
        "{}: semi-analytic std <= joint std on {:.1}% of {} grid points with std > {STD_THRESHOLD} (target {:.0}%)",
        if met { "PASS" } else { "FAIL" },
        100.0 * report.fraction_semi_not_larger,
        report.above_threshold.len(),
        100.0 * VARIANCE_TARGET
    );
    Ok(())
}

fn cmd_exp3(common: &Common, lengths: Option<Vec<usize>>) -> Result<(), CliError> {
    let mut cfg = study_config(common)?;
    if let Some(l) = lengths {
        cfg.exp3.lengths = l;
    }
    if let Some(p) = common.particles {
        cfg.smc.particle_count = p;
    }
    if cfg.exp3.lengths.is_empty() {
        return Err(CliError::config("exp3 needs at least one window length"));
    }
    let hash = study_hash(&cfg);
    let setup = cfg.geometry.setup()?;
    let spec = ScenarioSpec::new(2, true, cfg.exp3.scenario_seed);
    let (truth, rows) = experiment3(
        &setup,
        &spec,
        &cfg.exp3,
        &analysis_settings(cfg.prior, cfg.smc, cfg.kernels),
    )?;

    let dir = output_dir(&common.out, &cfg.out)?;
    let mut lines = header("exp3", &hash);
    lines.push(format!(
        "true dipoles at grid indices {:?}",
        truth.config.indices()
    ));
    let path = dir.join("exp3_timing.csv");
    written(&path, write_rows_csv(&path, &lines, &rows))?;
    for r in &rows {
        println!(
            "N_t = {:>3}: {:.3} s, {} iterations, {} dipole(s)",
            r.window_length, r.seconds, r.iterations, r.d_hat
        );
    }
    Ok(())
}
