//! The three simulation studies: localization accuracy over random scenes,
//! run-to-run variance against the joint sampler, and run time against
//! window length.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{discrepancy, summarize, Discrepancy, PosteriorSummary};
use crate::forward::{build_default_geometry, Geometry, LeadField, SourceGrid};
use crate::full_smc::{intensity_std_experiment, FullKernelSettings, IntensityStdReport};
use crate::kernels::KernelSettings;
use crate::model::{
    DipoleConfig, MarginalLikelihood, ModelParams, SemiLinearModel, TimeSeriesData,
};
use crate::rng::derive_seed;
use crate::simulate::{generate, window, GroundTruth, ScenarioSpec};
use crate::smc::{run, RunTrace, SmcSettings};

/// Geometry with its lead field.
#[derive(Debug, Clone)]
pub struct Setup {
    pub geometry: Geometry,
    pub lead_field: Arc<LeadField>,
}

impl Setup {
    pub fn new(geometry: Geometry) -> Result<Self> {
        let lead_field = Arc::new(LeadField::new(&geometry)?);
        Ok(Self {
            geometry,
            lead_field,
        })
    }

    pub fn default_geometry(seed: u64) -> Result<Self> {
        Self::new(build_default_geometry(seed))
    }

    pub fn grid(&self) -> &SourceGrid {
        &self.geometry.grid
    }

    pub fn generate(&self, spec: &ScenarioSpec) -> Result<GroundTruth> {
        generate(spec, &self.geometry.grid, &self.lead_field)
    }
}

/// Prior parameters shared by every analysis; `sigma_e` comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    pub sigma_q: f64,
    pub poisson_lambda: f64,
    pub d_max: usize,
}

impl Default for PriorSettings {
    fn default() -> Self {
        let m = ModelParams::default();
        Self {
            sigma_q: 1.0,
            poisson_lambda: m.poisson_lambda,
            d_max: m.d_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub prior: PriorSettings,
    pub smc: SmcSettings,
    pub kernels: KernelSettings,
}

impl AnalysisSettings {
    pub fn model(&self, setup: &Setup, sigma_e: f64) -> Result<SemiLinearModel> {
        let params = ModelParams {
            sigma_q: self.prior.sigma_q,
            sigma_e,
            poisson_lambda: self.prior.poisson_lambda,
            d_max: self.prior.d_max,
        };
        SemiLinearModel::new(params, setup.lead_field.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub summary: PosteriorSummary,
    pub trace: RunTrace,
    pub seconds: f64,
}

/// Semi-analytic run plus point estimates.
pub fn analyze(
    setup: &Setup,
    data: &TimeSeriesData,
    sigma_e: f64,
    settings: &AnalysisSettings,
) -> Result<Analysis> {
    let started = Instant::now();
    let model = settings.model(setup, sigma_e)?;
    let likelihood = MarginalLikelihood::new(model.clone(), data.clone())?;
    let (system, trace) = run(&likelihood, setup.grid(), &settings.kernels, &settings.smc)?;
    let summary = summarize(&system, &model, setup.grid(), data)?;
    Ok(Analysis {
        summary,
        trace,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Matches estimated dipoles to true ones with the assignment that
/// minimizes the mean distance. Entry `k` is the estimated slot paired with
/// true dipole `k`, if any.
pub fn match_dipoles(truth: &[usize], estimate: &[usize], grid: &SourceGrid) -> Vec<Option<usize>> {
    struct Search<'a> {
        truth: &'a [usize],
        estimate: &'a [usize],
        grid: &'a SourceGrid,
        used: Vec<bool>,
        current: Vec<Option<usize>>,
        best_cost: f64,
        best: Vec<Option<usize>>,
    }

    impl Search<'_> {
        fn visit(&mut self, k: usize, cost: f64) {
            let n = self.truth.len();
            // Every estimate must be paired while true dipoles remain.
            let paired = self.current.iter().flatten().count();
            if self.estimate.len().min(n) - paired > n - k {
                return;
            }
            if k == n {
                if cost < self.best_cost {
                    self.best_cost = cost;
                    self.best = self.current.clone();
                }
                return;
            }
            for j in 0..self.estimate.len() {
                if !self.used[j] {
                    self.used[j] = true;
                    self.current[k] = Some(j);
                    let d = self.grid.distance(self.truth[k], self.estimate[j]);
                    self.visit(k + 1, cost + d);
                    self.current[k] = None;
                    self.used[j] = false;
                }
            }
            self.visit(k + 1, cost);
        }
    }

    let mut search = Search {
        truth,
        estimate,
        grid,
        used: vec![false; estimate.len()],
        current: vec![None; truth.len()],
        best_cost: f64::INFINITY,
        best: vec![None; truth.len()],
    };
    search.visit(0, 0.0);
    search.best
}

/// Group of the first study: number of dipoles and whether their time
/// courses coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub n_dipoles: usize,
    pub correlated: bool,
}

impl Group {
    pub fn label(&self) -> String {
        format!(
            "{}-{}",
            self.n_dipoles,
            if self.correlated {
                "correlated"
            } else {
                "uncorrelated"
            }
        )
    }

    pub fn all() -> Vec<Group> {
        let mut out = Vec::new();
        for n_dipoles in 2..=4 {
            for correlated in [false, true] {
                out.push(Group {
                    n_dipoles,
                    correlated,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOutcome {
    pub group: String,
    pub replicate: usize,
    pub seed: u64,
    pub truth: DipoleConfig,
    pub d_hat: usize,
    pub discrepancy: Discrepancy,
    pub iterations: usize,
    pub seconds: f64,
    /// For each true dipole (generation order), the estimated strength curve
    /// of its matched dipole.
    pub matched_strengths: Vec<Option<Vec<f64>>>,
    pub true_strengths: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub n_dipoles: usize,
    pub correlated: bool,
    pub datasets: usize,
    pub mean_delta_d: f64,
    pub std_delta_d: f64,
    /// Meters, over datasets where the localization error is defined.
    pub mean_delta_c: f64,
    pub std_delta_c: f64,
    pub delta_c_count: usize,
}

/// Average strength of one true dipole slot at one time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthPoint {
    pub group: String,
    pub dipole: usize,
    pub t: usize,
    pub true_mean: f64,
    pub estimated_mean: f64,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment1Report {
    pub groups: Vec<GroupSummary>,
    pub strengths: Vec<StrengthPoint>,
    pub datasets: Vec<DatasetOutcome>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Parameters of the first study beyond the analysis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment1Settings {
    pub groups: Vec<Group>,
    pub replicates: usize,
    pub n_time: usize,
    /// Absolute noise std; `None` uses 5% of each dataset's clean peak.
    pub noise_std: Option<f64>,
    /// Smallest distance between true dipoles, meters.
    pub min_separation: f64,
}

impl Default for Experiment1Settings {
    fn default() -> Self {
        Self {
            groups: Group::all(),
            replicates: 20,
            n_time: 30,
            noise_std: None,
            min_separation: 0.01,
        }
    }
}

pub fn run_dataset(
    setup: &Setup,
    spec: &ScenarioSpec,
    settings: &AnalysisSettings,
) -> Result<(GroundTruth, Analysis)> {
    let truth = setup.generate(spec)?;
    let analysis = analyze(setup, &truth.noisy, truth.noise_std, settings)?;
    Ok((truth, analysis))
}

pub fn experiment1(
    setup: &Setup,
    study: &Experiment1Settings,
    settings: &AnalysisSettings,
) -> Result<Experiment1Report> {
    let master = settings.smc.master_seed;
    let mut datasets = Vec::new();
    for (gi, group) in study.groups.iter().enumerate() {
        for rep in 0..study.replicates {
            let seed = derive_seed(master, gi as u64 + 1, rep as u64);
            let spec = ScenarioSpec {
                n_time: study.n_time,
                noise_std: study.noise_std,
                min_separation: study.min_separation,
                ..ScenarioSpec::new(group.n_dipoles, group.correlated, seed)
            };
            let run_settings = AnalysisSettings {
                smc: SmcSettings {
                    master_seed: derive_seed(seed, 0, 1),
                    ..settings.smc
                },
                ..*settings
            };
            let (truth, analysis) = run_dataset(setup, &spec, &run_settings)?;
            let estimated = analysis.summary.estimated_config()?;
            let true_locs: Vec<usize> = truth.dipoles.iter().map(|d| d.index).collect();
            let est_locs: Vec<usize> = analysis
                .summary
                .locations_hat
                .iter()
                .map(|l| l.index)
                .collect();
            let pairing = match_dipoles(&true_locs, &est_locs, setup.grid());
            let matched_strengths = pairing
                .iter()
                .map(|p| p.map(|slot| analysis.summary.strengths[slot].clone()))
                .collect();
            datasets.push(DatasetOutcome {
                group: group.label(),
                replicate: rep,
                seed,
                truth: truth.config.clone(),
                d_hat: analysis.summary.d_hat,
                discrepancy: discrepancy(&truth.config, &estimated, setup.grid()),
                iterations: analysis.trace.iterations(),
                seconds: analysis.seconds,
                matched_strengths,
                true_strengths: truth.dipoles.iter().map(|d| d.strength.clone()).collect(),
            });
        }
    }

    let mut groups = Vec::new();
    let mut strengths = Vec::new();
    for group in &study.groups {
        let label = group.label();
        let rows: Vec<&DatasetOutcome> = datasets.iter().filter(|d| d.group == label).collect();
        let dd: Vec<f64> = rows.iter().map(|r| r.discrepancy.delta_d as f64).collect();
        let dc: Vec<f64> = rows.iter().filter_map(|r| r.discrepancy.delta_c).collect();
        let (mean_delta_d, std_delta_d) = mean_std(&dd);
        let (mean_delta_c, std_delta_c) = mean_std(&dc);
        groups.push(GroupSummary {
            group: label.clone(),
            n_dipoles: group.n_dipoles,
            correlated: group.correlated,
            datasets: rows.len(),
            mean_delta_d,
            std_delta_d,
            mean_delta_c,
            std_delta_c,
            delta_c_count: dc.len(),
        });
        for k in 0..group.n_dipoles {
            for t in 0..study.n_time {
                let true_mean = rows.iter().map(|r| r.true_strengths[k][t]).sum::<f64>()
                    / rows.len().max(1) as f64;
                let matched: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.matched_strengths[k].as_ref().map(|s| s[t]))
                    .collect();
                strengths.push(StrengthPoint {
                    group: label.clone(),
                    dipole: k,
                    t,
                    true_mean,
                    estimated_mean: mean_std(&matched).0,
                    matched: matched.len(),
                });
            }
        }
    }
    Ok(Experiment1Report {
        groups,
        strengths,
        datasets,
    })
}

/// Grid index closest to `point` (meters).
pub fn nearest_grid_point(grid: &SourceGrid, point: Vector3<f64>) -> usize {
    (0..grid.len())
        .min_by(|&a, &b| {
            (grid.point(a) - point)
                .norm()
                .total_cmp(&(grid.point(b) - point).norm())
        })
        .expect("grid is nonempty")
}

/// Scenario of the variance study: a superficial dipole at (3, 0, 5) cm
/// along y and a deeper one at (0, -3, 1) cm along x, both of strength 1,
/// one time point.
pub fn experiment2_scenario(grid: &SourceGrid, seed: u64) -> ScenarioSpec {
    let a = nearest_grid_point(grid, Vector3::new(0.03, 0.0, 0.05));
    let b = nearest_grid_point(grid, Vector3::new(0.0, -0.03, 0.01));
    ScenarioSpec {
        n_time: 1,
        locations: Some(vec![a, b]),
        orientations: Some(vec![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]),
        ..ScenarioSpec::new(2, true, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment2Settings {
    pub runs: usize,
    pub full_kernels: FullKernelSettings,
}

impl Default for Experiment2Settings {
    fn default() -> Self {
        Self {
            runs: 50,
            full_kernels: FullKernelSettings::default(),
        }
    }
}

pub fn experiment2(
    setup: &Setup,
    spec: &ScenarioSpec,
    study: &Experiment2Settings,
    settings: &AnalysisSettings,
) -> Result<(GroundTruth, IntensityStdReport)> {
    let truth = setup.generate(spec)?;
    if truth.noisy.n_time() != 1 {
        return Err(Error::Config(
            "the variance study needs a single time point".into(),
        ));
    }
    let model = settings.model(setup, truth.noise_std)?;
    let kernels = FullKernelSettings {
        dipole: settings.kernels,
        ..study.full_kernels
    };
    let report = intensity_std_experiment(
        &model,
        &truth.noisy,
        setup.grid(),
        &kernels,
        study.runs,
        &settings.smc,
    )?;
    Ok((truth, report))
}

/// Center sample of the run-time study (the middle of a 30-sample window).
pub const EXPERIMENT3_CENTER: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub window_length: usize,
    pub seconds: f64,
    pub iterations: usize,
    pub d_hat: usize,
    pub delta_c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment3Settings {
    pub lengths: Vec<usize>,
    pub center: usize,
    /// Seed of the two-dipole correlated scenario the windows are cut from.
    pub scenario_seed: u64,
}

impl Default for Experiment3Settings {
    fn default() -> Self {
        Self {
            lengths: vec![1, 5, 10, 20, 30],
            center: EXPERIMENT3_CENTER,
            scenario_seed: 3,
        }
    }
}

pub fn experiment3(
    setup: &Setup,
    spec: &ScenarioSpec,
    study: &Experiment3Settings,
    settings: &AnalysisSettings,
) -> Result<(GroundTruth, Vec<TimingRow>)> {
    let truth = setup.generate(spec)?;
    let windows = window(&truth.noisy, study.center, &study.lengths)?;
    let mut rows = Vec::new();
    for (len, data) in study.lengths.iter().zip(windows) {
        let analysis = analyze(setup, &data, truth.noise_std, settings)?;
        let estimated = analysis.summary.estimated_config()?;
        rows.push(TimingRow {
            window_length: *len,
            seconds: analysis.seconds,
            iterations: analysis.trace.iterations(),
            d_hat: analysis.summary.d_hat,
            delta_c: crate::estimate::delta_c(&truth.config, &estimated, setup.grid()).ok(),
        });
    }
    Ok((truth, rows))
}

/// Writes `rows` as CSV after `# `-prefixed header lines. Column names come
/// from the field names of `T`.
pub fn write_rows_csv<T: Serialize>(
    path: &Path,
    header_lines: &[String],
    rows: &[T],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header_lines {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-group table with lengths in millimeters, one row per group.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct TableRow<'a> {
    group: &'a str,
    n_dipoles: usize,
    correlated: bool,
    datasets: usize,
    mean_delta_d: f64,
    std_delta_d: f64,
    mean_delta_c_mm: f64,
    std_delta_c_mm: f64,
    delta_c_count: usize,
}

impl Experiment1Report {
    pub fn write_table_csv(&self, path: &Path, header_lines: &[String]) -> Result<()> {
        let rows: Vec<TableRow> = self
            .groups
            .iter()
            .map(|g| TableRow {
                group: &g.group,
                n_dipoles: g.n_dipoles,
                correlated: g.correlated,
                datasets: g.datasets,
                mean_delta_d: g.mean_delta_d,
                std_delta_d: g.std_delta_d,
                mean_delta_c_mm: 1e3 * g.mean_delta_c,
                std_delta_c_mm: 1e3 * g.std_delta_c,
                delta_c_count: g.delta_c_count,
            })
            .collect();
        write_rows_csv(path, header_lines, &rows)
    }

    pub fn write_strengths_csv(&self, path: &Path, header_lines: &[String]) -> Result<()> {
        write_rows_csv(path, header_lines, &self.strengths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_pairs_nearest_and_leaves_extras() {
        let grid = SourceGrid::new(
            (0..10)
                .map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0))
                .collect(),
            0.01,
        )
        .unwrap();
        assert_eq!(
            match_dipoles(&[1, 8], &[7, 2], &grid),
            vec![Some(1), Some(0)]
        );
        assert_eq!(
            match_dipoles(&[1, 8, 4], &[7], &grid),
            vec![None, Some(0), None]
        );
        assert_eq!(match_dipoles(&[5], &[0, 6, 9], &grid), vec![Some(1)]);
        assert_eq!(match_dipoles(&[5], &[], &grid), vec![None]);
    }

    #[test]
    fn groups_cover_six_cells() {
        let labels: Vec<String> = Group::all().iter().map(|g| g.label()).collect();
        assert_eq!(labels.len(), 6);
        assert_eq!(labels[0], "2-uncorrelated");
        assert_eq!(labels[5], "4-correlated");
    }

    #[test]
    fn variance_scenario_places_both_sources() {
        let setup = Setup::default_geometry(0).unwrap();
        let spec = experiment2_scenario(setup.grid(), 1);
        let truth = setup.generate(&spec).unwrap();
        assert_eq!(truth.config.len(), 2);
        let depth = |c: usize| setup.grid().point(c).norm();
        let idx = spec.locations.unwrap();
        assert!(depth(idx[1]) < depth(idx[0]));
    }

    #[test]
    fn csv_rows_follow_header_lines() {
        let dir = std::env::temp_dir().join(format!("sasmc-rows-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rows.csv");
        let rows = vec![
            TimingRow {
                window_length: 1,
                seconds: 0.5,
                iterations: 10,
                d_hat: 2,
                delta_c: Some(0.0),
            },
            TimingRow {
                window_length: 5,
                seconds: 0.25,
                iterations: 12,
                d_hat: 1,
                delta_c: None,
            },
        ];
        write_rows_csv(&path, &["schema_version=1".into()], &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema_version=1");
        assert_eq!(lines[1], "window_length,seconds,iterations,d_hat,delta_c");
        assert_eq!(lines[2], "1,0.5,10,2,0.0");
        assert_eq!(lines[3], "5,0.25,12,1,");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
