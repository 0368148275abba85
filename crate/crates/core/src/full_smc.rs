//! Baseline sampler over locations and moments jointly, for a single time
//! point. Used to compare Monte Carlo variability against the semi-analytic
//! sampler.

use nalgebra::{DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::unconditional_intensity;
use crate::forward::SourceGrid;
use crate::kernels::{
    birth_proposal_ratio, death_proposal_ratio, location_proposal, KernelSettings, MoveType,
};
use crate::model::{log_prior, DipoleConfig, MarginalLikelihood, SemiLinearModel, TimeSeriesData};
use crate::rng::{derive_seed, stream, Purpose};
use crate::smc::{
    run, run_tempered, sample_prior_config, MoveStats, Mutation, ParticleState, ParticleSystem,
    RunTrace, SmcSettings,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Locations with their moments, sorted by grid index.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub config: DipoleConfig,
    /// Moment of each dipole, in `config` order.
    pub moments: Vec<Vector3<f64>>,
    /// `log N(y; G(r) q, sigma_e^2 I)`.
    pub log_likelihood: f64,
}

impl ParticleState for FullState {
    fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    fn config(&self) -> &DipoleConfig {
        &self.config
    }
}

impl FullState {
    pub fn stacked_moments(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.moments.len(),
            self.moments.iter().flat_map(|m| m.iter().copied()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullKernelSettings {
    pub dipole: KernelSettings,
    /// Random-walk step on each moment component, as a fraction of sigma_q.
    pub moment_step_fraction: f64,
}

impl Default for FullKernelSettings {
    fn default() -> Self {
        Self {
            dipole: KernelSettings::default(),
            moment_step_fraction: 0.1,
        }
    }
}

/// Tempered joint target for one time point.
pub struct FullTarget<'a> {
    pub model: &'a SemiLinearModel,
    pub y: &'a DVector<f64>,
}

impl FullTarget<'_> {
    pub fn log_likelihood(&self, config: &DipoleConfig, moments: &[Vector3<f64>]) -> f64 {
        let lf = self.model.lead_field();
        let mut residual = self.y.clone();
        for (&c, m) in config.indices().iter().zip(moments) {
            residual -= lf.block(c) * m;
        }
        let var = self.model.sigma_e() * self.model.sigma_e();
        let n = self.y.len() as f64;
        -0.5 * (residual.norm_squared() / var + n * (var.ln() + LN_2PI))
    }

    fn log_moment_prior(&self, m: &Vector3<f64>) -> f64 {
        let var = self.model.sigma_q() * self.model.sigma_q();
        -0.5 * (m.norm_squared() / var + 3.0 * (var.ln() + LN_2PI))
    }

    /// `log pi(r) + log pi(q | r) + alpha log-likelihood`.
    pub fn log_density(&self, state: &FullState, alpha: f64) -> f64 {
        log_prior(self.model, &state.config)
            + state
                .moments
                .iter()
                .map(|m| self.log_moment_prior(m))
                .sum::<f64>()
            + alpha * state.log_likelihood
    }

    fn state(&self, config: DipoleConfig, moments: Vec<Vector3<f64>>) -> FullState {
        let log_likelihood = self.log_likelihood(&config, &moments);
        FullState {
            config,
            moments,
            log_likelihood,
        }
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    ) * scale
}

fn insert_sorted(
    state: &FullState,
    c: usize,
    m: Vector3<f64>,
) -> (DipoleConfig, Vec<Vector3<f64>>) {
    let config = state.config.with_added(c);
    let slot = config
        .indices()
        .iter()
        .position(|&x| x == c)
        .expect("added index");
    let mut moments = state.moments.clone();
    moments.insert(slot, m);
    (config, moments)
}

/// Birth draws the new moment from its prior, so the prior density cancels
/// against the proposal density and the acceptance ratio has the same form
/// as in the marginalized sampler, with the joint likelihood ratio.
pub fn full_birth_death_step<R: Rng + ?Sized>(
    state: &FullState,
    target: &FullTarget<'_>,
    alpha: f64,
    grid: &SourceGrid,
    settings: &KernelSettings,
    rng: &mut R,
) -> (FullState, bool, MoveType) {
    let n_c = grid.len();
    let d = state.config.len();
    let d_max = target.model.d_max();
    let u: f64 = rng.random();
    let (proposal, hastings, kind) = if u < settings.p_birth {
        if d >= d_max || d >= n_c {
            return (state.clone(), false, MoveType::None);
        }
        let mut k = rng.random_range(0..n_c - d);
        for &occupied in state.config.indices() {
            if occupied <= k {
                k += 1;
            } else {
                break;
            }
        }
        let m = gaussian3(rng, target.model.sigma_q());
        let (config, moments) = insert_sorted(state, k, m);
        (
            target.state(config, moments),
            birth_proposal_ratio(d, n_c, settings),
            MoveType::Birth,
        )
    } else if u < settings.p_birth + settings.p_death {
        if d == 0 {
            return (state.clone(), false, MoveType::None);
        }
        let slot = rng.random_range(0..d);
        let config = state.config.without(state.config.indices()[slot]);
        let mut moments = state.moments.clone();
        moments.remove(slot);
        (
            target.state(config, moments),
            death_proposal_ratio(d, n_c, settings),
            MoveType::Death,
        )
    } else {
        return (state.clone(), false, MoveType::None);
    };
    let log_ratio = log_prior(target.model, &proposal.config)
        - log_prior(target.model, &state.config)
        + alpha * (proposal.log_likelihood - state.log_likelihood)
        + hastings.ln();
    if accept(log_ratio, rng) {
        (proposal, true, kind)
    } else {
        (state.clone(), false, kind)
    }
}

/// Location moves as in the marginalized sampler, each dipole carrying its
/// moment. Dipoles are visited in random order.
pub fn full_location_sweep<R: Rng + ?Sized>(
    state: &FullState,
    target: &FullTarget<'_>,
    alpha: f64,
    grid: &SourceGrid,
    settings: &KernelSettings,
    rng: &mut R,
) -> (FullState, usize) {
    use rand::seq::SliceRandom;
    let mut order = state.config.indices().to_vec();
    order.shuffle(rng);
    let mut current = state.clone();
    let mut accepted = 0;
    for from in order {
        let forward = location_proposal(grid, &current.config, from, settings);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut to = forward[forward.len() - 1].0;
        for &(c, p) in &forward {
            acc += p;
            if u < acc {
                to = c;
                break;
            }
        }
        if to == from {
            accepted += 1;
            continue;
        }
        let q_forward = forward.iter().find(|(c, _)| *c == to).map_or(0.0, |x| x.1);
        let slot = current
            .config
            .indices()
            .iter()
            .position(|&c| c == from)
            .expect("dipole present");
        let m = current.moments[slot];
        let mut base = current.clone();
        base.config = current.config.without(from);
        base.moments.remove(slot);
        let (config, moments) = insert_sorted(&base, to, m);
        let q_reverse = location_proposal(grid, &config, to, settings)
            .iter()
            .find(|(c, _)| *c == from)
            .map_or(0.0, |x| x.1);
        let proposal = target.state(config, moments);
        let log_ratio = alpha * (proposal.log_likelihood - current.log_likelihood)
            + (q_reverse / q_forward).ln();
        if accept(log_ratio, rng) {
            current = proposal;
            accepted += 1;
        }
    }
    (current, accepted)
}

/// Gaussian random walk on each dipole's moment with a Metropolis correction.
pub fn moment_random_walk<R: Rng + ?Sized>(
    state: &FullState,
    target: &FullTarget<'_>,
    alpha: f64,
    step: f64,
    rng: &mut R,
) -> (FullState, usize) {
    let mut current = state.clone();
    let mut accepted = 0;
    for k in 0..current.moments.len() {
        let old = current.moments[k];
        let new = old + gaussian3(rng, step);
        let mut moments = current.moments.clone();
        moments[k] = new;
        let ll = target.log_likelihood(&current.config, &moments);
        let log_ratio = target.log_moment_prior(&new) - target.log_moment_prior(&old)
            + alpha * (ll - current.log_likelihood);
        if accept(log_ratio, rng) {
            current.moments = moments;
            current.log_likelihood = ll;
            accepted += 1;
        }
    }
    (current, accepted)
}

pub struct FullKernel<'a> {
    pub target: FullTarget<'a>,
    pub grid: &'a SourceGrid,
    pub settings: FullKernelSettings,
}

impl Mutation<FullState> for FullKernel<'_> {
    fn mutate(
        &self,
        state: &FullState,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(FullState, MoveStats)> {
        let mut stats = MoveStats::default();
        let dipole = &self.settings.dipole;
        let (s, ok, kind) =
            full_birth_death_step(state, &self.target, alpha, self.grid, dipole, rng);
        stats.record_birth_death(kind, ok);
        let (s2, moved) = full_location_sweep(&s, &self.target, alpha, self.grid, dipole, rng);
        stats.move_proposed += s.config.len() as u64;
        stats.move_accepted += moved as u64;
        let step = self.settings.moment_step_fraction * self.target.model.sigma_q();
        let (s3, walked) = moment_random_walk(&s2, &self.target, alpha, step, rng);
        stats.other_proposed += s2.config.len() as u64;
        stats.other_accepted += walked as u64;
        Ok((s3, stats))
    }

    fn recompute_log_likelihood(&self, state: &FullState) -> Result<f64> {
        let g = self.target.model.lead_field().assemble(&state.config);
        let residual = self.target.y - g * state.stacked_moments();
        let var = self.target.model.sigma_e() * self.target.model.sigma_e();
        let n = self.target.y.len() as f64;
        Ok(-0.5 * (residual.norm_squared() / var + n * (var.ln() + LN_2PI)))
    }
}

/// Runs the joint sampler on single-time-point data.
pub fn run_full(
    model: &SemiLinearModel,
    y: &TimeSeriesData,
    grid: &SourceGrid,
    kernel_settings: &FullKernelSettings,
    settings: &SmcSettings,
) -> Result<(ParticleSystem<FullState>, RunTrace)> {
    settings.validate()?;
    kernel_settings.dipole.validate()?;
    if !(kernel_settings.moment_step_fraction > 0.0) {
        return Err(Error::Config(
            "moment_step_fraction must be positive".into(),
        ));
    }
    if y.n_time() != 1 {
        return Err(Error::InvalidInput(format!(
            "the joint sampler needs one time point, got {}",
            y.n_time()
        )));
    }
    if y.n_sensors() != model.sensor_count() || grid.len() != model.grid_size() {
        return Err(Error::Config(
            "data, grid and lead field sizes disagree".into(),
        ));
    }
    let column = y.column(0);
    let target = FullTarget { model, y: &column };
    let states: Vec<FullState> = (0..settings.particle_count)
        .map(|i| {
            let mut rng = stream(settings.master_seed, 0, i as u64, Purpose::Initialize);
            let config = sample_prior_config(
                |d| model.log_count_prior(d),
                model.grid_size(),
                model.d_max(),
                &mut rng,
            );
            let moments = (0..config.len())
                .map(|_| gaussian3(&mut rng, model.sigma_q()))
                .collect();
            target.state(config, moments)
        })
        .collect();
    let kernel = FullKernel {
        target,
        grid,
        settings: *kernel_settings,
    };
    let (system, mut trace) =
        run_tempered(ParticleSystem::from_states(states)?, &kernel, settings)?;
    trace.notes.push("sampler=full".into());
    trace.notes.push(format!(
        "moment proposal: birth draws from the N(0, sigma_q^2 I) prior; random walk step {} sigma_q",
        kernel_settings.moment_step_fraction
    ));
    Ok((system, trace))
}

/// Threshold on the per-point standard deviation used to select the points
/// compared in the variance report.
pub const STD_THRESHOLD: f64 = 5e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdRow {
    pub index: usize,
    pub position: [f64; 3],
    pub std_full: f64,
    pub std_semi_analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityStdReport {
    pub runs: usize,
    pub particles: usize,
    pub rows: Vec<StdRow>,
    /// Grid indices where either sampler's std exceeds [`STD_THRESHOLD`].
    pub above_threshold: Vec<usize>,
    /// Fraction of `above_threshold` where the semi-analytic std is not larger.
    pub fraction_semi_not_larger: f64,
}

impl IntensityStdReport {
    pub fn from_intensities(
        grid: &SourceGrid,
        semi: &[Vec<f64>],
        full: &[Vec<f64>],
        particles: usize,
    ) -> Result<Self> {
        if semi.len() != full.len() || semi.is_empty() {
            return Err(Error::InvalidInput(
                "need the same positive number of runs for both samplers".into(),
            ));
        }
        let runs = semi.len();
        let std_at = |maps: &[Vec<f64>], c: usize| {
            if runs < 2 {
                return 0.0;
            }
            let mean = maps.iter().map(|m| m[c]).sum::<f64>() / runs as f64;
            (maps.iter().map(|m| (m[c] - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt()
        };
        let rows: Vec<StdRow> = (0..grid.len())
            .map(|c| {
                let p = grid.point(c);
                StdRow {
                    index: c,
                    position: [p.x, p.y, p.z],
                    std_full: std_at(full, c),
                    std_semi_analytic: std_at(semi, c),
                }
            })
            .collect();
        let above: Vec<&StdRow> = rows
            .iter()
            .filter(|r| r.std_full > STD_THRESHOLD || r.std_semi_analytic > STD_THRESHOLD)
            .collect();
        let fraction = if above.is_empty() {
            1.0
        } else {
            above
                .iter()
                .filter(|r| r.std_semi_analytic <= r.std_full)
                .count() as f64
                / above.len() as f64
        };
        Ok(Self {
            runs,
            particles,
            above_threshold: above.iter().map(|r| r.index).collect(),
            rows,
            fraction_semi_not_larger: fraction,
        })
    }

    pub fn write_csv(&self, path: &std::path::Path, header_lines: &[String]) -> Result<()> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in header_lines {
            writeln!(file, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["index", "x", "y", "z", "std_full", "std_semianalytic"])?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.position[0].to_string(),
                r.position[1].to_string(),
                r.position[2].to_string(),
                r.std_full.to_string(),
                r.std_semi_analytic.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn dense_intensity<S: ParticleState>(system: &ParticleSystem<S>, grid_size: usize) -> Vec<f64> {
    let mut out = vec![0.0; grid_size];
    for (c, v) in unconditional_intensity(system) {
        out[c] = v;
    }
    out
}

/// Repeats both samplers `runs` times on the same single-time-point data
/// and reports the per-point spread of the unconditional intensity.
pub fn intensity_std_experiment(
    model: &SemiLinearModel,
    y: &TimeSeriesData,
    grid: &SourceGrid,
    kernels: &FullKernelSettings,
    runs: usize,
    settings: &SmcSettings,
) -> Result<IntensityStdReport> {
    if runs == 0 {
        return Err(Error::InvalidInput("runs must be positive".into()));
    }
    let likelihood = MarginalLikelihood::new(model.clone(), y.clone())?;
    let mut semi = Vec::with_capacity(runs);
    let mut full = Vec::with_capacity(runs);
    for l in 0..runs as u64 {
        let s = SmcSettings {
            master_seed: derive_seed(settings.master_seed, l, 0),
            ..*settings
        };
        let (system, _) = run(&likelihood, grid, &kernels.dipole, &s)?;
        semi.push(dense_intensity(&system, grid.len()));
        let s = SmcSettings {
            master_seed: derive_seed(settings.master_seed, l, 1),
            ..*settings
        };
        let (system, _) = run_full(model, y, grid, kernels, &s)?;
        full.push(dense_intensity(&system, grid.len()));
    }
    IntensityStdReport::from_intensities(grid, &semi, &full, settings.particle_count)
}
