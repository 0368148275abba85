//! Adaptive tempered sequential Monte Carlo.
//!
//! The engine is generic over the particle state; [`run`] specializes it to
//! the semi-analytic target where the particles are dipole configurations.

use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::SourceGrid;
use crate::kernels::{
    birth_death_step, location_sweep, DipoleState, KernelSettings, MoveType, SemiAnalyticTarget,
};
use crate::model::{log_marginal_likelihood, log_sum_exp, DipoleConfig, MarginalLikelihood};
use crate::rng::{stream, Purpose};

/// State carried by a particle.
pub trait ParticleState: Clone + Send + Sync {
    /// Cached untempered log-likelihood, used by the weight recursion.
    fn log_likelihood(&self) -> f64;
    /// Dipole locations of the state.
    fn config(&self) -> &DipoleConfig;
}

impl ParticleState for DipoleState {
    fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    fn config(&self) -> &DipoleConfig {
        &self.config
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle<S> {
    pub state: S,
    /// Normalized log-weight.
    pub log_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem<S> {
    pub particles: Vec<Particle<S>>,
    pub alpha: f64,
    pub iteration: usize,
    pub ess: f64,
}

impl<S: ParticleState> ParticleSystem<S> {
    /// Uniformly weighted system at `alpha = 0`.
    pub fn from_states(states: Vec<S>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidInput(
                "a particle system needs at least one particle".into(),
            ));
        }
        let lw = -(states.len() as f64).ln();
        let ess = states.len() as f64;
        let particles = states
            .into_iter()
            .map(|state| Particle {
                state,
                log_weight: lw,
            })
            .collect();
        Ok(Self {
            particles,
            alpha: 0.0,
            iteration: 0,
            ess,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcSettings {
    pub particle_count: usize,
    pub ess_ratio_band: (f64, f64),
    pub resample_threshold: f64,
    pub max_bisection_steps: usize,
    pub kernel_sweeps: usize,
    pub master_seed: u64,
    pub max_iterations: usize,
    /// Worker threads; `None` uses the global pool. Results do not depend on it.
    pub workers: Option<usize>,
}

impl Default for SmcSettings {
    fn default() -> Self {
        Self {
            particle_count: 1000,
            ess_ratio_band: (0.90, 0.99),
            resample_threshold: 0.5,
            max_bisection_steps: 50,
            kernel_sweeps: 1,
            master_seed: 0,
            max_iterations: 10_000,
            workers: None,
        }
    }
}

impl SmcSettings {
    pub fn validate(&self) -> Result<()> {
        let (low, high) = self.ess_ratio_band;
        if self.particle_count < 2 {
            return Err(Error::Config(format!(
                "particle_count must be at least 2, got {}",
                self.particle_count
            )));
        }
        if !(0.0 < low && low < high && high < 1.0) {
            return Err(Error::Config(format!(
                "ESS ratio band must satisfy 0 < low < high < 1, got ({low}, {high})"
            )));
        }
        if !(0.0..=1.0).contains(&self.resample_threshold) {
            return Err(Error::Config(
                "resample_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.kernel_sweeps == 0 || self.max_iterations == 0 {
            return Err(Error::Config(
                "kernel_sweeps and max_iterations must be positive".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

/// ESS `1 / sum W_i^2` of log-weights that need not be normalized.
pub fn ess_from_log_weights(log_weights: &[f64]) -> f64 {
    let doubled: Vec<f64> = log_weights.iter().map(|w| 2.0 * w).collect();
    let ess = (2.0 * log_sum_exp(log_weights) - log_sum_exp(&doubled)).exp();
    ess.clamp(1.0, log_weights.len() as f64)
}

/// Subtracts the log-sum-exp so the weights sum to one.
pub fn normalize_log_weights(log_weights: &mut [f64]) {
    let norm = log_sum_exp(log_weights);
    for w in log_weights.iter_mut() {
        *w -= norm;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaKind {
    /// ESS ratio inside the band.
    InBand,
    /// Jump straight to one, ratio at least the lower band edge.
    Final,
    /// No increment hit the band; the closest one was used.
    Closest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaProposal {
    pub alpha: f64,
    pub ess_ratio: f64,
    pub kind: AlphaKind,
}

fn candidate_ess<S: ParticleState>(system: &ParticleSystem<S>, increment: f64) -> f64 {
    let lw: Vec<f64> = system
        .particles
        .iter()
        .map(|p| p.log_weight + increment * p.state.log_likelihood())
        .collect();
    ess_from_log_weights(&lw)
}

/// Chooses the next tempering exponent by bisection on the increment.
pub fn propose_next_alpha<S: ParticleState>(
    system: &ParticleSystem<S>,
    settings: &SmcSettings,
) -> Result<AlphaProposal> {
    if !(system.alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha is already {}",
            system.alpha
        )));
    }
    let (low, high) = settings.ess_ratio_band;
    let current = system.ess;
    let ratio = |inc: f64| candidate_ess(system, inc) / current;

    let full = 1.0 - system.alpha;
    let full_ratio = ratio(full);
    if full_ratio >= low {
        let kind = if full_ratio <= high {
            AlphaKind::InBand
        } else {
            AlphaKind::Final
        };
        return Ok(AlphaProposal {
            alpha: 1.0,
            ess_ratio: full_ratio,
            kind,
        });
    }

    let band_gap = |r: f64| {
        if r < low {
            low - r
        } else if r > high {
            r - high
        } else {
            0.0
        }
    };
    let mut best = (full, full_ratio);
    let (mut lo, mut hi) = (0.0, full);
    for _ in 0..settings.max_bisection_steps {
        let mid = 0.5 * (lo + hi);
        let r = ratio(mid);
        if (low..=high).contains(&r) {
            return Ok(AlphaProposal {
                alpha: system.alpha + mid,
                ess_ratio: r,
                kind: AlphaKind::InBand,
            });
        }
        // Ties go to the smaller increment.
        if band_gap(r) <= band_gap(best.1) {
            best = (mid, r);
        }
        if r > high {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let alpha = (system.alpha + best.0).min(1.0);
    Ok(AlphaProposal {
        alpha,
        ess_ratio: best.1,
        kind: AlphaKind::Closest,
    })
}

/// Incremental reweighting `w_i <- W_i pi(y | x_i)^(alpha' - alpha)`.
pub fn reweight<S: ParticleState>(system: &mut ParticleSystem<S>, new_alpha: f64) -> Result<()> {
    if new_alpha < system.alpha || new_alpha > 1.0 {
        return Err(Error::InvalidInput(format!(
            "new alpha {new_alpha} must lie in [{}, 1]",
            system.alpha
        )));
    }
    let increment = new_alpha - system.alpha;
    let mut lw: Vec<f64> = system
        .particles
        .iter()
        .map(|p| p.log_weight + increment * p.state.log_likelihood())
        .collect();
    normalize_log_weights(&mut lw);
    for (p, w) in system.particles.iter_mut().zip(lw) {
        p.log_weight = w;
    }
    system.ess = ess_from_log_weights(&system.log_weights());
    system.alpha = new_alpha;
    Ok(())
}

/// Offspring indices of systematic resampling with offset `u` in `[0, 1/I)`.
/// `weights` must sum to one.
pub fn systematic_resample_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for k in 0..n {
        let position = u + k as f64 / n as f64;
        while position >= cumulative && j + 1 < n {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

/// Resamples when the ESS is below `resample_threshold * I`. Returns whether
/// it did.
pub fn maybe_resample<S: ParticleState, R: Rng + ?Sized>(
    system: &mut ParticleSystem<S>,
    settings: &SmcSettings,
    rng: &mut R,
) -> bool {
    let n = system.len();
    if system.ess >= settings.resample_threshold * n as f64 {
        return false;
    }
    let u = rng.random::<f64>() / n as f64;
    let picks = systematic_resample_indices(&system.weights(), u);
    let lw = -(n as f64).ln();
    system.particles = picks
        .into_iter()
        .map(|i| Particle {
            state: system.particles[i].state.clone(),
            log_weight: lw,
        })
        .collect();
    system.ess = n as f64;
    true
}

/// Acceptance counters of one or more kernel applications.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveStats {
    pub birth_proposed: u64,
    pub birth_accepted: u64,
    pub death_proposed: u64,
    pub death_accepted: u64,
    pub move_proposed: u64,
    pub move_accepted: u64,
    pub other_proposed: u64,
    pub other_accepted: u64,
}

impl MoveStats {
    pub fn merge(&mut self, other: &MoveStats) {
        self.birth_proposed += other.birth_proposed;
        self.birth_accepted += other.birth_accepted;
        self.death_proposed += other.death_proposed;
        self.death_accepted += other.death_accepted;
        self.move_proposed += other.move_proposed;
        self.move_accepted += other.move_accepted;
        self.other_proposed += other.other_proposed;
        self.other_accepted += other.other_accepted;
    }

    pub fn record_birth_death(&mut self, move_type: MoveType, accepted: bool) {
        match move_type {
            MoveType::Birth => {
                self.birth_proposed += 1;
                self.birth_accepted += u64::from(accepted);
            }
            MoveType::Death => {
                self.death_proposed += 1;
                self.death_accepted += u64::from(accepted);
            }
            MoveType::None => {}
        }
    }
}

fn rate(accepted: u64, proposed: u64) -> f64 {
    if proposed == 0 {
        f64::NAN
    } else {
        accepted as f64 / proposed as f64
    }
}

/// A target-invariant move applied to each particle after reweighting.
pub trait Mutation<S>: Sync {
    fn mutate(&self, state: &S, alpha: f64, rng: &mut ChaCha8Rng) -> Result<(S, MoveStats)>;

    /// The state's log-likelihood recomputed without using its cache.
    fn recompute_log_likelihood(&self, state: &S) -> Result<f64>;
}

/// Applies `sweeps` mutations to every particle in parallel. Each particle
/// uses its own stream keyed by `(seed, iteration, index)`.
pub fn mutate_all<S: ParticleState, M: Mutation<S>>(
    system: &mut ParticleSystem<S>,
    mutation: &M,
    sweeps: usize,
    master_seed: u64,
) -> Result<MoveStats> {
    let alpha = system.alpha;
    let iteration = system.iteration as u64;
    let results: Vec<Result<(S, MoveStats)>> = system
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream(master_seed, iteration, i as u64, Purpose::Mutate);
            let mut state = p.state.clone();
            let mut stats = MoveStats::default();
            for _ in 0..sweeps {
                let (next, s) = mutation.mutate(&state, alpha, &mut rng)?;
                state = next;
                stats.merge(&s);
            }
            Ok((state, stats))
        })
        .collect();
    let mut total = MoveStats::default();
    for (p, result) in system.particles.iter_mut().zip(results) {
        let (state, stats) = result?;
        p.state = state;
        total.merge(&stats);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub alpha: f64,
    pub alpha_kind: AlphaKind,
    /// ESS ratio of the accepted increment.
    pub ess_ratio: f64,
    /// ESS after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    pub birth_accept_rate: f64,
    pub death_accept_rate: f64,
    pub move_accept_rate: f64,
    pub other_accept_rate: f64,
    /// Largest discrepancy found by the cache audit.
    pub cache_audit_error: f64,
    pub millis: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
    /// Free-form header lines, e.g. kernel choices.
    pub notes: Vec<String>,
}

impl RunTrace {
    pub fn alphas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.alpha).collect()
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn total_millis(&self) -> f64 {
        self.records.iter().map(|r| r.millis).sum()
    }

    /// Writes the trace as CSV. Notes and warnings become `#` comment lines
    /// above the header.
    pub fn write_csv(&self, path: &Path, header_lines: &[String]) -> Result<()> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for line in header_lines.iter().chain(&self.notes) {
            writeln!(file, "# {line}")?;
        }
        for w in &self.warnings {
            writeln!(file, "# warning: {w}")?;
        }
        let mut writer = csv::Writer::from_writer(file);
        for record in &self.records {
            writer.serialize(record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

const AUDIT_TOLERANCE: f64 = 1e-9;

/// Runs the tempering loop from `system` until `alpha = 1` and the final
/// mutation under the untempered target has been applied.
pub fn run_tempered<S: ParticleState, M: Mutation<S>>(
    mut system: ParticleSystem<S>,
    mutation: &M,
    settings: &SmcSettings,
) -> Result<(ParticleSystem<S>, RunTrace)> {
    settings.validate()?;
    in_pool(settings.workers, move || {
        let mut trace = RunTrace::default();
        while system.alpha < 1.0 {
            if system.iteration >= settings.max_iterations {
                return Err(Error::NotConverged(format!(
                    "alpha = {} after {} iterations",
                    system.alpha, system.iteration
                )));
            }
            let started = Instant::now();
            system.iteration += 1;
            let iteration = system.iteration as u64;

            let proposal = propose_next_alpha(&system, settings)?;
            if proposal.kind == AlphaKind::Closest {
                trace.warnings.push(format!(
                    "iteration {}: no increment reached the ESS band, used ratio {:.4}",
                    system.iteration, proposal.ess_ratio
                ));
            }
            reweight(&mut system, proposal.alpha)?;
            let ess = system.ess;
            let mut resample_rng = stream(settings.master_seed, iteration, 0, Purpose::Resample);
            let resampled = maybe_resample(&mut system, settings, &mut resample_rng);

            let stats = mutate_all(
                &mut system,
                mutation,
                settings.kernel_sweeps,
                settings.master_seed,
            )?;
            let cache_audit_error = audit_caches(&system, mutation, settings.master_seed)?;

            trace.records.push(TraceRecord {
                iteration: system.iteration,
                alpha: system.alpha,
                alpha_kind: proposal.kind,
                ess_ratio: proposal.ess_ratio,
                ess,
                resampled,
                birth_accept_rate: rate(stats.birth_accepted, stats.birth_proposed),
                death_accept_rate: rate(stats.death_accepted, stats.death_proposed),
                move_accept_rate: rate(stats.move_accepted, stats.move_proposed),
                other_accept_rate: rate(stats.other_accepted, stats.other_proposed),
                cache_audit_error,
                millis: started.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok((system, trace))
    })?
}

/// Recomputes the likelihood of about 1% of the particles (at least one) and
/// returns the largest relative discrepancy from the cache.
fn audit_caches<S: ParticleState, M: Mutation<S>>(
    system: &ParticleSystem<S>,
    mutation: &M,
    master_seed: u64,
) -> Result<f64> {
    let n = system.len();
    let count = n.div_ceil(100);
    let mut rng = stream(master_seed, system.iteration as u64, 1, Purpose::Resample);
    let mut worst: f64 = 0.0;
    for i in index::sample(&mut rng, n, count) {
        let state = &system.particles[i].state;
        let cached = state.log_likelihood();
        let fresh = mutation.recompute_log_likelihood(state)?;
        let err = (fresh - cached).abs() / cached.abs().max(1.0);
        if !(err <= AUDIT_TOLERANCE) {
            return Err(Error::Domain(format!(
                "cached log-likelihood {cached} of particle {i} differs from recomputed {fresh}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Birth/death step followed by a location sweep, under the semi-analytic
/// target at the current exponent.
pub struct SemiAnalyticKernel<'a> {
    pub likelihood: &'a MarginalLikelihood,
    pub grid: &'a SourceGrid,
    pub settings: KernelSettings,
}

impl Mutation<DipoleState> for SemiAnalyticKernel<'_> {
    fn mutate(
        &self,
        state: &DipoleState,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DipoleState, MoveStats)> {
        let target = SemiAnalyticTarget {
            likelihood: self.likelihood,
            alpha,
        };
        let d_max = self.likelihood.model().d_max();
        let mut stats = MoveStats::default();
        let bd = birth_death_step(state, &target, self.grid, d_max, &self.settings, rng)?;
        stats.record_birth_death(bd.move_type, bd.accepted);
        let (next, accepted) = location_sweep(&bd.state, &target, self.grid, &self.settings, rng)?;
        stats.move_proposed += bd.state.config.len() as u64;
        stats.move_accepted += accepted as u64;
        Ok((next, stats))
    }

    fn recompute_log_likelihood(&self, state: &DipoleState) -> Result<f64> {
        log_marginal_likelihood(
            self.likelihood.model(),
            &state.config,
            self.likelihood.data(),
        )
    }
}

/// Draws a configuration from the prior: truncated Poisson count, then a
/// uniform set of distinct grid points.
pub fn sample_prior_config<R: Rng + ?Sized>(
    log_count_prior: impl Fn(usize) -> f64,
    grid_size: usize,
    d_max: usize,
    rng: &mut R,
) -> DipoleConfig {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut d = d_max;
    for k in 0..=d_max {
        acc += log_count_prior(k).exp();
        if u < acc {
            d = k;
            break;
        }
    }
    let picks = index::sample(rng, grid_size, d).into_vec();
    DipoleConfig::new(picks).expect("sampled indices are distinct")
}

/// I independent prior draws with their likelihood caches filled.
pub fn initialize(
    likelihood: &MarginalLikelihood,
    settings: &SmcSettings,
) -> Result<ParticleSystem<DipoleState>> {
    settings.validate()?;
    let model = likelihood.model();
    in_pool(settings.workers, || {
        let states: Result<Vec<DipoleState>> = (0..settings.particle_count)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(settings.master_seed, 0, i as u64, Purpose::Initialize);
                let config = sample_prior_config(
                    |d| model.log_count_prior(d),
                    model.grid_size(),
                    model.d_max(),
                    &mut rng,
                );
                let log_likelihood = likelihood.log_likelihood(&config)?;
                Ok(DipoleState {
                    config,
                    log_likelihood,
                })
            })
            .collect();
        ParticleSystem::from_states(states?)
    })?
}

/// The semi-analytic sampler: prior initialization, then the tempering loop.
pub fn run(
    likelihood: &MarginalLikelihood,
    grid: &SourceGrid,
    kernel_settings: &KernelSettings,
    settings: &SmcSettings,
) -> Result<(ParticleSystem<DipoleState>, RunTrace)> {
    kernel_settings.validate()?;
    if grid.len() != likelihood.model().grid_size() {
        return Err(Error::Config(format!(
            "grid has {} points, lead field has {}",
            grid.len(),
            likelihood.model().grid_size()
        )));
    }
    let system = initialize(likelihood, settings)?;
    let kernel = SemiAnalyticKernel {
        likelihood,
        grid,
        settings: *kernel_settings,
    };
    let (system, mut trace) = run_tempered(system, &kernel, settings)?;
    trace.notes.push("sampler=semi-analytic".into());
    Ok((system, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[derive(Debug, Clone, PartialEq)]
    struct Toy(f64, DipoleConfig);

    impl ParticleState for Toy {
        fn log_likelihood(&self) -> f64 {
            self.0
        }
        fn config(&self) -> &DipoleConfig {
            &self.1
        }
    }

    fn toy_system(lls: &[f64]) -> ParticleSystem<Toy> {
        ParticleSystem::from_states(lls.iter().map(|&l| Toy(l, DipoleConfig::empty())).collect())
            .unwrap()
    }

    fn weight_sum<S: ParticleState>(s: &ParticleSystem<S>) -> f64 {
        s.weights().iter().sum()
    }

    #[test]
    fn initial_ess_is_particle_count() {
        let s = toy_system(&[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(s.ess, 4.0);
        assert_eq!(ess_from_log_weights(&s.log_weights()), 4.0);
    }

    #[test]
    fn three_particle_reweight() {
        let mut s = toy_system(&[0.0, -1.0, -2.0]);
        reweight(&mut s, 1.0).unwrap();
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let expected = [1.0 / z, (-1.0f64).exp() / z, (-2.0f64).exp() / z];
        for (w, e) in s.weights().iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
        let ess = 1.0 / expected.iter().map(|w| w * w).sum::<f64>();
        assert!((s.ess - ess).abs() < 1e-12);
        assert!((s.ess - 1.958_698_653_414_389).abs() < 1e-12);
    }

    #[test]
    fn zero_increment_leaves_weights() {
        let mut s = toy_system(&[0.3, -1.0, 5.0]);
        reweight(&mut s, 0.4).unwrap();
        let before = s.log_weights();
        reweight(&mut s, 0.4).unwrap();
        for (a, b) in before.iter().zip(s.log_weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(reweight(&mut s, 0.3).is_err());
    }

    #[test]
    fn constant_likelihood_jumps_to_one() {
        let s = toy_system(&[-7.0; 5]);
        let p = propose_next_alpha(&s, &SmcSettings::default()).unwrap();
        assert_eq!(p.alpha, 1.0);
        assert!((p.ess_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_is_rejected() {
        let mut s = toy_system(&[0.0, 1.0]);
        s.alpha = 1.0;
        assert!(propose_next_alpha(&s, &SmcSettings::default()).is_err());
    }

    #[test]
    fn two_particle_bisection_lands_in_band() {
        let settings = SmcSettings::default();
        let (low, high) = settings.ess_ratio_band;
        for delta in [3.0, 10.0, 50.0, 400.0] {
            let s = toy_system(&[0.0, -delta]);
            let p = propose_next_alpha(&s, &settings).unwrap();
            let inc = p.alpha;
            let (w1, w2) = (1.0, (-delta * inc).exp());
            let closed = (w1 + w2) * (w1 + w2) / (w1 * w1 + w2 * w2) / 2.0;
            assert!((closed - p.ess_ratio).abs() < 1e-12);
            assert_eq!(p.kind, AlphaKind::InBand);
            assert!(closed >= low && closed <= high, "{delta}: {closed}");
        }
    }

    #[test]
    fn unreachable_band_takes_closest() {
        // Once one particle carries all the weight the ratio stays at 1.
        let mut s = toy_system(&[0.0, -1e6, -1e6]);
        reweight(&mut s, 0.5).unwrap();
        let settings = SmcSettings {
            ess_ratio_band: (0.2, 0.3),
            max_bisection_steps: 5,
            ..Default::default()
        };
        let p = propose_next_alpha(&s, &settings).unwrap();
        assert_eq!(p.kind, AlphaKind::Final);
        assert_eq!(p.alpha, 1.0);

        let s = toy_system(&[0.0, -1e6]);
        let settings = SmcSettings {
            ess_ratio_band: (0.9, 0.95),
            max_bisection_steps: 3,
            ..Default::default()
        };
        let p = propose_next_alpha(&s, &settings).unwrap();
        assert_eq!(p.kind, AlphaKind::Closest);
        assert!(p.alpha > 0.0 && p.alpha < 1.0);
    }

    #[test]
    fn degenerate_weights_copy_one_particle() {
        let mut s = ParticleSystem::from_states(
            (0..5)
                .map(|i| Toy(i as f64, DipoleConfig::empty()))
                .collect(),
        )
        .unwrap();
        for (i, p) in s.particles.iter_mut().enumerate() {
            p.log_weight = if i == 2 { 0.0 } else { f64::NEG_INFINITY };
        }
        s.ess = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(maybe_resample(&mut s, &SmcSettings::default(), &mut rng));
        assert!(s.particles.iter().all(|p| p.state.0 == 2.0));
        assert_eq!(s.ess, 5.0);
        assert!((weight_sum(&s) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_do_not_resample() {
        let mut s = toy_system(&[1.0, 2.0, 3.0]);
        let before = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!maybe_resample(&mut s, &SmcSettings::default(), &mut rng));
        assert_eq!(s, before);
    }

    #[test]
    fn systematic_offspring_counts_are_within_one() {
        let n = 4;
        let steps = 12;
        let mut checked = 0;
        for a in 0..=steps {
            for b in 0..=steps - a {
                for c in 0..=steps - a - b {
                    let dd = steps - a - b - c;
                    let weights: Vec<f64> = [a, b, c, dd]
                        .iter()
                        .map(|&x| x as f64 / steps as f64)
                        .collect();
                    for k in 0..20 {
                        let u = k as f64 / 20.0 / n as f64;
                        let picks = systematic_resample_indices(&weights, u);
                        assert_eq!(picks.len(), n);
                        for (i, w) in weights.iter().enumerate() {
                            let count = picks.iter().filter(|&&j| j == i).count() as f64;
                            let expected = n as f64 * w;
                            assert!((count - expected).abs() <= 1.0 + 1e-9, "{weights:?} u={u}");
                            if *w == 0.0 {
                                assert_eq!(count, 0.0);
                            }
                        }
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn prior_draws_match_truncated_poisson_mean() {
        let lambda: f64 = 0.25;
        let d_max = 10;
        let log_p = |d: usize| {
            let unnorm = |k: usize| {
                -lambda + k as f64 * lambda.ln() - (2..=k).map(|j| (j as f64).ln()).sum::<f64>()
            };
            let norm = log_sum_exp(&(0..=d_max).map(unnorm).collect::<Vec<_>>());
            unnorm(d) - norm
        };
        let probs: Vec<f64> = (0..=d_max).map(|d| log_p(d).exp()).collect();
        let mean: f64 = probs.iter().enumerate().map(|(d, p)| d as f64 * p).sum();
        let var: f64 = probs
            .iter()
            .enumerate()
            .map(|(d, p)| (d as f64 - mean).powi(2) * p)
            .sum();
        let n = 100_000;
        let mut total = 0usize;
        for i in 0..n {
            let mut rng = stream(11, 0, i, Purpose::Initialize);
            let c = sample_prior_config(log_p, 50, d_max, &mut rng);
            c.validate(50, d_max).unwrap();
            total += c.len();
        }
        let empirical = total as f64 / n as f64;
        assert!(
            (empirical - mean).abs() < 3.0 * (var / n as f64).sqrt(),
            "{empirical} vs {mean}"
        );
    }

    proptest! {
        #[test]
        fn reweight_keeps_invariants(
            lls in prop::collection::vec(-500.0f64..500.0, 2..40),
            steps in prop::collection::vec(0.0f64..0.5, 1..5),
            shift in -1e4f64..1e4,
        ) {
            let mut s = toy_system(&lls);
            let shifted: Vec<f64> = lls.iter().map(|l| l + shift).collect();
            let mut t = toy_system(&shifted);
            let mut alpha = 0.0f64;
            for step in steps {
                alpha = (alpha + step).min(1.0);
                reweight(&mut s, alpha).unwrap();
                reweight(&mut t, alpha).unwrap();
                prop_assert!((weight_sum(&s) - 1.0).abs() < 1e-8);
                prop_assert!(s.ess >= 1.0 && s.ess <= lls.len() as f64);
                for (a, b) in s.weights().iter().zip(t.weights()) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn resampling_resets_weights(
            lls in prop::collection::vec(-50.0f64..50.0, 2..40),
            seed in any::<u64>(),
        ) {
            let mut s = toy_system(&lls);
            reweight(&mut s, 1.0).unwrap();
            let settings = SmcSettings { resample_threshold: 1.0, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if maybe_resample(&mut s, &settings, &mut rng) {
                prop_assert_eq!(s.ess, lls.len() as f64);
                prop_assert!((weight_sum(&s) - 1.0).abs() < 1e-8);
                for p in &s.particles {
                    prop_assert!(lls.contains(&p.state.0));
                }
            }
        }

        #[test]
        fn proposals_stay_in_band_or_flag(
            lls in prop::collection::vec(-200.0f64..0.0, 2..30),
            alpha in 0.0f64..0.9,
        ) {
            let mut s = toy_system(&lls);
            reweight(&mut s, alpha).unwrap();
            let settings = SmcSettings::default();
            let p = propose_next_alpha(&s, &settings).unwrap();
            prop_assert!(p.alpha > alpha && p.alpha <= 1.0);
            let (low, high) = settings.ess_ratio_band;
            match p.kind {
                AlphaKind::InBand => prop_assert!(p.ess_ratio >= low - 1e-12 && p.ess_ratio <= high + 1e-12),
                AlphaKind::Final => prop_assert!(p.alpha == 1.0 && p.ess_ratio >= low),
                AlphaKind::Closest => {}
            }
        }
    }
}
