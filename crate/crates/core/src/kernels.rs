//! Transition kernels on dipole configurations that leave the tempered target
//! `pi(r) pi(y | r)^alpha` invariant.
//!
//! Two moves are provided:
//!
//! * a birth/death step. With the moments integrated out the dimension jump
//!   needs no Jacobian; it is a Metropolis-Hastings move on the discrete space
//!   of unordered location sets;
//! * a location sweep that visits every dipole (in a random order) and
//!   proposes a nearby grid point with Gaussian weights.
//!
//! Each kernel comes with an exact enumeration of its transition
//! probabilities, used to check invariance on small grids.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::SourceGrid;
use crate::model::{DipoleConfig, MarginalLikelihood};

/// Proposal parameters of the dipole kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSettings {
    pub p_birth: f64,
    pub p_death: f64,
    /// Hard radius of the location move, meters.
    pub move_radius: f64,
    /// Scale of the Gaussian location proposal, meters.
    pub move_sigma: f64,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            p_birth: 1.0 / 3.0,
            p_death: 1.0 / 20.0,
            move_radius: 0.01,
            move_sigma: 0.006,
        }
    }
}

impl KernelSettings {
    pub fn validate(&self) -> Result<()> {
        let probs_ok =
            self.p_birth >= 0.0 && self.p_death >= 0.0 && self.p_birth + self.p_death <= 1.0;
        if !probs_ok {
            return Err(Error::Config(format!(
                "birth/death probabilities must be nonnegative with sum <= 1, got {} and {}",
                self.p_birth, self.p_death
            )));
        }
        if !(self.move_radius > 0.0 && self.move_sigma > 0.0) {
            return Err(Error::Config(
                "move radius and sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A configuration with its cached log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct DipoleState {
    pub config: DipoleConfig,
    pub log_likelihood: f64,
}

/// Unnormalized tempered density over configurations.
pub trait TemperedTarget: Sync {
    /// The likelihood term cached alongside each configuration.
    fn log_likelihood(&self, r: &DipoleConfig) -> Result<f64>;
    /// Log-density given the cached likelihood term.
    fn log_density(&self, r: &DipoleConfig, log_likelihood: f64) -> f64;
}

/// `log pi(r) + alpha log pi(y | r)` for a dataset.
pub struct SemiAnalyticTarget<'a> {
    pub likelihood: &'a MarginalLikelihood,
    pub alpha: f64,
}

impl TemperedTarget for SemiAnalyticTarget<'_> {
    fn log_likelihood(&self, r: &DipoleConfig) -> Result<f64> {
        self.likelihood.log_likelihood(r)
    }

    fn log_density(&self, r: &DipoleConfig, log_likelihood: f64) -> f64 {
        self.likelihood.log_prior(r) + self.alpha * log_likelihood
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveType {
    None,
    Birth,
    Death,
}

#[derive(Debug, Clone)]
pub struct BirthDeathOutcome {
    pub state: DipoleState,
    pub accepted: bool,
    pub move_type: MoveType,
}

/// Hastings factor `q(r' -> r) / q(r -> r')` of adding one dipole to `d`.
pub fn birth_proposal_ratio(d: usize, grid_size: usize, settings: &KernelSettings) -> f64 {
    (settings.p_death / (d + 1) as f64) / (settings.p_birth / (grid_size - d) as f64)
}

/// Hastings factor of removing one dipole from `d` (`d >= 1`).
pub fn death_proposal_ratio(d: usize, grid_size: usize, settings: &KernelSettings) -> f64 {
    (settings.p_birth / (grid_size - d + 1) as f64) / (settings.p_death / d as f64)
}

fn acceptance(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// One reversible-jump step: propose a birth with probability `p_birth`, a
/// death with probability `p_death`, otherwise stay.
///
/// Births at `d_max` and deaths at `d = 0` are not proposed.
pub fn birth_death_step<T: TemperedTarget + ?Sized, R: Rng + ?Sized>(
    state: &DipoleState,
    target: &T,
    grid: &SourceGrid,
    d_max: usize,
    settings: &KernelSettings,
    rng: &mut R,
) -> Result<BirthDeathOutcome> {
    let unchanged = |move_type| BirthDeathOutcome {
        state: state.clone(),
        accepted: false,
        move_type,
    };
    let n_c = grid.len();
    let d = state.config.len();
    let u: f64 = rng.random();
    let (proposal, hastings, move_type) = if u < settings.p_birth {
        if d >= d_max || d >= n_c {
            return Ok(unchanged(MoveType::None));
        }
        let new_index = draw_unoccupied(&state.config, n_c, rng);
        (
            state.config.with_added(new_index),
            birth_proposal_ratio(d, n_c, settings),
            MoveType::Birth,
        )
    } else if u < settings.p_birth + settings.p_death {
        if d == 0 {
            return Ok(unchanged(MoveType::None));
        }
        let victim = state.config.indices()[rng.random_range(0..d)];
        (
            state.config.without(victim),
            death_proposal_ratio(d, n_c, settings),
            MoveType::Death,
        )
    } else {
        return Ok(unchanged(MoveType::None));
    };

    let proposal_ll = target.log_likelihood(&proposal)?;
    let log_ratio = target.log_density(&proposal, proposal_ll)
        - target.log_density(&state.config, state.log_likelihood)
        + hastings.ln();
    if accept(log_ratio, rng) {
        Ok(BirthDeathOutcome {
            state: DipoleState {
                config: proposal,
                log_likelihood: proposal_ll,
            },
            accepted: true,
            move_type,
        })
    } else {
        Ok(unchanged(move_type))
    }
}

/// Uniform draw among the `n_c - d` unoccupied grid points.
fn draw_unoccupied<R: Rng + ?Sized>(config: &DipoleConfig, n_c: usize, rng: &mut R) -> usize {
    let mut k = rng.random_range(0..n_c - config.len());
    // Skip over occupied indices (ascending) to find the k-th free point.
    for &occupied in config.indices() {
        if occupied <= k {
            k += 1;
        } else {
            break;
        }
    }
    k
}

/// Exact transition distribution of [`birth_death_step`] from `r`.
pub fn birth_death_transitions<T: TemperedTarget + ?Sized>(
    r: &DipoleConfig,
    target: &T,
    grid: &SourceGrid,
    d_max: usize,
    settings: &KernelSettings,
) -> Result<Vec<(DipoleConfig, f64)>> {
    let n_c = grid.len();
    let d = r.len();
    let current = target.log_density(r, target.log_likelihood(r)?);
    let mut out = BTreeMap::new();
    let mut stay = 1.0 - settings.p_birth - settings.p_death;

    if d < d_max && d < n_c {
        let each = settings.p_birth / (n_c - d) as f64;
        let hastings = birth_proposal_ratio(d, n_c, settings).ln();
        for c in (0..n_c).filter(|c| !r.contains(*c)) {
            let next = r.with_added(c);
            let a = acceptance(
                target.log_density(&next, target.log_likelihood(&next)?) - current + hastings,
            );
            *out.entry(next).or_insert(0.0) += each * a;
            stay += each * (1.0 - a);
        }
    } else {
        stay += settings.p_birth;
    }

    if d > 0 {
        let each = settings.p_death / d as f64;
        let hastings = death_proposal_ratio(d, n_c, settings).ln();
        for &c in r.indices() {
            let next = r.without(c);
            let a = acceptance(
                target.log_density(&next, target.log_likelihood(&next)?) - current + hastings,
            );
            *out.entry(next).or_insert(0.0) += each * a;
            stay += each * (1.0 - a);
        }
    } else {
        stay += settings.p_death;
    }

    *out.entry(r.clone()).or_insert(0.0) += stay;
    Ok(out.into_iter().collect())
}

/// Proposal distribution for moving the dipole at `from` within `config`:
/// `from` itself and its unoccupied neighbors within `move_radius`, weighted
/// by `exp(-|z(c') - z(from)|^2 / (2 move_sigma^2))`.
pub fn location_proposal(
    grid: &SourceGrid,
    config: &DipoleConfig,
    from: usize,
    settings: &KernelSettings,
) -> Vec<(usize, f64)> {
    let reach = settings.move_radius * (1.0 + 1e-9);
    let two_var = 2.0 * settings.move_sigma * settings.move_sigma;
    let mut candidates = vec![(from, 1.0)];
    for &c in grid.neighbors(from) {
        if config.contains(c) {
            continue;
        }
        let dist = grid.distance(from, c);
        if dist <= reach {
            candidates.push((c, (-dist * dist / two_var).exp()));
        }
    }
    let total: f64 = candidates.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut candidates {
        *w /= total;
    }
    candidates
}

fn proposal_probability(candidates: &[(usize, f64)], to: usize) -> f64 {
    candidates
        .iter()
        .find(|(c, _)| *c == to)
        .map_or(0.0, |(_, p)| *p)
}

fn check_move_radius(grid: &SourceGrid, settings: &KernelSettings) -> Result<()> {
    if settings.move_radius > grid.neighbor_radius() * (1.0 + 1e-9) {
        return Err(Error::Config(format!(
            "move radius {} exceeds the grid neighbor radius {}",
            settings.move_radius,
            grid.neighbor_radius()
        )));
    }
    Ok(())
}

/// Moves the dipole at `from` once. Returns the new state and whether the
/// proposal was accepted (a self-proposal counts as accepted).
pub fn move_dipole<T: TemperedTarget + ?Sized, R: Rng + ?Sized>(
    state: &DipoleState,
    from: usize,
    target: &T,
    grid: &SourceGrid,
    settings: &KernelSettings,
    rng: &mut R,
) -> Result<(DipoleState, bool)> {
    let forward = location_proposal(grid, &state.config, from, settings);
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
        return Ok((state.clone(), true));
    }
    let q_forward = proposal_probability(&forward, to);
    let proposal = state.config.moved(from, to);
    let q_reverse = proposal_probability(&location_proposal(grid, &proposal, to, settings), from);
    let proposal_ll = target.log_likelihood(&proposal)?;
    let log_ratio = target.log_density(&proposal, proposal_ll)
        - target.log_density(&state.config, state.log_likelihood)
        + (q_reverse / q_forward).ln();
    if accept(log_ratio, rng) {
        Ok((
            DipoleState {
                config: proposal,
                log_likelihood: proposal_ll,
            },
            true,
        ))
    } else {
        Ok((state.clone(), false))
    }
}

/// Visits every dipole once, in a uniformly random order, proposing a move
/// for each. Later moves see the result of earlier ones.
///
/// Returns the new state and the number of accepted moves.
pub fn location_sweep<T: TemperedTarget + ?Sized, R: Rng + ?Sized>(
    state: &DipoleState,
    target: &T,
    grid: &SourceGrid,
    settings: &KernelSettings,
    rng: &mut R,
) -> Result<(DipoleState, usize)> {
    check_move_radius(grid, settings)?;
    let mut order = state.config.indices().to_vec();
    order.shuffle(rng);
    let mut current = state.clone();
    let mut accepted = 0;
    // A dipole keeps its starting location until its own turn, since others
    // can only move to unoccupied points.
    for from in order {
        let (next, ok) = move_dipole(&current, from, target, grid, settings, rng)?;
        current = next;
        accepted += usize::from(ok);
    }
    Ok((current, accepted))
}

/// Exact transition distribution of a single [`move_dipole`] call.
pub fn move_dipole_transitions<T: TemperedTarget + ?Sized>(
    r: &DipoleConfig,
    from: usize,
    target: &T,
    grid: &SourceGrid,
    settings: &KernelSettings,
) -> Result<Vec<(DipoleConfig, f64)>> {
    let current = target.log_density(r, target.log_likelihood(r)?);
    let mut out = BTreeMap::new();
    let mut stay = 0.0;
    for (to, q_forward) in location_proposal(grid, r, from, settings) {
        if to == from {
            stay += q_forward;
            continue;
        }
        let next = r.moved(from, to);
        let q_reverse = proposal_probability(&location_proposal(grid, &next, to, settings), from);
        let log_ratio = target.log_density(&next, target.log_likelihood(&next)?) - current
            + (q_reverse / q_forward).ln();
        let a = acceptance(log_ratio);
        *out.entry(next).or_insert(0.0) += q_forward * a;
        stay += q_forward * (1.0 - a);
    }
    *out.entry(r.clone()).or_insert(0.0) += stay;
    Ok(out.into_iter().collect())
}

/// Exact transition distribution of [`location_sweep`]: the average over
/// visiting orders of the composed single-dipole moves.
pub fn location_sweep_transitions<T: TemperedTarget + ?Sized>(
    r: &DipoleConfig,
    target: &T,
    grid: &SourceGrid,
    settings: &KernelSettings,
) -> Result<Vec<(DipoleConfig, f64)>> {
    check_move_radius(grid, settings)?;
    let orders = permutations(r.indices());
    let weight = 1.0 / orders.len() as f64;
    let mut out: BTreeMap<DipoleConfig, f64> = BTreeMap::new();
    for order in orders {
        let mut dist: BTreeMap<DipoleConfig, f64> = BTreeMap::from([(r.clone(), 1.0)]);
        for from in order {
            let mut next_dist = BTreeMap::new();
            for (config, p) in dist {
                for (next, q) in move_dipole_transitions(&config, from, target, grid, settings)? {
                    *next_dist.entry(next).or_insert(0.0) += p * q;
                }
            }
            dist = next_dist;
        }
        for (config, p) in dist {
            *out.entry(config).or_insert(0.0) += weight * p;
        }
    }
    Ok(out.into_iter().collect())
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// All configurations on `grid_size` points with at most `d_max` dipoles.
pub fn enumerate_configs(grid_size: usize, d_max: usize) -> Vec<DipoleConfig> {
    fn extend(
        start: usize,
        n: usize,
        left: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<DipoleConfig>,
    ) {
        out.push(DipoleConfig::new(current.clone()).expect("ascending indices are distinct"));
        if left == 0 {
            return;
        }
        for c in start..n {
            current.push(c);
            extend(c + 1, n, left - 1, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    extend(0, grid_size, d_max, &mut Vec::new(), &mut out);
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Fixed arbitrary log-density on configurations.
    struct TableTarget;

    impl TemperedTarget for TableTarget {
        fn log_likelihood(&self, r: &DipoleConfig) -> Result<f64> {
            let mut h = 0.3 * r.len() as f64;
            for (k, &c) in r.indices().iter().enumerate() {
                h += ((c * 7 + k * 3) % 5) as f64 * 0.41 - 0.2 * (c as f64).sin();
            }
            Ok(h)
        }
        fn log_density(&self, r: &DipoleConfig, ll: f64) -> f64 {
            -0.9 * r.len() as f64 + 0.8 * ll
        }
    }

    struct FlatTarget;

    impl TemperedTarget for FlatTarget {
        fn log_likelihood(&self, _: &DipoleConfig) -> Result<f64> {
            Ok(0.0)
        }
        fn log_density(&self, _: &DipoleConfig, _: f64) -> f64 {
            0.0
        }
    }

    fn line_grid(n: usize) -> SourceGrid {
        let pts = (0..n)
            .map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.02))
            .collect();
        SourceGrid::new(pts, 0.01).unwrap()
    }

    fn plane_grid(nx: usize, ny: usize) -> SourceGrid {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                pts.push(Vector3::new(0.01 * i as f64, 0.01 * j as f64, 0.03));
            }
        }
        SourceGrid::new(pts, 0.01).unwrap()
    }

    fn state(target: &dyn TemperedTarget, indices: Vec<usize>) -> DipoleState {
        let config = DipoleConfig::new(indices).unwrap();
        let log_likelihood = target.log_likelihood(&config).unwrap();
        DipoleState {
            config,
            log_likelihood,
        }
    }

    fn stationary(
        target: &dyn TemperedTarget,
        configs: &[DipoleConfig],
    ) -> BTreeMap<DipoleConfig, f64> {
        let logs: Vec<f64> = configs
            .iter()
            .map(|c| target.log_density(c, target.log_likelihood(c).unwrap()))
            .collect();
        let norm = crate::model::log_sum_exp(&logs);
        configs
            .iter()
            .cloned()
            .zip(logs.iter().map(|l| (l - norm).exp()))
            .collect()
    }

    fn assert_invariant<F>(
        configs: &[DipoleConfig],
        pi: &BTreeMap<DipoleConfig, f64>,
        transitions: F,
    ) where
        F: Fn(&DipoleConfig) -> Vec<(DipoleConfig, f64)>,
    {
        let mut pushed: BTreeMap<DipoleConfig, f64> =
            configs.iter().map(|c| (c.clone(), 0.0)).collect();
        for c in configs {
            let row = transitions(c);
            let total: f64 = row.iter().map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-13, "row sums to {total}");
            for (next, p) in row {
                *pushed
                    .get_mut(&next)
                    .expect("transition leaves the state space") += pi[c] * p;
            }
        }
        for c in configs {
            assert!((pushed[c] - pi[c]).abs() < 1e-12, "pi P != pi at {c:?}");
        }
    }

    #[test]
    fn enumerate_counts() {
        assert_eq!(enumerate_configs(10, 2).len(), 56);
        assert_eq!(enumerate_configs(5, 2).len(), 16);
    }

    #[test]
    fn birth_death_is_invariant() {
        let grid = line_grid(5);
        let settings = KernelSettings::default();
        let configs = enumerate_configs(5, 2);
        let pi = stationary(&TableTarget, &configs);
        assert_invariant(&configs, &pi, |c| {
            birth_death_transitions(c, &TableTarget, &grid, 2, &settings).unwrap()
        });
    }

    #[test]
    fn birth_death_is_invariant_with_large_birth_probability() {
        let grid = line_grid(6);
        let settings = KernelSettings {
            p_birth: 0.6,
            p_death: 0.35,
            ..Default::default()
        };
        let configs = enumerate_configs(6, 2);
        let pi = stationary(&TableTarget, &configs);
        assert_invariant(&configs, &pi, |c| {
            birth_death_transitions(c, &TableTarget, &grid, 2, &settings).unwrap()
        });
    }

    #[test]
    fn location_moves_are_invariant() {
        let grid = plane_grid(3, 2);
        let settings = KernelSettings::default();
        let configs = enumerate_configs(6, 2);
        let pi = stationary(&TableTarget, &configs);
        assert_invariant(&configs, &pi, |c| {
            location_sweep_transitions(c, &TableTarget, &grid, &settings).unwrap()
        });
        // Each single-dipole move is invariant as a kernel on configurations
        // when the moved dipole is chosen uniformly.
        assert_invariant(&configs, &pi, |c| {
            if c.is_empty() {
                return vec![(c.clone(), 1.0)];
            }
            let mut acc: BTreeMap<DipoleConfig, f64> = BTreeMap::new();
            for &from in c.indices() {
                for (n, p) in
                    move_dipole_transitions(c, from, &TableTarget, &grid, &settings).unwrap()
                {
                    *acc.entry(n).or_insert(0.0) += p / c.len() as f64;
                }
            }
            acc.into_iter().collect()
        });
    }

    #[test]
    fn birth_at_d_max_is_no_proposal() {
        let grid = line_grid(5);
        let settings = KernelSettings {
            p_birth: 1.0,
            p_death: 0.0,
            ..Default::default()
        };
        let s = state(&TableTarget, vec![1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = birth_death_step(&s, &TableTarget, &grid, 2, &settings, &mut rng).unwrap();
        assert_eq!(out.move_type, MoveType::None);
        assert!(!out.accepted);
        assert_eq!(out.state, s);
    }

    #[test]
    fn flat_target_birth_acceptance_matches_hastings_ratio() {
        let grid = line_grid(100);
        let settings = KernelSettings::default();
        let s = state(&FlatTarget, vec![10, 40, 70]);
        let d = 3;
        let expected = birth_proposal_ratio(d, 100, &settings).min(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut births, mut accepted) = (0usize, 0usize);
        for _ in 0..100_000 {
            let out = birth_death_step(&s, &FlatTarget, &grid, 10, &settings, &mut rng).unwrap();
            if out.move_type == MoveType::Birth {
                births += 1;
                accepted += usize::from(out.accepted);
            }
        }
        let rate = accepted as f64 / births as f64;
        assert!(
            (rate - expected).abs() < 0.02 * expected.max(0.05),
            "{rate} vs {expected}"
        );
    }

    #[test]
    fn sampled_birth_death_matches_enumeration() {
        let grid = line_grid(5);
        let settings = KernelSettings {
            p_birth: 0.4,
            p_death: 0.3,
            ..Default::default()
        };
        let s = state(&TableTarget, vec![2]);
        let exact = birth_death_transitions(&s.config, &TableTarget, &grid, 2, &settings).unwrap();
        let mut counts: BTreeMap<DipoleConfig, usize> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        for _ in 0..n {
            let out = birth_death_step(&s, &TableTarget, &grid, 2, &settings, &mut rng).unwrap();
            *counts.entry(out.state.config).or_insert(0) += 1;
        }
        for (config, p) in exact {
            let freq = *counts.get(&config).unwrap_or(&0) as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 5.0 * se + 1e-9,
                "{config:?}: {freq} vs {p}"
            );
        }
    }

    #[test]
    fn sampled_sweep_matches_enumeration() {
        let grid = plane_grid(3, 2);
        let settings = KernelSettings::default();
        let s = state(&TableTarget, vec![1, 4]);
        let exact = location_sweep_transitions(&s.config, &TableTarget, &grid, &settings).unwrap();
        let mut counts: BTreeMap<DipoleConfig, usize> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        for _ in 0..n {
            let (next, _) = location_sweep(&s, &TableTarget, &grid, &settings, &mut rng).unwrap();
            *counts.entry(next.config).or_insert(0) += 1;
        }
        for (config, p) in exact {
            let freq = *counts.get(&config).unwrap_or(&0) as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() < 5.0 * se + 1e-9,
                "{config:?}: {freq} vs {p}"
            );
        }
    }

    #[test]
    fn isolated_point_never_moves() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.05, 0.0, 0.0)];
        let grid = SourceGrid::new(pts, 0.01).unwrap();
        let s = state(&FlatTarget, vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (next, _) =
                location_sweep(&s, &FlatTarget, &grid, &KernelSettings::default(), &mut rng)
                    .unwrap();
            assert_eq!(next.config, s.config);
        }
    }

    #[test]
    fn flat_interior_moves_are_always_accepted() {
        let mut pts = Vec::new();
        for i in -3i32..=3 {
            for j in -3i32..=3 {
                for k in -3i32..=3 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64) * 0.01);
                }
            }
        }
        let grid = SourceGrid::new(pts, 0.01).unwrap();
        let center = grid.points().iter().position(|p| p.norm() == 0.0).unwrap();
        let s = state(&FlatTarget, vec![center]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 100_000;
        let mut accepted = 0;
        for _ in 0..n {
            let (_, a) =
                location_sweep(&s, &FlatTarget, &grid, &KernelSettings::default(), &mut rng)
                    .unwrap();
            accepted += a;
        }
        assert!(accepted as f64 / n as f64 > 0.99);
    }

    #[test]
    fn outputs_stay_valid_and_rejections_return_input() {
        let grid = plane_grid(3, 3);
        let settings = KernelSettings {
            p_birth: 0.45,
            p_death: 0.45,
            ..Default::default()
        };
        let mut s = state(&TableTarget, vec![]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5_000 {
            let out = birth_death_step(&s, &TableTarget, &grid, 3, &settings, &mut rng).unwrap();
            if !out.accepted {
                assert_eq!(out.state, s);
            }
            let (next, _) =
                location_sweep(&out.state, &TableTarget, &grid, &settings, &mut rng).unwrap();
            next.config.validate(grid.len(), 3).unwrap();
            assert_eq!(
                next.log_likelihood,
                TableTarget.log_likelihood(&next.config).unwrap()
            );
            s = next;
        }
    }

    #[test]
    fn prior_chain_visits_every_count() {
        struct Prior(usize);
        impl TemperedTarget for Prior {
            fn log_likelihood(&self, _: &DipoleConfig) -> Result<f64> {
                Ok(0.0)
            }
            fn log_density(&self, r: &DipoleConfig, _: f64) -> f64 {
                let d = r.len();
                let lambda: f64 = 2.0;
                d as f64 * lambda.ln()
                    - (2..=d).map(|k| (k as f64).ln()).sum::<f64>()
                    - crate::model::ln_binomial(self.0, d)
            }
        }
        let grid = plane_grid(5, 4);
        let d_max = 5;
        let target = Prior(grid.len());
        let settings = KernelSettings::default();
        let mut s = state(&target, vec![]);
        let mut seen = [false; 6];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100_000 {
            s = birth_death_step(&s, &target, &grid, d_max, &settings, &mut rng)
                .unwrap()
                .state;
            s = location_sweep(&s, &target, &grid, &settings, &mut rng)
                .unwrap()
                .0;
            seen[s.config.len()] = true;
        }
        assert!(seen.iter().all(|&v| v), "{seen:?}");
    }

    #[test]
    fn draw_unoccupied_covers_free_points_uniformly() {
        let config = DipoleConfig::new(vec![0, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 6];
        for _ in 0..30_000 {
            counts[draw_unoccupied(&config, 6, &mut rng)] += 1;
        }
        assert_eq!(counts[0] + counts[2] + counts[3], 0);
        for c in [1, 4, 5] {
            assert!((counts[c] as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.015);
        }
    }
}
