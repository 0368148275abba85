//! Point estimates from a weighted particle system and discrepancy measures
//! against a known configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::SourceGrid;
use crate::model::{
    conditional_moment_posterior, DipoleConfig, MomentPosterior, SemiLinearModel, TimeSeriesData,
};
use crate::smc::{ParticleState, ParticleSystem};

/// Two peaks closer than this are treated as one mode.
pub const PEAK_SUPPRESSION_RADIUS: f64 = 0.02;

/// Sparse map from grid index to expected dipole count.
pub type Intensity = BTreeMap<usize, f64>;

/// `P(D = d | y)` for `d = 0..=d_max`.
pub fn number_posterior<S: ParticleState>(
    system: &ParticleSystem<S>,
    d_max: usize,
) -> Result<Vec<f64>> {
    let mut probs = vec![0.0; d_max + 1];
    for p in &system.particles {
        let d = p.state.config().len();
        if d > d_max {
            return Err(Error::InvalidInput(format!(
                "particle with {d} dipoles exceeds d_max = {d_max}"
            )));
        }
        probs[d] += p.log_weight.exp();
    }
    Ok(probs)
}

/// Index of the largest probability; ties go to the smaller count.
pub fn map_count(number_posterior: &[f64]) -> usize {
    let mut best = 0;
    for (d, &p) in number_posterior.iter().enumerate() {
        if p > number_posterior[best] {
            best = d;
        }
    }
    best
}

/// Intensity restricted to the particles with exactly `d_hat` dipoles.
pub fn conditional_intensity<S: ParticleState>(
    system: &ParticleSystem<S>,
    d_hat: usize,
) -> Result<Intensity> {
    let mut map = Intensity::new();
    let mut found = false;
    for p in system
        .particles
        .iter()
        .filter(|p| p.state.config().len() == d_hat)
    {
        found = true;
        let w = p.log_weight.exp();
        for &c in p.state.config().indices() {
            *map.entry(c).or_insert(0.0) += w;
        }
    }
    if !found {
        return Err(Error::Estimation(format!(
            "no particle has {d_hat} dipoles"
        )));
    }
    Ok(map)
}

/// Intensity with every particle contributing.
pub fn unconditional_intensity<S: ParticleState>(system: &ParticleSystem<S>) -> Intensity {
    let mut map = Intensity::new();
    for p in &system.particles {
        let w = p.log_weight.exp();
        for &c in p.state.config().indices() {
            *map.entry(c).or_insert(0.0) += w;
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Peaks {
    /// Grid indices in extraction order.
    pub locations: Vec<usize>,
    /// Fewer than the requested number of separated peaks were found.
    pub shortfall: bool,
}

/// Greedy mode finding: take the largest remaining intensity, then discard
/// everything within [`PEAK_SUPPRESSION_RADIUS`] of it. Equal values go to
/// the lower grid index.
pub fn extract_peak_locations(
    intensity: &Intensity,
    grid: &SourceGrid,
    d_hat: usize,
) -> Result<Peaks> {
    if let Some(&bad) = intensity.keys().find(|&&c| c >= grid.len()) {
        return Err(Error::InvalidInput(format!(
            "intensity index {bad} outside grid"
        )));
    }
    let mut remaining: Vec<(usize, f64)> = intensity
        .iter()
        .filter(|(_, &v)| v > 0.0)
        .map(|(&c, &v)| (c, v))
        .collect();
    let mut locations = Vec::with_capacity(d_hat);
    while locations.len() < d_hat {
        // Keys are ascending, so the first maximum has the lowest index.
        let Some(&(peak, _)) = remaining
            .iter()
            .fold(None, |best: Option<&(usize, f64)>, item| match best {
                Some(b) if b.1 >= item.1 => Some(b),
                _ => Some(item),
            })
        else {
            break;
        };
        locations.push(peak);
        let reach = PEAK_SUPPRESSION_RADIUS * (1.0 + 1e-9);
        remaining.retain(|&(c, _)| grid.distance(c, peak) > reach);
    }
    let shortfall = locations.len() < d_hat;
    Ok(Peaks {
        locations,
        shortfall,
    })
}

/// Conditional posterior of the moments at the estimated locations. `None`
/// when no dipole was estimated.
pub fn estimate_moments(
    model: &SemiLinearModel,
    locations: &[usize],
    y: &TimeSeriesData,
) -> Result<Option<MomentPosterior>> {
    if locations.is_empty() {
        return Ok(None);
    }
    let config = DipoleConfig::new(locations.to_vec())?;
    let sorted = conditional_moment_posterior(model, &config, y)?;
    // Return the blocks in extraction order rather than index order.
    let order: Vec<usize> = locations
        .iter()
        .map(|c| {
            config
                .indices()
                .iter()
                .position(|x| x == c)
                .expect("location is in the config")
        })
        .collect();
    let perm = |v: &nalgebra::DVector<f64>| {
        nalgebra::DVector::from_iterator(
            v.len(),
            order
                .iter()
                .flat_map(|&k| (0..3).map(move |j| v[3 * k + j])),
        )
    };
    let k = sorted.covariance.nrows();
    let idx: Vec<usize> = order
        .iter()
        .flat_map(|&k| (0..3).map(move |j| 3 * k + j))
        .collect();
    let covariance = nalgebra::DMatrix::from_fn(k, k, |i, j| sorted.covariance[(idx[i], idx[j])]);
    Ok(Some(MomentPosterior {
        means: sorted.means.iter().map(perm).collect(),
        covariance,
    }))
}

/// `D_hat - D`.
pub fn delta_d(truth: &DipoleConfig, estimate: &DipoleConfig) -> i64 {
    estimate.len() as i64 - truth.len() as i64
}

/// Localization error without a cardinality penalty: the smaller set is
/// matched injectively into the larger one so as to minimize the mean
/// distance, averaged over the smaller set. Brute force over injections.
pub fn delta_c(truth: &DipoleConfig, estimate: &DipoleConfig, grid: &SourceGrid) -> Result<f64> {
    if truth.is_empty() || estimate.is_empty() {
        return Err(Error::Estimation(
            "localization error needs two nonempty configurations".into(),
        ));
    }
    let (small, large) = if truth.len() <= estimate.len() {
        (truth.indices(), estimate.indices())
    } else {
        (estimate.indices(), truth.indices())
    };
    if large.len() > 8 {
        return Err(Error::InvalidInput(format!(
            "{} dipoles is too many for brute-force matching",
            large.len()
        )));
    }
    let mut used = vec![false; large.len()];
    let best = best_injection(small, large, grid, &mut used, 0.0);
    Ok(best / small.len() as f64)
}

fn best_injection(
    small: &[usize],
    large: &[usize],
    grid: &SourceGrid,
    used: &mut [bool],
    acc: f64,
) -> f64 {
    let Some((&head, rest)) = small.split_first() else {
        return acc;
    };
    let mut best = f64::INFINITY;
    for j in 0..large.len() {
        if used[j] {
            continue;
        }
        used[j] = true;
        best = best.min(best_injection(
            rest,
            large,
            grid,
            used,
            acc + grid.distance(head, large[j]),
        ));
        used[j] = false;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub delta_d: i64,
    /// Meters; absent when either configuration is empty.
    pub delta_c: Option<f64>,
}

pub fn discrepancy(
    truth: &DipoleConfig,
    estimate: &DipoleConfig,
    grid: &SourceGrid,
) -> Discrepancy {
    Discrepancy {
        delta_d: delta_d(truth, estimate),
        delta_c: delta_c(truth, estimate, grid).ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityEntry {
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatedLocation {
    pub index: usize,
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub number_posterior: Vec<f64>,
    pub d_hat: usize,
    pub locations_hat: Vec<EstimatedLocation>,
    pub peak_shortfall: bool,
    pub intensity_conditional: Vec<IntensityEntry>,
    pub intensity_unconditional: Vec<IntensityEntry>,
    /// Posterior mean moments per time point, `3 d_hat` values each, in the
    /// order of `locations_hat`.
    pub moment_means: Vec<Vec<f64>>,
    /// Posterior mean strength per estimated dipole and time point.
    pub strengths: Vec<Vec<f64>>,
}

impl PosteriorSummary {
    pub fn estimated_config(&self) -> Result<DipoleConfig> {
        DipoleConfig::new(self.locations_hat.iter().map(|l| l.index).collect())
    }
}

fn entries(map: &Intensity) -> Vec<IntensityEntry> {
    map.iter()
        .map(|(&index, &value)| IntensityEntry { index, value })
        .collect()
}

/// Number estimate, intensities, peak locations and moment estimates.
pub fn summarize<S: ParticleState>(
    system: &ParticleSystem<S>,
    model: &SemiLinearModel,
    grid: &SourceGrid,
    y: &TimeSeriesData,
) -> Result<PosteriorSummary> {
    let number_posterior = number_posterior(system, model.d_max())?;
    let d_hat = map_count(&number_posterior);
    let conditional = conditional_intensity(system, d_hat)?;
    let peaks = extract_peak_locations(&conditional, grid, d_hat)?;
    let moments = estimate_moments(model, &peaks.locations, y)?;
    let (moment_means, strengths) = match &moments {
        Some(m) => (
            m.means
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            (0..m.dipole_count()).map(|k| m.strengths(k)).collect(),
        ),
        None => (vec![Vec::new(); y.n_time()], Vec::new()),
    };
    let locations_hat = peaks
        .locations
        .iter()
        .map(|&index| {
            let p = grid.point(index);
            EstimatedLocation {
                index,
                position: [p.x, p.y, p.z],
            }
        })
        .collect();
    Ok(PosteriorSummary {
        number_posterior,
        d_hat,
        locations_hat,
        peak_shortfall: peaks.shortfall,
        intensity_conditional: entries(&conditional),
        intensity_unconditional: entries(&unconditional_intensity(system)),
        moment_means,
        strengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{build_default_geometry, LeadField};
    use crate::kernels::DipoleState;
    use crate::model::ModelParams;
    use nalgebra::{DMatrix, DVector, Vector3};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn cfg(v: &[usize]) -> DipoleConfig {
        DipoleConfig::new(v.to_vec()).unwrap()
    }

    fn system(items: &[(&[usize], f64)]) -> ParticleSystem<DipoleState> {
        let states = items
            .iter()
            .map(|(c, _)| DipoleState {
                config: cfg(c),
                log_likelihood: 0.0,
            })
            .collect();
        let mut s = ParticleSystem::from_states(states).unwrap();
        for (p, (_, w)) in s.particles.iter_mut().zip(items) {
            p.log_weight = w.ln();
        }
        s
    }

    fn line_grid(n: usize) -> SourceGrid {
        SourceGrid::new(
            (0..n)
                .map(|i| Vector3::new(0.01 * i as f64, 0.0, 0.0))
                .collect(),
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn number_posterior_and_ties() {
        let s = system(&[(&[1, 2], 0.5), (&[3, 4], 0.5)]);
        let p = number_posterior(&s, 3).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(map_count(&p), 2);

        let s = system(&[(&[1], 0.6), (&[3, 4], 0.4)]);
        assert_eq!(map_count(&number_posterior(&s, 3).unwrap()), 1);
        assert_eq!(map_count(&[0.0, 0.5, 0.5]), 1);
    }

    #[test]
    fn intensity_examples() {
        let s = system(&[(&[4, 9], 1.0)]);
        let m = conditional_intensity(&s, 2).unwrap();
        assert_eq!(m, Intensity::from([(4, 1.0), (9, 1.0)]));
        assert!(matches!(
            conditional_intensity(&s, 1),
            Err(Error::Estimation(_))
        ));

        let s = system(&[(&[1, 2], 0.2), (&[3], 0.3), (&[2, 5], 0.4), (&[], 0.1)]);
        let m = conditional_intensity(&s, 2).unwrap();
        let total: f64 = m.values().sum();
        let p2 = number_posterior(&s, 2).unwrap()[2];
        assert!((total - 2.0 * p2).abs() < 1e-10);
        let u = unconditional_intensity(&s);
        let expected = 0.2 * 2.0 + 0.3 + 0.4 * 2.0;
        assert!((u.values().sum::<f64>() - expected).abs() < 1e-12);
    }

    #[test]
    fn peak_extraction_examples() {
        let grid = line_grid(10);
        let two_far = Intensity::from([(1, 1.0), (6, 1.0)]);
        assert_eq!(
            extract_peak_locations(&two_far, &grid, 2).unwrap(),
            Peaks {
                locations: vec![1, 6],
                shortfall: false
            }
        );
        let two_close = Intensity::from([(3, 1.0), (4, 1.0)]);
        assert_eq!(
            extract_peak_locations(&two_close, &grid, 2).unwrap(),
            Peaks {
                locations: vec![3],
                shortfall: true
            }
        );
        let ordered = Intensity::from([(2, 0.3), (8, 0.9), (5, 0.3)]);
        assert_eq!(
            extract_peak_locations(&ordered, &grid, 3)
                .unwrap()
                .locations,
            vec![8, 2, 5]
        );
    }

    #[test]
    fn delta_examples() {
        let grid = line_grid(10);
        assert_eq!(delta_d(&cfg(&[1, 2]), &cfg(&[3, 4])), 0);
        assert_eq!(delta_d(&cfg(&[1, 2]), &cfg(&[3, 4, 5])), 1);
        assert_eq!(delta_d(&cfg(&[1, 2, 3, 4]), &cfg(&[3, 4, 5])), -1);

        assert_eq!(delta_c(&cfg(&[1, 7]), &cfg(&[1, 7]), &grid).unwrap(), 0.0);
        assert_eq!(delta_c(&cfg(&[2]), &cfg(&[2, 5]), &grid).unwrap(), 0.0);
        let v = delta_c(&cfg(&[0, 9]), &cfg(&[6]), &grid).unwrap();
        assert!((v - 0.03).abs() < 1e-12);
        assert!(delta_c(&cfg(&[]), &cfg(&[1]), &grid).is_err());
    }

    /// Minimum over all maps from the smaller set into the larger one,
    /// keeping only the injective ones.
    fn delta_c_oracle(a: &[usize], b: &[usize], grid: &SourceGrid) -> f64 {
        let (s, l) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let total = l.len().pow(s.len() as u32);
        let mut best = f64::INFINITY;
        for code in 0..total {
            let mut x = code;
            let pick: Vec<usize> = (0..s.len())
                .map(|_| {
                    let r = x % l.len();
                    x /= l.len();
                    r
                })
                .collect();
            let mut seen = pick.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != pick.len() {
                continue;
            }
            let sum: f64 = s
                .iter()
                .zip(&pick)
                .map(|(&i, &j)| grid.distance(i, l[j]))
                .sum();
            best = best.min(sum / s.len() as f64);
        }
        best
    }

    fn small_set(n: usize) -> impl Strategy<Value = Vec<usize>> {
        prop::collection::btree_set(0..n, 1..5).prop_map(|s| s.into_iter().collect())
    }

    proptest! {
        #[test]
        fn delta_c_matches_injection_oracle(a in small_set(40), b in small_set(40), seed in any::<u64>()) {
            let pts = (0..40).map(|i| {
                let t = (i as f64 * 1.7 + seed as f64 * 1e-3).sin();
                Vector3::new(0.01 * (i % 7) as f64, 0.01 * (i / 7) as f64, 0.003 * t)
            }).collect();
            let grid = SourceGrid::new(pts, 0.01).unwrap();
            let got = delta_c(&cfg(&a), &cfg(&b), &grid).unwrap();
            prop_assert!((got - delta_c_oracle(&a, &b, &grid)).abs() < 1e-12);
            prop_assert!(got >= 0.0);
            let mut shuffled = a.clone();
            shuffled.reverse();
            prop_assert_eq!(got, delta_c(&DipoleConfig::new(shuffled).unwrap(), &cfg(&b), &grid).unwrap());
            if a.len() == b.len() {
                prop_assert!((got - delta_c(&cfg(&b), &cfg(&a), &grid).unwrap()).abs() < 1e-15);
            }
        }

        #[test]
        fn summaries_ignore_particle_order(
            items in prop::collection::vec((small_set(12), 0.01f64..1.0), 2..20),
            rotate in 0usize..20,
        ) {
            let total: f64 = items.iter().map(|(_, w)| w).sum();
            let normalized: Vec<(Vec<usize>, f64)> = items.iter().map(|(c, w)| (c.clone(), w / total)).collect();
            let build = |v: &[(Vec<usize>, f64)]| {
                let refs: Vec<(&[usize], f64)> = v.iter().map(|(c, w)| (c.as_slice(), *w)).collect();
                system(&refs)
            };
            let s1 = build(&normalized);
            let mut rotated = normalized.clone();
            let k = rotate % rotated.len();
            rotated.rotate_left(k);
            let s2 = build(&rotated);
            let p1 = number_posterior(&s1, 5).unwrap();
            let p2 = number_posterior(&s2, 5).unwrap();
            prop_assert!((p1.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let d = map_count(&p1);
            let c1 = conditional_intensity(&s1, d).unwrap();
            let c2 = conditional_intensity(&s2, d).unwrap();
            prop_assert_eq!(c1.len(), c2.len());
            for (k, v) in &c1 {
                prop_assert!((v - c2[k]).abs() < 1e-12);
            }
            let grid = line_grid(12);
            prop_assert_eq!(
                extract_peak_locations(&c1, &grid, d).unwrap(),
                extract_peak_locations(&c1, &grid, d).unwrap()
            );
        }
    }

    #[test]
    fn noise_free_moment_recovery() {
        let geometry = build_default_geometry(3);
        let lf = Arc::new(LeadField::new(&geometry).unwrap());
        let c = 123;
        // Radial moments are silent, so only the tangential part is recoverable.
        let radial = geometry.grid.point(c).normalize();
        let raw = Vector3::new(0.4, -1.1, 0.7);
        let tangential = raw - radial * raw.dot(&radial);
        let q = DVector::from_column_slice(tangential.as_slice());
        let g = lf.assemble_indices(&[c]);
        let y = &g * &q;
        let data =
            TimeSeriesData::new(DMatrix::from_column_slice(y.len(), 1, y.as_slice())).unwrap();
        for sigma_e in [1.0, 1e-6] {
            let params = ModelParams {
                sigma_q: 1.0,
                sigma_e,
                ..Default::default()
            };
            let model = SemiLinearModel::new(params, lf.clone()).unwrap();
            let est = estimate_moments(&model, &[c], &data).unwrap().unwrap();
            // Shrinkage sigma_q^2 G^T (sigma_q^2 G G^T + sigma_e^2 I)^-1 G q, evaluated
            // through the SVD of G as V diag(s^2 / (s^2 + sigma_e^2)) V^T q.
            let svd = g.clone().svd(false, true);
            let v_t = svd.v_t.unwrap();
            let factors = svd
                .singular_values
                .map(|s| s * s / (s * s + sigma_e * sigma_e));
            let expected = v_t.transpose() * DMatrix::from_diagonal(&factors) * &v_t * &q;
            let scale = expected.norm();
            assert!(
                (&est.means[0] - &expected).norm() < 1e-6 * scale,
                "sigma_e = {sigma_e}"
            );
            if sigma_e < 1e-3 {
                assert!((&est.means[0] - &q).norm() < 1e-3 * q.norm());
            }
        }
        let params = ModelParams {
            sigma_q: 1.0,
            sigma_e: 1.0,
            ..Default::default()
        };
        let model = SemiLinearModel::new(params, lf).unwrap();
        assert!(estimate_moments(&model, &[], &data).unwrap().is_none());
    }

    #[test]
    fn moments_follow_extraction_order() {
        let geometry = build_default_geometry(3);
        let lf = Arc::new(LeadField::new(&geometry).unwrap());
        let params = ModelParams {
            sigma_q: 1.0,
            sigma_e: 0.5,
            ..Default::default()
        };
        let model = SemiLinearModel::new(params, lf.clone()).unwrap();
        let y =
            lf.assemble_indices(&[10, 200]) * DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let data =
            TimeSeriesData::new(DMatrix::from_column_slice(y.len(), 1, y.as_slice())).unwrap();
        let a = estimate_moments(&model, &[10, 200], &data)
            .unwrap()
            .unwrap();
        let b = estimate_moments(&model, &[200, 10], &data)
            .unwrap()
            .unwrap();
        assert_eq!(a.strengths(0), b.strengths(1));
        assert_eq!(a.strengths(1), b.strengths(0));
        assert_eq!(a.covariance[(0, 4)], b.covariance[(3, 1)]);
    }
}
