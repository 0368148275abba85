#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sasmc::forward::{fibonacci_sphere, Geometry, LeadField, SensorArray, SourceGrid};
use sasmc::kernels::enumerate_configs;
use sasmc::model::{
    log_sum_exp, DipoleConfig, MarginalLikelihood, ModelParams, SemiLinearModel, TimeSeriesData,
};

/// Ten grid points on a 5 x 2 patch at z = 5 cm, six sensors.
pub struct Tiny {
    pub grid: SourceGrid,
    pub lead_field: Arc<LeadField>,
    pub model: SemiLinearModel,
    pub data: TimeSeriesData,
    pub truth: DipoleConfig,
}

pub fn tiny_geometry() -> Geometry {
    let mut pts = Vec::new();
    for i in 0..5 {
        for j in 0..2 {
            pts.push(Vector3::new(0.01 * (i as f64 - 2.0), 0.01 * j as f64, 0.05));
        }
    }
    let grid = SourceGrid::new(pts, 0.01).unwrap();
    let sensors = SensorArray::new(fibonacci_sphere(6, 0.11, 0.3)).unwrap();
    Geometry::new(grid, sensors).unwrap()
}

pub fn tiny_instance(sigma_e: f64, n_time: usize, seed: u64) -> Tiny {
    let geometry = tiny_geometry();
    let lead_field = Arc::new(LeadField::new(&geometry).unwrap());
    let truth = DipoleConfig::new(vec![3]).unwrap();
    let g = lead_field.assemble(&truth);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = DMatrix::zeros(6, n_time);
    for t in 0..n_time {
        let q = DVector::from_vec(vec![0.0, 1.0, 0.3 * t as f64]);
        let mut col = &g * q;
        for v in col.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma_e * z;
        }
        y.set_column(t, &col);
    }
    let params = ModelParams {
        sigma_q: 1.0,
        sigma_e,
        poisson_lambda: 0.25,
        d_max: 2,
    };
    let model = SemiLinearModel::new(params, lead_field.clone()).unwrap();
    Tiny {
        grid: geometry.grid,
        lead_field,
        model,
        data: TimeSeriesData::new(y).unwrap(),
        truth,
    }
}

/// Exact posterior over every configuration with at most `d_max` dipoles.
pub fn enumerate_posterior(likelihood: &MarginalLikelihood) -> Vec<(DipoleConfig, f64)> {
    let model = likelihood.model();
    let configs = enumerate_configs(model.grid_size(), model.d_max());
    let logs: Vec<f64> = configs
        .iter()
        .map(|c| likelihood.log_prior(c) + likelihood.log_likelihood(c).unwrap())
        .collect();
    let norm = log_sum_exp(&logs);
    configs
        .into_iter()
        .zip(logs.iter().map(|l| (l - norm).exp()))
        .collect()
}

pub fn count_marginal(posterior: &[(DipoleConfig, f64)], d_max: usize) -> Vec<f64> {
    let mut out = vec![0.0; d_max + 1];
    for (c, p) in posterior {
        out[c.len()] += p;
    }
    out
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
