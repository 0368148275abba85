//! The semi-linear Gaussian model `y_t = G(r) q_t + e_t`.
//!
//! With `q_t ~ N(0, sigma_q^2 I)` and `e_t ~ N(0, sigma_e^2 I)` independent across
//! time, the moments integrate out in closed form:
//!
//! * `pi(y | r) = prod_t N(y_t; 0, Gamma(r))`, `Gamma(r) = sigma_q^2 G G^T + sigma_e^2 I`;
//! * `pi(q_t | r, y)` is Gaussian with a covariance shared by all time points.
//!
//! The time-series likelihood is evaluated through the `3d x 3d` capacitance
//! matrix `M = I + (sigma_q^2 / sigma_e^2) G^T G`: `logdet Gamma` follows from the
//! determinant lemma and the quadratic forms from the Woodbury identity applied
//! to the data scatter `S = sum_t y_t y_t^T`, so the cost of an evaluation does
//! not depend on `N_t`. The single-column evaluator factorizes `Gamma` itself and
//! serves as an independent route.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::LeadField;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative floor on the Cholesky diagonal of `Gamma(r)`, in units of `sigma_e`^2.
const FACTOR_FLOOR: f64 = 1e-12;

/// The non-linear unknown: a set of distinct grid indices kept in ascending order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct DipoleConfig {
    indices: Vec<usize>,
}

impl DipoleConfig {
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
        }
    }

    /// Sorts the indices; rejects duplicates.
    pub fn new(mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "dipole locations must be distinct: {indices:?}"
            )));
        }
        Ok(Self { indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Configuration with one more dipole at the unoccupied point `index`.
    pub fn with_added(&self, index: usize) -> Self {
        let mut indices = self.indices.clone();
        match indices.binary_search(&index) {
            Ok(_) => panic!("grid point {index} already occupied"),
            Err(pos) => indices.insert(pos, index),
        }
        Self { indices }
    }

    /// Configuration without the dipole at `index`.
    pub fn without(&self, index: usize) -> Self {
        let mut indices = self.indices.clone();
        let pos = indices
            .binary_search(&index)
            .expect("index not in configuration");
        indices.remove(pos);
        Self { indices }
    }

    /// Moves the dipole at `from` to the unoccupied point `to`.
    pub fn moved(&self, from: usize, to: usize) -> Self {
        if from == to {
            return self.clone();
        }
        self.without(from).with_added(to)
    }

    /// Checks the grid bound and the dipole-count truncation.
    pub fn validate(&self, grid_size: usize, d_max: usize) -> Result<()> {
        if self.len() > d_max {
            return Err(Error::InvalidInput(format!(
                "{} dipoles exceed d_max = {d_max}",
                self.len()
            )));
        }
        if let Some(&last) = self.indices.last() {
            if last >= grid_size {
                return Err(Error::InvalidInput(format!(
                    "grid index {last} out of range for {grid_size} points"
                )));
            }
        }
        Ok(())
    }
}

impl TryFrom<Vec<usize>> for DipoleConfig {
    type Error = Error;
    fn try_from(indices: Vec<usize>) -> Result<Self> {
        Self::new(indices)
    }
}

impl From<DipoleConfig> for Vec<usize> {
    fn from(config: DipoleConfig) -> Self {
        config.indices
    }
}

/// Sensor measurements, `N_s` rows by `N_t` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesData {
    values: DMatrix<f64>,
    scatter: DMatrix<f64>,
}

impl TimeSeriesData {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput("time series must be non-empty".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "time series has non-finite entries".into(),
            ));
        }
        let scatter = &values * values.transpose();
        Ok(Self { values, scatter })
    }

    /// Builds from row-major values (one row per sensor).
    pub fn from_row_major(n_sensors: usize, n_time: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n_sensors * n_time {
            return Err(Error::InvalidInput(format!(
                "expected {} values for {n_sensors}x{n_time}, got {}",
                n_sensors * n_time,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n_sensors, n_time, values))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.values.transpose().iter().copied().collect()
    }

    pub fn n_sensors(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_time(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column(&self, t: usize) -> DVector<f64> {
        self.values.column(t).into_owned()
    }

    /// `sum_t y_t y_t^T`.
    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    /// Columns `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.n_time() {
            return Err(Error::InvalidInput(format!(
                "columns {start}..{} out of range for {} time points",
                start + len,
                self.n_time()
            )));
        }
        Self::new(self.values.columns(start, len).into_owned())
    }
}

/// Hyper-parameters of the semi-linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Prior standard deviation of each moment component.
    pub sigma_q: f64,
    /// Noise standard deviation.
    pub sigma_e: f64,
    /// Mean of the Poisson prior on the dipole count.
    #[serde(default = "default_lambda")]
    pub poisson_lambda: f64,
    /// Largest dipole count with prior mass.
    #[serde(default = "default_d_max")]
    pub d_max: usize,
}

fn default_lambda() -> f64 {
    0.25
}

fn default_d_max() -> usize {
    10
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            sigma_q: 1.0,
            sigma_e: 1.0,
            poisson_lambda: default_lambda(),
            d_max: default_d_max(),
        }
    }
}

/// Model parameters bound to a lead field.
#[derive(Debug, Clone)]
pub struct SemiLinearModel {
    params: ModelParams,
    lead_field: Arc<LeadField>,
    log_count_norm: f64,
}

impl SemiLinearModel {
    pub fn new(params: ModelParams, lead_field: Arc<LeadField>) -> Result<Self> {
        let ModelParams {
            sigma_q,
            sigma_e,
            poisson_lambda,
            d_max,
        } = params;
        for (name, value) in [
            ("sigma_q", sigma_q),
            ("sigma_e", sigma_e),
            ("poisson_lambda", poisson_lambda),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if d_max == 0 || d_max > lead_field.grid_size() {
            return Err(Error::Config(format!(
                "d_max must lie in [1, {}], got {d_max}",
                lead_field.grid_size()
            )));
        }
        let log_terms: Vec<f64> = (0..=d_max)
            .map(|d| log_poisson(d, poisson_lambda))
            .collect();
        let log_count_norm = log_sum_exp(&log_terms);
        Ok(Self {
            params,
            lead_field,
            log_count_norm,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn sigma_q(&self) -> f64 {
        self.params.sigma_q
    }

    pub fn sigma_e(&self) -> f64 {
        self.params.sigma_e
    }

    pub fn d_max(&self) -> usize {
        self.params.d_max
    }

    pub fn lead_field(&self) -> &LeadField {
        &self.lead_field
    }

    pub fn lead_field_arc(&self) -> &Arc<LeadField> {
        &self.lead_field
    }

    pub fn grid_size(&self) -> usize {
        self.lead_field.grid_size()
    }

    pub fn sensor_count(&self) -> usize {
        self.lead_field.sensor_count()
    }

    /// Same model with a different noise level.
    pub fn with_sigma_e(&self, sigma_e: f64) -> Result<Self> {
        Self::new(
            ModelParams {
                sigma_e,
                ..self.params
            },
            self.lead_field.clone(),
        )
    }

    /// Log-probability of `d` dipoles under the truncated Poisson prior.
    pub fn log_count_prior(&self, d: usize) -> f64 {
        if d > self.params.d_max {
            return f64::NEG_INFINITY;
        }
        log_poisson(d, self.params.poisson_lambda) - self.log_count_norm
    }

    fn check_data(&self, y: &TimeSeriesData) -> Result<()> {
        if y.n_sensors() != self.sensor_count() {
            return Err(Error::Config(format!(
                "data has {} sensors, lead field has {}",
                y.n_sensors(),
                self.sensor_count()
            )));
        }
        Ok(())
    }
}

fn log_poisson(d: usize, lambda: f64) -> f64 {
    -lambda + d as f64 * lambda.ln() - ln_factorial(d)
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `ln C(n, k)`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let k = k.min(n - k);
    (0..k)
        .map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln())
        .sum()
}

/// `ln sum_i exp(x_i)`, shifted by the maximum. Empty or all `-inf` input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log prior of a configuration: truncated Poisson count, uniform over
/// unordered sets of distinct grid points.
pub fn log_prior(model: &SemiLinearModel, r: &DipoleConfig) -> f64 {
    let d = r.len();
    model.log_count_prior(d) - ln_binomial(model.grid_size(), d)
}

/// `log N(y_t; 0, Gamma(r))`, factorizing the `N_s x N_s` matrix `Gamma(r)`.
pub fn log_marginal_likelihood_single(
    model: &SemiLinearModel,
    r: &DipoleConfig,
    y_t: &DVector<f64>,
) -> Result<f64> {
    if y_t.len() != model.sensor_count() {
        return Err(Error::Config(format!(
            "observation has {} entries, lead field has {} sensors",
            y_t.len(),
            model.sensor_count()
        )));
    }
    if !y_t.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(
            "observation has non-finite entries".into(),
        ));
    }
    let gamma = full_covariance(model, r, model.sigma_e());
    let (chol, logdet) = factor_covariance(gamma, model.sigma_e())?;
    let quad = y_t.dot(&chol.solve(y_t));
    let n = y_t.len() as f64;
    Ok(-0.5 * (n * LN_2PI + logdet + quad))
}

/// `Gamma(r) = sigma_q^2 G G^T + sigma_e^2 I`.
pub fn full_covariance(model: &SemiLinearModel, r: &DipoleConfig, sigma_e: f64) -> DMatrix<f64> {
    let g = model.lead_field().assemble(r);
    let n_s = model.sensor_count();
    let sq = model.sigma_q() * model.sigma_q();
    let mut gamma = &g * g.transpose() * sq;
    for i in 0..n_s {
        gamma[(i, i)] += sigma_e * sigma_e;
    }
    gamma
}

fn factor_covariance(gamma: DMatrix<f64>, sigma_e: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let chol = Cholesky::new(gamma)
        .ok_or_else(|| Error::Conditioning("Gamma(r) is not positive definite".into()))?;
    let l = chol.l_dirty();
    let floor = FACTOR_FLOOR * sigma_e * sigma_e;
    let mut logdet = 0.0;
    for i in 0..l.nrows() {
        let v = l[(i, i)];
        if !(v >= floor) {
            return Err(Error::Conditioning(format!(
                "Cholesky diagonal {v:e} below floor {floor:e}"
            )));
        }
        logdet += 2.0 * v.ln();
    }
    Ok((chol, logdet))
}

/// Factorized capacitance matrix of one configuration.
struct Capacitance {
    chol: Cholesky<f64, Dyn>,
    // sigma_q^2 / sigma_e^2
    ratio: f64,
    logdet_gamma: f64,
}

impl Capacitance {
    fn new(g: &DMatrix<f64>, n_sensors: usize, sigma_q: f64, sigma_e: f64) -> Result<Self> {
        let ratio = (sigma_q * sigma_q) / (sigma_e * sigma_e);
        let k = g.ncols();
        let mut m = g.tr_mul(g) * ratio;
        for i in 0..k {
            m[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(m).ok_or_else(|| {
            Error::Conditioning("capacitance matrix is not positive definite".into())
        })?;
        let l = chol.l_dirty();
        let logdet_m: f64 = (0..k).map(|i| 2.0 * l[(i, i)].ln()).sum();
        let logdet_gamma = n_sensors as f64 * (sigma_e * sigma_e).ln() + logdet_m;
        Ok(Self {
            chol,
            ratio,
            logdet_gamma,
        })
    }

    /// `sum_t y_t^T Gamma^{-1} y_t` from `tr S` and `G^T S G`.
    fn quadratic_sum(&self, trace_s: f64, gt_s_g: &DMatrix<f64>, sigma_e: f64) -> Result<f64> {
        let reduction = if gt_s_g.ncols() == 0 {
            0.0
        } else {
            self.chol.solve(gt_s_g).trace() * self.ratio
        };
        let quad = (trace_s - reduction) / (sigma_e * sigma_e);
        // Exact value is nonnegative; tolerate round-off only.
        if quad < -1e-9 * trace_s / (sigma_e * sigma_e) {
            return Err(Error::Conditioning(format!(
                "negative quadratic form {quad:e} from cancellation"
            )));
        }
        Ok(quad.max(0.0))
    }
}

/// `log pi(y | r) = sum_t log N(y_t; 0, Gamma(r))`.
///
/// One capacitance factorization per call; the data enter only through their
/// scatter matrix, so the cost is independent of `N_t`.
pub fn log_marginal_likelihood(
    model: &SemiLinearModel,
    r: &DipoleConfig,
    y: &TimeSeriesData,
) -> Result<f64> {
    model.check_data(y)?;
    let g = model.lead_field().assemble(r);
    let sg = y.scatter() * &g;
    marginal_from_parts(model, &g, &sg, y, model.sigma_e())
}

fn marginal_from_parts(
    model: &SemiLinearModel,
    g: &DMatrix<f64>,
    sg: &DMatrix<f64>,
    y: &TimeSeriesData,
    sigma_e: f64,
) -> Result<f64> {
    let n_s = y.n_sensors();
    let n_t = y.n_time() as f64;
    let cap = Capacitance::new(g, n_s, model.sigma_q(), sigma_e)?;
    let gt_s_g = g.tr_mul(sg);
    let quad = cap.quadratic_sum(y.scatter().trace(), &gt_s_g, sigma_e)?;
    Ok(-0.5 * (n_t * cap.logdet_gamma + quad + n_t * n_s as f64 * LN_2PI))
}

/// Likelihood evaluator bound to one dataset.
///
/// Caches `S G_c` for every grid point so an evaluation only touches the
/// `N_s x 3d` blocks of the configuration.
#[derive(Debug, Clone)]
pub struct MarginalLikelihood {
    model: SemiLinearModel,
    data: TimeSeriesData,
    projected: DMatrix<f64>,
}

impl MarginalLikelihood {
    pub fn new(model: SemiLinearModel, data: TimeSeriesData) -> Result<Self> {
        model.check_data(&data)?;
        let projected = data.scatter() * model.lead_field().blocks();
        Ok(Self {
            model,
            data,
            projected,
        })
    }

    pub fn model(&self) -> &SemiLinearModel {
        &self.model
    }

    pub fn data(&self) -> &TimeSeriesData {
        &self.data
    }

    pub fn log_likelihood(&self, r: &DipoleConfig) -> Result<f64> {
        let g = self.model.lead_field().assemble(r);
        let n_s = self.model.sensor_count();
        let mut sg = DMatrix::zeros(n_s, 3 * r.len());
        for (k, &c) in r.indices().iter().enumerate() {
            sg.columns_mut(3 * k, 3)
                .copy_from(&self.projected.columns(3 * c, 3));
        }
        marginal_from_parts(&self.model, &g, &sg, &self.data, self.model.sigma_e())
    }

    pub fn log_prior(&self, r: &DipoleConfig) -> f64 {
        log_prior(&self.model, r)
    }
}

/// Gaussian conditional posterior of the moments given `r` and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentPosterior {
    /// One mean of length `3d` per time point.
    pub means: Vec<DVector<f64>>,
    /// Covariance shared by all time points, `3d x 3d`.
    pub covariance: DMatrix<f64>,
}

impl MomentPosterior {
    pub fn dipole_count(&self) -> usize {
        self.covariance.nrows() / 3
    }

    /// `|q_t^(k)|` for each time point.
    pub fn strengths(&self, dipole: usize) -> Vec<f64> {
        self.means
            .iter()
            .map(|m| m.rows(3 * dipole, 3).norm())
            .collect()
    }
}

/// Posterior mean and covariance of `q_t` given `r` and `y`.
///
/// With `A = [G; (sigma_e / sigma_q) I]` and `A = Q R`, the mean is the
/// regularized least-squares solution `R^{-1} Q^T [y_t; 0]` and the
/// covariance is `sigma_e^2 R^{-1} R^{-T}`. Working with `R` instead of the
/// capacitance matrix `I + (sigma_q / sigma_e)^2 G^T G` keeps the solve
/// accurate when `sigma_e` is tiny and `G` has (near) silent directions.
pub fn conditional_moment_posterior(
    model: &SemiLinearModel,
    r: &DipoleConfig,
    y: &TimeSeriesData,
) -> Result<MomentPosterior> {
    if r.is_empty() {
        return Err(Error::InvalidInput(
            "conditional moment posterior needs at least one dipole".into(),
        ));
    }
    model.check_data(y)?;
    let g = model.lead_field().assemble(r);
    let (n_s, k) = g.shape();
    let damping = model.sigma_e() / model.sigma_q();
    let mut stacked = DMatrix::zeros(n_s + k, k);
    stacked.rows_mut(0, n_s).copy_from(&g);
    for i in 0..k {
        stacked[(n_s + i, i)] = damping;
    }
    let qr = stacked.qr();
    let rfac = qr.r();
    if (0..k).any(|i| rfac[(i, i)] == 0.0 || !rfac[(i, i)].is_finite()) {
        return Err(Error::Conditioning(
            "singular regularized least-squares factor".into(),
        ));
    }
    let mut rhs = DMatrix::zeros(n_s + k, y.n_time());
    rhs.rows_mut(0, n_s).copy_from(y.values());
    qr.q_tr_mul(&mut rhs);
    let solved = rfac
        .solve_upper_triangular(&rhs.rows(0, k).into_owned())
        .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
    let r_inv = rfac
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
    let mut covariance = &r_inv * r_inv.transpose() * (model.sigma_e() * model.sigma_e());
    for i in 0..k {
        for j in (i + 1)..k {
            let avg = 0.5 * (covariance[(i, j)] + covariance[(j, i)]);
            covariance[(i, j)] = avg;
            covariance[(j, i)] = avg;
        }
    }
    let means = (0..y.n_time())
        .map(|t| solved.column(t).into_owned())
        .collect();
    Ok(MomentPosterior { means, covariance })
}

/// Unnormalized log-densities of the two tempered paths at exponent `alpha`.
#[derive(Debug)]
pub struct TemperedDiagnostic {
    /// `log pi(r) + log N(y; 0, sigma_q^2 G G^T + sigma_e^2 / alpha I)`: the
    /// r-marginal of the tempered joint target. Undefined at `alpha = 0`.
    pub full_path: Result<f64>,
    /// `log pi(r) + alpha log pi(y | r)`: the tempered marginal targeted by the
    /// semi-analytic sampler. Equal to
    /// `log pi(r) + N_t (1 - alpha)/2 logdet Gamma + log N(y; 0, Gamma / alpha)`
    /// up to an r-independent constant.
    pub semi_analytic_path: f64,
}

pub fn tempered_diagnostic(
    model: &SemiLinearModel,
    r: &DipoleConfig,
    y: &TimeSeriesData,
    alpha: f64,
) -> Result<TemperedDiagnostic> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    let prior = log_prior(model, r);
    let semi_analytic_path = if alpha == 0.0 {
        prior
    } else {
        prior + alpha * log_marginal_likelihood(model, r, y)?
    };
    let full_path = if alpha == 0.0 {
        Err(Error::Domain(
            "noise covariance scaled by 1/alpha is undefined at alpha = 0".into(),
        ))
    } else {
        model.check_data(y)?;
        let g = model.lead_field().assemble(r);
        let sg = y.scatter() * &g;
        marginal_from_parts(model, &g, &sg, y, model.sigma_e() / alpha.sqrt()).map(|v| prior + v)
    };
    Ok(TemperedDiagnostic {
        full_path,
        semi_analytic_path,
    })
}
