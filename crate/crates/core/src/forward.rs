//! Source grid, sensor array and lead field of the multi-dipole forward model.
//!
//! Sensors are radial magnetometers outside a spherically symmetric conductor.
//! For that configuration the radial field component does not depend on the
//! volume currents, so the free-space point-dipole expression is exact:
//!
//! ```text
//! b(s) = (mu0 / 4 pi) * [m x (s - z)] . (s / |s|) / |s - z|^3
//! ```
//!
//! Model units: one moment unit is [`MOMENT_UNIT`] A·m and fields are reported
//! in femtotesla ([`FIELD_UNIT`]), so a unit-strength dipole near the cortex
//! produces fields of a few hundred field units.

use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DipoleConfig;

/// Magnetic constant over 4π in SI units.
pub const MU0_OVER_4PI: f64 = 1e-7;
/// Dipole moment in A·m represented by one model moment unit.
pub const MOMENT_UNIT: f64 = 1e-8;
/// Tesla per model field unit.
pub const FIELD_UNIT: f64 = 1e-15;

/// Default lattice spacing and move radius, in meters.
pub const GRID_SPACING: f64 = 0.01;
const DEFAULT_GRID_RADIUS: f64 = 0.08;
const DEFAULT_SENSOR_RADIUS: f64 = 0.11;
const DEFAULT_SENSOR_COUNT: usize = 60;

/// Current schema version of the geometry JSON document.
pub const GEOMETRY_SCHEMA_VERSION: u32 = 1;

/// Radial component of the field of a point dipole, in tesla.
///
/// `source`, `sensor` in meters and `moment` in A·m.
pub fn unit_dipole_field(
    source: &Vector3<f64>,
    moment: &Vector3<f64>,
    sensor: &Vector3<f64>,
) -> Result<f64> {
    let sensor_norm = sensor.norm();
    if sensor_norm == 0.0 {
        return Err(Error::Domain(
            "sensor at the origin has no radial direction".into(),
        ));
    }
    let rel = sensor - source;
    let dist = rel.norm();
    if dist == 0.0 {
        return Err(Error::Domain("source coincides with sensor".into()));
    }
    let radial = sensor / sensor_norm;
    Ok(MU0_OVER_4PI * moment.cross(&rel).dot(&radial) / (dist * dist * dist))
}

/// Discretized source space.
#[derive(Debug, Clone)]
pub struct SourceGrid {
    points: Vec<Vector3<f64>>,
    neighbor_radius: f64,
    // Grid points within `neighbor_radius`, excluding the point itself, ascending.
    neighbors: Vec<Vec<usize>>,
}

impl SourceGrid {
    pub fn new(points: Vec<Vector3<f64>>, neighbor_radius: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("source grid has no points".into()));
        }
        if !(neighbor_radius > 0.0 && neighbor_radius.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "neighbor radius must be positive, got {neighbor_radius}"
            )));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite grid coordinate".into()));
        }
        // Lattice distances equal to the radius must count as inside.
        let reach = neighbor_radius * (1.0 + 1e-9);
        let mut neighbors = vec![Vec::new(); points.len()];
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let dist = (points[i] - points[j]).norm();
                if dist == 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "grid points {i} and {j} coincide"
                    )));
                }
                if dist <= reach {
                    neighbors[i].push(j);
                    neighbors[j].push(i);
                }
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            points,
            neighbor_radius,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &Vector3<f64> {
        &self.points[index]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn neighbor_radius(&self) -> f64 {
        self.neighbor_radius
    }

    /// Grid points within the neighbor radius of `index`, not including `index`.
    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.neighbors[index]
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        (self.points[a] - self.points[b]).norm()
    }

    fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

/// Radial magnetometers; each measures the field component along its position vector.
#[derive(Debug, Clone)]
pub struct SensorArray {
    positions: Vec<Vector3<f64>>,
}

impl SensorArray {
    pub fn new(positions: Vec<Vector3<f64>>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("sensor array is empty".into()));
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) || p.norm() == 0.0 {
                return Err(Error::InvalidInput(format!(
                    "sensor {i} has an invalid position"
                )));
            }
        }
        Ok(Self { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }
}

/// A source grid together with a sensor array enclosing it.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub grid: SourceGrid,
    pub sensors: SensorArray,
}

/// On-disk form of [`Geometry`]: coordinates in meters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometryFile {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub grid: Vec<[f64; 3]>,
    pub sensors: Vec<[f64; 3]>,
    #[serde(default = "default_neighbor_radius")]
    pub neighbor_radius: f64,
}

fn default_schema_version() -> u32 {
    GEOMETRY_SCHEMA_VERSION
}

fn default_neighbor_radius() -> f64 {
    GRID_SPACING
}

impl Geometry {
    pub fn new(grid: SourceGrid, sensors: SensorArray) -> Result<Self> {
        let max_grid = grid.max_norm();
        if let Some(i) = sensors.positions.iter().position(|p| p.norm() <= max_grid) {
            return Err(Error::InvalidInput(format!(
                "sensor {i} is not outside the source grid (|s| <= {max_grid})"
            )));
        }
        Ok(Self { grid, sensors })
    }

    pub fn to_file(&self) -> GeometryFile {
        let conv = |v: &Vector3<f64>| [v.x, v.y, v.z];
        GeometryFile {
            schema_version: GEOMETRY_SCHEMA_VERSION,
            grid: self.grid.points.iter().map(conv).collect(),
            sensors: self.sensors.positions.iter().map(conv).collect(),
            neighbor_radius: self.grid.neighbor_radius,
        }
    }

    pub fn from_file(file: &GeometryFile) -> Result<Self> {
        let conv = |a: &[f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let grid = SourceGrid::new(file.grid.iter().map(conv).collect(), file.neighbor_radius)?;
        let sensors = SensorArray::new(file.sensors.iter().map(conv).collect())?;
        Geometry::new(grid, sensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: GeometryFile = serde_json::from_str(&text)?;
        Geometry::from_file(&file)
    }
}

/// The default head geometry.
///
/// Grid: every point of a 1 cm cubic lattice within 8 cm of the origin.
/// Sensors: a 60-point Fibonacci lattice on the 11 cm sphere, with the
/// azimuth of the spiral drawn from `seed`.
pub fn build_default_geometry(seed: u64) -> Geometry {
    let steps = (DEFAULT_GRID_RADIUS / GRID_SPACING).round() as i64;
    let mut points = Vec::new();
    for i in -steps..=steps {
        for j in -steps..=steps {
            for k in -steps..=steps {
                if i * i + j * j + k * k <= steps * steps {
                    points.push(Vector3::new(i as f64, j as f64, k as f64) * GRID_SPACING);
                }
            }
        }
    }
    let grid = SourceGrid::new(points, GRID_SPACING).expect("lattice points are distinct");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random::<f64>() * std::f64::consts::TAU;
    let sensors = fibonacci_sphere(DEFAULT_SENSOR_COUNT, DEFAULT_SENSOR_RADIUS, offset);
    let sensors = SensorArray::new(sensors).expect("sensors are off the origin");
    Geometry::new(grid, sensors).expect("sensor sphere encloses the grid")
}

/// `count` quasi-uniform points on the sphere of radius `radius`.
pub fn fibonacci_sphere(count: usize, radius: f64, azimuth_offset: f64) -> Vec<Vector3<f64>> {
    let golden_angle = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / count as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = azimuth_offset + i as f64 * golden_angle;
            let unit = Vector3::new(rho * phi.cos(), rho * phi.sin(), z);
            unit.normalize() * radius
        })
        .collect()
}

/// Precomputed lead field: one `N_s x 3` block per grid point, in field units
/// per moment unit.
#[derive(Debug, Clone)]
pub struct LeadField {
    grid_size: usize,
    // N_s x 3 N_C; columns 3c..3c+3 hold the block of grid point c.
    blocks: DMatrix<f64>,
}

impl LeadField {
    pub fn new(geometry: &Geometry) -> Result<Self> {
        let n_s = geometry.sensors.len();
        let n_c = geometry.grid.len();
        let scale = MOMENT_UNIT / FIELD_UNIT;
        let mut blocks = DMatrix::zeros(n_s, 3 * n_c);
        for (c, source) in geometry.grid.points().iter().enumerate() {
            for axis in 0..3 {
                let mut moment = Vector3::zeros();
                moment[axis] = scale;
                for (s, sensor) in geometry.sensors.positions().iter().enumerate() {
                    blocks[(s, 3 * c + axis)] = unit_dipole_field(source, &moment, sensor)?;
                }
            }
        }
        Self::from_blocks(blocks)
    }

    /// Wraps an explicit `N_s x 3 N_C` matrix of column blocks.
    pub fn from_blocks(blocks: DMatrix<f64>) -> Result<Self> {
        if !blocks.ncols().is_multiple_of(3) || blocks.ncols() == 0 || blocks.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "lead field must be N_s x 3N_C, got {}x{}",
                blocks.nrows(),
                blocks.ncols()
            )));
        }
        if !blocks.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(
                "lead field has non-finite entries".into(),
            ));
        }
        Ok(Self {
            grid_size: blocks.ncols() / 3,
            blocks,
        })
    }

    pub fn sensor_count(&self) -> usize {
        self.blocks.nrows()
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// All blocks side by side (`N_s x 3 N_C`).
    pub fn blocks(&self) -> &DMatrix<f64> {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.blocks.columns(3 * index, 3)
    }

    /// `G(r)`: the blocks of the configuration's grid points, in index order.
    pub fn assemble(&self, config: &DipoleConfig) -> DMatrix<f64> {
        self.assemble_indices(config.indices())
    }

    /// Same as [`assemble`](Self::assemble) for an arbitrary index order.
    pub fn assemble_indices(&self, indices: &[usize]) -> DMatrix<f64> {
        let n_s = self.sensor_count();
        let mut g = DMatrix::zeros(n_s, 3 * indices.len());
        for (k, &c) in indices.iter().enumerate() {
            g.columns_mut(3 * k, 3).copy_from(&self.block(c));
        }
        g
    }
}
