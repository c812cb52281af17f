//! Sensor graph: geographic locations, Gaussian-kernel edge weights, and
//! the symmetric normalization used by the spatial mixing layers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Mean Earth radius in kilometers.
const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    #[serde(rename = "sensor_id")]
    pub id: String,
    #[serde(rename = "latitude")]
    pub lat: f64,
    #[serde(rename = "longitude")]
    pub lon: f64,
}

/// Great-circle distance in kilometers.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Thresholded Gaussian kernel over pairwise distances:
/// w_ij = exp(-d_ij^2 / sigma^2) kept when >= threshold, else 0. Diagonal is
/// zero (self-loops enter during normalization). `sigma` defaults to the
/// population std of the nonzero pairwise distances.
pub fn gaussian_weights(sensors: &[Sensor], sigma: Option<f64>, threshold: f64) -> Result<Matrix> {
    let n = sensors.len();
    if n == 0 {
        return Err(Error::invalid("no sensors"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut dist = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let d = haversine_km(sensors[i].lat, sensors[i].lon, sensors[j].lat, sensors[j].lon);
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }
    let sigma = match sigma {
        Some(s) if s > 0.0 => s,
        Some(s) => return Err(Error::invalid(format!("sigma {s} must be positive"))),
        None => {
            let mut ds = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if dist.get(i, j) > 0.0 {
                        ds.push(dist.get(i, j));
                    }
                }
            }
            if ds.is_empty() {
                return Err(Error::invalid(
                    "all pairwise distances are zero; pass an explicit sigma",
                ));
            }
            let mean = ds.iter().sum::<f64>() / ds.len() as f64;
            let var = ds.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / ds.len() as f64;
            let std = var.sqrt();
            if std > 0.0 {
                std
            } else {
                // Distances exist but are all equal; any positive scale works.
                mean
            }
        }
    };
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = dist.get(i, j);
            let v = (-(d * d) / (sigma * sigma)).exp();
            if v >= threshold {
                w.set(i, j, v);
            }
        }
    }
    Ok(w)
}

/// Symmetric normalization with self-loops: D^{-1/2} (W + I) D^{-1/2},
/// where D is the degree of W + I. Requires a square symmetric nonnegative
/// input. The output has spectral radius 1, attained by the vector sqrt(d).
pub fn normalize_adjacency(w: &Matrix) -> Result<Matrix> {
    let n = w.rows();
    if w.cols() != n {
        return Err(Error::invalid(format!("adjacency must be square, got {:?}", w.shape())));
    }
    for i in 0..n {
        for j in 0..n {
            let v = w.get(i, j);
            if v < 0.0 || !v.is_finite() {
                return Err(Error::invalid(format!("adjacency entry ({i}, {j}) = {v}")));
            }
            if (v - w.get(j, i)).abs() > 1e-9 {
                return Err(Error::invalid(format!("adjacency not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut inv_sqrt_deg = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = w.row(i).iter().sum::<f64>() + 1.0;
        inv_sqrt_deg[i] = 1.0 / deg.sqrt();
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = w.get(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, a * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RoadNetwork {
    pub sensors: Vec<Sensor>,
    /// Thresholded Gaussian weights, zero diagonal.
    pub weights: Matrix,
    /// Normalized adjacency with self-loops, ready for spatial mixing.
    pub adjacency: Matrix,
}

impl RoadNetwork {
    pub fn build(sensors: Vec<Sensor>, sigma: Option<f64>, threshold: f64) -> Result<Self> {
        let weights = gaussian_weights(&sensors, sigma, threshold)?;
        let adjacency = normalize_adjacency(&weights)?;
        Ok(RoadNetwork { sensors, weights, adjacency })
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    /// Indices with a retained edge to `i`, excluding `i` itself.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.len()).filter(|&j| j != i && self.weights.get(i, j) > 0.0).collect()
    }

    pub fn index_of(&self, sensor_id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == sensor_id)
    }
}

/// Reads `sensor_id,latitude,longitude` rows.
pub fn load_sensors_csv(path: &Path) -> Result<Vec<Sensor>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::invalid(format!("cannot open {}: {e}", path.display())))?;
    let mut sensors = Vec::new();
    for row in reader.deserialize() {
        let sensor: Sensor =
            row.map_err(|e| Error::invalid(format!("bad sensor row in {}: {e}", path.display())))?;
        if !(-90.0..=90.0).contains(&sensor.lat) || !(-180.0..=180.0).contains(&sensor.lon) {
            return Err(Error::invalid(format!(
                "sensor {} has out-of-range coordinates ({}, {})",
                sensor.id, sensor.lat, sensor.lon
            )));
        }
        sensors.push(sensor);
    }
    if sensors.is_empty() {
        return Err(Error::invalid(format!("{} contains no sensors", path.display())));
    }
    Ok(sensors)
}

pub fn save_sensors_csv(path: &Path, sensors: &[Sensor]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))?;
    for s in sensors {
        writer
            .serialize(s)
            .map_err(|e| Error::invalid(format!("cannot serialize sensor {}: {e}", s.id)))?;
    }
    writer.flush()?;
    Ok(())
}
