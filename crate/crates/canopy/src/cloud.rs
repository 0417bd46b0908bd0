//! Point clouds: loading, normalization, and training-time augmentation.
//!
//! Clouds are stored as plain UTF-8 CSV with the header
//! `x,y,z,return_number,num_returns`, one point per row. Coordinates are in
//! meters with `z` already measured as height above ground (ground points at 0).

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::CanopyError;
use crate::Result;

/// Tolerance below which slightly negative heights are clamped to zero.
const NEGATIVE_Z_TOLERANCE: f64 = 1e-6;

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// 1-based index of this return within its pulse.
    pub return_index: u32,
    /// Total returns recorded for the pulse.
    pub return_count: u32,
}

impl Point {
    pub fn is_first_return(&self) -> bool {
        self.return_index == 1
    }
}

/// A plot's point cloud plus the global metadata the models consume.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub plot_id: String,
    /// Signed gap in years between field measurement and scan.
    pub time_gap_years: f64,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_z(&self) -> f64 {
        self.points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mean of the x and y coordinates.
    pub fn xy_centroid(&self) -> (f64, f64) {
        let n = self.points.len() as f64;
        let sx: f64 = self.points.iter().map(|p| p.x).sum();
        let sy: f64 = self.points.iter().map(|p| p.y).sum();
        (sx / n, sy / n)
    }
}

/// Read a cloud CSV. `plot_id` and `time_gap_years` come from the manifest, not
/// the file.
pub fn load_cloud(path: &Path, plot_id: &str, time_gap_years: f64) -> Result<PointCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => CanopyError::CloudIo {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            },
            _ => CanopyError::InvalidCloud {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
        })?;

    let invalid = |reason: String| CanopyError::InvalidCloud {
        path: path.to_path_buf(),
        reason,
    };

    let headers = reader
        .headers()
        .map_err(|e| invalid(e.to_string()))?
        .clone();
    let expected = ["x", "y", "z", "return_number", "num_returns"];
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(invalid(format!(
            "expected header {expected:?}, got {got:?}"
        )));
    }

    let mut points = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| invalid(e.to_string()))?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| invalid(format!("row {row_idx}: missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| invalid(format!("row {row_idx}: {e}")))
        };
        let x = field(0)?;
        let y = field(1)?;
        let mut z = field(2)?;
        let return_index = field(3)? as u32;
        let return_count = field(4)? as u32;

        if z < -NEGATIVE_Z_TOLERANCE {
            return Err(invalid(format!("row {row_idx}: negative height z = {z}")));
        }
        z = z.max(0.0);
        if return_index < 1 || return_count < 1 {
            return Err(invalid(format!(
                "row {row_idx}: return indices must be >= 1"
            )));
        }
        if return_index > return_count {
            return Err(invalid(format!(
                "row {row_idx}: return_number {return_index} > num_returns {return_count}"
            )));
        }
        points.push(Point {
            x,
            y,
            z,
            return_index,
            return_count,
        });
    }

    if points.is_empty() {
        return Err(CanopyError::EmptyCloud);
    }
    Ok(PointCloud {
        points,
        plot_id: plot_id.to_string(),
        time_gap_years,
    })
}

/// Write a cloud CSV in the canonical column order.
pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::from("x,y,z,return_number,num_returns\n");
    for p in &cloud.points {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.x, p.y, p.z, p.return_index, p.return_count
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| CanopyError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| CanopyError::io(path, e))?;
    Ok(())
}

/// Center x and y on their per-cloud mean and divide by `radius_m` so they lie
/// near [-1, 1] (no clamping); z stays in meters. Returns a new cloud.
pub fn normalize_cloud(cloud: &PointCloud, radius_m: f64) -> Result<PointCloud> {
    assert!(radius_m > 0.0, "radius_m must be positive");
    if cloud.is_empty() {
        return Err(CanopyError::EmptyCloud);
    }
    let (cx, cy) = cloud.xy_centroid();
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            x: (p.x - cx) / radius_m,
            y: (p.y - cy) / radius_m,
            ..*p
        })
        .collect();
    Ok(PointCloud {
        points,
        plot_id: cloud.plot_id.clone(),
        time_gap_years: cloud.time_gap_years,
    })
}

/// Augmentation switches and parameters.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub dropout: bool,
    /// Probability that a sample gets point dropout at all.
    pub sample_dropout_prob: f64,
    /// Per-point drop probability when dropout fires.
    pub point_dropout_rate: f64,
    pub jitter: bool,
    /// Variance of the underlying normal for coordinate jitter.
    pub jitter_variance: f64,
    /// Truncation bound: samples outside [-clip, clip] are rejected.
    pub jitter_clip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate: true,
            dropout: true,
            sample_dropout_prob: 0.5,
            point_dropout_rate: 0.2,
            jitter: true,
            jitter_variance: 0.001,
            jitter_clip: 0.05,
        }
    }
}

impl AugmentConfig {
    /// Identity augmentation, useful for evaluation paths and tests.
    pub fn off() -> Self {
        AugmentConfig {
            rotate: false,
            dropout: false,
            jitter: false,
            ..AugmentConfig::default()
        }
    }
}

/// RNG stream for one (seed, plot, epoch) triple. Streams are derived by
/// hashing so that the schedule of parallel data loading cannot change them.
pub fn sample_rng(global_seed: u64, plot_id: &str, epoch: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(plot_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(epoch.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Rotate x,y about the cloud's xy centroid by `theta` radians; z unchanged.
pub fn rotate_about_centroid(cloud: &PointCloud, theta: f64) -> PointCloud {
    let (cx, cy) = cloud.xy_centroid();
    let (sin, cos) = theta.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let dx = p.x - cx;
            let dy = p.y - cy;
            Point {
                x: cx + cos * dx - sin * dy,
                y: cy + sin * dx + cos * dy,
                ..*p
            }
        })
        .collect();
    PointCloud {
        points,
        ..cloud.clone()
    }
}

/// Independent point dropout at `rate`, keeping at least one point.
pub fn dropout_points(cloud: &PointCloud, rate: f64, rng: &mut impl Rng) -> PointCloud {
    let mut points: Vec<Point> = cloud
        .points
        .iter()
        .filter(|_| rng.gen::<f64>() >= rate)
        .copied()
        .collect();
    if points.is_empty() {
        points.push(cloud.points[0]);
    }
    PointCloud {
        points,
        ..cloud.clone()
    }
}

/// One draw from a zero-mean truncated normal: rejection sampling on the
/// underlying N(0, sigma^2) until the draw lands inside [-clip, clip].
pub fn truncated_normal(sigma: f64, clip: f64, rng: &mut impl Rng) -> f64 {
    loop {
        let v: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * sigma;
        if v.abs() <= clip {
            return v;
        }
    }
}

/// Add truncated-normal noise to every coordinate of every point.
pub fn jitter_points(
    cloud: &PointCloud,
    variance: f64,
    clip: f64,
    rng: &mut impl Rng,
) -> PointCloud {
    let sigma = variance.sqrt();
    let points = cloud
        .points
        .iter()
        .map(|p| Point {
            x: p.x + truncated_normal(sigma, clip, rng),
            y: p.y + truncated_normal(sigma, clip, rng),
            z: p.z + truncated_normal(sigma, clip, rng),
            ..*p
        })
        .collect();
    PointCloud {
        points,
        ..cloud.clone()
    }
}

/// Training augmentation: rotation about z, sample-gated point dropout, then
/// coordinate jitter, in that order. Deterministic given the RNG stream; with
/// all switches off this is the identity.
pub fn augment(cloud: &PointCloud, rng: &mut impl Rng, cfg: &AugmentConfig) -> PointCloud {
    let mut out = cloud.clone();
    if cfg.rotate {
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        out = rotate_about_centroid(&out, theta);
    }
    if cfg.dropout && rng.gen::<f64>() < cfg.sample_dropout_prob {
        out = dropout_points(&out, cfg.point_dropout_rate, rng);
    }
    if cfg.jitter && cfg.jitter_variance > 0.0 {
        out = jitter_points(&out, cfg.jitter_variance, cfg.jitter_clip, rng);
    }
    out
}
