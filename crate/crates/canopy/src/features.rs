//! Height-distribution statistics over first returns, used by the classical
//! baselines.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::dataset::PlotRecord;
use crate::error::CanopyError;
use crate::par;
use crate::Result;

/// Number of features: 13 statistics for all first returns, the same 13 for
/// first returns above 1 m, plus the interception ratio.
pub const FEATURE_COUNT: usize = 27;

/// Per-set statistic names, in canonical order.
const SET_STATS: [&str; 13] = [
    "mean_z", "std_z", "cv_z", "skew_z", "kurt_z", "p5", "p10", "p25", "p50", "p75", "p90", "p95",
    "p99",
];

/// Canonical column names for the 27 features.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FEATURE_COUNT);
    for suffix in ["all", "ag"] {
        for stat in SET_STATS {
            names.push(format!("{stat}_{suffix}"));
        }
    }
    names.push("interception_ratio".to_string());
    names
}

/// Fixed-order summary of a plot's height distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// True when no first return exceeds 1 m; the above-ground block is zero.
    pub above_ground_empty: bool,
}

impl FeatureVector {
    pub fn interception_ratio(&self) -> f64 {
        self.values[FEATURE_COUNT - 1]
    }

    /// Mean height of first returns above 1 m.
    pub fn mean_z_ag(&self) -> f64 {
        self.values[13]
    }

    /// 95th height percentile of first returns above 1 m.
    pub fn p95_ag(&self) -> f64 {
        self.values[13 + 11]
    }
}

/// The 13 distributional statistics of a height sample, in canonical order.
/// Moments use population formulas; zero-variance sets map skewness and
/// kurtosis to 0, and cv is 0 when |mean| < 1e-9.
fn set_statistics(heights: &[f64]) -> [f64; 13] {
    // Accumulate over the sorted values so the statistics are bitwise
    // invariant to the input point order.
    let mut sorted = heights.to_vec();
    sorted.sort_by(f64::total_cmp);

    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let m2 = sorted.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
    let m3 = sorted.iter().map(|z| (z - mean).powi(3)).sum::<f64>() / n;
    let m4 = sorted.iter().map(|z| (z - mean).powi(4)).sum::<f64>() / n;
    let std = m2.sqrt();
    let cv = if mean.abs() < 1e-9 { 0.0 } else { std / mean };
    let (skew, kurt) = if m2 <= 0.0 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };

    let pct = |q: f64| percentile_sorted(&sorted, q);

    [
        mean,
        std,
        cv,
        skew,
        kurt,
        pct(0.05),
        pct(0.10),
        pct(0.25),
        pct(0.50),
        pct(0.75),
        pct(0.90),
        pct(0.95),
        pct(0.99),
    ]
}

/// Linear interpolation between order statistics at rank h = (n-1) q.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Extract the 27 features from a cloud. Only first returns are considered;
/// the above-ground set holds first returns with z > 1 m. An empty above-ground
/// set yields zeros for its block and is flagged.
pub fn extract_features(cloud: &PointCloud) -> Result<FeatureVector> {
    let first: Vec<f64> = cloud
        .points
        .iter()
        .filter(|p| p.is_first_return())
        .map(|p| p.z)
        .collect();
    if first.is_empty() {
        return Err(CanopyError::NoFirstReturns);
    }
    let above: Vec<f64> = first.iter().copied().filter(|&z| z > 1.0).collect();
    let ir = above.len() as f64 / first.len() as f64;

    let mut values = Vec::with_capacity(FEATURE_COUNT);
    values.extend_from_slice(&set_statistics(&first));
    let above_ground_empty = above.is_empty();
    if above_ground_empty {
        values.extend_from_slice(&[0.0; 13]);
    } else {
        values.extend_from_slice(&set_statistics(&above));
    }
    values.push(ir);
    debug_assert_eq!(values.len(), FEATURE_COUNT);
    Ok(FeatureVector {
        values,
        above_ground_empty,
    })
}

/// Feature matrix over records, one row per record in input order, plus the
/// target vectors. Clouds are loaded relative to `base_dir`.
pub struct FeatureMatrix {
    /// Row-major n x 27.
    pub rows: Vec<Vec<f64>>,
    pub agb: Vec<f64>,
    pub volume: Vec<f64>,
    pub plot_ids: Vec<String>,
}

pub fn feature_matrix(records: &[PlotRecord], base_dir: &std::path::Path) -> Result<FeatureMatrix> {
    let extracted: Vec<(String, f64, f64, Vec<f64>)> = par::try_map_ordered(records, |record| {
        let cloud = record.load_cloud(base_dir)?;
        let features = extract_features(&cloud).map_err(|e| CanopyError::FeatureExtraction {
            plot_id: record.plot_id.clone(),
            source: Box::new(e),
        })?;
        Ok((
            record.plot_id.clone(),
            record.targets.agb,
            record.targets.volume,
            features.values,
        ))
    })?;

    let mut matrix = FeatureMatrix {
        rows: Vec::with_capacity(extracted.len()),
        agb: Vec::with_capacity(extracted.len()),
        volume: Vec::with_capacity(extracted.len()),
        plot_ids: Vec::with_capacity(extracted.len()),
    };
    for (plot_id, agb, volume, values) in extracted {
        matrix.plot_ids.push(plot_id);
        matrix.agb.push(agb);
        matrix.volume.push(volume);
        matrix.rows.push(values);
    }
    Ok(matrix)
}

/// Write the feature matrix as CSV: plot_id, the 27 canonical columns, targets.
pub fn write_feature_csv(path: &std::path::Path, matrix: &FeatureMatrix) -> Result<()> {
    let mut out = String::from("plot_id");
    for name in feature_names() {
        out.push(',');
        out.push_str(&name);
    }
    out.push_str(",agb,volume\n");
    for i in 0..matrix.rows.len() {
        out.push_str(&matrix.plot_ids[i]);
        for v in &matrix.rows[i] {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{},{}\n", matrix.agb[i], matrix.volume[i]));
    }
    std::fs::write(path, out).map_err(|e| CanopyError::io(path, e))
}
