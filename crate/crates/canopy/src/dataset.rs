//! Dataset model: labeled plot records, manifest IO, filtering, and splits.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{load_cloud, PointCloud};
use crate::error::CanopyError;
use crate::Result;

/// Plot-level regression targets. Carbon is never stored; it is always derived
/// from biomass via [`carbon_from_biomass`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionTargets {
    /// Above-ground biomass, Mg/ha.
    pub agb: f64,
    /// Wood volume, m^3/ha.
    pub volume: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// The four data-quality flags attached to each record. The first two mark
/// recoverable issues and are kept; the last two are grounds for exclusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorFlags {
    pub extra_trees: bool,
    pub non_forest_objects: bool,
    pub harvested: bool,
    pub unreasonable: bool,
}

/// One labeled sample of the dataset manifest (JSON-lines, one record per line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRecord {
    pub cloud_path: PathBuf,
    pub plot_id: String,
    pub targets: RegressionTargets,
    /// Percentage of conifer basal area, in [0, 100].
    pub conifer_fraction: f64,
    pub error_flags: ErrorFlags,
    pub split: Option<Split>,
    pub time_gap_years: f64,
}

impl PlotRecord {
    /// Resolve the cloud path against the manifest's directory.
    pub fn resolved_cloud_path(&self, base_dir: &Path) -> PathBuf {
        if self.cloud_path.is_absolute() {
            self.cloud_path.clone()
        } else {
            base_dir.join(&self.cloud_path)
        }
    }

    pub fn load_cloud(&self, base_dir: &Path) -> Result<PointCloud> {
        load_cloud(
            &self.resolved_cloud_path(base_dir),
            &self.plot_id,
            self.time_gap_years,
        )
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<PlotRecord>> {
    let file = std::fs::File::open(path).map_err(|e| CanopyError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CanopyError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PlotRecord = serde_json::from_str(&line).map_err(|e| CanopyError::Manifest {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", idx + 1),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[PlotRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record).expect("record serializes"));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| CanopyError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| CanopyError::io(path, e))?;
    Ok(())
}

/// Why a record was removed by [`filter_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Harvested,
    Unreasonable,
    NoPointsAboveBreastHeight,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropReason::Harvested => write!(f, "harvested"),
            DropReason::Unreasonable => write!(f, "unreasonable"),
            DropReason::NoPointsAboveBreastHeight => write!(f, "no points above 1.3 m"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub plot_id: String,
    pub cloud_path: PathBuf,
    pub reason: DropReason,
}

/// Remove records with the harvested or unreasonable flag set, and records
/// whose cloud has no point strictly above 1.3 m (the minimum measured height).
/// Records flagged extra-trees or non-forest-objects are kept. Unreadable cloud
/// files are an error naming the path.
pub fn filter_dataset(
    records: &[PlotRecord],
    base_dir: &Path,
) -> Result<(Vec<PlotRecord>, Vec<DroppedRecord>)> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for record in records {
        let reason = if record.error_flags.harvested {
            Some(DropReason::Harvested)
        } else if record.error_flags.unreasonable {
            Some(DropReason::Unreasonable)
        } else {
            let cloud = record.load_cloud(base_dir)?;
            if cloud.max_z() > 1.3 {
                None
            } else {
                Some(DropReason::NoPointsAboveBreastHeight)
            }
        };
        match reason {
            Some(reason) => dropped.push(DroppedRecord {
                plot_id: record.plot_id.clone(),
                cloud_path: record.cloud_path.clone(),
                reason,
            }),
            None => kept.push(record.clone()),
        }
    }
    Ok((kept, dropped))
}

/// Fractions of the plot population assigned to validation and test.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitFractions {
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            validation: 0.15,
            test: 0.15,
        }
    }
}

/// Assign splits by plot id. Only plots whose every measurement is within one
/// year of the scan are eligible for validation/test; those are partitioned at
/// random (deterministic in `seed`). Everything else goes to train, which may
/// carry gaps up to nine years. No plot ever spans two splits.
pub fn assign_splits(
    records: &[PlotRecord],
    seed: u64,
    fractions: SplitFractions,
) -> Result<Vec<PlotRecord>> {
    if !(fractions.validation >= 0.0
        && fractions.test >= 0.0
        && fractions.validation + fractions.test < 1.0)
    {
        return Err(CanopyError::InvalidConfig(format!(
            "split fractions {} / {} must be nonnegative and sum below 1",
            fractions.validation, fractions.test
        )));
    }

    // Group records by plot; BTreeMap gives a stable id order before shuffling.
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, record) in records.iter().enumerate() {
        groups.entry(&record.plot_id).or_default().push(idx);
    }

    let mut eligible: Vec<&str> = groups
        .iter()
        .filter(|(_, idxs)| {
            idxs.iter()
                .all(|&i| records[i].time_gap_years.abs() <= 1.0)
        })
        .map(|(id, _)| *id)
        .collect();
    if eligible.is_empty() {
        return Err(CanopyError::NoEligiblePlots);
    }

    let n_plots = groups.len();
    let n_val = ((fractions.validation * n_plots as f64).round() as usize).min(eligible.len());
    let n_test =
        ((fractions.test * n_plots as f64).round() as usize).min(eligible.len() - n_val);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);

    let mut assignment: BTreeMap<&str, Split> = BTreeMap::new();
    for (i, id) in eligible.iter().enumerate() {
        let split = if i < n_val {
            Split::Validation
        } else if i < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        assignment.insert(id, split);
    }

    Ok(records
        .iter()
        .map(|record| {
            let split = assignment
                .get(record.plot_id.as_str())
                .copied()
                .unwrap_or(Split::Train);
            PlotRecord {
                split: Some(split),
                ..record.clone()
            }
        })
        .collect())
}

/// Carbon stock as a fixed fraction of above-ground biomass. The factor is a
/// configuration value (documented default 0.5, a convention).
pub fn carbon_from_biomass(agb: f64, factor: f64) -> f64 {
    debug_assert!(agb >= 0.0 && factor > 0.0 && factor <= 1.0);
    factor * agb
}

/// Documented default carbon fraction.
pub const DEFAULT_CARBON_FACTOR: f64 = 0.5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{save_cloud, Point};

    fn record(plot_id: &str, path: &Path, gap: f64, flags: ErrorFlags) -> PlotRecord {
        PlotRecord {
            cloud_path: path.to_path_buf(),
            plot_id: plot_id.into(),
            targets: RegressionTargets {
                agb: 10.0,
                volume: 20.0,
            },
            conifer_fraction: 50.0,
            error_flags: flags,
            split: None,
            time_gap_years: gap,
        }
    }

    fn write_cloud(dir: &Path, name: &str, zs: &[f64]) -> PathBuf {
        let path = dir.join(name);
        let cloud = PointCloud {
            points: zs
                .iter()
                .map(|&z| Point {
                    x: 0.0,
                    y: 0.0,
                    z,
                    return_index: 1,
                    return_count: 1,
                })
                .collect(),
            plot_id: "t".into(),
            time_gap_years: 0.0,
        };
        save_cloud(&path, &cloud).unwrap();
        path
    }

    #[test]
    fn filter_drops_harvested_with_reason() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cloud(dir.path(), "a.csv", &[5.0]);
        let flags = ErrorFlags {
            harvested: true,
            ..Default::default()
        };
        let records = vec![record("a", &path, 0.0, flags)];
        let (kept, dropped) = filter_dataset(&records, dir.path()).unwrap();
        assert!(kept.is_empty());
        assert_eq!(dropped[0].reason, DropReason::Harvested);
        assert_eq!(dropped[0].reason.to_string(), "harvested");
    }

    #[test]
    fn filter_keeps_recoverable_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cloud(dir.path(), "a.csv", &[5.0]);
        let flags = ErrorFlags {
            extra_trees: true,
            non_forest_objects: true,
            ..Default::default()
        };
        let records = vec![record("a", &path, 0.0, flags)];
        let (kept, dropped) = filter_dataset(&records, dir.path()).unwrap();
        assert_eq!(kept.len(), 1);
        assert!(dropped.is_empty());
    }

    #[test]
    fn filter_height_boundary_is_strict() {
        let dir = tempfile::tempdir().unwrap();
        let at = write_cloud(dir.path(), "at.csv", &[1.3]);
        let above = write_cloud(dir.path(), "above.csv", &[1.3000001]);
        let records = vec![
            record("at", &at, 0.0, ErrorFlags::default()),
            record("above", &above, 0.0, ErrorFlags::default()),
        ];
        let (kept, dropped) = filter_dataset(&records, dir.path()).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].plot_id, "above");
        assert_eq!(dropped[0].reason, DropReason::NoPointsAboveBreastHeight);
    }

    #[test]
    fn filter_matches_brute_force_predicate() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for i in 0..10 {
            let zs = if i % 3 == 0 { vec![0.5] } else { vec![4.0, 0.2] };
            let path = write_cloud(dir.path(), &format!("{i}.csv"), &zs);
            let flags = ErrorFlags {
                harvested: i % 4 == 0,
                unreasonable: i % 5 == 0,
                ..Default::default()
            };
            records.push(record(&format!("p{i}"), &path, 0.0, flags));
        }
        let (kept, dropped) = filter_dataset(&records, dir.path()).unwrap();
        // Brute-force re-filter with an independent predicate scan.
        let survivors: Vec<&PlotRecord> = records
            .iter()
            .filter(|r| {
                !r.error_flags.harvested
                    && !r.error_flags.unreasonable
                    && r.load_cloud(dir.path()).unwrap().max_z() > 1.3
            })
            .collect();
        assert_eq!(kept.len(), survivors.len());
        for (a, b) in kept.iter().zip(survivors) {
            assert_eq!(a.plot_id, b.plot_id);
        }
        assert_eq!(kept.len() + dropped.len(), records.len());
    }

    #[test]
    fn filter_unreadable_cloud_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.csv");
        let records = vec![record("a", &missing, 0.0, ErrorFlags::default())];
        let err = filter_dataset(&records, dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing.csv"), "{err}");
    }

    #[test]
    fn splits_respect_plot_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cloud(dir.path(), "a.csv", &[5.0]);
        let mut records = Vec::new();
        for i in 0..30 {
            let id = format!("p{}", i / 2); // two measurements per plot
            records.push(record(&id, &path, 0.5, ErrorFlags::default()));
        }
        let out = assign_splits(&records, 9, SplitFractions::default()).unwrap();
        let mut by_plot: BTreeMap<&str, Vec<Split>> = BTreeMap::new();
        for r in &out {
            by_plot
                .entry(r.plot_id.as_str())
                .or_default()
                .push(r.split.unwrap());
        }
        for (_, splits) in by_plot {
            assert!(splits.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn large_gap_forces_train() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cloud(dir.path(), "a.csv", &[5.0]);
        let mut records = vec![record("far", &path, 3.0, ErrorFlags::default())];
        for i in 0..9 {
            records.push(record(&format!("p{i}"), &path, 0.2, ErrorFlags::default()));
        }
        let out = assign_splits(&records, 1, SplitFractions::default()).unwrap();
        let far = out.iter().find(|r| r.plot_id == "far").unwrap();
        assert_eq!(far.split, Some(Split::Train));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cloud(dir.path(), "a.csv", &[5.0]);
        let records: Vec<PlotRecord> = (0..100)
            .map(|i| record(&format!("p{i:03}"), &path, 0.0, ErrorFlags::default()))
            .collect();
        let out = assign_splits(&records, 4, SplitFractions::default()).unwrap();
        let count = |s: Split| out.iter().filter(|r| r.split == Some(s)).count();
        let (v, t, tr) = (
            count(Split::Validation),
            count(Split::Test),
            count(Split::Train),
        );
        assert!((v as i64 - 15).abs() <= 1, "validation {v}");
        assert!((t as i64 - 15).abs() <= 1, "test {t}");
        assert_eq!(v + t + tr, 100);

        // Exhaustive disjointness scan at the plot level.
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for r in &out {
            if let Some(prev) = seen.insert(&r.plot_id, r.split.unwrap()) {
                assert_eq!(prev, r.split.unwrap());
            }
        }
        // Determinism.
        let again = assign_splits(&records, 4, SplitFractions::default()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn no_eligible_plots_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_cloud(dir.path(), "a.csv", &[5.0]);
        let records = vec![record("a", &path, 5.0, ErrorFlags::default())];
        assert!(matches!(
            assign_splits(&records, 0, SplitFractions::default()),
            Err(CanopyError::NoEligiblePlots)
        ));
    }

    #[test]
    fn carbon_is_linear() {
        assert_eq!(carbon_from_biomass(0.0, 0.5), 0.0);
        assert_eq!(carbon_from_biomass(100.0, 0.5), 50.0);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = vec![
            record("a", Path::new("clouds/a.csv"), 0.5, ErrorFlags::default()),
            record(
                "b",
                Path::new("clouds/b.csv"),
                -2.0,
                ErrorFlags {
                    harvested: true,
                    ..Default::default()
                },
            ),
        ];
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, records);
    }
}
