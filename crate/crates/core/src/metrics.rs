//! Overlap metrics on binary masks and per-scan / per-center aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::MaskVolume;

/// Confusion counts of a prediction against the truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

pub fn confusion(pred: &MaskVolume, truth: &MaskVolume) -> Result<Confusion> {
    if pred.extents() != truth.extents() {
        return Err(Error::Contract(format!(
            "mask extents differ: {:?} vs {:?}",
            pred.extents(),
            truth.extents()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2·|X∩Y| / (|X| + |Y|)`; 1.0 when both masks are empty.
pub fn dice_binary(x: &MaskVolume, y: &MaskVolume) -> Result<f64> {
    let c = confusion(x, y)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * c.tp as f64 / denom as f64 })
}

/// `TP / (TP + FN)`; 1.0 when the truth is empty.
pub fn sensitivity(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64> {
    let c = confusion(pred, truth)?;
    let positives = c.tp + c.fn_;
    Ok(if positives == 0 { 1.0 } else { c.tp as f64 / positives as f64 })
}

/// Fraction of positive voxels.
pub fn voxel_ratio(y: &MaskVolume) -> f64 {
    let n = y.data().len();
    if n == 0 {
        0.0
    } else {
        y.positives() as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan: String,
    pub center: String,
    pub dice: f64,
    pub sensitivity: f64,
    pub positive_voxel_ratio: f64,
}

impl ScanEntry {
    pub fn measure(scan: impl Into<String>, center: impl Into<String>, pred: &MaskVolume, truth: &MaskVolume) -> Result<Self> {
        Ok(Self {
            scan: scan.into(),
            center: center.into(),
            dice: dice_binary(pred, truth)?,
            sensitivity: sensitivity(pred, truth)?,
            positive_voxel_ratio: voxel_ratio(truth),
        })
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub dice: Stat,
    pub sensitivity: Stat,
    pub positive_voxel_ratio: Stat,
}

impl MetricStats {
    fn of(entries: &[&ScanEntry]) -> Self {
        let col = |f: fn(&ScanEntry) -> f64| Stat::of(&entries.iter().map(|e| f(e)).collect::<Vec<_>>());
        Self {
            dice: col(|e| e.dice),
            sensitivity: col(|e| e.sensitivity),
            positive_voxel_ratio: col(|e| e.positive_voxel_ratio),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// Sorted by (center, scan).
    pub scans: Vec<ScanEntry>,
    pub centers: BTreeMap<String, MetricStats>,
    /// Over all scans.
    pub overall: MetricStats,
    /// Mean and spread of the per-center means.
    pub center_average: MetricStats,
}

/// Per-center and overall statistics. Sorting makes the result independent of entry order.
pub fn aggregate(entries: &[ScanEntry]) -> Result<SegmentationReport> {
    if entries.is_empty() {
        return Err(Error::Contract("cannot aggregate zero scans".into()));
    }
    let mut scans = entries.to_vec();
    scans.sort_by(|a, b| {
        (&a.center, &a.scan)
            .cmp(&(&b.center, &b.scan))
            .then(a.dice.total_cmp(&b.dice))
            .then(a.sensitivity.total_cmp(&b.sensitivity))
    });
    let mut centers = BTreeMap::new();
    for name in scans.iter().map(|e| e.center.clone()).collect::<std::collections::BTreeSet<_>>() {
        let members: Vec<&ScanEntry> = scans.iter().filter(|e| e.center == name).collect();
        centers.insert(name, MetricStats::of(&members));
    }
    let all: Vec<&ScanEntry> = scans.iter().collect();
    let overall = MetricStats::of(&all);
    let means = |f: fn(&MetricStats) -> Stat| Stat::of(&centers.values().map(|c| f(c).mean).collect::<Vec<_>>());
    let center_average = MetricStats {
        dice: means(|c| c.dice),
        sensitivity: means(|c| c.sensitivity),
        positive_voxel_ratio: means(|c| c.positive_voxel_ratio),
    };
    Ok(SegmentationReport {
        scans,
        centers,
        overall,
        center_average,
    })
}

impl SegmentationReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Metric × center table with the two average columns, as `mean,std` pairs.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric");
        for c in self.centers.keys() {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push_str(",scan_average_mean,scan_average_std,center_average_mean,center_average_std\n");
        let rows: [(&str, fn(&MetricStats) -> Stat); 3] = [
            ("dice", |m| m.dice),
            ("sensitivity", |m| m.sensitivity),
            ("positive_voxel_ratio", |m| m.positive_voxel_ratio),
        ];
        for (name, f) in rows {
            out.push_str(name);
            for s in self.centers.values().map(f).chain([f(&self.overall), f(&self.center_average)]) {
                let _ = write!(out, ",{},{}", s.mean, s.std);
            }
            out.push('\n');
        }
        out
    }

    /// One row per scan, for external plotting.
    pub fn scans_csv(&self) -> String {
        let mut out = String::from("scan,center,dice,sensitivity,positive_voxel_ratio\n");
        for e in &self.scans {
            let _ = writeln!(out, "{},{},{},{},{}", e.scan, e.center, e.dice, e.sensitivity, e.positive_voxel_ratio);
        }
        out
    }
}
