use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowering::theoretical_speedup;
use crate::net::Network;

/// Final state of one convolution layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub d: usize,
    pub in_maps: usize,
    pub out_maps: usize,
    pub live_groups: usize,
    pub total_groups: usize,
    pub density: f64,
    /// `None` when every group is dead.
    pub speedup: Option<f64>,
    pub dead_maps: Vec<usize>,
}

pub fn layer_summaries(net: &Network) -> Vec<LayerSummary> {
    net.conv_indices()
        .into_iter()
        .map(|idx| {
            let c = net.conv(idx).expect("conv index");
            let q = &c.pattern;
            LayerSummary {
                layer: idx,
                d: c.geometry.d,
                in_maps: c.geometry.in_maps,
                out_maps: c.geometry.out_maps,
                live_groups: q.live(),
                total_groups: q.total(),
                density: q.density(),
                speedup: theoretical_speedup(q).ok(),
                dead_maps: q.dead_maps(),
            }
        })
        .collect()
}

pub(crate) fn densities(net: &Network) -> Vec<f64> {
    net.conv_indices()
        .into_iter()
        .map(|idx| net.conv(idx).expect("conv index").pattern.density())
        .collect()
}

/// One row of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub theta: Option<f64>,
    /// Per convolution layer, same order as [`SparsifyReport::layers`].
    pub densities: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseAccuracy {
    pub phase: String,
    pub epochs: usize,
    pub test_accuracy: f64,
}

/// One epoch of the gradual controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerStep {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub drop: f64,
    pub pruned: usize,
    pub live_groups: usize,
    pub theta_before: f64,
    pub theta_after: f64,
    /// Fraction of live groups with norm below θ, measured on the same norms
    /// before and after the adjustment.
    pub below_before: f64,
    pub below_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsifyReport {
    pub method: String,
    pub layers: Vec<LayerSummary>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub baseline_val_accuracy: Option<f64>,
    pub phases: Vec<PhaseAccuracy>,
    pub epochs: Vec<EpochRecord>,
    pub controller: Vec<ControllerStep>,
    pub stop_reason: Option<String>,
}

impl SparsifyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "theta".to_string()];
        h.extend(self.layers.iter().map(|l| format!("density_{}", l.layer)));
        h.push("val_accuracy".into());
        h.push("test_accuracy".into());
        h
    }

    /// Epoch log as CSV; missing values are empty cells.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.csv_header())?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            if e.densities.len() != self.layers.len() {
                return Err(Error::Report(format!(
                    "epoch {} has {} densities for {} layers",
                    e.epoch,
                    e.densities.len(),
                    self.layers.len()
                )));
            }
            let mut row = vec![e.epoch.to_string(), opt(e.theta)];
            row.extend(e.densities.iter().map(|d| d.to_string()));
            row.push(opt(e.val_accuracy));
            row.push(opt(e.test_accuracy));
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("report.csv"), self.to_csv()?)?;
        Ok(())
    }
}

/// Parse an epoch log written by [`SparsifyReport::to_csv`]; returns the layer
/// indices named in the header and the rows.
pub fn parse_epoch_csv(text: &str) -> Result<(Vec<usize>, Vec<EpochRecord>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n = header.len();
    if n < 4
        || header[0] != "epoch"
        || header[1] != "theta"
        || header[n - 2] != "val_accuracy"
        || header[n - 1] != "test_accuracy"
    {
        return Err(Error::Report(format!("unexpected epoch log header {header:?}")));
    }
    let layers = header[2..n - 2]
        .iter()
        .map(|h| {
            h.strip_prefix("density_")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Report(format!("bad density column `{h}`")))
        })
        .collect::<Result<Vec<usize>>>()?;
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Report(format!("bad number `{s}` in epoch log")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != n {
            return Err(Error::Report(format!("row has {} cells, header has {n}", rec.len())));
        }
        rows.push(EpochRecord {
            epoch: rec[0]
                .parse()
                .map_err(|_| Error::Report(format!("bad epoch `{}`", &rec[0])))?,
            theta: opt(&rec[1])?,
            densities: (2..n - 2).map(|k| num(&rec[k])).collect::<Result<_>>()?,
            val_accuracy: opt(&rec[n - 2])?,
            test_accuracy: opt(&rec[n - 1])?,
        });
    }
    Ok((layers, rows))
}
