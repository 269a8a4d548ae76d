//! CSV tables. Every file starts with a header row; floats are written in
//! shortest round-trip form, so reading a table back is lossless.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::metrics::MetricReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub class: usize,
    pub x: f64,
    pub y: f64,
}

/// One metric report. `class` is a class index or `all` for the
/// combination over classes, which has no threshold or grid of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub class: String,
    pub n_samples: usize,
    pub outlier_rate: f64,
    pub coverage: f64,
    pub hist_kl: f64,
    pub tau_out: Option<f64>,
    pub bins: Option<usize>,
    pub grid_min_x: Option<f64>,
    pub grid_min_y: Option<f64>,
    pub grid_max_x: Option<f64>,
    pub grid_max_y: Option<f64>,
}

impl MetricRow {
    pub fn per_class(label: &str, class: usize, r: &MetricReport) -> Self {
        Self {
            label: label.to_string(),
            class: class.to_string(),
            n_samples: r.n_samples,
            outlier_rate: r.outlier_rate,
            coverage: r.coverage,
            hist_kl: r.hist_kl,
            tau_out: Some(r.tau_out),
            bins: Some(r.bins),
            grid_min_x: Some(r.grid_min.x),
            grid_min_y: Some(r.grid_min.y),
            grid_max_x: Some(r.grid_max.x),
            grid_max_y: Some(r.grid_max.y),
        }
    }

    pub fn combined(label: &str, r: &MetricReport) -> Self {
        Self {
            label: label.to_string(),
            class: "all".into(),
            n_samples: r.n_samples,
            outlier_rate: r.outlier_rate,
            coverage: r.coverage,
            hist_kl: r.hist_kl,
            tau_out: None,
            bins: None,
            grid_min_x: None,
            grid_min_y: None,
            grid_max_x: None,
            grid_max_y: None,
        }
    }
}

/// One sweep grid point. Metric columns are empty when `status` is `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub mode: String,
    pub w: Option<f64>,
    pub p: Option<f64>,
    pub tau: Option<f64>,
    pub snapshot: Option<usize>,
    pub seed: u64,
    pub status: String,
    pub n_samples: Option<usize>,
    pub outlier_rate: Option<f64>,
    pub coverage: Option<f64>,
    pub hist_kl: Option<f64>,
    pub error: String,
}

pub fn to_csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Internal(format!("csv encode: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Internal(format!("csv flush: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_csv_bytes(rows)?).map_err(|e| Error::io(path, e))
}

pub fn parse_csv<T: DeserializeOwned>(path: &Path, text: &[u8]) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(text);
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                    _ => e.to_string(),
                },
            })
        })
        .collect()
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(path, &bytes)
}

pub fn loss_rows(losses: &[f64]) -> Vec<LossRow> {
    losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect()
}

pub fn sample_rows(per_class: &[Vec<Vec2>]) -> Vec<SampleRow> {
    per_class
        .iter()
        .enumerate()
        .flat_map(|(class, pts)| pts.iter().map(move |p| SampleRow { class, x: p.x, y: p.y }))
        .collect()
}

/// Group sample rows by class; `num_classes` fixes the length of the result.
pub fn group_samples(rows: &[SampleRow], num_classes: usize, path: &Path) -> Result<Vec<Vec<Vec2>>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, r) in rows.iter().enumerate() {
        let slot = out.get_mut(r.class).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            message: format!("class {} out of range for {num_classes} classes", r.class),
        })?;
        slot.push(Vec2::new(r.x, r.y));
    }
    Ok(out)
}
