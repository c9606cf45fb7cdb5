//! Evaluating a directory of dehazed outputs against a manifest, and
//! rendering the result as CSV and as a metric-by-method Markdown table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, DatasetManifest};
use crate::error::{Error, Result};
use crate::image::{load_image, Image};
use crate::metrics::{contrast_gain_c, gradient_ratio_r, psnr, saturation_sigma, ssim, Aggregate, MetricParams};

/// Extensions tried, in order, when looking for the output of an id.
pub const OUTPUT_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// Absent when the set has no references.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub r: f64,
    /// The output had no visible edges, so `r` defaulted to 1.
    pub r_empty_mask: bool,
    pub sigma: f64,
    pub c_gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub metrics: Option<ImageMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr: Option<Aggregate>,
    pub ssim: Option<Aggregate>,
    pub r: Option<Aggregate>,
    pub sigma: Option<Aggregate>,
    pub c_gain: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub records: Vec<ImageRecord>,
    pub aggregates: Aggregates,
}

/// Column order shared by CSV and Markdown output.
const METRICS: [(&str, &str); 5] = [
    ("psnr", "PSNR (dB)"),
    ("ssim", "SSIM"),
    ("r", "r"),
    ("sigma", "σ (%)"),
    ("c_gain", "C"),
];

impl ImageMetrics {
    fn get(&self, key: &str) -> Option<f64> {
        match key {
            "psnr" => self.psnr,
            "ssim" => self.ssim,
            "r" => Some(self.r),
            "sigma" => Some(self.sigma),
            "c_gain" => Some(self.c_gain),
            _ => None,
        }
    }
}

impl Aggregates {
    fn get(&self, key: &str) -> Option<Aggregate> {
        match key {
            "psnr" => self.psnr,
            "ssim" => self.ssim,
            "r" => self.r,
            "sigma" => self.sigma,
            "c_gain" => self.c_gain,
            _ => None,
        }
    }
}

impl MetricsReport {
    pub fn from_records(method: impl Into<String>, records: Vec<ImageRecord>) -> Self {
        let done: Vec<ImageMetrics> = records.iter().filter_map(|r| r.metrics).collect();
        let agg = |key: &str| {
            let vals: Vec<f64> = done.iter().filter_map(|m| m.get(key)).collect();
            Aggregate::of(&vals)
        };
        let aggregates = Aggregates {
            psnr: agg("psnr"),
            ssim: agg("ssim"),
            r: agg("r"),
            sigma: agg("sigma"),
            c_gain: agg("c_gain"),
        };
        Self {
            method: method.into(),
            records,
            aggregates,
        }
    }

    pub fn completed(&self) -> usize {
        self.records.iter().filter(|r| r.metrics.is_some()).count()
    }

    pub fn failed(&self) -> usize {
        self.records.len() - self.completed()
    }

    /// One row per image, a blank line, then `mean`, `std` and `count` rows.
    /// Numbers use the shortest representation that round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id");
        for (key, _) in METRICS {
            out.push(',');
            out.push_str(key);
        }
        out.push_str(",error\n");
        for rec in &self.records {
            out.push_str(&csv_field(&rec.id));
            for (key, _) in METRICS {
                out.push(',');
                if let Some(v) = rec.metrics.and_then(|m| m.get(key)) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push(',');
            out.push_str(&csv_field(rec.error.as_deref().unwrap_or("")));
            out.push('\n');
        }
        out.push('\n');
        for (row, pick) in [
            ("mean", (|a: Aggregate| a.mean.to_string()) as fn(Aggregate) -> String),
            ("std", |a| a.std.to_string()),
            ("count", |a| a.count.to_string()),
        ] {
            out.push_str(row);
            for (key, _) in METRICS {
                out.push(',');
                if let Some(a) = self.aggregates.get(key) {
                    out.push_str(&pick(a));
                }
            }
            out.push_str(",\n");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `<dir>/<id>.png`, `.jpg` or `.jpeg`, whichever exists first.
pub fn find_output(dir: &Path, id: &str) -> Option<PathBuf> {
    OUTPUT_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// All five metrics for one image. Reference metrics need `clear`.
pub fn evaluate_image(hazy: &Image, output: &Image, clear: Option<&Image>, params: &MetricParams) -> Result<ImageMetrics> {
    let (psnr_v, ssim_v) = match clear {
        Some(c) => (Some(psnr(c, output)?), Some(ssim(c, output)?)),
        None => (None, None),
    };
    let r = gradient_ratio_r(hazy, output, params)?;
    Ok(ImageMetrics {
        psnr: psnr_v,
        ssim: ssim_v,
        r: r.value,
        r_empty_mask: r.empty_mask,
        sigma: saturation_sigma(hazy, output)?,
        c_gain: contrast_gain_c(hazy, output)?,
    })
}

fn evaluate_entry(
    manifest: &DatasetManifest,
    hazy_path: &Path,
    clear_path: Option<&Path>,
    output_path: &Path,
    params: &MetricParams,
) -> Result<ImageMetrics> {
    let hazy = load_image(hazy_path)?;
    let output = load_image(output_path)?;
    let clear = match (manifest.has_references, clear_path) {
        (true, Some(p)) => Some(load_image(p)?),
        _ => None,
    };
    evaluate_image(&hazy, &output, clear.as_ref(), params)
}

/// Scores every manifest entry's output in `outputs_dir`. A missing or
/// unreadable output becomes a per-image error and is left out of the
/// aggregates.
pub fn evaluate_set(
    manifest: &DatasetManifest,
    outputs_dir: &Path,
    params: &MetricParams,
    method: &str,
) -> Result<MetricsReport> {
    params.validate()?;
    if !outputs_dir.is_dir() {
        return Err(Error::DatasetContract(format!("outputs directory {} does not exist", outputs_dir.display())));
    }
    let records = manifest
        .pairs
        .iter()
        .map(|pair| {
            let result = match find_output(outputs_dir, &pair.id) {
                None => Err(format!("no output for {} in {}", pair.id, outputs_dir.display())),
                Some(out) => evaluate_entry(manifest, &pair.hazy, pair.clear.as_deref(), &out, params).map_err(|e| e.to_string()),
            };
            match result {
                Ok(m) => ImageRecord {
                    id: pair.id.clone(),
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => {
                    log::warn!("{e}");
                    ImageRecord {
                        id: pair.id.clone(),
                        metrics: None,
                        error: Some(e),
                    }
                }
            }
        })
        .collect();
    Ok(MetricsReport::from_records(method, records))
}

/// Metric rows, one `mean ± std` column per method.
pub fn markdown_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("| Metric |");
    for r in reports {
        let _ = write!(out, " {} |", r.method);
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(reports.len()));
    out.push('\n');
    for (key, label) in METRICS {
        let _ = write!(out, "| {label} |");
        for r in reports {
            match r.aggregates.get(key) {
                Some(a) => {
                    let _ = write!(out, " {:.3} ± {:.3} |", a.mean, a.std);
                }
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    for r in reports.iter().filter(|r| r.failed() > 0) {
        let _ = writeln!(
            out,
            "\n{}: {} of {} images evaluated; {} missing or unreadable.",
            r.method,
            r.completed(),
            r.records.len(),
            r.failed()
        );
    }
    out
}
