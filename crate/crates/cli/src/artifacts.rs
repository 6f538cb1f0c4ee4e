//! Run-directory layout and file formats: the frozen config copy, the
//! metrics CSV, and checkpoint blobs.
//!
//! Everything written here is byte-deterministic for a given run outcome:
//! rows are sorted on a total key and floats use Rust's shortest
//! round-trip formatting, so re-reading a CSV recovers the exact `f64`
//! values that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use fedftn_core::federation::MetricRow;
use fedftn_core::param_tree::TreeSnapshot;
use fedftn_core::tensor::Element;
use fedftn_core::wire::{decode_checkpoint, encode_checkpoint};

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

/// Column header of every metrics CSV, in this exact order.
pub const CSV_HEADER: &str =
    "run_id,epoch,site,split,count_level,psnr,nmse,ssim,recon_loss,gwc_loss";

/// Directory a run writes into: `<output_dir>/<run_id>`.
pub fn run_dir(config: &ExperimentConfig) -> PathBuf {
    Path::new(&config.experiment.output_dir).join(&config.experiment.run_id)
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("config.toml")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

pub fn checkpoint_path(dir: &Path, site_id: u32) -> PathBuf {
    dir.join(format!("site-{site_id}.ckpt"))
}

fn split_rank(split: &str) -> u8 {
    match split {
        "train" => 0,
        "val" => 1,
        _ => 2,
    }
}

/// Sorts rows on (epoch, site, split, count level) — a total order, so the
/// CSV byte stream is independent of client completion order.
pub fn sort_rows(rows: &mut [MetricRow]) {
    rows.sort_by(|a, b| {
        (a.epoch, a.site, split_rank(&a.split), a.count_level)
            .partial_cmp(&(b.epoch, b.site, split_rank(&b.split), b.count_level))
            .expect("metric keys are finite")
    });
}

pub fn render_metrics_csv(run_id: &str, rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{run_id},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.site, r.split, r.count_level, r.psnr, r.nmse, r.ssim, r.recon_loss,
            r.gwc_loss
        ));
    }
    out
}

/// One parsed CSV line; `parse_metrics_csv` recovers exactly the values
/// that were written.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub run_id: String,
    pub row: MetricRow,
}

pub fn parse_metrics_csv(text: &str) -> CliResult<Vec<CsvRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(CliError::Other(format!(
                "metrics CSV header mismatch: expected {CSV_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (ix, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(CliError::Other(format!(
                "metrics CSV line {}: expected 10 fields, got {}",
                ix + 2,
                fields.len()
            )));
        }
        let num = |s: &str, what: &str| -> CliResult<f64> {
            s.parse().map_err(|e| {
                CliError::Other(format!("metrics CSV line {}: bad {what}: {e}", ix + 2))
            })
        };
        rows.push(CsvRow {
            run_id: fields[0].to_string(),
            row: MetricRow {
                epoch: fields[1].parse().map_err(|e| {
                    CliError::Other(format!("metrics CSV line {}: bad epoch: {e}", ix + 2))
                })?,
                site: fields[2].parse().map_err(|e| {
                    CliError::Other(format!("metrics CSV line {}: bad site: {e}", ix + 2))
                })?,
                split: fields[3].to_string(),
                count_level: num(fields[4], "count_level")?,
                psnr: num(fields[5], "psnr")?,
                nmse: num(fields[6], "nmse")?,
                ssim: num(fields[7], "ssim")?,
                recon_loss: num(fields[8], "recon_loss")?,
                gwc_loss: num(fields[9], "gwc_loss")?,
            },
        });
    }
    Ok(rows)
}

pub fn write_checkpoint<T: Element>(
    path: &Path,
    site_id: u32,
    epoch: u32,
    snapshot: &TreeSnapshot<T>,
) -> CliResult<()> {
    let bytes = encode_checkpoint(site_id, epoch, snapshot).map_err(CliError::other)?;
    fs::write(path, bytes)
        .map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))
}

pub fn read_checkpoint<T: Element>(path: &Path) -> CliResult<(u32, u32, TreeSnapshot<T>)> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Other(format!("reading {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
        .map_err(|e| CliError::Mismatch(format!("checkpoint {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Other(format!("reading {}: {e}", path.display())))
}
