//! `fedftn evaluate`: score a checkpoint on its site's test split and
//! print a per-count-level mean ± std table.

use std::path::{Path, PathBuf};

use fedftn_core::metrics::{mean_std, MetricReport};
use fedftn_core::param_tree::{ParamTree, TreeSnapshot};
use fedftn_core::phantom::{build_site_dataset, Sample, SiteDataset};
use fedftn_core::rng::stream;
use fedftn_core::tensor::{no_grad, Element};
use fedftn_core::unet::DenoiserModel;
use fedftn_core::wire::from_wire;

use crate::artifacts;
use crate::config::{ExperimentConfig, Precision};
use crate::{CliError, CliResult};

pub struct EvalOutcome {
    /// Per-sample reports over the test split, in (subject, level) order.
    pub reports: Vec<MetricReport>,
    /// `(count_level, (psnr mean, std), (nmse mean, std), (ssim mean, std))`.
    pub table: Vec<(f64, (f64, f64), (f64, f64), (f64, f64))>,
    pub rendered_table: String,
    pub csv_path: PathBuf,
    pub site_id: u32,
    pub epoch: u32,
}

/// Loads `checkpoint` under `config`, runs it over the owning site's test
/// split, writes `<checkpoint>.eval.csv` with per-sample rows, and returns
/// the per-level summary. `levels` restricts evaluation to a subset of the
/// site's count levels.
pub fn cmd_evaluate(
    config: &ExperimentConfig,
    checkpoint: &Path,
    levels: Option<&[f64]>,
) -> CliResult<EvalOutcome> {
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let (site_id, epoch, snapshot) = artifacts::read_checkpoint::<f32>(checkpoint)?;
    match config.experiment.precision {
        Precision::F32 => evaluate_typed::<f32>(config, checkpoint, site_id, epoch, &snapshot, levels),
        Precision::F64 => evaluate_typed::<f64>(config, checkpoint, site_id, epoch, &snapshot, levels),
    }
}

/// Builds the model a checkpoint describes, or a checkpoint/config
/// mismatch error naming what differs.
pub fn model_from_checkpoint<T: Element>(
    config: &ExperimentConfig,
    site_id: u32,
    wire_snapshot: &TreeSnapshot<f32>,
) -> CliResult<DenoiserModel<T>> {
    if !config.sites.iter().any(|s| s.site_id == site_id) {
        return Err(CliError::Mismatch(format!(
            "checkpoint belongs to site {site_id}, which this config does not define"
        )));
    }
    let mut rng = stream(config.experiment.seed, "model", &[]);
    let model = DenoiserModel::<T>::init(config.unet.to_core(), &mut rng)
        .map_err(CliError::other)?;
    let native: TreeSnapshot<T> = from_wire(wire_snapshot);
    let loaded = ParamTree::from_snapshot(&native).map_err(CliError::other)?;
    model.params.check_congruent(&loaded).map_err(|e| {
        CliError::Mismatch(format!(
            "checkpoint does not fit the configured network: {e}"
        ))
    })?;
    model.params.load_snapshot(&native).map_err(CliError::other)?;
    Ok(model)
}

fn evaluate_typed<T: Element>(
    config: &ExperimentConfig,
    checkpoint: &Path,
    site_id: u32,
    epoch: u32,
    snapshot: &TreeSnapshot<f32>,
    levels: Option<&[f64]>,
) -> CliResult<EvalOutcome> {
    let model = model_from_checkpoint::<T>(config, site_id, snapshot)?;
    let profile = config
        .profile_for(site_id)
        .map_err(|e| CliError::Mismatch(e.to_string()))?;
    if let Some(wanted) = levels {
        for &d in wanted {
            if !profile
                .count_levels
                .iter()
                .any(|l| (l.value() - d).abs() < 1e-12)
            {
                return Err(CliError::Config(format!(
                    "count level {d} is not acquired by site {site_id}"
                )));
            }
        }
    }
    let [tr, va, te] = config.data.split;
    let dataset: SiteDataset<T> = build_site_dataset(
        &profile,
        config.data.volume_size,
        config.data.subjects_per_site,
        (tr, va, te),
    )
    .map_err(CliError::other)?;

    let keep = |s: &&Sample<T>| {
        levels.is_none_or(|wanted| {
            wanted.iter().any(|&d| (s.d.value() - d).abs() < 1e-12)
        })
    };
    let mut reports = Vec::new();
    for sample in dataset.test.iter().filter(keep) {
        let pred = no_grad(|| model.forward(&sample.x, sample.d, false))
            .map_err(CliError::other)?;
        reports.push(
            MetricReport::measure(&pred, &sample.y, site_id, sample.d.value(), sample.subject_id)
                .map_err(CliError::other)?,
        );
    }
    if reports.is_empty() {
        return Err(CliError::Config(format!(
            "site {site_id} has no test samples at the requested count levels"
        )));
    }

    let mut table = Vec::new();
    let mut seen_levels: Vec<f64> = Vec::new();
    for r in &reports {
        if !seen_levels.iter().any(|&d| d == r.count_level) {
            seen_levels.push(r.count_level);
        }
    }
    seen_levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for d in seen_levels {
        let at: Vec<&MetricReport> = reports
            .iter()
            .filter(|r| r.count_level == d)
            .collect();
        let psnr: Vec<f64> = at.iter().map(|r| r.psnr_db).collect();
        let nmse: Vec<f64> = at.iter().map(|r| r.nmse).collect();
        let ssim: Vec<f64> = at.iter().map(|r| r.ssim).collect();
        table.push((d, mean_std(&psnr), mean_std(&nmse), mean_std(&ssim)));
    }

    let rendered_table = render_table(site_id, epoch, &table);
    let csv_path = checkpoint.with_extension("ckpt.eval.csv");
    artifacts::write_text(&csv_path, &render_eval_csv(&reports))?;

    Ok(EvalOutcome {
        reports,
        table,
        rendered_table,
        csv_path,
        site_id,
        epoch,
    })
}

fn render_table(
    site_id: u32,
    epoch: u32,
    table: &[(f64, (f64, f64), (f64, f64), (f64, f64))],
) -> String {
    let mut out = format!("site {site_id}, epoch {epoch}, test split\n");
    out.push_str(&format!(
        "{:<12} {:>18} {:>20} {:>18}\n",
        "count_level", "psnr (dB)", "nmse", "ssim"
    ));
    for (d, psnr, nmse, ssim) in table {
        out.push_str(&format!(
            "{d:<12} {:>10.3} ± {:<5.3} {:>12.5} ± {:<7.5} {:>10.4} ± {:<5.4}\n",
            psnr.0, psnr.1, nmse.0, nmse.1, ssim.0, ssim.1
        ));
    }
    out
}

/// Per-sample CSV: one row per (subject, level) test pair, full precision.
fn render_eval_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("site,subject,count_level,psnr,nmse,ssim\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.site_id,
            r.subject_id,
            r.count_level,
            r.psnr_db,
            r.nmse,
            r.ssim
        ));
    }
    out
}
