//! `fedftn adapt`: post-federation local fine-tuning of one site's
//! checkpoint at a reduced learning rate.

use std::path::{Path, PathBuf};

use fedftn_core::federation::{evaluate_rows, site_adaptation, MetricRow};
use fedftn_core::phantom::{build_site_dataset, Sample, SiteDataset};
use fedftn_core::tensor::{no_grad, Element};
use fedftn_core::unet::DenoiserModel;
use fedftn_core::wire::to_wire;

use super::evaluate::model_from_checkpoint;
use crate::artifacts;
use crate::config::{ExperimentConfig, Precision};
use crate::{CliError, CliResult};

pub struct AdaptOutcome {
    pub site_id: u32,
    /// Epoch the checkpoint was captured at / after adaptation.
    pub from_epoch: u32,
    pub to_epoch: u32,
    /// Mean training-split reconstruction loss before and after.
    pub train_recon_before: f64,
    pub train_recon_after: f64,
    pub adapted_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub rows: Vec<MetricRow>,
}

/// Fine-tunes `checkpoint` on its own site's training split for `epochs`
/// passes at `lr`, writing the adapted model to `<checkpoint>.sa` and
/// before/after metric rows to `<checkpoint>.adapt.csv`.
pub fn cmd_adapt(
    config: &ExperimentConfig,
    checkpoint: &Path,
    epochs: usize,
    lr: f64,
) -> CliResult<AdaptOutcome> {
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if !(lr.is_finite() && lr > 0.0) {
        return Err(CliError::Config(format!(
            "adaptation learning rate must be positive and finite, got {lr}"
        )));
    }
    match config.experiment.precision {
        Precision::F32 => adapt_typed::<f32>(config, checkpoint, epochs, lr),
        Precision::F64 => adapt_typed::<f64>(config, checkpoint, epochs, lr),
    }
}

fn adapt_typed<T: Element>(
    config: &ExperimentConfig,
    checkpoint: &Path,
    epochs: usize,
    lr: f64,
) -> CliResult<AdaptOutcome> {
    let (site_id, from_epoch, wire_snapshot) = artifacts::read_checkpoint::<f32>(checkpoint)?;
    let model = model_from_checkpoint::<T>(config, site_id, &wire_snapshot)?;
    let profile = config
        .profile_for(site_id)
        .map_err(|e| CliError::Mismatch(e.to_string()))?;
    let [tr, va, te] = config.data.split;
    let dataset: SiteDataset<T> = build_site_dataset(
        &profile,
        config.data.volume_size,
        config.data.subjects_per_site,
        (tr, va, te),
    )
    .map_err(CliError::other)?;

    let before = eval_train_recon(&model, &dataset.train)?;
    let mut rows = evaluate_rows(&model, &dataset, site_id, from_epoch as usize, before, 0.0)
        .map_err(CliError::other)?;

    site_adaptation(&model, &dataset.train, epochs, lr, &config.train_settings())
        .map_err(CliError::other)?;

    let after = eval_train_recon(&model, &dataset.train)?;
    let to_epoch = from_epoch + epochs as u32;
    rows.extend(
        evaluate_rows(&model, &dataset, site_id, to_epoch as usize, after, 0.0)
            .map_err(CliError::other)?,
    );
    artifacts::sort_rows(&mut rows);

    let adapted_checkpoint = checkpoint.with_extension("ckpt.sa");
    artifacts::write_checkpoint(
        &adapted_checkpoint,
        site_id,
        to_epoch,
        &to_wire(&model.params.snapshot()),
    )?;
    let metrics_csv = checkpoint.with_extension("ckpt.adapt.csv");
    artifacts::write_text(
        &metrics_csv,
        &artifacts::render_metrics_csv(&config.experiment.run_id, &rows),
    )?;

    Ok(AdaptOutcome {
        site_id,
        from_epoch,
        to_epoch,
        train_recon_before: before,
        train_recon_after: after,
        adapted_checkpoint,
        metrics_csv,
        rows,
    })
}

/// Mean per-sample reconstruction loss over full volumes. Uses eval-mode
/// forwards so measuring never perturbs norm statistics — adapting for
/// zero epochs must leave the checkpoint byte-identical.
fn eval_train_recon<T: Element>(
    model: &DenoiserModel<T>,
    samples: &[Sample<T>],
) -> CliResult<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = no_grad(|| model.forward(&s.x, s.d, false)).map_err(CliError::other)?;
        let pd = pred.data();
        let yd = s.y.data();
        let mse = pd
            .iter()
            .zip(yd.iter())
            .map(|(a, b)| {
                let diff = a.to_f64() - b.to_f64();
                diff * diff
            })
            .sum::<f64>()
            / pd.len() as f64;
        total += mse;
    }
    Ok(total / samples.len() as f64)
}
