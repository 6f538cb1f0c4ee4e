//! `fedftn train`: run one federated experiment end to end and leave a
//! self-contained run directory behind.

use std::fs;
use std::path::PathBuf;

use fedftn_core::federation::{
    run_federated_training, FrameRecorder, MetricRow, SiteTask, TransportKind,
};
use fedftn_core::param_tree::TreeSnapshot;
use fedftn_core::phantom::build_site_dataset;
use fedftn_core::tensor::Element;
use fedftn_core::wire::to_wire;

use crate::artifacts;
use crate::config::{ExperimentConfig, Precision};
use crate::{CliError, CliResult};

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub rows: usize,
}

/// Runs the experiment described by an already-resolved config and writes
/// `config.toml`, `metrics.csv`, and one `site-<id>.ckpt` per site.
///
/// An optional frame recorder taps the server's transport for traffic
/// audits; it does not alter the run.
pub fn cmd_train(
    config: &ExperimentConfig,
    recorder: Option<FrameRecorder>,
) -> CliResult<TrainOutcome> {
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let dir = artifacts::run_dir(config);
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Other(format!("creating {}: {e}", dir.display())))?;
    artifacts::write_text(&artifacts::config_path(&dir), &config.render())?;

    let (site_snapshots, mut rows) = match config.experiment.precision {
        Precision::F32 => run_typed::<f32>(config, recorder)?,
        Precision::F64 => run_typed::<f64>(config, recorder)?,
    };

    artifacts::sort_rows(&mut rows);
    let csv = artifacts::render_metrics_csv(&config.experiment.run_id, &rows);
    let metrics_csv = artifacts::metrics_path(&dir);
    artifacts::write_text(&metrics_csv, &csv)?;

    let final_epoch = config.experiment.global_epochs as u32;
    let mut checkpoints = Vec::new();
    for (site_id, snapshot) in &site_snapshots {
        let path = artifacts::checkpoint_path(&dir, *site_id);
        artifacts::write_checkpoint(&path, *site_id, final_epoch, snapshot)?;
        checkpoints.push(path);
    }

    Ok(TrainOutcome {
        run_dir: dir,
        metrics_csv,
        checkpoints,
        rows: rows.len(),
    })
}

/// Executes the run at one element type, returning wire-precision final
/// snapshots (what checkpoints store) plus all metric rows.
fn run_typed<T: Element>(
    config: &ExperimentConfig,
    recorder: Option<FrameRecorder>,
) -> CliResult<(Vec<(u32, TreeSnapshot<f32>)>, Vec<MetricRow>)> {
    let profiles = config.site_profiles()?;
    let volume_size = config.data.volume_size;
    let subjects = config.data.subjects_per_site;
    let [tr, va, te] = config.data.split;

    let tasks: Vec<SiteTask<T>> = profiles
        .into_iter()
        .map(|profile| SiteTask {
            site_id: profile.site_id,
            provider: Box::new(move || {
                build_site_dataset::<T>(&profile, volume_size, subjects, (tr, va, te))
            }),
        })
        .collect();

    let transport: TransportKind = config.experiment.transport.to_core();
    let outcome = run_federated_training(tasks, &config.run_config(), &transport, recorder)?;

    let mut snapshots = Vec::new();
    let mut rows = Vec::new();
    for site in outcome.sites {
        snapshots.push((site.site_id, to_wire(&site.final_params)));
        rows.extend(site.rows);
    }
    Ok((snapshots, rows))
}
