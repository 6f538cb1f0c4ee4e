//! `fedftn gen-data`: materialize the synthetic datasets a config
//! describes into an on-disk cache for inspection or external tooling.
//! Training and evaluation regenerate data deterministically in memory and
//! do not require this cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedftn_core::param_tree::{TreeEntry, TreeSnapshot};
use fedftn_core::phantom::{build_site_dataset, Sample, SiteDataset};
use fedftn_core::tensor::Element;
use serde::Serialize;

use crate::artifacts;
use crate::config::{DataSection, ExperimentConfig, Precision, SiteSection};
use crate::{CliError, CliResult};

pub struct GenDataOutcome {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub volumes_written: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    data: &'a DataSection,
    site: &'a [SiteSection],
}

/// Writes one blob per (site, subject) under
/// `<root>/site-<id>/<split>/subject-<k>.vol`, each holding the reference
/// volume as entry `"y"` and one `"x@<level>"` entry per count level, plus
/// a `manifest.toml` recording the dataset definition.
pub fn cmd_gen_data(config: &ExperimentConfig, root: &Path) -> CliResult<GenDataOutcome> {
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    match config.experiment.precision {
        Precision::F32 => gen_typed::<f32>(config, root),
        Precision::F64 => gen_typed::<f64>(config, root),
    }
}

fn gen_typed<T: Element>(config: &ExperimentConfig, root: &Path) -> CliResult<GenDataOutcome> {
    let mut resolved_data = config.data.clone();
    resolved_data.seed = Some(config.data_seed());
    let manifest_text = toml::to_string_pretty(&Manifest {
        data: &resolved_data,
        site: &config.sites,
    })
    .expect("manifest serializes");

    let [tr, va, te] = config.data.split;
    let mut written = 0;
    for profile in config.site_profiles()? {
        let dataset: SiteDataset<T> = build_site_dataset(
            &profile,
            config.data.volume_size,
            config.data.subjects_per_site,
            (tr, va, te),
        )
        .map_err(CliError::other)?;
        for (split, samples) in [
            ("train", &dataset.train),
            ("val", &dataset.val),
            ("test", &dataset.test),
        ] {
            let dir = root.join(format!("site-{}", profile.site_id)).join(split);
            fs::create_dir_all(&dir)
                .map_err(|e| CliError::Other(format!("creating {}: {e}", dir.display())))?;
            for (subject, snapshot) in subject_blobs(samples) {
                let path = dir.join(format!("subject-{subject}.vol"));
                // The blob's epoch field carries the subject index.
                artifacts::write_checkpoint(&path, profile.site_id, subject, &snapshot)?;
                written += 1;
            }
        }
    }

    let manifest = root.join("manifest.toml");
    artifacts::write_text(&manifest, &manifest_text)?;
    Ok(GenDataOutcome {
        root: root.to_path_buf(),
        manifest,
        volumes_written: written,
    })
}

/// Groups a split's samples by subject: one snapshot per subject holding
/// `"y"` once and every low-count realization as `"x@<level>"`.
fn subject_blobs<T: Element>(samples: &[Sample<T>]) -> Vec<(u32, TreeSnapshot<T>)> {
    let mut by_subject: BTreeMap<u32, TreeSnapshot<T>> = BTreeMap::new();
    for s in samples {
        let entry = by_subject.entry(s.subject_id).or_insert_with(|| {
            vec![TreeEntry {
                name: "y".to_string(),
                shape: s.y.shape().to_vec(),
                data: s.y.data().clone(),
            }]
        });
        entry.push(TreeEntry {
            name: format!("x@{}", s.d.value()),
            shape: s.x.shape().to_vec(),
            data: s.x.data().clone(),
        });
    }
    by_subject.into_iter().collect()
}
