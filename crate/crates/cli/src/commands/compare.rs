//! `fedftn compare`: side-by-side tables and charts for completed runs
//! that trained on the same data.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::artifacts::{self, CsvRow};
use crate::chart::BarChart;
use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

pub struct CompareOutcome {
    pub table_text: String,
    pub csv_path: PathBuf,
    pub chart_paths: Vec<PathBuf>,
    /// Per metric: `(site, level) -> index of the winning run`.
    pub winners: BTreeMap<&'static str, BTreeMap<(u32, String), usize>>,
}

struct LoadedRun {
    run_id: String,
    config: ExperimentConfig,
    /// Final-epoch test rows keyed by (site, count level rendered).
    finals: BTreeMap<(u32, String), (f64, f64, f64)>,
}

const METRICS: [(&str, bool); 3] = [("psnr", true), ("nmse", false), ("ssim", true)];

/// Reads ≥ 2 run directories, checks they trained on the same dataset,
/// and writes a comparison CSV plus one bar chart per metric to
/// `output_dir`.
pub fn cmd_compare(run_dirs: &[PathBuf], output_dir: &Path) -> CliResult<CompareOutcome> {
    if run_dirs.len() < 2 {
        return Err(CliError::Config(format!(
            "compare needs at least two run directories, got {}",
            run_dirs.len()
        )));
    }
    let runs: Vec<LoadedRun> = run_dirs.iter().map(|d| load_run(d)).collect::<CliResult<_>>()?;

    let first = &runs[0];
    for run in &runs[1..] {
        if run.config.data_seed() != first.config.data_seed() {
            return Err(CliError::Incomparable(format!(
                "runs \"{}\" and \"{}\" trained on different dataset seeds ({} vs {})",
                first.run_id,
                run.run_id,
                first.config.data_seed(),
                run.config.data_seed()
            )));
        }
        if run.config.data != first.config.data || run.config.sites != first.config.sites {
            return Err(CliError::Incomparable(format!(
                "runs \"{}\" and \"{}\" define different datasets or sites",
                first.run_id, run.run_id
            )));
        }
    }
    let keys: Vec<(u32, String)> = first.finals.keys().cloned().collect();
    for run in &runs {
        let got: Vec<(u32, String)> = run.finals.keys().cloned().collect();
        if got != keys {
            return Err(CliError::Incomparable(format!(
                "run \"{}\" reports a different (site, level) grid than \"{}\"",
                run.run_id, first.run_id
            )));
        }
    }

    fs::create_dir_all(output_dir)
        .map_err(|e| CliError::Other(format!("creating {}: {e}", output_dir.display())))?;

    let mut winners: BTreeMap<&'static str, BTreeMap<(u32, String), usize>> = BTreeMap::new();
    let mut table = String::new();
    let mut csv = String::from("metric,site,count_level");
    for run in &runs {
        csv.push(',');
        csv.push_str(&run.run_id);
    }
    csv.push_str(",best\n");

    for (metric, higher_better) in METRICS {
        table.push_str(&format!(
            "metric {metric}, final epoch, test split ({} is better)\n",
            if higher_better { "higher" } else { "lower" }
        ));
        table.push_str(&format!("{:<6}{:<12}", "site", "level"));
        for run in &runs {
            table.push_str(&format!("{:>16}", run.run_id));
        }
        table.push('\n');
        let metric_winners = winners.entry(metric).or_default();
        for key in &keys {
            let values: Vec<f64> = runs.iter().map(|r| pick(&r.finals[key], metric)).collect();
            let best = best_index(&values, higher_better);
            metric_winners.insert(key.clone(), best);
            table.push_str(&format!("{:<6}{:<12}", key.0, key.1));
            for (ix, v) in values.iter().enumerate() {
                let flag = if ix == best { "*" } else { " " };
                table.push_str(&format!("{:>15.5}{flag}", v));
            }
            table.push('\n');
            csv.push_str(&format!("{metric},{},{}", key.0, key.1));
            for v in &values {
                csv.push_str(&format!(",{v}"));
            }
            csv.push_str(&format!(",{}\n", runs[best].run_id));
        }
        table.push('\n');
    }

    let csv_path = output_dir.join("comparison.csv");
    artifacts::write_text(&csv_path, &csv)?;

    let mut chart_paths = Vec::new();
    for (metric, _) in METRICS {
        let groups: Vec<String> = keys.iter().map(|(s, d)| format!("s{s}@{d}")).collect();
        let series = runs
            .iter()
            .map(|r| {
                (
                    r.run_id.clone(),
                    keys.iter().map(|k| pick(&r.finals[k], metric)).collect(),
                )
            })
            .collect();
        let chart = BarChart {
            title: format!("{metric} by site and count level (final epoch, test)"),
            y_label: metric.to_string(),
            groups,
            series,
        };
        let path = output_dir.join(format!("chart-{metric}.svg"));
        artifacts::write_text(&path, &chart.render_svg())?;
        chart_paths.push(path);
    }

    Ok(CompareOutcome {
        table_text: table,
        csv_path,
        chart_paths,
        winners,
    })
}

fn pick(values: &(f64, f64, f64), metric: &str) -> f64 {
    match metric {
        "psnr" => values.0,
        "nmse" => values.1,
        _ => values.2,
    }
}

fn best_index(values: &[f64], higher_better: bool) -> usize {
    let mut best = 0;
    for (ix, v) in values.iter().enumerate() {
        let better = if higher_better {
            *v > values[best]
        } else {
            *v < values[best]
        };
        if better {
            best = ix;
        }
    }
    best
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let config = ExperimentConfig::parse(&artifacts::read_text(&artifacts::config_path(dir))?)
        .map_err(|e| CliError::Other(format!("{}: {e}", dir.display())))?;
    let rows = artifacts::parse_metrics_csv(&artifacts::read_text(&artifacts::metrics_path(
        dir,
    ))?)?;
    if rows.is_empty() {
        return Err(CliError::Other(format!(
            "{}: metrics.csv contains no rows",
            dir.display()
        )));
    }
    let run_id = rows[0].run_id.clone();
    let final_epoch = rows.iter().map(|r| r.row.epoch).max().unwrap();
    let mut finals = BTreeMap::new();
    for CsvRow { row, .. } in rows {
        if row.epoch == final_epoch && row.split == "test" {
            finals.insert(
                (row.site, format!("{}", row.count_level)),
                (row.psnr, row.nmse, row.ssim),
            );
        }
    }
    Ok(LoadedRun {
        run_id,
        config,
        finals,
    })
}
