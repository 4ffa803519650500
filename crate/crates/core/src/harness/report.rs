//! Tables and box plots from a finished run directory.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::plot::box_plot_svg;
use crate::harness::run::{
    read_records, summarize_records, summary_csv, GroupSummary, CONFIG_FILE, RECORDS_FILE, SUMMARY_FILE,
};
use crate::metrics::Metric;

pub const REPORT_FILE: &str = "report.md";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

/// Markdown tables: per dataset, one block per model with Mean, Median and
/// Std rows and one column per metric.
pub fn markdown_tables(summary: &[GroupSummary]) -> String {
    let mut out = String::from("# Results\n");
    let mut current = None;
    for g in summary {
        if current != Some(&g.dataset_id) {
            let _ = write!(out, "\n## {}\n", g.dataset_id);
            current = Some(&g.dataset_id);
        }
        let _ = writeln!(
            out,
            "\n| Stats | {} |",
            Metric::ALL.map(|m| format!("{} {}", g.model, m.title())).join(" | ")
        );
        let _ = writeln!(out, "|---|{}", "---|".repeat(Metric::ALL.len()));
        for stat in ["Mean", "Median", "Std."] {
            let cells: Vec<String> = Metric::ALL
                .iter()
                .map(|m| {
                    let s = g.get(*m);
                    let v = match stat {
                        "Mean" => s.mean,
                        "Median" => s.median,
                        _ => s.std,
                    };
                    format!("{v:.4}")
                })
                .collect();
            let _ = writeln!(out, "| {stat} | {} |", cells.join(" | "));
        }
        let n = g.get(Metric::Dice).n;
        let _ = writeln!(out, "\n{n} samples.");
    }
    out
}

fn plot_name(dataset: &str, metric: Metric, single: bool) -> String {
    let safe: String = dataset
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if single {
        format!("{}.svg", metric.key())
    } else {
        format!("{safe}_{}.svg", metric.key())
    }
}

/// Writes `report.md`, `summary.csv` and one box plot per dataset and
/// metric (`plots/<metric>.svg` for single-dataset runs).
pub fn report(run_dir: &Path) -> Result<ReportFiles> {
    if !run_dir.join(RECORDS_FILE).is_file() {
        return Err(Error::data(format!("{}: missing {RECORDS_FILE}", run_dir.display())));
    }
    let records = read_records(run_dir)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "{}: {RECORDS_FILE} has no records",
            run_dir.display()
        )));
    }
    let config_path = run_dir.join(CONFIG_FILE);
    let config = if config_path.is_file() {
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: config_path.clone(),
            source,
        })?
    } else {
        RunConfig::default()
    };
    let summary = summarize_records(&records, config.std, config.empty_predictions)?;

    let table = run_dir.join(REPORT_FILE);
    fs::write(&table, markdown_tables(&summary)).map_err(|e| Error::io(&table, e))?;
    let summary_path = run_dir.join(SUMMARY_FILE);
    fs::write(&summary_path, summary_csv(&summary)).map_err(|e| Error::io(&summary_path, e))?;

    let plots_dir = run_dir.join(PLOTS_DIR);
    fs::create_dir_all(&plots_dir).map_err(|e| Error::io(&plots_dir, e))?;
    let mut datasets: Vec<&str> = summary.iter().map(|g| g.dataset_id.as_str()).collect();
    datasets.dedup();
    let single = datasets.len() == 1;
    let mut plots = Vec::new();
    for dataset in &datasets {
        for metric in Metric::ALL {
            let series: Vec<_> = summary
                .iter()
                .filter(|g| g.dataset_id == *dataset)
                .map(|g| (g.model.clone(), g.get(metric).clone()))
                .collect();
            let svg = box_plot_svg(&format!("{dataset}: {}", metric.title()), metric.title(), &series);
            let path = plots_dir.join(plot_name(dataset, metric, single));
            fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            plots.push(path);
        }
    }
    Ok(ReportFiles {
        table,
        summary: summary_path,
        plots,
    })
}
