//! `jitter`: the box-expansion study for every configured dataset and
//! segmenter variant.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::harness::bundle::load_bundle;
use crate::harness::config::RunConfig;
use crate::harness::plot::box_plot_svg;
use crate::harness::report::PLOTS_DIR;
use crate::harness::run::{thread_pool, write_jsonl};
use crate::harness::stub::GtIndex;
use crate::jitter::{run_jitter_study, JitterResult};
use crate::segmenter::SegmenterBackend;

pub const JITTER_FILE: &str = "jitter.jsonl";
pub const JITTER_SUMMARY_FILE: &str = "jitter-summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterRecord {
    pub dataset_id: String,
    pub model: String,
    pub sample_id: String,
    pub offset: u32,
    pub dice: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub run_dir: PathBuf,
    pub results: Vec<(String, String, JitterResult)>,
}

fn summary_rows(dataset: &str, model: &str, result: &JitterResult) -> String {
    let mut out = String::new();
    for d in &result.per_offset {
        let s = &d.summary;
        out.push_str(&format!(
            "{dataset},{model},{},{},{},{},{},{},{},{},{}\n",
            d.offset, s.n, s.mean, s.median, s.std, s.q1, s.q3, s.whisker_lo, s.whisker_hi
        ));
    }
    out
}

/// Runs the study and writes `jitter.jsonl`, `jitter-summary.csv` and one
/// `plots/jitter_<dataset>_<variant>.svg` per pair. On a backend error the
/// rows finished so far are still written before the error is returned.
pub fn run_study(config: &RunConfig) -> Result<StudyOutcome> {
    let bundle_path = config.require_models()?;
    let manifests = config
        .manifests
        .iter()
        .map(|p| DatasetManifest::load(p))
        .collect::<Result<Vec<_>>>()?;
    let bundle = load_bundle(bundle_path)?;
    let variants = if config.variants.is_empty() {
        bundle.variants()
    } else {
        config.variants.clone()
    };
    let run_dir = config.output_dir.clone();
    let plots_dir = run_dir.join(PLOTS_DIR);
    fs::create_dir_all(&plots_dir).map_err(|e| Error::io(&plots_dir, e))?;
    let pool = thread_pool(config.workers)?;

    let mut rows = Vec::new();
    let mut summary = String::from("dataset_id,model,offset,n,mean,median,std,q1,q3,whisker_lo,whisker_hi\n");
    let mut results = Vec::new();
    let mut failure = None;
    'outer: for m in &manifests {
        let gt = if bundle.is_stub() {
            let mut index = GtIndex::new();
            for e in m.split(crate::dataset::Split::Eval) {
                index.insert(e.sample_id.clone(), crate::dataset::load_mask(&e.mask_path)?);
            }
            Some(Arc::new(index))
        } else {
            None
        };
        for variant in &variants {
            let model = variant.pipeline_label().to_owned();
            let make = || -> Result<Box<dyn SegmenterBackend>> { bundle.segmenter(*variant, gt.clone()) };
            let outcome = pool
                .install(|| run_jitter_study(m, make, &config.jitter, config.min_area, &config.decode(), config.std));
            match outcome {
                Ok(result) => {
                    for r in result.rows() {
                        rows.push(JitterRecord {
                            dataset_id: m.dataset_id.clone(),
                            model: model.clone(),
                            sample_id: r.sample_id,
                            offset: r.offset,
                            dice: r.dice,
                        });
                    }
                    summary.push_str(&summary_rows(&m.dataset_id, &model, &result));
                    let series: Vec<_> = result
                        .per_offset
                        .iter()
                        .map(|d| (format!("DS{}", d.offset), d.summary.clone()))
                        .collect();
                    let svg = box_plot_svg(&format!("{}: {model}", m.dataset_id), "Dice Score", &series);
                    let name = format!("jitter_{}_{}.svg", m.dataset_id, variant.as_str());
                    let path = plots_dir.join(name);
                    fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
                    results.push((m.dataset_id.clone(), model, result));
                }
                Err(partial) => {
                    for r in partial.completed {
                        rows.push(JitterRecord {
                            dataset_id: m.dataset_id.clone(),
                            model: model.clone(),
                            sample_id: r.sample_id,
                            offset: r.offset,
                            dice: r.dice,
                        });
                    }
                    failure = Some(partial.error);
                    break 'outer;
                }
            }
        }
    }
    write_jsonl(&run_dir.join(JITTER_FILE), &rows)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let summary_path = run_dir.join(JITTER_SUMMARY_FILE);
    fs::write(&summary_path, summary).map_err(|e| Error::io(&summary_path, e))?;
    Ok(StudyOutcome { run_dir, results })
}
