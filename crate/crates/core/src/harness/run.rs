//! `evaluate`: every eval sample through every configured pipeline, with
//! results persisted to a run directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_mask, open_image, write_json_line, BinaryMask, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::harness::bundle::{hash_file, load_bundle, ModelBundle};
use crate::harness::config::{EmptyPredictions, RunConfig};
use crate::harness::metadata::Variant;
use crate::harness::stub::GtIndex;
use crate::metrics::{compute_quad, score_mask_dir, summarize_with, Metric, MetricsQuad, StdKind, SummaryStats};
use crate::segmenter::{segment_image, EmbeddingCache, PipelineSettings};

/// Model label for masks scored from a directory.
pub const EXTERNAL_MASKS_LABEL: &str = "external_masks";

pub const RECORDS_FILE: &str = "records.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const RUN_MANIFEST_FILE: &str = "run-manifest.json";

/// One (sample, model) result. Contains nothing run-dependent, so a rerun
/// with the same inputs serializes to the same bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub model: String,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub detections: usize,
    pub failed: bool,
}

impl SampleRecord {
    pub fn quad(&self) -> MetricsQuad {
        MetricsQuad {
            dice: self.dice,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub model: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub workers: usize,
    pub models: Vec<FileDigest>,
    pub datasets: Vec<FileDigest>,
    pub records: usize,
    pub failures: usize,
}

/// Where a finished run was written and what it contained.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<SampleRecord>,
}

struct Sample<'a> {
    dataset_id: &'a str,
    entry: &'a ManifestEntry,
}

struct Worker {
    detector: Box<dyn crate::detector::DetectorBackend>,
    segmenters: Vec<(Variant, Box<dyn crate::segmenter::SegmenterBackend>, EmbeddingCache)>,
}

/// Builds a rayon pool with `workers` threads (0: one per core).
pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))
}

fn gt_index(manifests: &[DatasetManifest]) -> Result<GtIndex> {
    let mut index = GtIndex::new();
    for m in manifests {
        for entry in m.split(Split::Eval) {
            if index
                .insert(entry.sample_id.clone(), load_mask(&entry.mask_path)?)
                .is_some()
            {
                return Err(Error::data(format!(
                    "sample id {:?} appears in more than one manifest",
                    entry.sample_id
                )));
            }
        }
    }
    Ok(index)
}

fn selected_variants(config: &RunConfig, bundle: &ModelBundle) -> Result<Vec<Variant>> {
    let available = bundle.variants();
    if config.variants.is_empty() {
        return Ok(available);
    }
    for v in &config.variants {
        if !available.contains(v) {
            return Err(Error::config(format!("variant {v} is not in the bundle")));
        }
    }
    let mut chosen = config.variants.clone();
    chosen.sort();
    chosen.dedup();
    Ok(chosen)
}

fn run_sample(
    worker: &mut Worker,
    sample: &Sample<'_>,
    settings: &PipelineSettings,
) -> Result<Vec<(SampleRecord, TimingRecord)>> {
    let entry = sample.entry;
    let gt = load_mask(&entry.mask_path)?;
    let image = open_image(&entry.image_path)?;
    if (image.width() as usize, image.height() as usize) != gt.dims() {
        return Err(Error::data(format!(
            "sample {:?}: image is {}x{} but mask is {}x{}",
            entry.sample_id,
            image.width(),
            image.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut out = Vec::with_capacity(worker.segmenters.len());
    for (variant, seg, cache) in worker.segmenters.iter_mut() {
        let start = Instant::now();
        let result = segment_image(
            worker.detector.as_mut(),
            seg.as_mut(),
            cache,
            &entry.sample_id,
            &image,
            settings,
        );
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let (mask, detections, failed) = match result {
            Ok(s) => (s.mask, s.detections.len(), false),
            Err(e) => {
                log::warn!("{} / {}: {e}", entry.sample_id, variant.pipeline_label());
                (BinaryMask::empty(gt.width(), gt.height()), 0, true)
            }
        };
        let q = compute_quad(&mask, &gt)?;
        let model = variant.pipeline_label().to_owned();
        out.push((
            SampleRecord {
                sample_id: entry.sample_id.clone(),
                dataset_id: sample.dataset_id.to_owned(),
                model: model.clone(),
                dice: q.dice,
                precision: q.precision,
                recall: q.recall,
                f1: q.f1,
                detections,
                failed,
            },
            TimingRecord {
                sample_id: entry.sample_id.clone(),
                dataset_id: sample.dataset_id.to_owned(),
                model,
                wall_ms,
            },
        ));
    }
    Ok(out)
}

/// Runs the configured pipelines and writes the run directory.
pub fn evaluate(config: &RunConfig) -> Result<RunOutcome> {
    let bundle_path = config.require_models()?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let manifests = config
        .manifests
        .iter()
        .map(|p| DatasetManifest::load(p))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<Sample<'_>> = manifests
        .iter()
        .flat_map(|m| {
            m.split(Split::Eval).map(move |entry| Sample {
                dataset_id: &m.dataset_id,
                entry,
            })
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::data("empty evaluation split"));
    }
    let bundle = load_bundle(bundle_path)?;
    let variants = selected_variants(config, &bundle)?;
    let gt = if bundle.is_stub() {
        Some(Arc::new(gt_index(&manifests)?))
    } else {
        None
    };
    let settings = config.pipeline();

    let make_worker = || -> Result<Worker> {
        let detector = bundle.detector(gt.clone(), config.min_area)?;
        let segmenters = variants
            .iter()
            .map(|v| Ok((*v, bundle.segmenter(*v, gt.clone())?, EmbeddingCache::default())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Worker { detector, segmenters })
    };
    let pool = thread_pool(config.workers)?;
    let results: Vec<Result<Vec<(SampleRecord, TimingRecord)>>> = pool.install(|| {
        samples
            .par_iter()
            .map_init(make_worker, |worker, sample| match worker {
                Ok(w) => run_sample(w, sample, &settings),
                Err(e) => Err(Error::Backend(format!("cannot create backend session: {e}"))),
            })
            .collect()
    });

    let mut records = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        for (rec, time) in r? {
            records.push(rec);
            timings.push(time);
        }
    }

    if let Some(dir) = &config.external_masks {
        for m in &manifests {
            let scored = score_mask_dir(m, dir)?;
            for w in &scored.warnings {
                log::warn!("{w}");
            }
            for (sample_id, q) in scored.scores {
                records.push(SampleRecord {
                    sample_id,
                    dataset_id: m.dataset_id.clone(),
                    model: EXTERNAL_MASKS_LABEL.to_owned(),
                    dice: q.dice,
                    precision: q.precision,
                    recall: q.recall,
                    f1: q.f1,
                    detections: 0,
                    failed: false,
                });
            }
        }
    }

    let key = |r: &SampleRecord| (r.dataset_id.clone(), r.sample_id.clone(), r.model.clone());
    records.sort_by_key(key);
    timings.sort_by(|a, b| (&a.dataset_id, &a.sample_id, &a.model).cmp(&(&b.dataset_id, &b.sample_id, &b.model)));

    let run_dir = config.output_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    write_jsonl(&run_dir.join(RECORDS_FILE), &records)?;
    write_jsonl(&run_dir.join(TIMINGS_FILE), &timings)?;

    let failures = records.iter().filter(|r| r.failed).count();
    let mut per_model: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &records {
        let e = per_model.entry(&r.model).or_default();
        e.0 += 1;
        e.1 += r.failed as usize;
    }
    for (model, (total, failed)) in &per_model {
        if *failed as f64 > config.max_failure_rate * *total as f64 {
            return Err(Error::Backend(format!(
                "{model}: {failed} of {total} samples failed, above the {} limit; partial records in {}",
                config.max_failure_rate,
                run_dir.display()
            )));
        }
    }

    let summary = summarize_records(&records, config.std, config.empty_predictions)?;
    write_summary_csv(&run_dir.join(SUMMARY_FILE), &summary)?;
    write_json_pretty(&run_dir.join(CONFIG_FILE), config)?;

    let digest = |p: &Path| -> Result<FileDigest> {
        Ok(FileDigest {
            path: p.to_owned(),
            sha256: hash_file(p)?,
        })
    };
    let run_manifest = RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_owned(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        workers: pool.current_num_threads(),
        models: bundle.model_files().iter().map(|p| digest(p)).collect::<Result<_>>()?,
        datasets: config.manifests.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        records: records.len(),
        failures,
    };
    write_json_pretty(&run_dir.join(RUN_MANIFEST_FILE), &run_manifest)?;
    log::info!("{} records written to {}", records.len(), run_dir.display());
    Ok(RunOutcome { run_dir, records })
}

/// Summary statistics of every metric for one (dataset, model) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub dataset_id: String,
    pub model: String,
    pub metrics: Vec<(Metric, SummaryStats)>,
}

impl GroupSummary {
    pub fn get(&self, metric: Metric) -> &SummaryStats {
        &self
            .metrics
            .iter()
            .find(|(m, _)| *m == metric)
            .expect("all metrics present")
            .1
    }
}

/// Groups records by (dataset, model) in sorted order and summarizes each
/// metric.
pub fn summarize_records(
    records: &[SampleRecord],
    std_kind: StdKind,
    empty: EmptyPredictions,
) -> Result<Vec<GroupSummary>> {
    let mut groups: BTreeMap<(&str, &str), Vec<&SampleRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((&r.dataset_id, &r.model)).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((dataset_id, model), rows) in groups {
        let kept: Vec<&SampleRecord> = match empty {
            EmptyPredictions::Include => rows,
            EmptyPredictions::Exclude => rows
                .into_iter()
                .filter(|r| r.detections > 0 || r.model == EXTERNAL_MASKS_LABEL)
                .collect(),
        };
        if kept.is_empty() {
            log::warn!("{dataset_id} / {model}: no records left to summarize");
            continue;
        }
        let metrics = Metric::ALL
            .iter()
            .map(|m| {
                let values: Vec<f64> = kept.iter().map(|r| r.quad().get(*m)).collect();
                Ok((*m, summarize_with(&values, std_kind)?))
            })
            .collect::<Result<_>>()?;
        out.push(GroupSummary {
            dataset_id: dataset_id.to_owned(),
            model: model.to_owned(),
            metrics,
        });
    }
    Ok(out)
}

pub const SUMMARY_HEADER: &str = "dataset_id,model,stat,dice,precision,recall,f1";

/// `Mean`, `Median` and `Std` rows per (dataset, model).
pub fn summary_csv(summary: &[GroupSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for g in summary {
        for (stat, pick) in [
            ("Mean", (|s: &SummaryStats| s.mean) as fn(&SummaryStats) -> f64),
            ("Median", |s| s.median),
            ("Std", |s| s.std),
        ] {
            let vals: Vec<String> = Metric::ALL.iter().map(|m| pick(g.get(*m)).to_string()).collect();
            out.push_str(&format!("{},{},{stat},{}\n", g.dataset_id, g.model, vals.join(",")));
        }
    }
    out
}

fn write_summary_csv(path: &Path, summary: &[GroupSummary]) -> Result<()> {
    fs::write(path, summary_csv(summary)).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        write_json_line(&mut out, row, path)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_owned(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads `records.jsonl` from a run directory.
pub fn read_records(run_dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = run_dir.join(RECORDS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })
        })
        .collect()
}
