use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptseg::dataset::{
    cross_reference, export_detector_labels, select_training_subset, DatasetManifest, Modality, Split,
};
use promptseg::harness::metadata::Variant;
use promptseg::harness::{evaluate, report, run_study, RunConfig};
use promptseg::jitter::JitterSpec;
use promptseg::metrics::{score_mask_dir, summarize, Metric};
use promptseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "promptseg",
    version,
    about = "Detector-prompted segmentation: data prep, evaluation and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pair images and masks by file stem and write a manifest.
    Ingest {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        dataset_id: String,
        #[arg(long, default_value = "other")]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mark a seeded subset of a manifest as the training split.
    Subset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detector training labels for the training split.
    Labels {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = promptseg::dataset::DEFAULT_MIN_AREA)]
        min_area: usize,
    },
    /// Run detector + segmenter over the eval split and write a run directory.
    Evaluate(RunFlags),
    /// Grow ground-truth boxes by each offset and record Dice per offset.
    Jitter(RunFlags),
    /// Score a directory of externally produced masks.
    ScoreMasks {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred_dir: PathBuf,
    },
    /// Write tables and box plots for a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

/// Flags that override fields of the `--config` file.
#[derive(Args)]
struct RunFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "manifest")]
    manifests: Vec<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    conf_thresh: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    mask_threshold: Option<f64>,
    /// Always take the decoder's first mask instead of the best-scored one.
    #[arg(long)]
    single_mask: bool,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<u32>>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "variant")]
    variants: Vec<Variant>,
    #[arg(long)]
    external_masks: Option<PathBuf>,
}

impl RunFlags {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if !self.manifests.is_empty() {
            c.manifests = self.manifests;
        }
        if let Some(v) = self.bundle {
            c.bundle = Some(v);
        }
        if let Some(v) = self.output_dir {
            c.output_dir = v;
        }
        if let Some(v) = self.conf_thresh {
            c.conf_thresh = v;
        }
        if let Some(v) = self.nms_iou {
            c.nms_iou = v;
        }
        if let Some(v) = self.mask_threshold {
            c.mask_threshold = v;
        }
        if self.single_mask {
            c.multimask = false;
        }
        if let Some(v) = self.min_area {
            c.min_area = v;
        }
        if let Some(v) = self.offsets {
            c.jitter = JitterSpec::new(v)?;
        }
        if let Some(v) = self.workers {
            c.workers = v;
        }
        if !self.variants.is_empty() {
            c.variants = self.variants;
        }
        if let Some(v) = self.external_masks {
            c.external_masks = Some(v);
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest {
            images,
            masks,
            dataset_id,
            modality,
            out,
        } => {
            let xref = cross_reference(&images, &masks, &dataset_id, modality)?;
            for w in &xref.warnings {
                log::warn!("{w}");
            }
            xref.manifest.save(&out)?;
            println!(
                "{} pairs written to {} ({} unmatched files)",
                xref.manifest.entries.len(),
                out.display(),
                xref.warnings.len()
            );
        }
        Command::Subset { manifest, n, seed, out } => {
            let split = select_training_subset(&DatasetManifest::load(&manifest)?, n, seed)?;
            split.save(&out)?;
            println!(
                "{} train / {} eval written to {}",
                split.count(Split::Train),
                split.count(Split::Eval),
                out.display()
            );
        }
        Command::Labels {
            manifest,
            out,
            min_area,
        } => {
            let n = export_detector_labels(&DatasetManifest::load(&manifest)?, min_area, &out)?;
            println!("{n} label files written to {}", out.display());
        }
        Command::Evaluate(flags) => {
            let outcome = evaluate(&flags.resolve()?)?;
            let failed = outcome.records.iter().filter(|r| r.failed).count();
            println!(
                "{} records ({failed} failed) written to {}",
                outcome.records.len(),
                outcome.run_dir.display()
            );
        }
        Command::Jitter(flags) => {
            let outcome = run_study(&flags.resolve()?)?;
            for (dataset, model, result) in &outcome.results {
                for d in &result.per_offset {
                    println!(
                        "{dataset} {model} DS{}: median Dice {:.4} (n = {})",
                        d.offset, d.summary.median, d.summary.n
                    );
                }
            }
        }
        Command::ScoreMasks { manifest, pred_dir } => {
            let scored = score_mask_dir(&DatasetManifest::load(&manifest)?, &pred_dir)?;
            for w in &scored.warnings {
                log::warn!("{w}");
            }
            if scored.scores.is_empty() {
                return Err(Error::Data("empty evaluation split".into()));
            }
            println!("sample_id,dice,precision,recall,f1");
            for (id, q) in &scored.scores {
                println!("{id},{},{},{},{}", q.dice, q.precision, q.recall, q.f1);
            }
            for m in Metric::ALL {
                let values: Vec<f64> = scored.scores.iter().map(|(_, q)| q.get(m)).collect();
                let s = summarize(&values)?;
                eprintln!(
                    "{}: mean {:.4} median {:.4} std {:.4}",
                    m.title(),
                    s.mean,
                    s.median,
                    s.std
                );
            }
        }
        Command::Report { run_dir } => {
            let files = report(&run_dir)?;
            println!("{} and {} plots written", files.table.display(), files.plots.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
