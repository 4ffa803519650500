//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use promptseg::dataset::{load_mask, save_mask, BBox, BinaryMask, DatasetManifest, ManifestEntry, Modality, Split};
use promptseg::detector::{nms, Detection};
use promptseg::harness::metadata::Variant;
use promptseg::harness::stub::{GtIndex, StubKind, StubSegmenter};
use promptseg::harness::{evaluate, report, RunConfig};
use promptseg::jitter::{run_jitter_study, JitterSpec};
use promptseg::metrics::{compute_quad, summarize, Metric, StdKind};
use promptseg::preprocess::{map_box, Direction, LetterboxTransform, Placement};
use promptseg::segmenter::{DecodeSettings, SegmenterBackend};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::Shape;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn brute_quad(pred: &BinaryMask, gt: &BinaryMask) -> [f64; 4] {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            match (pred.get(x, y), gt.get(x, y)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let (p, g) = (tp + fp, tp + fn_);
    if p == 0 && g == 0 {
        return [1.0; 4];
    }
    if p == 0 || g == 0 {
        return [0.0; 4];
    }
    let tp = tp as f64;
    let dice = 2.0 * tp / (2.0 * tp + fp as f64 + fn_ as f64);
    [dice, tp / p as f64, tp / g as f64, dice]
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    for i in 0..1000 {
        let (w, h) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let (dp, dg) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let mut sample = |density: f64| {
            let density = if rng.gen_bool(0.1) { 0.0 } else { density };
            BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(density))
        };
        let (pred, gt) = (sample(dp), sample(dg));
        let q = compute_quad(&pred, &gt).map_err(|e| e.to_string())?;
        let want = brute_quad(&pred, &gt);
        check(
            [q.dice, q.precision, q.recall, q.f1] == want,
            format!("pair {i}: {q:?} != {want:?}"),
        )?;
        check((q.dice - q.f1).abs() <= 1e-12, format!("pair {i}: dice != f1"))?;
    }
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("1000 pairs exact in {:.2?}", start.elapsed()))
}

fn degenerate_conventions() -> Outcome {
    let empty = BinaryMask::empty(8, 8);
    let full = BinaryMask::from_fn(8, 8, |x, _| x < 4);
    let cases = [
        ("both empty", &empty, &empty, [1.0, 1.0, 1.0]),
        ("pred empty", &empty, &full, [0.0, 0.0, 0.0]),
        ("gt empty", &full, &empty, [0.0, 0.0, 0.0]),
    ];
    for (name, pred, gt, want) in cases {
        let q = compute_quad(pred, gt).map_err(|e| e.to_string())?;
        check(
            [q.dice, q.precision, q.recall] == want && q.f1 == q.dice,
            format!("{name}: {q:?}"),
        )?;
    }
    Ok("3 cases x (dice, precision, recall) exact".into())
}

fn reference_nms(dets: &[(i64, i64, i64, i64, f64)], thresh: f64) -> Vec<usize> {
    let area = |d: &(i64, i64, i64, i64, f64)| (d.2 - d.0) * (d.3 - d.1);
    let overlap = |a: usize, b: usize| {
        let (p, q) = (&dets[a], &dets[b]);
        let iw = (p.2.min(q.2) - p.0.max(q.0)).max(0);
        let ih = (p.3.min(q.3) - p.1.max(q.1)).max(0);
        let inter = iw * ih;
        let union = area(p) + area(q) - inter;
        if union <= 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    };
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort: stable by construction
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j - 1]].4 < dets[order[j]].4 {
            order.swap(j - 1, j);
            j -= 1;
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| overlap(k, i) < thresh) {
            kept.push(i);
        }
    }
    kept
}

fn nms_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let start = Instant::now();
    let mut total_kept = 0;
    for inst in 0..200 {
        let n = rng.gen_range(0..=200);
        let thresh = [0.0, 0.3, 0.45, 0.5, 0.7, 1.0][rng.gen_range(0..6)];
        let raw: Vec<(i64, i64, i64, i64, f64)> = (0..n)
            .map(|_| {
                let x0 = rng.gen_range(0..90);
                let y0 = rng.gen_range(0..90);
                let w = rng.gen_range(1..=30);
                let h = rng.gen_range(1..=30);
                // coarse scores so ties are common
                let score = rng.gen_range(1..=10) as f64 / 10.0;
                (x0, y0, x0 + w, y0 + h, score)
            })
            .collect();
        let dets: Vec<Detection> = raw
            .iter()
            .map(|&(x0, y0, x1, y1, score)| Detection {
                bbox: BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).unwrap(),
                score,
                class_id: 0,
            })
            .collect();
        let want: Vec<Detection> = reference_nms(&raw, thresh).into_iter().map(|i| dets[i]).collect();
        let got = nms(&dets, thresh);
        check(
            got == want,
            format!("instance {inst} (n = {n}, thresh {thresh}) differs"),
        )?;
        total_kept += got.len();
    }
    within(start.elapsed(), Duration::from_secs(2))?;
    Ok(format!(
        "200 instances, {total_kept} survivors, in {:.2?}",
        start.elapsed()
    ))
}

fn geometry_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(1..=4000), rng.gen_range(1..=4000));
        let dst = [64, 320, 640, 1024][rng.gen_range(0..4)];
        let placement = if rng.gen_bool(0.5) {
            Placement::Center
        } else {
            Placement::TopLeft
        };
        let t = LetterboxTransform::new(w, h, dst, placement).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let x0 = rng.gen_range(0.0..w as f64);
            let y0 = rng.gen_range(0.0..h as f64);
            let x1 = rng.gen_range(x0..=w as f64);
            let y1 = rng.gen_range(y0..=h as f64);
            let b = BBox::new(x0, y0, x1, y1).unwrap();
            let there = map_box(&b, &t, Direction::Forward).map_err(|e| e.to_string())?;
            let back = map_box(&there, &t, Direction::Inverse).map_err(|e| e.to_string())?;
            for (a, z) in [(b.x0, back.x0), (b.y0, back.y0), (b.x1, back.x1), (b.y1, back.y1)] {
                worst = worst.max((a - z).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("max error {worst:e}"))?;
    Ok(format!("1000 boxes, 50 sizes, max error {worst:.1e}"))
}

fn jitter_study(manifest_path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let manifest = DatasetManifest::load(manifest_path).map_err(|e| e.to_string())?;
    let mut gt = GtIndex::new();
    for e in &manifest.entries {
        gt.insert(e.sample_id.clone(), load_mask(&e.mask_path).map_err(|e| e.to_string())?);
    }
    let gt = Arc::new(gt);
    let make = || -> promptseg::Result<Box<dyn SegmenterBackend>> {
        Ok(Box::new(StubSegmenter::new(
            StubKind::OracleBoxInterior,
            Variant::Standard,
            Some(gt.clone()),
        )))
    };
    let result = run_jitter_study(
        &manifest,
        make,
        &JitterSpec::default(),
        0,
        &DecodeSettings::default(),
        StdKind::Sample,
    )
    .map_err(|p| p.error.to_string())?;
    Ok((0..result.sample_ids.len())
        .map(|i| result.per_offset.iter().map(|d| d.dice[i]).collect())
        .collect())
}

fn jitter_analytics() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;

    let single = tmp.path().join("single");
    fs::create_dir_all(&single).unwrap();
    let gt = BinaryMask::from_box(64, 64, &BBox::new(22.0, 22.0, 42.0, 42.0).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (image_path, mask_path) = (single.join("img.png"), single.join("mask.png"));
    common::image_for(&gt, &mut rng).save(&image_path).unwrap();
    save_mask(&gt, &mask_path).unwrap();
    let entry = ManifestEntry {
        sample_id: "square".into(),
        image_path,
        mask_path,
        split: Split::Eval,
    };
    let manifest_path = single.join("manifest.jsonl");
    DatasetManifest::new("square", Modality::Xray, vec![entry])
        .unwrap()
        .save(&manifest_path)
        .unwrap();
    let dice = jitter_study(&manifest_path)?.remove(0);
    check(dice[0] == 1.0, format!("DS0 = {}", dice[0]))?;
    check((dice[1] - 0.6154).abs() <= 1e-4, format!("DS5 = {}", dice[1]))?;

    let many = tmp.path().join("many");
    let manifest_path = common::write_dataset(&many, "rects", 100, 64, &[Shape::Rect], 15);
    let per_sample = jitter_study(&manifest_path)?;
    check(per_sample.len() == 100, format!("{} samples", per_sample.len()))?;
    for (i, d) in per_sample.iter().enumerate() {
        check(
            d.windows(2).all(|w| w[1] <= w[0]),
            format!("sample {i} not monotone: {d:?}"),
        )?;
    }
    Ok(format!(
        "DS0 = {}, DS5 = {:.6}, 100 rectangles non-increasing",
        dice[0], dice[1]
    ))
}

fn reference_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = h as usize;
    if i + 1 >= sorted.len() {
        sorted[i]
    } else {
        sorted[i] * (1.0 - (h - i as f64)) + sorted[i + 1] * (h - i as f64)
    }
}

fn summary_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    for set in 0..1000 {
        let n = rng.gen_range(1..=60);
        let mut values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        if set % 5 == 0 {
            values.push(rng.gen_range(-5.0..5.0));
        }
        let s = summarize(&values).map_err(|e| e.to_string())?;
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let std = if n == 1 {
            0.0
        } else {
            (sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        let (q1, q3) = (reference_quantile(&sorted, 0.25), reference_quantile(&sorted, 0.75));
        let (lo, hi) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
        let inside: Vec<f64> = sorted.iter().copied().filter(|v| *v >= lo && *v <= hi).collect();
        let outliers: Vec<f64> = sorted.iter().copied().filter(|v| *v < lo || *v > hi).collect();
        let ok = s.n == n
            && close(s.mean, mean)
            && close(s.median, median)
            && close(s.std, std)
            && close(s.q1, q1)
            && close(s.q3, q3)
            && close(s.whisker_lo, inside[0].min(q1))
            && close(s.whisker_hi, inside[inside.len() - 1].max(q3))
            && s.outliers == outliers;
        check(ok, format!("set {set}: {s:?} vs sorted {sorted:?}"))?;
    }
    let s = summarize(&[1.0, 2.0, 3.0, 4.0, 100.0]).map_err(|e| e.to_string())?;
    check(
        s.whisker_hi == 4.0 && s.outliers == [100.0],
        format!("[1,2,3,4,100]: whisker_hi {} outliers {:?}", s.whisker_hi, s.outliers),
    )?;
    Ok("1000 sets within 1e-12; [1,2,3,4,100] -> whisker_hi 4, outliers [100]".into())
}

struct EndToEnd {
    _tmp: tempfile::TempDir,
    run_dir: std::path::PathBuf,
}

fn end_to_end() -> Result<(String, EndToEnd), String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = common::write_dataset(
        &tmp.path().join("data"),
        "synthetic",
        50,
        64,
        &[Shape::Rect, Shape::Ellipse],
        17,
    );
    let bundle = common::write_stub_bundle(tmp.path(), "oracle_box_interior");
    let run = |workers: usize, name: &str| {
        let config = RunConfig {
            manifests: vec![manifest.clone()],
            bundle: Some(bundle.clone()),
            output_dir: tmp.path().join(name),
            workers,
            ..RunConfig::default()
        };
        let start = Instant::now();
        let outcome = evaluate(&config).map_err(|e| e.to_string())?;
        Ok::<_, String>((outcome, start.elapsed()))
    };
    let (first, t1) = run(1, "run_w1")?;
    let (second, t4) = run(4, "run_w4")?;
    within(t1, Duration::from_secs(10))?;
    within(t4, Duration::from_secs(10))?;

    let mut per_model: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &first.records {
        *per_model.entry(r.model.as_str()).or_default() += 1;
        check(!r.failed, format!("{} failed", r.sample_id))?;
    }
    check(per_model.len() == 2, format!("models {per_model:?}"))?;
    check(
        per_model.values().all(|&n| n == 50),
        format!("records per model {per_model:?}"),
    )?;
    let rects_perfect = first
        .records
        .iter()
        .filter(|r| r.sample_id.ends_with(['0', '2', '4', '6', '8']))
        .all(|r| r.dice == 1.0);
    check(rects_perfect, "a rectangle sample scored Dice below 1")?;

    let a = fs::read(first.run_dir.join("records.jsonl")).map_err(|e| e.to_string())?;
    let b = fs::read(second.run_dir.join("records.jsonl")).map_err(|e| e.to_string())?;
    check(a == b, "records.jsonl differs between 1 and 4 workers")?;
    Ok((
        format!(
            "50 samples x {} variants, {:.2?} (1 worker) / {:.2?} (4 workers), records.jsonl byte-identical",
            per_model.len(),
            t1,
            t4
        ),
        EndToEnd {
            run_dir: first.run_dir,
            _tmp: tmp,
        },
    ))
}

type SummaryRows = BTreeMap<(String, String, String), [f64; 4]>;

fn csv_summary(path: &Path) -> Result<SummaryRows, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    check(
        lines.next() == Some("dataset_id,model,stat,dice,precision,recall,f1"),
        "unexpected summary.csv header",
    )?;
    let mut rows = BTreeMap::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        check(f.len() == 7, format!("bad row {line:?}"))?;
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&f[3..]) {
            *slot = s.parse().map_err(|_| format!("bad number in {line:?}"))?;
        }
        rows.insert((f[0].to_owned(), f[1].to_owned(), f[2].to_owned()), v);
    }
    Ok(rows)
}

fn report_fidelity(run: &EndToEnd) -> Outcome {
    let files = report(&run.run_dir).map_err(|e| e.to_string())?;

    let text = fs::read_to_string(run.run_dir.join("records.jsonl")).map_err(|e| e.to_string())?;
    let keys = ["dice", "precision", "recall", "f1"];
    let mut groups: BTreeMap<(String, String), Vec<[f64; 4]>> = BTreeMap::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let key = (
            v["dataset_id"].as_str().unwrap().to_owned(),
            v["model"].as_str().unwrap().to_owned(),
        );
        groups
            .entry(key)
            .or_default()
            .push(keys.map(|k| v[k].as_f64().unwrap()));
    }
    let csv = csv_summary(&files.summary)?;
    check(
        csv.len() == groups.len() * 3,
        format!("{} csv rows for {} groups", csv.len(), groups.len()),
    )?;
    for ((dataset, model), rows) in &groups {
        for m in 0..4 {
            let mut v: Vec<f64> = rows.iter().map(|r| r[m]).collect();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let median = (v[(v.len() - 1) / 2] + v[v.len() / 2]) / 2.0;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            for (stat, want) in [("Mean", mean), ("Median", median), ("Std", std)] {
                let got = csv
                    .get(&(dataset.clone(), model.clone(), stat.to_owned()))
                    .ok_or_else(|| format!("missing {dataset},{model},{stat}"))?[m];
                check(
                    (got - want).abs() <= 1e-9,
                    format!("{dataset},{model},{stat},{}: {got} vs {want}", keys[m]),
                )?;
            }
        }
    }

    let models: Vec<&str> = groups.keys().map(|(_, m)| m.as_str()).collect();
    check(
        files.plots.len() == Metric::ALL.len(),
        format!("{} plots", files.plots.len()),
    )?;
    for plot in &files.plots {
        let svg = fs::read_to_string(plot).map_err(|e| e.to_string())?;
        let doc = roxmltree::Document::parse(&svg).map_err(|e| format!("{}: {e}", plot.display()))?;
        let series: Vec<_> = doc
            .descendants()
            .filter(|n| n.has_tag_name("g") && n.attribute("class") == Some("series"))
            .collect();
        let labels: Vec<&str> = series.iter().filter_map(|g| g.attribute("data-label")).collect();
        check(labels == models, format!("{}: series {labels:?}", plot.display()))?;
        for g in &series {
            let boxes = g
                .descendants()
                .filter(|n| n.has_tag_name("rect") && n.attribute("class") == Some("box"))
                .count();
            check(boxes == 1, format!("{}: {boxes} boxes in one series", plot.display()))?;
        }
    }
    Ok(format!(
        "{} groups x 3 stats x 4 metrics within 1e-9; {} plots, one box per model",
        groups.len(),
        files.plots.len()
    ))
}

/// Runs only when `PROMPTSEG_REAL_BUNDLE` and `PROMPTSEG_REAL_MANIFEST` point
/// at exported graphs and a chest X-ray manifest.
fn real_bundle() -> Option<Outcome> {
    let bundle = std::env::var_os("PROMPTSEG_REAL_BUNDLE")?;
    let manifest = std::env::var_os("PROMPTSEG_REAL_MANIFEST")?;
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return Some(Err(e.to_string())),
    };
    let config = RunConfig {
        manifests: vec![manifest.into()],
        bundle: Some(bundle.into()),
        output_dir: tmp.path().join("run"),
        ..RunConfig::default()
    };
    let outcome = (|| {
        let out = evaluate(&config).map_err(|e| e.to_string())?;
        let mean = |model: &str| {
            let v: Vec<f64> = out
                .records
                .iter()
                .filter(|r| r.model == model)
                .map(|r| r.dice)
                .collect();
            (v.len(), v.iter().sum::<f64>() / v.len().max(1) as f64)
        };
        let (n, std_mean) = mean(Variant::Standard.pipeline_label());
        let (_, hq_mean) = mean(Variant::HighQuality.pipeline_label());
        check(n >= 50, format!("{n} samples, need at least 50"))?;
        check(
            (std_mean - 0.9012).abs() <= 0.08,
            format!("standard mean Dice {std_mean:.4}"),
        )?;
        check(
            std_mean >= hq_mean - 0.03,
            format!("standard {std_mean:.4} vs high quality {hq_mean:.4}"),
        )?;
        Ok(format!(
            "standard mean Dice {std_mean:.4}, high quality {hq_mean:.4}, n = {n}"
        ))
    })();
    Some(outcome)
}

fn main() {
    let mut failed = 0;
    let mut line = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS  {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL  {name}: {detail}");
        }
    };
    line("metric oracle equivalence", metric_oracle());
    line("degenerate conventions", degenerate_conventions());
    line("nms equivalence", nms_equivalence());
    line("geometry round-trips", geometry_round_trips());
    line("jitter analytics", jitter_analytics());
    line("summary-stat equivalence", summary_equivalence());
    match end_to_end() {
        Ok((detail, run)) => {
            line("end-to-end determinism", Ok(detail));
            line("report fidelity", report_fidelity(&run));
        }
        Err(e) => {
            line("end-to-end determinism", Err(e));
            line("report fidelity", Err("no run directory to report on".into()));
        }
    }
    match real_bundle() {
        Some(Ok(detail)) => println!("PASS  real bundle bracket (not gating): {detail}"),
        Some(Err(detail)) => println!("FAIL  real bundle bracket (not gating): {detail}"),
        None => println!(
            "SKIP  real bundle bracket (not gating): set PROMPTSEG_REAL_BUNDLE and PROMPTSEG_REAL_MANIFEST to run"
        ),
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
