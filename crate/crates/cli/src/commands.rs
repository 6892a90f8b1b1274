//! The `synth`, `train`, `eval` and `robustness` commands.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use aqua_core::evalkit::{evaluate, per_class_ap, robustness_sweep, Detection, EvalReport, GroundTruth, RawDetections, RobustnessTable};
use aqua_data::dataset::{build_multidomain_dataset, DatasetManifest, Sample};
use aqua_data::write_atomic;
use aqua_detector::{checkpoint, Detector, TrainMode, Trainer};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, SCHEMA_VERSION};
use crate::data::{eval_samples, Dataset, TrainPool};
use crate::error::{io, CliError, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const LOSS_LOG: &str = "losses.jsonl";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS_JSON: &str = "metrics.jsonl";
pub const METRICS_TABLE: &str = "metrics.txt";
pub const ROBUSTNESS_JSON: &str = "robustness.jsonl";
pub const ROBUSTNESS_TABLE: &str = "robustness.txt";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    Ok(write_atomic(path, bytes)?)
}

fn write_resolved(out: &Path, config: &ExperimentConfig) -> Result<()> {
    write_file(&out.join(RESOLVED_CONFIG), config.to_toml().as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

/// Render the dataset under `out` and return its manifest.
pub fn synth(config: &ExperimentConfig, out: &Path) -> Result<DatasetManifest> {
    create_dir(out)?;
    let manifest = build_multidomain_dataset(&config.dataset, out)?;
    write_resolved(out, config)?;
    Ok(manifest)
}

pub struct TrainOptions {
    pub mode: TrainMode,
    pub resume: Option<PathBuf>,
    /// Stop once this many steps are done, keeping the checkpoint resumable.
    pub until: Option<u64>,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub mode: String,
    pub steps: u64,
    pub finished: bool,
    pub final_total: Option<f64>,
    pub running: std::collections::BTreeMap<String, f64>,
    pub checkpoint_sha256: String,
}

/// Train on the source splits of `data`, writing a loss log and checkpoints
/// under `out`. On divergence the last checkpoint is kept.
pub fn train(config: &ExperimentConfig, data: &Path, out: &Path, options: &TrainOptions) -> Result<TrainSummary> {
    let dataset = Dataset::open(data)?;
    let pool = TrainPool::load(&dataset)?;
    if pool.sources.len() != config.detector.num_domains {
        return Err(CliError::Config(format!(
            "detector.num_domains: {} but the dataset has {} source domains",
            config.detector.num_domains,
            pool.sources.len()
        )));
    }
    create_dir(out)?;
    let log_path = out.join(LOSS_LOG);
    let ckpt_path = out.join(CHECKPOINT);

    let mut trainer = match &options.resume {
        Some(path) => {
            let t = checkpoint::load(path)?;
            if t.mode() != options.mode {
                return Err(CliError::Config(format!("checkpoint was trained as `{}`, not `{}`", t.mode(), options.mode)));
            }
            truncate_log(&log_path, t.state().step)?;
            t
        }
        None => {
            let detector = Detector::new(config.detector.clone(), config.training.seed)?;
            let t = Trainer::new(detector, config.training.clone(), config.dg.clone(), options.mode)?;
            std::fs::write(&log_path, b"").map_err(|e| io(&log_path, e))?;
            t
        }
    };
    write_resolved(out, config)?;
    let mut digest = checkpoint::save(&ckpt_path, &trainer)?;
    let mut log = std::fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| io(&log_path, e))?;

    let train_cfg = trainer.train_config().clone();
    let pairing = trainer.mode().needs_pairs().then_some(config.pairing);
    let end = options.until.map_or(train_cfg.steps, |u| u.min(train_cfg.steps));
    let mut last_total = None;
    while trainer.state().step < end {
        let step = trainer.state().step;
        let batch = pool.batch(train_cfg.seed, step, train_cfg.batch_size, train_cfg.flip, pairing)?;
        let result = if pairing.is_some() {
            trainer.dg_train_step(&batch)
        } else {
            trainer.train_step(&batch.main)
        };
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(|e| io(&log_path, e))?;
                return Err(e.into());
            }
        };
        let components: serde_json::Map<String, Value> = report.components.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let line = json!({
            "step": report.step,
            "lr": report.lr,
            "total": report.total,
            "grad_norm": report.grad_norm,
            "components": components,
        });
        writeln!(log, "{line}").map_err(|e| io(&log_path, e))?;
        last_total = Some(report.total);
        let done = trainer.state().step;
        if options.checkpoint_every > 0 && done % options.checkpoint_every == 0 {
            digest = save_checkpoint(&ckpt_path, &trainer)?;
        }
    }
    digest = save_checkpoint(&ckpt_path, &trainer).unwrap_or(digest);
    let summary = TrainSummary {
        mode: trainer.mode().to_string(),
        steps: trainer.state().step,
        finished: trainer.is_finished(),
        final_total: last_total,
        running: trainer.state().running.clone(),
        checkpoint_sha256: digest,
    };
    if summary.finished {
        writeln!(log, "{}", json!({ "summary": summary })).map_err(|e| io(&log_path, e))?;
    }
    Ok(summary)
}

fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<String> {
    let bytes = checkpoint::encode(trainer);
    write_file(path, &bytes)?;
    Ok(checkpoint::digest_hex(&bytes))
}

/// Keep only the per-step lines of steps before `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return write_file(path, b""),
        Err(e) => return Err(io(path, e)),
    };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io(path, e))?;
        let v: Value = serde_json::from_str(&line).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if v.get("step").and_then(Value::as_u64).is_some_and(|s| s < step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_file(path, kept.as_bytes())
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    Ok(checkpoint::load(path)?.into_detector())
}

/// One evaluated group of images.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub split: String,
    /// `None` for the pooled source row.
    pub domain: Option<usize>,
    pub role: &'static str,
    pub report: EvalReport,
    /// `(threshold, mAP)` for each configured IoU threshold.
    pub map_at: Vec<(f64, Option<f64>)>,
}

fn detect_all(detector: &Detector, samples: &[Sample]) -> Result<Vec<RawDetections>> {
    samples.iter().map(|s| Ok(detector.detect(&s.image)?)).collect()
}

fn score(groups: &[(&[Sample], &[RawDetections])], num_classes: usize, thresholds: &[f64]) -> (EvalReport, Vec<(f64, Option<f64>)>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut image_id = 0;
    for (samples, raw) in groups {
        for (s, r) in samples.iter().zip(raw.iter()) {
            dets.extend(r.iter().map(|&(bbox, class_id, score)| Detection {
                image_id,
                class_id,
                bbox,
                score,
            }));
            gts.extend(s.objects.iter().map(|&(bbox, class_id)| GroundTruth { image_id, class_id, bbox }));
            image_id += 1;
        }
    }
    let report = evaluate(&dets, &gts, num_classes, image_id);
    let map_at = thresholds
        .iter()
        .map(|&t| (t, aqua_core::evalkit::mean_ap(&per_class_ap(&dets, &gts, num_classes, t))))
        .collect();
    (report, map_at)
}

/// Evaluate `splits`; source domains get one row each plus a pooled row.
/// Every split is loaded before any output is written.
pub fn eval(config: &ExperimentConfig, checkpoint_path: &Path, data: &Path, splits: &[String], out: &Path) -> Result<Vec<EvalRow>> {
    let detector = load_detector(checkpoint_path)?;
    let dataset = Dataset::open(data)?;
    let loaded = splits
        .iter()
        .map(|s| Ok((s.clone(), dataset.named_split(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let c = detector.config().num_classes;
    let thresholds = &config.eval.iou_thresholds;
    let target = dataset.target_domain();
    let mut rows = Vec::new();
    for (split, groups) in &loaded {
        let raw = groups.iter().map(|(_, s)| detect_all(&detector, s)).collect::<Result<Vec<_>>>()?;
        for ((d, samples), r) in groups.iter().zip(&raw) {
            let (report, map_at) = score(&[(samples, r)], c, thresholds);
            rows.push(EvalRow {
                split: split.clone(),
                domain: Some(*d),
                role: if *d == target { "target" } else { "source" },
                report,
                map_at,
            });
        }
        if groups.iter().any(|(d, _)| *d != target) && groups.len() > 1 {
            let all: Vec<(&[Sample], &[RawDetections])> = groups.iter().zip(&raw).map(|((_, s), r)| (s.as_slice(), r.as_slice())).collect();
            let (report, map_at) = score(&all, c, thresholds);
            rows.push(EvalRow {
                split: split.clone(),
                domain: None,
                role: "source",
                report,
                map_at,
            });
        }
    }
    create_dir(out)?;
    let mut jsonl = String::new();
    for r in &rows {
        jsonl.push_str(&json!({ "schema_version": SCHEMA_VERSION, "row": r }).to_string());
        jsonl.push('\n');
    }
    write_file(&out.join(METRICS_JSON), jsonl.as_bytes())?;
    write_file(&out.join(METRICS_TABLE), metrics_table(&rows).as_bytes())?;
    write_resolved(out, config)?;
    Ok(rows)
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.1}", 100.0 * x))
}

pub fn metrics_table(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    for (title, role) in [("Source domains", "source"), ("Target domain", "target")] {
        let part: Vec<&EvalRow> = rows.iter().filter(|r| r.role == role).collect();
        if part.is_empty() {
            continue;
        }
        s.push_str(&format!("{title}\n"));
        let extra: Vec<String> = part[0].map_at.iter().map(|(t, _)| format!("AP@{t}")).collect();
        s.push_str(&format!("{:<8}{:<10}{:>8}{:>9}{:>8}{:>8}", "split", "domain", "mAP50", "COCO AP", "images", "gts"));
        for e in &extra {
            s.push_str(&format!("{e:>9}"));
        }
        s.push('\n');
        for r in part {
            let domain = r.domain.map_or("all".to_string(), |d| format!("domain_{d}"));
            s.push_str(&format!(
                "{:<8}{:<10}{:>8}{:>9}{:>8}{:>8}",
                r.split,
                domain,
                pct(r.report.map50),
                pct(r.report.coco_ap),
                r.report.num_images,
                r.report.num_gt
            ));
            for (_, v) in &r.map_at {
                s.push_str(&format!("{:>9}", pct(*v)));
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

/// Corruption sweep over `split` (all its domains pooled).
pub fn robustness(
    config: &ExperimentConfig,
    checkpoint_path: &Path,
    data: &Path,
    split: &str,
    seed: u64,
    out: &Path,
) -> Result<RobustnessTable> {
    let detector = load_detector(checkpoint_path)?;
    let dataset = Dataset::open(data)?;
    let samples: Vec<Sample> = dataset.named_split(split)?.into_iter().flat_map(|(_, s)| s).collect();
    let eval = eval_samples(&samples);
    let mut failure = None;
    let mut detect = |img: &aqua_core::Image| match detector.detect(img) {
        Ok(d) => d,
        Err(e) => {
            failure.get_or_insert(e);
            Vec::new()
        }
    };
    let table = robustness_sweep(
        &mut detect,
        &eval,
        detector.config().num_classes,
        &config.eval.corruptions,
        &config.eval.severities,
        seed,
        config.eval.robustness_metric,
    )?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    create_dir(out)?;
    let mut jsonl = json!({ "schema_version": SCHEMA_VERSION, "split": split, "metric": table.metric, "clean_ap": table.clean_ap }).to_string();
    jsonl.push('\n');
    for r in &table.rows {
        jsonl.push_str(&json!({ "row": r }).to_string());
        jsonl.push('\n');
    }
    let (ap, delta) = table.average();
    jsonl.push_str(&json!({ "average": { "ap": ap, "delta": delta } }).to_string());
    jsonl.push('\n');
    write_file(&out.join(ROBUSTNESS_JSON), jsonl.as_bytes())?;
    write_file(&out.join(ROBUSTNESS_TABLE), table.to_string().as_bytes())?;
    write_resolved(out, config)?;
    Ok(table)
}
