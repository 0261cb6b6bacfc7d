//! The five commands as library functions. Each writes its outputs plus the
//! resolved configuration into an output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mitoshift_core::backbone::VptViT;
use mitoshift_core::metrics::{self, MetricReport};
use mitoshift_core::stain::{rgb_to_od, StainEstimator};
use mitoshift_core::synth::generate;
use mitoshift_core::train::{predict_proba, preprocess_samples, train_loop, ModelInput, Sample, StainPreprocess, TrainReport};
use mitoshift_core::tta::{predict_tta, StainTargets, StainVariant};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::formats::embeddings::read_embeddings;
use crate::formats::manifest::{domain_names, load_manifest, load_patches, save_manifest, PatchRecord};
use crate::formats::{png, stain};

pub const MANIFEST: &str = "manifest.csv";
pub const DOMAINS: &str = "domains.txt";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS_LOG: &str = "metrics.csv";
pub const TRAIN_REPORT: &str = "train_report.txt";
pub const PREDICTIONS: &str = "predictions.csv";
pub const EVAL_REPORT: &str = "eval_report.txt";

pub const METRICS_HEADER: &str = "epoch,train_loss,val_balanced_accuracy,val_auc";
pub const PREDICTIONS_HEADER: &str = "image_path,prob_atypical,pred_label,n_fallbacks";

/// Patch images or precomputed embeddings, each with its manifest rows.
#[derive(Debug, Clone)]
pub enum Input {
    Manifest(PathBuf),
    Embeddings(PathBuf),
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Loads the inputs as model samples; domains are indexed by `domains` when
/// given, otherwise by the sorted distinct names found.
fn load_input(input: &Input, cfg: &RunConfig, domains: Option<&[String]>) -> Result<(Vec<PatchRecord>, Vec<Sample>, Vec<String>)> {
    let (path, records, inputs) = match input {
        Input::Manifest(path) => {
            let records = load_manifest(path)?;
            let side = cfg.vit.image_side;
            let patches = load_patches(path, &records, side)?;
            (path, records, patches.into_iter().map(ModelInput::Pixels).collect::<Vec<_>>())
        }
        Input::Embeddings(path) => {
            let e = read_embeddings(path)?;
            if e.dim != cfg.vit.embed_dim {
                return Err(Error::data(path, format!("embedding dimension {} differs from embed_dim {}", e.dim, cfg.vit.embed_dim)));
            }
            (path, e.records, e.vectors.into_iter().map(ModelInput::Embedding).collect())
        }
    };
    let names = domains.map_or_else(|| domain_names(&records), <[String]>::to_vec);
    let samples = records
        .iter()
        .zip(inputs)
        .map(|(r, input)| {
            let domain = names.iter().position(|n| *n == r.domain).unwrap_or(usize::MAX);
            Sample { input, label: r.label, domain }
        })
        .collect::<Vec<_>>();
    if domains.is_none() && samples.is_empty() {
        return Err(Error::data(path, "no samples"));
    }
    Ok((records, samples, names))
}

fn stain_targets(cfg: &RunConfig, needed: bool) -> Result<StainTargets> {
    if !needed {
        return Ok(StainTargets::default());
    }
    let path = cfg
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("stain normalization needs a reference file (set 'reference' or pass --reference)".into()))?;
    stain::read_reference(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub images: usize,
    pub domains: usize,
}

/// Writes `images/d{domain}_c{label}_{index}.png`, the manifest and the
/// ground-truth sidecar. Domain `d` is named `scanner_{d}`.
pub fn gen_synth(cfg: &RunConfig, out_dir: &Path) -> Result<GenSummary> {
    let data = generate(&cfg.synth_config())?;
    let images = out_dir.join("images");
    create_dir(&images)?;
    let mut records = Vec::with_capacity(data.samples.len());
    for s in &data.samples {
        let rel = format!("images/d{}_c{}_{:04}.png", s.domain, s.label, s.index);
        png::write_patch(&out_dir.join(&rel), &s.patch)?;
        records.push(PatchRecord {
            image_path: rel,
            label: s.label,
            domain: format!("scanner_{}", s.domain),
            line: records.len() + 2,
        });
    }
    save_manifest(&out_dir.join(MANIFEST), &records)?;
    let sidecar: Vec<(String, _)> = data.stains.iter().enumerate().map(|(d, m)| (format!("scanner_{d}"), *m)).collect();
    write_file(&out_dir.join(DOMAINS), stain::format_domains(&sidecar))?;
    cfg.write_resolved(out_dir)?;
    Ok(GenSummary {
        images: records.len(),
        domains: data.stains.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub stain_failures: usize,
}

pub fn metrics_csv(report: &TrainReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for e in &report.log {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_balanced_accuracy, e.val_auc));
    }
    out
}

pub fn train(cfg: &RunConfig, input: &Input, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (_, samples, domains) = load_input(input, cfg, None)?;
    let targets = stain_targets(cfg, cfg.stain != StainPreprocess::Off)?;
    let (samples, stain_failures) = preprocess_samples(&samples, cfg.stain, &targets)?;
    if stain_failures > 0 {
        log::warn!("stain estimation failed on {stain_failures} training patches");
    }
    let mut model = VptViT::new(cfg.vit, domains.len(), cfg.seed)?;
    let report = train_loop(&mut model, &samples, &cfg.train_config())?;

    create_dir(out_dir)?;
    let checkpoint = Checkpoint { model, domains };
    save_checkpoint(&out_dir.join(CHECKPOINT), &checkpoint)?;
    write_file(&out_dir.join(METRICS_LOG), metrics_csv(&report))?;
    let summary = format!(
        "train_samples = {}\nval_samples = {}\ndomain_branch = {}\nfrozen_checksum = {:016x}\nstain_failures = {}\n",
        report.train_indices.len(),
        report.val_indices.len(),
        if report.domain_branch_active { "on" } else { "off" },
        report.frozen_checksum,
        stain_failures,
    );
    write_file(&out_dir.join(TRAIN_REPORT), summary)?;
    cfg.write_resolved(out_dir)?;
    Ok(TrainOutcome {
        checkpoint,
        report,
        stain_failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_path: String,
    pub prob_atypical: f64,
    pub pred_label: u8,
    pub n_fallbacks: usize,
}

pub fn predictions_csv(preds: &[Prediction]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for p in preds {
        w.write_record([
            p.image_path.clone(),
            p.prob_atypical.to_string(),
            p.pred_label.to_string(),
            p.n_fallbacks.to_string(),
        ])
        .expect("writing to memory");
    }
    out.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory writer")).expect("UTF-8 fields"));
    out
}

/// Runs the configured TTA plan on every manifest patch. Embedding inputs
/// bypass TTA and use the plain head.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Input, out_dir: &Path) -> Result<Vec<Prediction>> {
    let ck = load_checkpoint(checkpoint)?;
    let mut cfg = cfg.clone();
    cfg.vit = *ck.model.config();
    let (records, samples, _) = load_input(input, &cfg, Some(&ck.domains))?;
    let pixels = matches!(input, Input::Manifest(_));
    let targets = stain_targets(&cfg, pixels && cfg.tta.stains().iter().any(|s| *s != StainVariant::Identity))?;
    if pixels {
        cfg.tta.check_targets(&targets)?;
    }

    let mut probs = Vec::with_capacity(samples.len());
    let mut fallbacks = Vec::with_capacity(samples.len());
    for s in &samples {
        let (p, f) = match &s.input {
            ModelInput::Pixels(patch) => {
                let out = predict_tta(&ck.model, patch, &cfg.tta, &targets)?;
                (out.prob, out.fallbacks)
            }
            e @ ModelInput::Embedding(_) => (predict_proba(&ck.model, e)?, 0),
        };
        probs.push(p);
        fallbacks.push(f);
    }
    let total: usize = fallbacks.iter().sum();
    if total > 0 {
        log::warn!("stain estimation fell back to the original patch {total} times");
    }
    let labels = metrics::threshold_scores(&probs, cfg.threshold);
    let preds: Vec<Prediction> = records
        .into_iter()
        .zip(probs.iter().zip(labels).zip(fallbacks))
        .map(|(r, ((&prob_atypical, pred_label), n_fallbacks))| Prediction {
            image_path: r.image_path,
            prob_atypical,
            pred_label,
            n_fallbacks,
        })
        .collect();
    create_dir(out_dir)?;
    write_file(&out_dir.join(PREDICTIONS), predictions_csv(&preds))?;
    cfg.write_resolved(out_dir)?;
    Ok(preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(&text[..]);
    let mut rows = rdr.records();
    let header = rows
        .next()
        .ok_or_else(|| Error::line(path, 1, "missing header"))?
        .map_err(|e| Error::line(path, 1, e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != PREDICTIONS_HEADER {
        return Err(Error::line(path, 1, format!("header must be '{PREDICTIONS_HEADER}'")));
    }
    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| Error::line(path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |what: &str| Error::line(path, line, format!("invalid {what}"));
        let prob: f64 = row[1].parse().map_err(|_| bad("prob_atypical"))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(bad("prob_atypical"));
        }
        out.push(Prediction {
            image_path: row[0].to_string(),
            prob_atypical: prob,
            pred_label: row[2].parse().ok().filter(|l| *l <= 1).ok_or_else(|| bad("pred_label"))?,
            n_fallbacks: row[3].parse().map_err(|_| bad("n_fallbacks"))?,
        });
    }
    Ok(out)
}

/// The four columns of the leaderboard table, four decimals each.
pub fn format_report(r: &MetricReport) -> String {
    format!(
        "| Balanced Acc. | Sensitivity | Specificity | ROC AUC |\n|---|---|---|---|\n| {:.4} | {:.4} | {:.4} | {:.4} |\n",
        r.balanced_accuracy, r.sensitivity, r.specificity, r.roc_auc
    )
}

/// Scores predictions against manifest labels, matched by `image_path`;
/// hard labels are recomputed at `cfg.threshold`.
pub fn eval(cfg: &RunConfig, predictions: &Path, manifest: &Path, out_dir: Option<&Path>) -> Result<MetricReport> {
    let preds = read_predictions(predictions)?;
    let records = load_manifest(manifest)?;
    let by_path: std::collections::HashMap<&str, &Prediction> = preds.iter().map(|p| (p.image_path.as_str(), p)).collect();
    if by_path.len() != preds.len() {
        return Err(Error::data(predictions, "duplicate image_path"));
    }
    if preds.len() != records.len() {
        return Err(Error::data(predictions, format!("{} predictions for {} manifest rows", preds.len(), records.len())));
    }
    let mut scores = Vec::with_capacity(records.len());
    for r in &records {
        let p = by_path
            .get(r.image_path.as_str())
            .ok_or_else(|| Error::line(manifest, r.line, format!("no prediction for '{}'", r.image_path)))?;
        scores.push(p.prob_atypical);
    }
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let report = metrics::evaluate(&scores, &labels, cfg.threshold)?;
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_file(&dir.join(EVAL_REPORT), format_report(&report))?;
        cfg.write_resolved(dir)?;
    }
    Ok(report)
}

/// Fits Macenko and Vahadane targets on one reference image.
pub fn fit_reference(image: &Path, out: &Path) -> Result<StainTargets> {
    let od = rgb_to_od(&png::read_patch(image, None)?);
    let targets = StainTargets {
        macenko: Some(StainEstimator::macenko().estimate(&od)?),
        vahadane: Some(StainEstimator::vahadane().estimate(&od)?),
    };
    stain::write_reference(out, &targets)?;
    Ok(targets)
}

/// Prints a line to stdout, ignoring a closed pipe.
pub fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}
