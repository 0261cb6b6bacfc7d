use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mitoshift::commands::{self, say, Input};
use mitoshift::{Error, Result, RunConfig};
use mitoshift_core::tta::TtaPlan;

/// Domain-robust atypical mitosis classification on a toy vision transformer.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
/// degeneracy error.
#[derive(Parser)]
#[command(name = "mitoshift", version)]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed (overrides the `seed` key).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Manifest CSV `image_path,label,domain` of PNG patches.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Embedding file (MSEMB01) with its manifest block.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl Source {
    fn input(&self) -> Input {
        match (&self.manifest, &self.embeddings) {
            (Some(m), _) => Input::Manifest(m.clone()),
            (None, Some(e)) => Input::Embeddings(e.clone()),
            (None, None) => unreachable!("clap requires one source"),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TtaPreset {
    /// Single plain forward.
    Off,
    /// All eight dihedral transforms, original colors.
    Geo,
    /// Eight dihedral transforms × {original, Macenko, Vahadane}.
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-scanner dataset.
    GenSynth {
        #[command(flatten)]
        common: Common,
        /// Output directory for images/, manifest.csv and domains.txt.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model and write checkpoint.bin and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        /// Stain reference file from fit-reference (overrides `reference`).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predict P(atypical) for every manifest row into predictions.csv.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        checkpoint: PathBuf,
        /// TTA preset; overrides `tta_geo` and `tta_stains`.
        #[arg(long, value_enum)]
        tta: Option<TtaPreset>,
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Decision threshold on P(atypical).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predictions against manifest labels.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write eval_report.txt and the resolved config here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit Macenko and Vahadane stain targets on a reference image.
    FitReference {
        #[arg(long)]
        image: PathBuf,
        /// Output text file (Macenko line, then Vahadane line).
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, found '{o}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for (k, v) in extra {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path_value(p: &Option<PathBuf>) -> Option<String> {
    p.as_deref().map(|p: &Path| p.display().to_string())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth { common, out_dir } => {
            let cfg = resolve(&common, &[])?;
            let s = commands::gen_synth(&cfg, &out_dir)?;
            say(&format!("wrote {} images from {} domains to {}", s.images, s.domains, out_dir.display()));
        }
        Command::Train { common, source, reference, out_dir } => {
            let cfg = resolve(&common, &[("reference", path_value(&reference))])?;
            let out = commands::train(&cfg, &source.input(), &out_dir)?;
            for e in &out.report.log {
                say(&format!(
                    "epoch {:>3}  loss {:.5}  val BA {:.4}  val AUC {:.4}",
                    e.epoch, e.train_loss, e.val_balanced_accuracy, e.val_auc
                ));
            }
            say(&format!("checkpoint written to {}", out_dir.join(commands::CHECKPOINT).display()));
        }
        Command::Infer { common, source, checkpoint, tta, reference, threshold, out_dir } => {
            let mut cfg = resolve(&common, &[("reference", path_value(&reference)), ("threshold", threshold.map(|t| t.to_string()))])?;
            if let Some(preset) = tta {
                cfg.tta = match preset {
                    TtaPreset::Off => TtaPlan::off(),
                    TtaPreset::Geo => TtaPlan::new(&mitoshift_core::tta::D4::ALL, &[mitoshift_core::tta::StainVariant::Identity])?,
                    TtaPreset::Full => TtaPlan::full(),
                };
            }
            let preds = commands::infer(&cfg, &checkpoint, &source.input(), &out_dir)?;
            let fallbacks: usize = preds.iter().map(|p| p.n_fallbacks).sum();
            say(&format!(
                "{} predictions ({} passes each, {fallbacks} stain fallbacks) written to {}",
                preds.len(),
                cfg.tta.passes(),
                out_dir.join(commands::PREDICTIONS).display()
            ));
        }
        Command::Eval { common, predictions, manifest, threshold, out_dir } => {
            let cfg = resolve(&common, &[("threshold", threshold.map(|t| t.to_string()))])?;
            let report = commands::eval(&cfg, &predictions, &manifest, out_dir.as_deref())?;
            print!("{}", commands::format_report(&report));
        }
        Command::FitReference { image, out } => {
            commands::fit_reference(&image, &out)?;
            say(&format!("reference written to {}", out.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
