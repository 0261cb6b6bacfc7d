//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; unknown keys are rejected. [`RunConfig::to_text`] writes every key
//! in a fixed order, so the resolved file of a run can be fed back verbatim.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use mitoshift_core::backbone::ViTConfig;
use mitoshift_core::domain_adapt::GrlSchedule;
use mitoshift_core::synth::{Difficulty, DomainSpec, SynthConfig};
use mitoshift_core::train::{StainPreprocess, TrainConfig};
use mitoshift_core::tta::{StainVariant, TtaPlan, D4};

use crate::error::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

/// Keys in output order.
pub const KEYS: &[&str] = &[
    "seed",
    "image_side",
    "patch_size",
    "embed_dim",
    "num_layers",
    "num_heads",
    "mlp_ratio",
    "num_classes",
    "prompt_len",
    "lora_rank",
    "adaptation",
    "epochs",
    "batch_size",
    "learning_rate",
    "grl",
    "grl_lambda",
    "grl_schedule",
    "grl_gamma",
    "domain_loss_weight",
    "class_weights",
    "stain",
    "tta_geo",
    "tta_stains",
    "reference",
    "threshold",
    "synth_per_class",
    "synth_angles",
    "synth_noise",
    "synth_difficulty",
];

/// The ViT architecture keys, shared with the checkpoint header.
pub const VIT_KEYS: &[&str] = &[
    "image_side",
    "patch_size",
    "embed_dim",
    "num_layers",
    "num_heads",
    "mlp_ratio",
    "num_classes",
    "prompt_len",
    "lora_rank",
];

const DEFAULT_GRL_GAMMA: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub vit: ViTConfig,
    pub train: TrainConfig,
    /// With `false` the domain branch is skipped (`w_d` treated as 0).
    pub grl: bool,
    pub stain: StainPreprocess,
    pub tta: TtaPlan,
    pub reference: Option<PathBuf>,
    pub threshold: f64,
    pub synth_per_class: usize,
    pub synth_angles: Vec<f64>,
    pub synth_noise: f64,
    pub synth_difficulty: Difficulty,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: 0,
            vit: ViTConfig::default(),
            train: TrainConfig::default(),
            grl: true,
            stain: StainPreprocess::Off,
            tta: TtaPlan::full(),
            reference: None,
            threshold: 0.5,
            synth_per_class: synth.n_per_class_per_domain,
            synth_angles: synth.domains.iter().map(|d| d.angle_deg).collect(),
            synth_noise: synth.noise_sigma,
            synth_difficulty: synth.difficulty,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for key '{key}'")))
}

fn parse_list<T: FromStr<Err = mitoshift_core::Error>>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| Error::Config(format!("key '{key}': {e}"))))
        .collect()
}

fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn on_off(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        _ => Err(Error::Config(format!("key '{key}' expects on or off, found '{value}'"))),
    }
}

/// Sets one architecture key; `Ok(false)` if `key` is not an architecture key.
pub fn set_vit_key(vit: &mut ViTConfig, key: &str, value: &str) -> Result<bool> {
    let slot = match key {
        "image_side" => &mut vit.image_side,
        "patch_size" => &mut vit.patch_size,
        "embed_dim" => &mut vit.embed_dim,
        "num_layers" => &mut vit.num_layers,
        "num_heads" => &mut vit.num_heads,
        "mlp_ratio" => &mut vit.mlp_ratio,
        "num_classes" => &mut vit.num_classes,
        "prompt_len" => &mut vit.prompt_len,
        "lora_rank" => &mut vit.lora_rank,
        _ => return Ok(false),
    };
    *slot = parse_num(key, value)?;
    Ok(true)
}

pub fn get_vit_key(vit: &ViTConfig, key: &str) -> Option<usize> {
    Some(match key {
        "image_side" => vit.image_side,
        "patch_size" => vit.patch_size,
        "embed_dim" => vit.embed_dim,
        "num_layers" => vit.num_layers,
        "num_heads" => vit.num_heads,
        "mlp_ratio" => vit.mlp_ratio,
        "num_classes" => vit.num_classes,
        "prompt_len" => vit.prompt_len,
        "lora_rank" => vit.lora_rank,
        _ => return None,
    })
}

/// Splits `key = value` lines, skipping blanks and `#` comments. Yields the
/// 1-based line number with each pair.
pub fn pairs(text: &str) -> impl Iterator<Item = (usize, std::result::Result<(&str, &str), String>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        Some((
            i + 1,
            line.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| format!("expected key = value, found '{line}'")),
        ))
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, pair) in pairs(text) {
            let (key, value) = pair.map_err(|e| Error::Config(format!("line {line}: {e}")))?;
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Loads `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if set_vit_key(&mut self.vit, key, value)? {
            return Ok(());
        }
        match key {
            "seed" => {
                self.seed = parse_num(key, value)?;
                self.train.seed = self.seed;
            }
            "adaptation" => self.train.adaptation = value.parse().map_err(|e| Error::Config(format!("key '{key}': {e}")))?,
            "epochs" => self.train.epochs = parse_num(key, value)?,
            "batch_size" => self.train.batch_size = parse_num(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "grl" => self.grl = on_off(key, value)?,
            "grl_lambda" => self.train.grl.lambda = parse_num(key, value)?,
            "grl_schedule" => {
                self.train.grl.schedule = match value {
                    "constant" => GrlSchedule::Constant,
                    "dann" => GrlSchedule::DannRamp {
                        gamma: match self.train.grl.schedule {
                            GrlSchedule::DannRamp { gamma } => gamma,
                            GrlSchedule::Constant => DEFAULT_GRL_GAMMA,
                        },
                    },
                    _ => return Err(Error::Config(format!("key '{key}' expects constant or dann, found '{value}'"))),
                }
            }
            "grl_gamma" => {
                let gamma = parse_num(key, value)?;
                if let GrlSchedule::DannRamp { gamma: g } = &mut self.train.grl.schedule {
                    *g = gamma;
                } else if gamma != DEFAULT_GRL_GAMMA {
                    return Err(Error::Config("grl_gamma needs grl_schedule = dann set before it".into()));
                }
            }
            "domain_loss_weight" => self.train.domain_loss_weight = parse_num(key, value)?,
            "class_weights" => {
                self.train.class_weights = if value == "none" {
                    None
                } else {
                    let w: Vec<f64> = value.split(',').map(|t| parse_num(key, t.trim())).collect::<Result<_>>()?;
                    Some(w.try_into().map_err(|_| Error::Config(format!("key '{key}' expects none or two weights")))?)
                }
            }
            "stain" => self.stain = value.parse().map_err(|e| Error::Config(format!("key '{key}': {e}")))?,
            "tta_geo" => {
                let geo = if value == "all" { D4::ALL.to_vec() } else { parse_list::<D4>(key, value)? };
                self.tta = TtaPlan::new(&geo, self.tta.stains()).map_err(|e| Error::Config(format!("key '{key}': {e}")))?;
            }
            "tta_stains" => {
                let stains = parse_list::<StainVariant>(key, value)?;
                self.tta = TtaPlan::new(self.tta.geo(), &stains).map_err(|e| Error::Config(format!("key '{key}': {e}")))?;
            }
            "reference" => self.reference = if value == "none" { None } else { Some(PathBuf::from(value)) },
            "threshold" => self.threshold = parse_num(key, value)?,
            "synth_per_class" => self.synth_per_class = parse_num(key, value)?,
            "synth_angles" => {
                self.synth_angles = value.split(',').map(|t| parse_num(key, t.trim())).collect::<Result<_>>()?;
            }
            "synth_noise" => self.synth_noise = parse_num(key, value)?,
            "synth_difficulty" => {
                self.synth_difficulty = value.parse().map_err(|e| Error::Config(format!("key '{key}': {e}")))?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = get_vit_key(&self.vit, key) {
            return Some(v.to_string());
        }
        let t = &self.train;
        Some(match key {
            "seed" => self.seed.to_string(),
            "adaptation" => t.adaptation.name().to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "grl" => if self.grl { "on" } else { "off" }.to_string(),
            "grl_lambda" => t.grl.lambda.to_string(),
            "grl_schedule" => match t.grl.schedule {
                GrlSchedule::Constant => "constant".to_string(),
                GrlSchedule::DannRamp { .. } => "dann".to_string(),
            },
            "grl_gamma" => match t.grl.schedule {
                GrlSchedule::Constant => DEFAULT_GRL_GAMMA.to_string(),
                GrlSchedule::DannRamp { gamma } => gamma.to_string(),
            },
            "domain_loss_weight" => t.domain_loss_weight.to_string(),
            "class_weights" => t.class_weights.map_or_else(|| "none".to_string(), join),
            "stain" => self.stain.name().to_string(),
            "tta_geo" => join(self.tta.geo().iter().map(|g| g.name())),
            "tta_stains" => join(self.tta.stains().iter().map(|s| s.name())),
            "reference" => self.reference.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            "threshold" => self.threshold.to_string(),
            "synth_per_class" => self.synth_per_class.to_string(),
            "synth_angles" => join(&self.synth_angles),
            "synth_noise" => self.synth_noise.to_string(),
            "synth_difficulty" => self.synth_difficulty.name().to_string(),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every listed key has a value")))
            .collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.train_config().validate()?;
        self.synth_config().validate()?;
        if self.vit.num_classes != 2 {
            return Err(Error::Config("num_classes must be 2 (labels are normal/atypical)".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], found {}", self.threshold)));
        }
        Ok(())
    }

    /// Training settings with the run seed and the GRL switch applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            domain_loss_weight: if self.grl { self.train.domain_loss_weight } else { 0.0 },
            ..self.train
        }
    }

    /// Domain `i` uses generator seed `1000·seed + i + 1`.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_per_class_per_domain: self.synth_per_class,
            domains: self
                .synth_angles
                .iter()
                .enumerate()
                .map(|(i, &angle_deg)| DomainSpec {
                    seed: self.seed.wrapping_mul(1000).wrapping_add(i as u64 + 1),
                    angle_deg,
                })
                .collect(),
            noise_sigma: self.synth_noise,
            side: self.vit.image_side,
            difficulty: self.synth_difficulty,
        }
    }
}
