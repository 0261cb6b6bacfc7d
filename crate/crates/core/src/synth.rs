//! Synthetic Beer–Lambert patches with known stains and concentrations.
//!
//! Every domain owns a stain matrix obtained by rotating the Ruifrok H&E
//! columns about their bisector. A patch is a two-channel concentration field
//! (eosin-rich stroma, hematoxylin-dense nuclei, optional white background)
//! rendered through that matrix. Class 0 carries one smooth elliptical nucleus;
//! class 1 carries two or three overlapping lobed blobs.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::stain::{OdImage, RgbPatch, StainModel, MAX_CONC_PERCENTILE, RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN};

/// Largest accepted stain perturbation angle, in degrees.
pub const MAX_ANGLE_DEG: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl core::str::FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            _ => Err(Error::InvalidConfig(format!("unknown difficulty '{s}' (expected easy or hard)"))),
        }
    }
}

impl Difficulty {
    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub seed: u64,
    pub angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_per_class_per_domain: usize,
    pub domains: Vec<DomainSpec>,
    /// Standard deviation of additive Gaussian noise in 8-bit channel units.
    pub noise_sigma: f64,
    pub side: usize,
    pub difficulty: Difficulty,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_per_class_per_domain: 100,
            domains: alloc::vec![DomainSpec { seed: 1, angle_deg: 0.0 }, DomainSpec { seed: 2, angle_deg: 15.0 }],
            noise_sigma: 2.0,
            side: 64,
            difficulty: Difficulty::Easy,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::InvalidConfig("at least one synthetic domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if !(0.0..=MAX_ANGLE_DEG).contains(&d.angle_deg) {
                return Err(Error::InvalidConfig(format!(
                    "domain {i}: perturbation angle {} outside [0, {MAX_ANGLE_DEG}]",
                    d.angle_deg
                )));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.side < 16 {
            return Err(Error::InvalidConfig(format!("side must be at least 16, got {}", self.side)));
        }
        Ok(())
    }
}

fn rotate(v: [f64; 3], axis: [f64; 3], theta: f64) -> [f64; 3] {
    let (c, s) = (math::cos(theta), math::sin(theta));
    let kv = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [0, 1, 2].map(|k| v[k] * c + cross[k] * s + axis[k] * kv * (1.0 - c))
}

/// Stain matrix of a domain: the Ruifrok columns rotated about their bisector
/// by `angle_deg`, then clamped to the nonnegative octant and renormalized.
/// `max_conc` is left at `[1, 1]`.
pub fn domain_stain_matrix(angle_deg: f64) -> Result<StainModel> {
    let unit = |v: [f64; 3]| {
        let n = math::sqrt(v.iter().map(|x| x * x).sum());
        v.map(|x| x / n)
    };
    let (h, e) = (unit(RUIFROK_HEMATOXYLIN), unit(RUIFROK_EOSIN));
    let axis = unit([h[0] + e[0], h[1] + e[1], h[2] + e[2]]);
    let theta = angle_deg.to_radians();
    StainModel::from_directions(rotate(h, axis, theta), rotate(e, axis, theta), [1.0, 1.0])
}

/// Per-pixel stain concentrations of one patch plus its background mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationField {
    pub side: usize,
    /// `[hematoxylin, eosin]` per pixel, row-major.
    pub conc: Vec<[f64; 2]>,
    /// `true` where the pixel is unstained background.
    pub background: Vec<bool>,
}

impl ConcentrationField {
    /// Noise-free optical densities `S·C`.
    pub fn to_od(&self, stains: &StainModel) -> OdImage {
        OdImage::new(self.side, self.conc.iter().map(|c| stains.mix(*c)).collect()).expect("nonnegative finite mix")
    }
}

/// Deterministic seed of one generated patch.
pub fn sample_seed(domain_seed: u64, label: u8, index: usize) -> u64 {
    let mut z = domain_seed ^ (u64::from(label) << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Wave {
    terms: [(f64, f64, f64); 3],
}

impl Wave {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut term = || {
            let dir = rng.random_range(0.0..core::f64::consts::TAU);
            let freq = rng.random_range(1.0..4.0) * core::f64::consts::TAU;
            let phase = rng.random_range(0.0..core::f64::consts::TAU);
            (freq * math::cos(dir), freq * math::sin(dir), phase)
        };
        Wave {
            terms: [term(), term(), term()],
        }
    }

    /// Smooth field in `[-1, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        self.terms.iter().map(|(a, b, p)| math::sin(a * u + b * v + p)).sum::<f64>() / 3.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + math::exp(-x))
}

const EDGE: f64 = 0.08;

enum Nucleus {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, phi: f64 },
    Lobed { cx: f64, cy: f64, r: f64, lobes: f64, depth: f64, phase: f64 },
}

impl Nucleus {
    fn mask(&self, u: f64, v: f64) -> f64 {
        match *self {
            Nucleus::Ellipse { cx, cy, a, b, phi } => {
                let (dx, dy) = (u - cx, v - cy);
                let (c, s) = (math::cos(phi), math::sin(phi));
                let (x, y) = ((c * dx + s * dy) / a, (-s * dx + c * dy) / b);
                sigmoid((1.0 - math::sqrt(x * x + y * y)) / EDGE)
            }
            Nucleus::Lobed { cx, cy, r, lobes, depth, phase } => {
                let (dx, dy) = (u - cx, v - cy);
                let theta = math::atan2(dy, dx);
                let radius = r * (1.0 + depth * math::sin(lobes * theta + phase));
                sigmoid((1.0 - math::sqrt(dx * dx + dy * dy) / radius) / EDGE)
            }
        }
    }
}

/// Samples the concentration field of one patch.
pub fn sample_field(label: u8, difficulty: Difficulty, side: usize, seed: u64) -> ConcentrationField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e0 = rng.random_range(0.95..1.15);
    let h0 = rng.random_range(0.15..0.25);
    let (wave_e, wave_h) = (Wave::new(&mut rng), Wave::new(&mut rng));

    let (h_lo, h_hi) = match (difficulty, label) {
        (Difficulty::Easy, 0) => (0.9, 1.1),
        (Difficulty::Easy, _) => (1.5, 1.8),
        (Difficulty::Hard, _) => (1.1, 1.4),
    };
    let nuc_h = rng.random_range(h_lo..h_hi);
    let mut nuclei = Vec::new();
    let (ccx, ccy) = (0.5 + rng.random_range(-0.08..0.08), 0.5 + rng.random_range(-0.08..0.08));
    // Easy atypical figures cover a larger, more dispersed area; hard ones are
    // area-matched to the normal ellipse.
    let (ell_scale, spread) = match difficulty {
        Difficulty::Easy => (0.6, (0.12, 0.18)),
        Difficulty::Hard => (1.1, (0.08, 0.12)),
    };
    if label == 0 {
        nuclei.push(Nucleus::Ellipse {
            cx: ccx,
            cy: ccy,
            a: ell_scale * rng.random_range(0.14..0.20),
            b: ell_scale * rng.random_range(0.10..0.14),
            phi: rng.random_range(0.0..core::f64::consts::PI),
        });
    } else {
        let count = rng.random_range(2..=3usize);
        for k in 0..count {
            let (cx, cy) = if k == 0 {
                (ccx, ccy)
            } else {
                let dir = rng.random_range(0.0..core::f64::consts::TAU);
                let dist = rng.random_range(spread.0..spread.1);
                (ccx + dist * math::cos(dir), ccy + dist * math::sin(dir))
            };
            nuclei.push(Nucleus::Lobed {
                cx,
                cy,
                r: rng.random_range(0.08..0.12),
                lobes: f64::from(rng.random_range(3..=5u8)),
                depth: rng.random_range(0.2..0.35),
                phase: rng.random_range(0.0..core::f64::consts::TAU),
            });
        }
    }

    // Optional white band along one edge.
    let band = if rng.random_bool(0.5) {
        Some((rng.random_range(0..4u8), rng.random_range(0.05..0.15)))
    } else {
        None
    };

    let n = side * side;
    let mut conc = Vec::with_capacity(n);
    let mut background = Vec::with_capacity(n);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 + 0.5) / side as f64, (y as f64 + 0.5) / side as f64);
            let jitter_h = 1.0 + 0.05 * math::normal(&mut rng);
            let jitter_e = 1.0 + 0.05 * math::normal(&mut rng);
            let is_bg = match band {
                Some((0, d)) => u < d,
                Some((1, d)) => u > 1.0 - d,
                Some((2, d)) => v < d,
                Some((_, d)) => v > 1.0 - d,
                None => false,
            };
            if is_bg {
                conc.push([0.0, 0.0]);
                background.push(true);
                continue;
            }
            let m = nuclei.iter().map(|nu| nu.mask(u, v)).fold(0.0, f64::max);
            let hs = h0 * (1.0 + 0.3 * wave_h.at(u, v));
            let es = e0 * (1.0 + 0.2 * wave_e.at(u, v));
            let h = (hs + (nuc_h - hs) * m) * jitter_h;
            let e = es * (1.0 - 0.95 * m) * jitter_e;
            conc.push([h.max(0.0), e.max(0.0)]);
            background.push(false);
        }
    }
    ConcentrationField { side, conc, background }
}

/// Renders a field through `stains`. Noise is added to the transmitted
/// intensity `255·10^(−OD)` before rounding, so `noise_sigma = 0` gives
/// exactly `od_to_rgb(S·C)`.
pub fn render(field: &ConcentrationField, stains: &StainModel, noise_sigma: f64, seed: u64) -> RgbPatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_A015E);
    let mut px = Vec::with_capacity(field.conc.len() * 3);
    for c in &field.conc {
        for od in stains.mix(*c) {
            let mut i = 255.0 * math::pow10(-od);
            if noise_sigma > 0.0 {
                i += noise_sigma * math::normal(&mut rng);
            }
            px.push(math::round(i).clamp(0.0, 255.0) as u8);
        }
    }
    RgbPatch::new(field.side, field.side, px).expect("square field")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub patch: RgbPatch,
    pub label: u8,
    pub domain: usize,
    pub index: usize,
    pub background: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
    /// Ground-truth stain model per domain; `max_conc` is the 99th percentile
    /// of the true concentrations over every pixel of that domain.
    pub stains: Vec<StainModel>,
}

/// Generates the dataset in domain, class, index order.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.domains.len() * 2 * cfg.n_per_class_per_domain);
    let mut stains = Vec::with_capacity(cfg.domains.len());
    for (d, spec) in cfg.domains.iter().enumerate() {
        let s = domain_stain_matrix(spec.angle_deg)?;
        let mut pooled: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for label in 0..2u8 {
            for index in 0..cfg.n_per_class_per_domain {
                let seed = sample_seed(spec.seed, label, index);
                let field = sample_field(label, cfg.difficulty, cfg.side, seed);
                for c in &field.conc {
                    pooled[0].push(c[0]);
                    pooled[1].push(c[1]);
                }
                samples.push(SynthSample {
                    patch: render(&field, &s, cfg.noise_sigma, seed),
                    label,
                    domain: d,
                    index,
                    background: field.background,
                });
            }
        }
        let mut max_conc = [1.0; 2];
        for (k, col) in pooled.iter_mut().enumerate() {
            if !col.is_empty() {
                col.sort_by(f64::total_cmp);
                max_conc[k] = math::percentile_sorted(col, MAX_CONC_PERCENTILE);
            }
        }
        stains.push(StainModel { max_conc, ..s });
    }
    Ok(SynthDataset { samples, stains })
}
