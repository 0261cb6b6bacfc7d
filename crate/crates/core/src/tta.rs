//! Test-time augmentation: every (stain, geometry) combination of a plan is
//! scored and the probabilities averaged.
//!
//! Stain normalization runs once per stain variant on the original patch and
//! the dihedral transforms are applied afterwards; per-pixel colour operations
//! commute with pixel permutations, so this order only saves estimations.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::VptViT;
use crate::error::{Error, Result};
use crate::stain::{normalize, ReferenceTarget, RgbPatch, StainEstimator};
use crate::train::{predict_proba, ModelInput};

/// The eight symmetries of a square.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum D4 {
    Identity,
    /// Quarter turn clockwise.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror across the vertical axis (left ↔ right).
    FlipH,
    /// Mirror across the horizontal axis (top ↔ bottom).
    FlipV,
    /// Mirror across the main diagonal.
    Transpose,
    /// Mirror across the anti-diagonal.
    AntiTranspose,
}

impl D4 {
    pub const ALL: [D4; 8] = [
        D4::Identity,
        D4::Rot90,
        D4::Rot180,
        D4::Rot270,
        D4::FlipH,
        D4::FlipV,
        D4::Transpose,
        D4::AntiTranspose,
    ];

    pub fn inverse(self) -> D4 {
        match self {
            D4::Rot90 => D4::Rot270,
            D4::Rot270 => D4::Rot90,
            t => t,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            D4::Identity => "identity",
            D4::Rot90 => "rot90",
            D4::Rot180 => "rot180",
            D4::Rot270 => "rot270",
            D4::FlipH => "hflip",
            D4::FlipV => "vflip",
            D4::Transpose => "transpose",
            D4::AntiTranspose => "antitranspose",
        }
    }

    /// Source coordinate of output pixel `(x, y)` on a `side × side` grid.
    fn source(self, x: usize, y: usize, side: usize) -> (usize, usize) {
        let m = side - 1;
        match self {
            D4::Identity => (x, y),
            D4::Rot90 => (y, m - x),
            D4::Rot180 => (m - x, m - y),
            D4::Rot270 => (m - y, x),
            D4::FlipH => (m - x, y),
            D4::FlipV => (x, m - y),
            D4::Transpose => (y, x),
            D4::AntiTranspose => (m - y, m - x),
        }
    }

    /// Applies the transform as an exact pixel permutation.
    pub fn apply(self, p: &RgbPatch) -> RgbPatch {
        let side = p.side();
        let src = p.pixels();
        let mut out = alloc::vec![0u8; src.len()];
        for y in 0..side {
            for x in 0..side {
                let (sx, sy) = self.source(x, y, side);
                let (o, s) = ((y * side + x) * 3, (sy * side + sx) * 3);
                out[o..o + 3].copy_from_slice(&src[s..s + 3]);
            }
        }
        RgbPatch::new(side, side, out).expect("same shape")
    }
}

impl core::str::FromStr for D4 {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        D4::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown geometric transform '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StainVariant {
    Identity,
    Macenko,
    Vahadane,
}

impl StainVariant {
    pub const ALL: [StainVariant; 3] = [StainVariant::Identity, StainVariant::Macenko, StainVariant::Vahadane];

    pub fn name(self) -> &'static str {
        match self {
            StainVariant::Identity => "identity",
            StainVariant::Macenko => "macenko",
            StainVariant::Vahadane => "vahadane",
        }
    }
}

impl core::str::FromStr for StainVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StainVariant::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown stain variant '{s}'")))
    }
}

/// Reference targets of the normalizing stain variants.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StainTargets {
    pub macenko: Option<ReferenceTarget>,
    pub vahadane: Option<ReferenceTarget>,
}

/// Sorted, duplicate-free sets of geometric and stain variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtaPlan {
    geo: Vec<D4>,
    stains: Vec<StainVariant>,
}

impl TtaPlan {
    pub fn new(geo: &[D4], stains: &[StainVariant]) -> Result<Self> {
        let mut geo = geo.to_vec();
        let mut stains = stains.to_vec();
        geo.sort_unstable();
        geo.dedup();
        stains.sort_unstable();
        stains.dedup();
        if geo.is_empty() || stains.is_empty() {
            return Err(Error::InvalidConfig("TTA plan needs at least one geometric and one stain variant".into()));
        }
        Ok(TtaPlan { geo, stains })
    }

    /// All eight D4 transforms with identity, Macenko and Vahadane stains.
    pub fn full() -> Self {
        TtaPlan::new(&D4::ALL, &StainVariant::ALL).expect("nonempty")
    }

    /// A single identity pass.
    pub fn off() -> Self {
        TtaPlan::new(&[D4::Identity], &[StainVariant::Identity]).expect("nonempty")
    }

    pub fn geo(&self) -> &[D4] {
        &self.geo
    }

    pub fn stains(&self) -> &[StainVariant] {
        &self.stains
    }

    pub fn passes(&self) -> usize {
        self.geo.len() * self.stains.len()
    }

    /// Fails when a normalizing variant has no reference target.
    pub fn check_targets(&self, targets: &StainTargets) -> Result<()> {
        for s in &self.stains {
            let missing = match s {
                StainVariant::Identity => false,
                StainVariant::Macenko => targets.macenko.is_none(),
                StainVariant::Vahadane => targets.vahadane.is_none(),
            };
            if missing {
                return Err(Error::InvalidConfig(format!("stain variant '{}' needs a reference target", s.name())));
            }
        }
        Ok(())
    }
}

/// The patch as seen by one stain variant, and whether estimation failed and
/// the original patch was used instead.
pub fn stain_variant(p: &RgbPatch, variant: StainVariant, targets: &StainTargets) -> Result<(RgbPatch, bool)> {
    let (estimator, target) = match variant {
        StainVariant::Identity => return Ok((p.clone(), false)),
        StainVariant::Macenko => (StainEstimator::macenko(), targets.macenko),
        StainVariant::Vahadane => (StainEstimator::vahadane(), targets.vahadane),
    };
    let target =
        target.ok_or_else(|| Error::InvalidConfig(format!("stain variant '{}' needs a reference target", variant.name())))?;
    match normalize(p, &estimator, &target) {
        Ok(n) => Ok((n, false)),
        Err(e) => {
            log::debug!("{} normalization failed ({e}); using the original patch", variant.name());
            Ok((p.clone(), true))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaOutput {
    /// Mean `P(atypical)` over all passes.
    pub prob: f64,
    /// Stain variants that fell back to the original patch.
    pub fallbacks: usize,
}

/// Averages `P(atypical)` over every pass of `plan`, stain-major in sorted
/// variant order.
pub fn predict_tta(model: &VptViT, p: &RgbPatch, plan: &TtaPlan, targets: &StainTargets) -> Result<TtaOutput> {
    plan.check_targets(targets)?;
    let mut sum = 0.0;
    let mut fallbacks = 0;
    for &s in plan.stains() {
        let (base, fell_back) = stain_variant(p, s, targets)?;
        fallbacks += usize::from(fell_back);
        for &g in plan.geo() {
            let view = if g == D4::Identity { base.clone() } else { g.apply(&base) };
            sum += predict_proba(model, &ModelInput::Pixels(view))?;
        }
    }
    Ok(TtaOutput {
        prob: sum / plan.passes() as f64,
        fallbacks,
    })
}
