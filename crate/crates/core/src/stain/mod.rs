//! Beer–Lambert optical density, stain-matrix estimation and stain
//! normalization of 8-bit RGB patches.
//!
//! Optical density uses `OD = −log10((I + 1) / 255)`, clamped at zero so that
//! saturated white (`I = 255`) maps to `OD = 0` like `I = 254` does. The
//! inverse is `I = clamp(round(255 · 10^(−OD)), 0, 255)`.

mod linalg;
mod macenko;
mod vahadane;

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub use linalg::symmetric_eigen3;
pub use macenko::{estimate_macenko, MacenkoParams};
pub use vahadane::{estimate_vahadane, estimate_vahadane_traced, VahadaneFit, VahadaneParams};

/// Pixels whose three optical densities all exceed this are tissue.
pub const DEFAULT_BETA: f64 = 0.15;
/// Minimum number of tissue pixels needed to estimate a stain matrix.
pub const MIN_TISSUE_PIXELS: usize = 100;
/// Percentile used for the per-stain maximum concentration.
pub const MAX_CONC_PERCENTILE: f64 = 99.0;

/// Unit optical-density vectors of hematoxylin and eosin (Ruifrok & Johnston),
/// before normalization.
pub const RUIFROK_HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const RUIFROK_EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

/// Square 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbPatch {
    side: usize,
    pixels: Vec<u8>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width != height {
            return Err(Error::invalid("rgb_patch", alloc::format!("patch must be square, got {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::LengthMismatch(width * height * 3, pixels.len()));
        }
        Ok(RgbPatch { side: width, pixels })
    }

    pub fn filled(side: usize, rgb: [u8; 3]) -> Self {
        RgbPatch {
            side,
            pixels: rgb.iter().copied().cycle().take(side * side * 3).collect(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn width(&self) -> usize {
        self.side
    }

    pub fn height(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Per-pixel optical densities, same layout as the source patch.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    side: usize,
    od: Vec<[f64; 3]>,
}

impl OdImage {
    /// Entries must be finite and nonnegative.
    pub fn new(side: usize, od: Vec<[f64; 3]>) -> Result<Self> {
        if od.len() != side * side {
            return Err(Error::LengthMismatch(side * side, od.len()));
        }
        if od.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("od_image", "optical densities must be finite and nonnegative"));
        }
        Ok(OdImage { side, od })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.od
    }

    pub fn len(&self) -> usize {
        self.od.len()
    }

    pub fn is_empty(&self) -> bool {
        self.od.is_empty()
    }
}

/// Optical density of one 8-bit channel value.
pub fn channel_to_od(i: u8) -> f64 {
    (-math::log10((f64::from(i) + 1.0) / 255.0)).max(0.0)
}

/// 8-bit channel value of one optical density.
pub fn od_to_channel(od: f64) -> u8 {
    math::round(255.0 * math::pow10(-od)).clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(p: &RgbPatch) -> OdImage {
    let od = p
        .pixels
        .chunks_exact(3)
        .map(|c| [channel_to_od(c[0]), channel_to_od(c[1]), channel_to_od(c[2])])
        .collect();
    OdImage { side: p.side, od }
}

pub fn od_to_rgb(od: &OdImage) -> RgbPatch {
    let pixels = od.od.iter().flat_map(|px| px.map(od_to_channel)).collect();
    RgbPatch { side: od.side, pixels }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = math::sqrt(dot3(v, v));
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Cosine similarity of two 3-vectors.
pub fn cosine(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot3(a, b) / math::sqrt(dot3(a, a) * dot3(b, b))
}

/// Stain matrix (columns: hematoxylin, eosin unit OD vectors) and the
/// 99th-percentile concentration of each stain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainModel {
    /// Row-major 3×2: `stain_matrix[channel][stain]`.
    pub stain_matrix: [[f64; 2]; 3],
    pub max_conc: [f64; 2],
}

/// A stain model fitted on the designated reference patch.
pub type ReferenceTarget = StainModel;

impl StainModel {
    /// Builds a model from two stain directions: clamps negative entries to
    /// zero, normalizes each column and puts the column with the larger red
    /// component first.
    pub fn from_directions(a: [f64; 3], b: [f64; 3], max_conc: [f64; 2]) -> Result<Self> {
        let fix = |v: [f64; 3]| -> Result<[f64; 3]> {
            let v = v.map(|x| x.max(0.0));
            if dot3(v, v) <= 0.0 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::DegenerateStainPlane);
            }
            Ok(normalize3(v))
        };
        let (a, b) = (fix(a)?, fix(b)?);
        let (h, e, mc) = if a[0] >= b[0] { (a, b, max_conc) } else { (b, a, [max_conc[1], max_conc[0]]) };
        Ok(StainModel {
            stain_matrix: [[h[0], e[0]], [h[1], e[1]], [h[2], e[2]]],
            max_conc: mc,
        })
    }

    pub fn ruifrok() -> Self {
        StainModel::from_directions(RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN, [1.0, 1.0]).expect("constant directions")
    }

    /// Column `k` (0 = hematoxylin, 1 = eosin).
    pub fn column(&self, k: usize) -> [f64; 3] {
        [self.stain_matrix[0][k], self.stain_matrix[1][k], self.stain_matrix[2][k]]
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.column(0)
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.column(1)
    }

    /// The eight numbers of the text serialization: stain matrix row-major,
    /// then the two maximum concentrations.
    pub fn to_values(&self) -> [f64; 8] {
        let s = &self.stain_matrix;
        [s[0][0], s[0][1], s[1][0], s[1][1], s[2][0], s[2][1], self.max_conc[0], self.max_conc[1]]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        StainModel {
            stain_matrix: [[v[0], v[1]], [v[2], v[3]], [v[4], v[5]]],
            max_conc: [v[6], v[7]],
        }
    }

    /// Optical density `S·c` of one pixel.
    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        let s = &self.stain_matrix;
        [
            s[0][0] * c[0] + s[0][1] * c[1],
            s[1][0] * c[0] + s[1][1] * c[1],
            s[2][0] * c[0] + s[2][1] * c[1],
        ]
    }
}

/// Per-pixel nonnegative least-squares solver for a fixed 3×2 stain matrix.
struct Nnls {
    cols: [[f64; 3]; 2],
    gram: [[f64; 2]; 2],
    det: f64,
}

impl Nnls {
    fn new(m: &StainModel) -> Self {
        let cols = [m.column(0), m.column(1)];
        let gram = [
            [dot3(cols[0], cols[0]), dot3(cols[0], cols[1])],
            [dot3(cols[1], cols[0]), dot3(cols[1], cols[1])],
        ];
        let det = gram[0][0] * gram[1][1] - gram[0][1] * gram[1][0];
        Nnls { cols, gram, det }
    }

    fn solve(&self, v: [f64; 3]) -> [f64; 2] {
        let b = [dot3(self.cols[0], v), dot3(self.cols[1], v)];
        let g = &self.gram;
        if self.det > 1e-12 * g[0][0] * g[1][1] {
            let c0 = (g[1][1] * b[0] - g[0][1] * b[1]) / self.det;
            let c1 = (g[0][0] * b[1] - g[1][0] * b[0]) / self.det;
            if c0 >= 0.0 && c1 >= 0.0 {
                return [c0, c1];
            }
        }
        // Optimum lies on the boundary: best single-stain fit.
        let a = [(b[0] / g[0][0]).max(0.0), 0.0];
        let e = [0.0, (b[1] / g[1][1]).max(0.0)];
        // ‖v − Sc‖² = vᵀv − 2cᵀb + cᵀGc; vᵀv is shared.
        let cost = |c: [f64; 2]| -2.0 * (c[0] * b[0] + c[1] * b[1]) + c[0] * c[0] * g[0][0] + c[1] * c[1] * g[1][1] + 2.0 * c[0] * c[1] * g[0][1];
        if cost(a) <= cost(e) {
            a
        } else {
            e
        }
    }
}

/// Nonnegative least-squares concentrations `argmin_{c≥0} ‖od − S·c‖₂` for
/// every pixel.
pub fn concentrations(od: &OdImage, m: &StainModel) -> Vec<[f64; 2]> {
    let solver = Nnls::new(m);
    od.od.iter().map(|px| solver.solve(*px)).collect()
}

/// 99th-percentile concentration of each stain over all pixels.
pub(crate) fn max_concentrations(od: &OdImage, s: &StainModel) -> [f64; 2] {
    let conc = concentrations(od, s);
    let mut out = [0.0; 2];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut col: Vec<f64> = conc.iter().map(|c| c[k]).collect();
        col.sort_by(f64::total_cmp);
        *slot = math::percentile_sorted(&col, MAX_CONC_PERCENTILE);
    }
    out
}

/// Tissue pixels (every channel OD above `beta`), sorted lexicographically so
/// that downstream statistics do not depend on pixel order.
pub(crate) fn tissue_pixels(od: &OdImage, beta: f64) -> Result<Vec<[f64; 3]>> {
    let mut px: Vec<[f64; 3]> = od.od.iter().copied().filter(|p| p.iter().all(|v| *v > beta)).collect();
    if px.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: px.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }
    px.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2])));
    Ok(px)
}

/// Estimator choice for [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StainEstimator {
    Macenko(MacenkoParams),
    Vahadane(VahadaneParams),
}

impl StainEstimator {
    pub fn macenko() -> Self {
        StainEstimator::Macenko(MacenkoParams::default())
    }

    pub fn vahadane() -> Self {
        StainEstimator::Vahadane(VahadaneParams::default())
    }

    pub fn estimate(&self, od: &OdImage) -> Result<StainModel> {
        match self {
            StainEstimator::Macenko(p) => estimate_macenko(od, p.beta, p.alpha_pct),
            StainEstimator::Vahadane(p) => estimate_vahadane(od, p.lambda_sparse, p.iters),
        }
    }
}

/// Re-renders `p` with the stain matrix and concentration scale of `target`.
///
/// Concentrations are rescaled per stain by `target.max_conc / source.max_conc`.
pub fn normalize(p: &RgbPatch, estimator: &StainEstimator, target: &ReferenceTarget) -> Result<RgbPatch> {
    let od = rgb_to_od(p);
    let source = estimator.estimate(&od)?;
    Ok(normalize_with(&od, &source, target))
}

/// Normalization with an already-estimated source model.
pub fn normalize_with(od: &OdImage, source: &StainModel, target: &ReferenceTarget) -> RgbPatch {
    let scale = [0, 1].map(|k| {
        if source.max_conc[k] > 0.0 {
            target.max_conc[k] / source.max_conc[k]
        } else {
            1.0
        }
    });
    let conc = concentrations(od, source);
    let out = conc.iter().map(|c| target.mix([c[0] * scale[0], c[1] * scale[1]])).collect();
    od_to_rgb(&OdImage { side: od.side, od: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn od_formula_values() {
        assert_eq!(channel_to_od(254), 0.0);
        assert_eq!(channel_to_od(255), 0.0);
        // Independent values: log10(255/25) and log10(255).
        assert!((channel_to_od(24) - 1.008_600_171_761_917_5).abs() < 1e-12);
        assert!((channel_to_od(0) - 2.406_540_180_433_955).abs() < 1e-12);
        for i in 0..255u8 {
            assert!(channel_to_od(i) > channel_to_od(i + 1) || i == 254);
        }
    }

    #[test]
    fn od_to_channel_edges() {
        assert_eq!(od_to_channel(0.0), 255);
        assert_eq!(od_to_channel(5.0), 0);
    }

    #[test]
    fn round_trip_within_one() {
        let pixels: Vec<u8> = (0..16 * 16 * 3).map(|i| ((i * 37 + 11) % 256) as u8).collect();
        let p = RgbPatch::new(16, 16, pixels).unwrap();
        let q = od_to_rgb(&rgb_to_od(&p));
        let worst = p.pixels().iter().zip(q.pixels()).map(|(a, b)| (*a as i32 - *b as i32).abs()).max().unwrap();
        assert!(worst <= 1);
    }

    #[test]
    fn nnls_recovers_known_mix() {
        let m = StainModel::ruifrok();
        let od = OdImage::new(2, vec![m.mix([2.0, 3.0]), [0.0; 3], [0.0, 0.0, 1.0], m.mix([0.5, 0.0])]).unwrap();
        let c = concentrations(&od, &m);
        assert!((c[0][0] - 2.0).abs() < 1e-9 && (c[0][1] - 3.0).abs() < 1e-9);
        assert_eq!(c[1], [0.0, 0.0]);
        assert!(c[2][0] >= 0.0 && c[2][1] >= 0.0);
        assert!((c[3][0] - 0.5).abs() < 1e-12 && c[3][1].abs() < 1e-12);
    }

    #[test]
    fn nnls_boundary_is_optimal() {
        // Compare against a fine grid search over c ≥ 0.
        let m = StainModel::ruifrok();
        let solver = Nnls::new(&m);
        for v in [[0.9, 0.1, 0.0], [0.0, 0.2, 0.9], [0.3, 0.0, 0.3], [0.1, 1.2, 0.05]] {
            let c = solver.solve(v);
            let res = |c: [f64; 2]| {
                let p = m.mix(c);
                (0..3).map(|i| (p[i] - v[i]) * (p[i] - v[i])).sum::<f64>()
            };
            let best = (0..=200)
                .flat_map(|i| (0..=200).map(move |j| [i as f64 * 0.01, j as f64 * 0.01]))
                .map(res)
                .fold(f64::INFINITY, f64::min);
            assert!(res(c) <= best + 1e-12, "{v:?}: {} vs grid {}", res(c), best);
        }
    }

    #[test]
    fn ruifrok_model_invariants() {
        let m = StainModel::ruifrok();
        for k in 0..2 {
            let c = m.column(k);
            assert!((dot3(c, c) - 1.0).abs() < 1e-12);
            assert!(c.iter().all(|v| *v >= 0.0));
        }
        assert!(m.hematoxylin()[0] > m.eosin()[0]);
        let swapped = StainModel::from_directions(RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN, [2.0, 1.0]).unwrap();
        assert_eq!(swapped.stain_matrix, m.stain_matrix);
        assert_eq!(swapped.max_conc, [1.0, 2.0]);
    }
}
