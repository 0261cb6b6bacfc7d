//! Macenko stain estimation: the two extreme directions of tissue optical
//! densities within their principal plane.

use alloc::vec::Vec;

use super::{dot3, max_concentrations, normalize3, symmetric_eigen3, tissue_pixels, OdImage, StainModel, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::math;

/// The plane is degenerate when the second eigenvalue of the OD covariance is
/// below this fraction of the first.
pub(crate) const PLANE_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacenkoParams {
    /// Tissue threshold on every channel's optical density.
    pub beta: f64,
    /// Angle percentile (in percent) taken as the robust extreme on each side.
    pub alpha_pct: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        MacenkoParams {
            beta: DEFAULT_BETA,
            alpha_pct: 1.0,
        }
    }
}

/// Orthonormal basis `(e1, e2)` of the principal plane of `px`, with `e1`
/// along the projected mean so every tissue pixel has a positive `e1`
/// coordinate.
pub(crate) fn principal_plane(px: &[[f64; 3]]) -> Result<([f64; 3], [f64; 3])> {
    let n = px.len() as f64;
    let mut mean = [0.0; 3];
    for p in px {
        for k in 0..3 {
            mean[k] += p[k];
        }
    }
    mean = mean.map(|m| m / n);
    let mut cov = [[0.0; 3]; 3];
    for p in px {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let (vals, vecs) = symmetric_eigen3(cov);
    if !(vals[0] > 0.0) || vals[1] <= PLANE_RANK_TOL * vals[0] {
        return Err(Error::DegenerateStainPlane);
    }
    let (v1, v2) = (vecs[0], vecs[1]);
    let pm = [dot3(mean, v1), dot3(mean, v2)];
    let norm = math::sqrt(pm[0] * pm[0] + pm[1] * pm[1]);
    if !(norm > 0.0) {
        return Err(Error::DegenerateStainPlane);
    }
    let (c, s) = (pm[0] / norm, pm[1] / norm);
    let e1 = [0, 1, 2].map(|k| c * v1[k] + s * v2[k]);
    let e2 = [0, 1, 2].map(|k| -s * v1[k] + c * v2[k]);
    Ok((normalize3(e1), normalize3(e2)))
}

/// Estimates a [`StainModel`] with the Macenko method.
///
/// Tissue pixels (all OD channels above `beta`) are projected onto the plane of
/// the two leading eigenvectors of their covariance; the directions at the
/// `alpha_pct` and `100 − alpha_pct` angle percentiles become the stain
/// columns. The result depends on the pixel set only, not on pixel order.
pub fn estimate_macenko(od: &OdImage, beta: f64, alpha_pct: f64) -> Result<StainModel> {
    let px = tissue_pixels(od, beta)?;
    let (e1, e2) = principal_plane(&px)?;
    let mut angles: Vec<f64> = px.iter().map(|p| math::atan2(dot3(*p, e2), dot3(*p, e1))).collect();
    angles.sort_by(f64::total_cmp);
    let lo = math::percentile_sorted(&angles, alpha_pct);
    let hi = math::percentile_sorted(&angles, 100.0 - alpha_pct);
    if !(hi - lo > 1e-9) {
        return Err(Error::DegenerateStainPlane);
    }
    let dir = |phi: f64| {
        let (c, s) = (math::cos(phi), math::sin(phi));
        let d = [0, 1, 2].map(|k| c * e1[k] + s * e2[k]);
        if d.iter().sum::<f64>() < 0.0 {
            d.map(|x| -x)
        } else {
            d
        }
    };
    let shape_only = StainModel::from_directions(dir(lo), dir(hi), [1.0, 1.0])?;
    let max_conc = max_concentrations(od, &shape_only);
    Ok(StainModel { max_conc, ..shape_only })
}
