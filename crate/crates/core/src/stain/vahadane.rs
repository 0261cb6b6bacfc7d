//! Vahadane stain estimation: sparse nonnegative dictionary learning
//!
//! ```text
//! min  ‖V − W·H‖²_F + λ·Σⱼ ‖H_j‖₁   s.t.  W ≥ 0 with unit columns, H ≥ 0
//! ```
//!
//! over tissue optical densities `V` (3×N), by alternating a coordinate-descent
//! nonnegative lasso for `H` with a projected-gradient step for `W`. Both
//! half-steps only ever accept non-increasing objective values, so the
//! recorded objective trace is monotone.

use alloc::vec;
use alloc::vec::Vec;

use super::macenko::principal_plane;
use super::{dot3, estimate_macenko, max_concentrations, tissue_pixels, OdImage, StainModel, DEFAULT_BETA, RUIFROK_EOSIN, RUIFROK_HEMATOXYLIN};
use crate::error::Result;
use crate::math;

const INNER_CD_ITERS: usize = 20;
const MAX_BACKTRACK: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VahadaneParams {
    pub lambda_sparse: f64,
    pub iters: usize,
    pub beta: f64,
}

impl Default for VahadaneParams {
    fn default() -> Self {
        VahadaneParams {
            lambda_sparse: 0.1,
            iters: 50,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VahadaneFit {
    pub model: StainModel,
    /// Objective after each alternation (H-step then W-step).
    pub objective: Vec<f64>,
    /// `‖V − WH‖²_F / ‖V‖²_F` at the final iterate.
    pub relative_reconstruction_error: f64,
}

pub fn estimate_vahadane(od: &OdImage, lambda_sparse: f64, iters: usize) -> Result<StainModel> {
    Ok(estimate_vahadane_traced(od, lambda_sparse, iters)?.model)
}

type Dict = [[f64; 3]; 2];

fn pixel_cost(w: &Dict, v: [f64; 3], h: [f64; 2], lambda: f64) -> f64 {
    let mut r = 0.0;
    for k in 0..3 {
        let d = v[k] - w[0][k] * h[0] - w[1][k] * h[1];
        r += d * d;
    }
    r + lambda * (h[0] + h[1])
}

fn objective(w: &Dict, v: &[[f64; 3]], h: &[[f64; 2]], lambda: f64) -> f64 {
    v.iter().zip(h).map(|(v, h)| pixel_cost(w, *v, *h, lambda)).sum()
}

/// Coordinate descent on `‖v − Wh‖² + λ·Σh`, `h ≥ 0`, warm-started at `h`.
fn sparse_code(w: &Dict, v: [f64; 3], mut h: [f64; 2], lambda: f64) -> [f64; 2] {
    let nn = [dot3(w[0], w[0]), dot3(w[1], w[1])];
    let cross = dot3(w[0], w[1]);
    let wv = [dot3(w[0], v), dot3(w[1], v)];
    for _ in 0..INNER_CD_ITERS {
        for k in 0..2 {
            let other = 1 - k;
            let num = wv[k] - cross * h[other] - 0.5 * lambda;
            h[k] = if nn[k] > 0.0 { (num / nn[k]).max(0.0) } else { 0.0 };
        }
    }
    h
}

fn project_unit_nonneg(w: Dict) -> Option<Dict> {
    let mut out = w;
    for col in out.iter_mut() {
        *col = col.map(|x| x.max(0.0));
        let n = math::sqrt(dot3(*col, *col));
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        *col = col.map(|x| x / n);
    }
    Some(out)
}

/// Vahadane estimation with the per-alternation objective trace.
///
/// `W` starts from the Macenko estimate on the same image (Ruifrok columns if
/// that estimate fails for a reason other than missing tissue or a degenerate
/// plane, which are reported as errors).
pub fn estimate_vahadane_traced(od: &OdImage, lambda_sparse: f64, iters: usize) -> Result<VahadaneFit> {
    let v = tissue_pixels(od, DEFAULT_BETA)?;
    principal_plane(&v)?;
    let init = estimate_macenko(od, DEFAULT_BETA, 1.0).unwrap_or_else(|_| {
        StainModel::from_directions(RUIFROK_HEMATOXYLIN, RUIFROK_EOSIN, [1.0, 1.0]).expect("constant directions")
    });
    let mut w: Dict = [init.column(0), init.column(1)];
    let mut h = vec![[0.0; 2]; v.len()];
    let mut trace = Vec::with_capacity(iters);

    for _ in 0..iters {
        // H-step, per pixel; keep the old code if rounding made it worse.
        for (hj, vj) in h.iter_mut().zip(&v) {
            let cand = sparse_code(&w, *vj, *hj, lambda_sparse);
            if pixel_cost(&w, *vj, cand, lambda_sparse) <= pixel_cost(&w, *vj, *hj, lambda_sparse) {
                *hj = cand;
            }
        }

        // W-step: projected gradient of ‖V − WH‖² with backtracking.
        let mut hht = [[0.0; 2]; 2];
        let mut vht = [[0.0; 2]; 3];
        for (hj, vj) in h.iter().zip(&v) {
            for a in 0..2 {
                for b in 0..2 {
                    hht[a][b] += hj[a] * hj[b];
                }
                for c in 0..3 {
                    vht[c][a] += vj[c] * hj[a];
                }
            }
        }
        let mut grad: Dict = [[0.0; 3]; 2];
        for k in 0..2 {
            for c in 0..3 {
                grad[k][c] = 2.0 * (w[0][c] * hht[0][k] + w[1][c] * hht[1][k] - vht[c][k]);
            }
        }
        // Lipschitz constant of the gradient: 2·λmax(HHᵀ).
        let tr = hht[0][0] + hht[1][1];
        let det = hht[0][0] * hht[1][1] - hht[0][1] * hht[1][0];
        let lmax = 0.5 * (tr + math::sqrt((tr * tr - 4.0 * det).max(0.0)));
        let current = objective(&w, &v, &h, lambda_sparse);
        if lmax > 0.0 {
            let mut step = 1.0 / (2.0 * lmax);
            for _ in 0..MAX_BACKTRACK {
                let moved = [0, 1].map(|k| [0, 1, 2].map(|c| w[k][c] - step * grad[k][c]));
                if let Some(cand) = project_unit_nonneg(moved) {
                    if objective(&cand, &v, &h, lambda_sparse) <= current {
                        w = cand;
                        break;
                    }
                }
                step *= 0.5;
            }
        }
        trace.push(objective(&w, &v, &h, lambda_sparse));
    }

    let vv: f64 = v.iter().map(|p| dot3(*p, *p)).sum();
    let resid = objective(&w, &v, &h, 0.0);
    let shape_only = StainModel::from_directions(w[0], w[1], [1.0, 1.0])?;
    let max_conc = max_concentrations(od, &shape_only);
    Ok(VahadaneFit {
        model: StainModel { max_conc, ..shape_only },
        objective: trace,
        relative_reconstruction_error: resid / vv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::stain::cosine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sparse_mixture(m: &StainModel, side: usize, seed: u64) -> OdImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let od = (0..side * side)
            .map(|_| {
                let h: f64 = rng.random_range(0.0..2.0);
                let e: f64 = rng.random_range(0.0..3.0);
                m.mix([h, e])
            })
            .collect();
        OdImage::new(side, od).unwrap()
    }

    #[test]
    fn recovers_columns_with_monotone_objective() {
        let truth = StainModel::ruifrok();
        let od = sparse_mixture(&truth, 48, 17);
        let fit = estimate_vahadane_traced(&od, 0.1, 50).unwrap();
        for k in 0..2 {
            let c = cosine(fit.model.column(k), truth.column(k));
            assert!(c >= 0.98, "column {k}: cosine {c}");
        }
        assert_eq!(fit.objective.len(), 50);
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn exact_fit_without_sparsity() {
        let truth = StainModel::ruifrok();
        let od = sparse_mixture(&truth, 32, 23);
        let fit = estimate_vahadane_traced(&od, 0.0, 50).unwrap();
        assert!(fit.relative_reconstruction_error <= 1e-3, "{}", fit.relative_reconstruction_error);
    }

    #[test]
    fn same_errors_as_macenko() {
        let white = OdImage::new(16, vec![[0.0; 3]; 256]).unwrap();
        assert!(matches!(estimate_vahadane(&white, 0.1, 5), Err(Error::InsufficientTissue { .. })));
        let truth = StainModel::ruifrok();
        let one = OdImage::new(16, (0..256).map(|i| truth.mix([0.5 + (i as f64) / 256.0, 0.0])).collect()).unwrap();
        assert_eq!(estimate_vahadane(&one, 0.1, 5).unwrap_err(), Error::DegenerateStainPlane);
    }
}
