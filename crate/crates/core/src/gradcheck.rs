//! Central finite-difference oracle for tape gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step, must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Approximate number of coordinates to probe, spread evenly across the
    /// tracked tensors. Every tracked tensor gets at least one.
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_coords: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// Compares tape gradients of the scalar built by `f` with central
/// differences over the tensors in `params` that require gradients.
///
/// `f` receives a fresh tape with one leaf per entry of `params` (same order)
/// and must return the scalar loss. It is called once for the analytic pass
/// and twice per probed coordinate, so it has to be deterministic.
pub fn grad_check<F>(params: &mut [Tensor], cfg: GradCheck, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&cfg.eps) {
        return Err(Error::invalid("grad_check", alloc::format!("eps {} outside [1e-7, 1e-3]", cfg.eps)));
    }
    let mut eval = |params: &[Tensor], want_grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NonFinite);
        }
        if !want_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let per_param = vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.get(*v).map_or_else(|| alloc::vec![0.0; p.len()], |g| g.to_vec()))
            .collect();
        Ok((value, Some(per_param)))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.expect("requested gradients");

    let tracked: Vec<usize> = (0..params.len()).filter(|&i| params[i].requires_grad()).collect();
    if tracked.is_empty() {
        return Err(Error::invalid("grad_check", "no parameter requires gradients"));
    }
    let per_tensor = cfg.max_coords.div_ceil(tracked.len()).max(1);

    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for &pi in &tracked {
        let len = params[pi].len();
        let k = per_tensor.min(len);
        for j in 0..k {
            let idx = j * len / k;
            let orig = params[pi].data()[idx];
            params[pi].data_mut()[idx] = orig + cfg.eps;
            let plus = eval(params, false);
            params[pi].data_mut()[idx] = orig - cfg.eps;
            let minus = eval(params, false);
            params[pi].data_mut()[idx] = orig;
            let numeric = (plus?.0 - minus?.0) / (2.0 * cfg.eps);
            let a = analytic[pi][idx];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates,
    })
}
