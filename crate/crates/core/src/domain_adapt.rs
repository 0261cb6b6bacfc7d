//! Domain-adversarial branch: a gradient reversal layer feeding a small
//! scanner classifier that shares the class token feature with the class head.

use alloc::format;
use alloc::vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradient reversal: identity forward, `−λ·g` backward.
pub fn grl(tape: &mut Tape, x: Var, lambda: f64) -> Var {
    tape.reverse_gradient(x, lambda)
}

/// How the reversal strength evolves over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrlSchedule {
    Constant,
    /// `λ(p) = 2 / (1 + exp(−γ·p)) − 1` with `p` the training progress in `[0, 1]`.
    DannRamp { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlCoeff {
    pub lambda: f64,
    pub schedule: GrlSchedule,
}

impl Default for GrlCoeff {
    fn default() -> Self {
        GrlCoeff::constant(1.0)
    }
}

impl GrlCoeff {
    pub fn constant(lambda: f64) -> Self {
        GrlCoeff {
            lambda,
            schedule: GrlSchedule::Constant,
        }
    }

    pub fn dann_ramp(gamma: f64) -> Self {
        GrlCoeff {
            lambda: 1.0,
            schedule: GrlSchedule::DannRamp { gamma },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("GRL lambda must be a finite nonnegative number, got {}", self.lambda)));
        }
        if let GrlSchedule::DannRamp { gamma } = self.schedule {
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(Error::InvalidConfig(format!("DANN ramp gamma must be positive, got {gamma}")));
            }
        }
        Ok(())
    }

    /// Reversal strength at training progress `p ∈ [0, 1]`. The ramp is scaled
    /// by `lambda`, so `lambda = 1` gives the plain DANN schedule.
    pub fn at(&self, progress: f64) -> f64 {
        match self.schedule {
            GrlSchedule::Constant => self.lambda,
            GrlSchedule::DannRamp { gamma } => {
                let p = progress.clamp(0.0, 1.0);
                self.lambda * (2.0 / (1.0 + math::exp(-gamma * p)) - 1.0)
            }
        }
    }
}

/// Two-layer scanner classifier `D → hidden → num_domains` with GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainHead {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub hidden: usize,
    pub num_domains: usize,
}

impl DomainHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embed_dim: usize,
        hidden: usize,
        num_domains: usize,
        rng: &mut R,
    ) -> Self {
        let mut normal = |rows: usize, cols: usize| {
            let std = 1.0 / math::sqrt(rows as f64);
            let data = (0..rows * cols).map(|_| std * math::normal(rng)).collect();
            Tensor::new(vec![rows, cols], data).expect("shape matches")
        };
        let w1 = normal(embed_dim, hidden);
        let w2 = normal(hidden, num_domains);
        let g = ParamGroup::DomainHead;
        DomainHead {
            fc1_w: store.add("domain_head.fc1.weight", g, w1),
            fc1_b: store.add("domain_head.fc1.bias", g, Tensor::zeros(&[hidden])),
            fc2_w: store.add("domain_head.fc2.weight", g, w2),
            fc2_b: store.add("domain_head.fc2.bias", g, Tensor::zeros(&[num_domains])),
            hidden,
            num_domains,
        }
    }

    /// Scanner logits for a feature batch `[n, D]`, without reversal.
    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b[self.fc1_w])?;
        let h = tape.add_row(h, b[self.fc1_b])?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, b[self.fc2_w])?;
        tape.add_row(o, b[self.fc2_b])
    }
}

/// `head(GRL(feature, λ))`
pub fn domain_logits(tape: &mut Tape, b: &Bindings, head: &DomainHead, feature: Var, lambda: f64) -> Result<Var> {
    let r = grl(tape, feature, lambda);
    head.forward(tape, b, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grl_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let y = grl(&mut tape, x, 0.5);
        assert_eq!(tape.value(y), &[1.0, 2.0]);
        let w = tape.constant(&[2], vec![1.48, -2.96]).unwrap();
        let p = tape.mul(y, w).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[-0.74, 1.48]);
    }

    #[test]
    fn ramp_schedule() {
        let c = GrlCoeff::dann_ramp(10.0);
        assert_eq!(c.at(0.0), 0.0);
        assert!((c.at(1.0) - (2.0 / (1.0 + math::exp(-10.0)) - 1.0)).abs() < 1e-15);
        assert!(c.at(0.5) < c.at(0.6));
        assert_eq!(GrlCoeff::default().at(0.3), 1.0);
        assert!(GrlCoeff::constant(-1.0).validate().is_err());
        assert!(GrlCoeff::dann_ramp(0.0).validate().is_err());
    }

    /// The reversed branch sends `−λ` times the plain domain gradient into the
    /// feature, while the head's own gradients do not depend on `λ`.
    #[test]
    fn reversal_twin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = DomainHead::new(&mut store, 6, 5, 3, &mut rng);
        store.set_trainable(|_| true);
        let feat: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |lambda: Option<f64>| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let f = tape.leaf(&Tensor::new(vec![2, 6], feat.clone()).unwrap().with_requires_grad(true));
            let logits = match lambda {
                Some(l) => domain_logits(&mut tape, &b, &head, f, l).unwrap(),
                None => head.forward(&mut tape, &b, f).unwrap(),
            };
            let loss = tape.cross_entropy(logits, &[2, 0], None).unwrap();
            let g = tape.backward(loss).unwrap();
            (g.get(f).unwrap().to_vec(), g.get(b[head.fc1_w]).unwrap().to_vec())
        };
        let (plain_f, plain_w) = run(None);
        for lambda in [0.0, 0.5, 1.0] {
            let (gf, gw) = run(Some(lambda));
            for (a, p) in gf.iter().zip(&plain_f) {
                assert!((a + lambda * p).abs() <= 1e-10);
            }
            assert_eq!(gw, plain_w);
        }
    }

    #[test]
    fn reversal_scales_linearly() {
        let x = Tensor::new(vec![4], vec![0.3, -1.7, 2.25, 1e-3]).unwrap().with_requires_grad(true);
        let grad_at = |lambda: f64| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let r = grl(&mut tape, v, lambda);
            let sq = tape.mul(r, r).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap().get(v).unwrap().to_vec()
        };
        let (one, two) = (grad_at(1.0), grad_at(2.0));
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(*b, 2.0 * a);
        }
    }
}
