//! Domain discriminator, its loss, and the adversarial weighting schedule.
//!
//! The discriminator reads a sentence vector u_i and predicts the domain of
//! the conversation it came from (1 = source/meeting, 0 = target/forum).
//! During training it is wired to the encoder through gradient reversal, so
//! the encoder learns features the discriminator cannot separate.

use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::DomainLabel;
use crate::error::Result;
use crate::optim::xavier_init;
use crate::params::{BoundParams, ParamId, Params};
use crate::rng::{name_tag, stream, StreamKind};

/// Probabilities are kept this far from 0 and 1 inside the BCE.
pub const BCE_CLAMP: f64 = 1e-12;

/// One-hidden-layer discriminator: d̂ = σ(w_dᵀ g(U_d u + b) + b_out) with a
/// rectified-linear hidden activation.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub hidden_w: ParamId,
    pub hidden_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub hidden: usize,
}

impl Discriminator {
    pub fn new(params: &mut Params, u_dim: usize, hidden: usize, master_seed: u64) -> Result<Self> {
        assert!(hidden >= 1);
        let init2d = |name: &str, shape: [usize; 2]| -> Result<Tensor> {
            let mut rng = stream(master_seed, StreamKind::Init, &[name_tag(name)]);
            xavier_init(&shape, &mut rng)
        };
        let hw = init2d("disc.hidden_w", [hidden, u_dim])?;
        let mut ow = init2d("disc.out_w", [1, hidden])?;
        ow.shape = vec![hidden];
        Ok(Discriminator {
            hidden_w: params.add("disc.hidden_w", hw, true),
            hidden_b: params.add("disc.hidden_b", Tensor::zeros(vec![hidden]), true),
            out_w: params.add("disc.out_w", ow, true),
            out_b: params.add("disc.out_b", Tensor::scalar(0.0), true),
            hidden,
        })
    }

    /// Domain probability d̂ ∈ (0,1) for one sentence vector.
    pub fn discriminate(&self, tape: &mut Tape, bound: &BoundParams, u: Var) -> Result<Var> {
        let pre = tape.matvec(bound.var(self.hidden_w), u)?;
        let pre_b = tape.add(pre, bound.var(self.hidden_b))?;
        let h = tape.relu(pre_b);
        let logit = tape.dot(bound.var(self.out_w), h)?;
        let logit_b = tape.add(logit, bound.var(self.out_b))?;
        Ok(tape.sigmoid(logit_b))
    }
}

/// Binary cross-entropy −d·log d̂ − (1−d)·log(1−d̂), with d̂ clamped at
/// 1e-12 from the boundaries. Scalar in, scalar out; callers average over
/// the sentences of a batch.
pub fn domain_bce_loss(tape: &mut Tape, d_hat: Var, d: DomainLabel) -> Result<Var> {
    let p = tape.clamp(d_hat, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let target = match d {
        DomainLabel::Source => p,
        DomainLabel::Target => tape.affine(p, -1.0, 1.0),
    };
    let lp = tape.log(target);
    Ok(tape.affine(lp, -1.0, 0.0))
}

/// Adversarial weight λ = 2/(1 + e^(−10p)) − 1 over training progress
/// p ∈ [0,1]; 0 at the start, approaching 1. Out-of-range p is clamped
/// with a warning.
pub fn lambda_schedule(p: f64) -> f64 {
    let p = if (0.0..=1.0).contains(&p) {
        p
    } else {
        let clamped = p.clamp(0.0, 1.0);
        eprintln!("warning: training progress {p} outside [0,1], clamped to {clamped}");
        clamped
    };
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_exactly_half() {
        let mut params = Params::new();
        let disc = Discriminator::new(&mut params, 4, 3, 1).unwrap();
        for e in params.entries_mut() {
            e.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let u = tape.leaf(Tensor::vector(vec![0.3, -0.7, 1.1, 0.0]), false);
        let d = disc.discriminate(&mut tape, &bound, u).unwrap();
        assert_eq!(tape.value(d).item(), 0.5);
    }

    #[test]
    fn scaling_a_positive_logit_drives_probability_to_one() {
        let mut params = Params::new();
        let disc = Discriminator::new(&mut params, 2, 2, 3).unwrap();
        // force a positive logit, then scale the output weights up
        let hw = params.id("disc.hidden_w").unwrap();
        params.value_mut(hw).data = vec![1.0, 0.0, 0.0, 1.0];
        let ow = params.id("disc.out_w").unwrap();
        params.value_mut(ow).data = vec![0.5, 0.5];
        let mut prev = 0.0;
        for scale in [1.0, 10.0, 100.0] {
            let mut p2 = params.clone();
            let ow2 = p2.id("disc.out_w").unwrap();
            p2.value_mut(ow2).data.iter_mut().for_each(|v| *v *= scale);
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &p2);
            let u = tape.leaf(Tensor::vector(vec![1.0, 1.0]), false);
            let d = disc.discriminate(&mut tape, &bound, u).unwrap();
            let v = tape.value(d).item();
            assert!(v > prev, "not monotone: {v} after {prev}");
            prev = v;
        }
        assert!(prev > 1.0 - 1e-10);
    }

    #[test]
    fn bce_closed_form_values() {
        let case = |p: f64, d: DomainLabel| -> f64 {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::scalar(p), false);
            let l = domain_bce_loss(&mut tape, v, d).unwrap();
            tape.value(l).item()
        };
        assert!((case(0.5, DomainLabel::Source) - 2.0f64.ln()).abs() < 1e-12);
        assert!((case(0.5, DomainLabel::Target) - 2.0f64.ln()).abs() < 1e-12);
        assert!((case(0.9, DomainLabel::Target) - (-(0.1f64.ln()))).abs() < 1e-12);
        // d̂ matching the label drives the loss to (clamped) zero
        assert!(case(1.0, DomainLabel::Source) < 1e-11);
        assert!(case(0.0, DomainLabel::Target) < 1e-11);
    }

    #[test]
    fn bce_is_nonnegative() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            for d in [DomainLabel::Source, DomainLabel::Target] {
                let mut tape = Tape::new();
                let v = tape.leaf(Tensor::scalar(p), false);
                let l = domain_bce_loss(&mut tape, v, d).unwrap();
                assert!(tape.value(l).item() >= 0.0);
            }
        }
    }

    #[test]
    fn lambda_schedule_endpoints_and_growth() {
        assert_eq!(lambda_schedule(0.0), 0.0);
        let mid = lambda_schedule(0.5);
        assert!((mid - 0.986614).abs() < 1e-6);
        let end = lambda_schedule(1.0);
        assert!((end - (2.0 / (1.0 + (-10.0f64).exp()) - 1.0)).abs() < 1e-15);
        assert!((end - 0.999909).abs() < 1e-6);
        let mut prev = -1.0;
        for i in 0..=1000 {
            let l = lambda_schedule(i as f64 / 1000.0);
            assert!(l > prev, "not strictly increasing at p={}", i as f64 / 1000.0);
            prev = l;
        }
    }

    #[test]
    fn lambda_schedule_clamps_out_of_range() {
        assert_eq!(lambda_schedule(-0.5), 0.0);
        assert_eq!(lambda_schedule(1.5), lambda_schedule(1.0));
    }
}
