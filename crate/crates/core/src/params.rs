//! Named trainable parameters and their accumulated gradients.
//!
//! Parameters live outside any tape. Each training step registers them as
//! leaves on a fresh tape, runs forward/backward there, then folds the tape
//! gradients back in with [`BoundParams::export_grads`]. Gradients accumulate
//! across exports until [`Params::zero_grad`].

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Insertion-ordered parameter store; the order is the canonical tensor
/// order for checkpoints and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.numel()];
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), self.entries.len() - 1);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for e in &mut self.entries {
                e.grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
}

/// Tape-side view of a parameter store for one forward/backward cycle.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Register every parameter as a leaf on `tape`.
    pub fn bind(tape: &mut Tape, params: &Params) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|e| tape.leaf(e.value.clone(), e.trainable))
            .collect();
        BoundParams { vars }
    }

    /// Same as [`BoundParams::bind`] but one parameter is replaced with an
    /// externally supplied var (used by gradient checks).
    pub fn bind_with_override(
        tape: &mut Tape,
        params: &Params,
        replace: ParamId,
        var: Var,
    ) -> Self {
        let vars = params
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if i == replace.0 {
                    var
                } else {
                    tape.leaf(e.value.clone(), e.trainable)
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Fold the tape gradients of every bound parameter into the store
    /// (accumulating; the caller decides when to zero).
    pub fn export_grads(&self, tape: &Tape, params: &mut Params) -> Result<()> {
        for (entry, var) in params.entries.iter_mut().zip(&self.vars) {
            if let Some(g) = tape.grad(*var) {
                if g.len() != entry.grad.len() {
                    return Err(Error::Contract(format!(
                        "gradient length {} for parameter {} of size {}",
                        g.len(),
                        entry.name,
                        entry.grad.len()
                    )));
                }
                for (acc, d) in entry.grad.iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
        Ok(())
    }
}
