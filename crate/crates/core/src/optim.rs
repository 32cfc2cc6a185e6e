//! SGD (with momentum) and Adam with per-element update masking.
//!
//! Elements marked frozen by a [`PartitionMask`] are skipped entirely: their
//! values and their optimizer moments stay bitwise unchanged.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{ParamGroup, TensorMap};
use crate::rpr::PartitionMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64) -> Self {
        OptimKind::Sgd { momentum }
    }

    fn num_moments(&self) -> usize {
        match self {
            OptimKind::Sgd { .. } => 1,
            OptimKind::Adam { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    kind: OptimKind,
    lr: f64,
    /// SGD: `[velocity]`; Adam: `[m, v]`. Created lazily on the first step.
    moments: BTreeMap<String, Vec<Tensor>>,
    step_count: u64,
}

impl OptimState {
    pub fn new(kind: OptimKind, lr: f64) -> Result<Self> {
        check_lr(lr)?;
        Ok(OptimState {
            kind,
            lr,
            moments: BTreeMap::new(),
            step_count: 0,
        })
    }

    /// Rebuilds a state from checkpointed parts.
    pub fn from_parts(kind: OptimKind, lr: f64, step_count: u64, moments: BTreeMap<String, Vec<Tensor>>) -> Result<Self> {
        check_lr(lr)?;
        if let Some((name, m)) = moments.iter().find(|(_, m)| m.len() != kind.num_moments()) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` has {} moment tensors, expected {}",
                m.len(),
                kind.num_moments()
            )));
        }
        Ok(OptimState {
            kind,
            lr,
            moments,
            step_count,
        })
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> &BTreeMap<String, Vec<Tensor>> {
        &self.moments
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.lr = lr;
        Ok(())
    }

    /// Applies one update to every parameter in `params`.
    ///
    /// `mask` may only cover quantizable parameters; covered elements marked
    /// frozen receive no update at all.
    pub fn step(&mut self, params: &mut [ParamGroup], grads: &TensorMap, mask: Option<&PartitionMask>) -> Result<()> {
        // Validate everything before touching any state.
        for p in params.iter() {
            let g = grads
                .get(&p.name)
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            if g.shape() != p.values.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer gradient",
                    lhs: g.shape().to_vec(),
                    rhs: p.values.shape().to_vec(),
                });
            }
        }
        if let Some(mask) = mask {
            for (name, frozen) in mask.iter() {
                let p = params
                    .iter()
                    .find(|p| p.name == name)
                    .ok_or_else(|| Error::InvalidArgument(format!("mask for unknown parameter `{name}`")))?;
                if !p.is_quantizable() {
                    return Err(Error::InvalidArgument(format!(
                        "mask given for continuous parameter `{name}`"
                    )));
                }
                if frozen.len() != p.values.len() {
                    return Err(Error::ShapeMismatch {
                        op: "partition mask",
                        lhs: vec![frozen.len()],
                        rhs: p.values.shape().to_vec(),
                    });
                }
            }
        }

        let t = self.step_count + 1;
        for p in params.iter_mut() {
            let g = grads[&p.name].data();
            let frozen = mask.and_then(|m| m.get(&p.name));
            let moments = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| vec![Tensor::zeros(p.values.shape()); self.kind.num_moments()]);
            let values = p.values.data_mut();
            match self.kind {
                OptimKind::Sgd { momentum } => {
                    let vel = moments[0].data_mut();
                    for i in 0..values.len() {
                        if frozen.is_some_and(|f| f[i]) {
                            continue;
                        }
                        vel[i] = momentum * vel[i] + g[i];
                        values[i] -= self.lr * vel[i];
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t as i32);
                    let bc2 = 1.0 - beta2.powi(t as i32);
                    let (m, v) = moments.split_at_mut(1);
                    let (m, v) = (m[0].data_mut(), v[0].data_mut());
                    for i in 0..values.len() {
                        if frozen.is_some_and(|f| f[i]) {
                            continue;
                        }
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        values[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        self.step_count = t;
        Ok(())
    }
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}
