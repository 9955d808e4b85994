use super::config::SslHyperparams;
use crate::nn::{Module, Scalar};
use crate::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `buf ← μ·buf + (g + λ·θ)`, `θ ← θ − α·buf`. Decay is applied to weight
/// tensors only.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub learning_rate: F,
    pub momentum: F,
    pub weight_decay: F,
    buffers: Vec<Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate: F::lit(learning_rate),
            momentum: F::lit(momentum),
            weight_decay: F::lit(weight_decay),
            buffers: Vec::new(),
        }
    }

    pub fn from_hyper(h: &SslHyperparams) -> Self {
        Self::new(h.learning_rate, h.momentum, h.weight_decay)
    }

    /// Applies one update to every trainable parameter of `module`. Fails
    /// without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, module: &mut impl Module<F>) -> Result<()> {
        let mut bad = None;
        module.visit("", &mut |name, p| {
            if bad.is_none() && p.role.trainable() && p.grad.iter().any(|g| !g.is_finite()) {
                bad = Some(name);
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric {
                layer: name,
                detail: "non-finite gradient; step aborted".into(),
            });
        }
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let buffers = &mut self.buffers;
        let mut slot = 0;
        module.visit_mut("", &mut |_, p| {
            if !p.role.trainable() {
                return;
            }
            if buffers.len() <= slot {
                buffers.push(vec![F::zero(); p.len()]);
            }
            let buf = &mut buffers[slot];
            let decay = if p.role.decays() { wd } else { F::zero() };
            for ((v, &g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                *b = mu * *b + (g + decay * *v);
                *v -= lr * *b;
            }
            slot += 1;
        });
        Ok(())
    }
}
