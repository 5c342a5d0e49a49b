//! Adam with externally supplied learning rate.
//!
//! The optimizer owns its first/second moment buffers and step counter so the
//! whole state round-trips through checkpoints exactly. The learning rate is
//! passed per step; scheduling lives in the trainer.

use std::collections::HashMap;

use candle_core::{backprop::GradStore, DType, Tensor, Var};

use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        // β1 = 0.5 rather than 0.9: standard for adversarial training
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    params: AdamParams,
    step: usize,
    /// first and second moments, keyed like the vars they track
    moments: Vec<(String, Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: AdamParams, vars: &[(String, Var)]) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|(name, v)| {
                let z1 = Tensor::zeros(v.dims(), DType::F32, v.device())?;
                let z2 = Tensor::zeros(v.dims(), DType::F32, v.device())?;
                Ok((name.clone(), z1, z2))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            step: 0,
            moments,
        })
    }

    /// Applies one update to every var that has a gradient in `grads`.
    /// Vars are matched to moment slots positionally, so callers must pass
    /// the same var list the optimizer was created with.
    pub fn step(&mut self, lr: f64, vars: &[(String, Var)], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.params.beta1;
        let b2 = self.params.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for ((_, var), (_, m, v)) in vars.iter().zip(self.moments.iter_mut()) {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            // detach: moments must not accumulate the autograd graphs of
            // past steps, or memory grows without bound
            *m = ((&*m * b1)? + (grad * (1.0 - b1))?)?.detach();
            *v = ((&*v * b2)? + (grad.sqr()? * (1.0 - b2))?)?.detach();
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat * lr)?.div(&(v_hat.sqrt()? + self.params.eps)?)?;
            var.set(&var.sub(&update)?)?;
        }
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub(crate) fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.moments.len() * 2);
        for (name, m, v) in &self.moments {
            out.push((format!("{prefix}m.{name}"), m.clone()));
            out.push((format!("{prefix}v.{name}"), v.clone()));
        }
        out
    }

    pub(crate) fn from_stored(
        params: AdamParams,
        step: usize,
        vars: &[(String, Var)],
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
    ) -> Result<Self> {
        let moments = vars
            .iter()
            .map(|(name, var)| {
                let fetch = |kind: &str| -> Result<Tensor> {
                    let key = format!("{prefix}{kind}.{name}");
                    let t = tensors.get(&key).ok_or_else(|| {
                        crate::Error::CorruptCheckpoint(format!("missing optimizer slot `{key}`"))
                    })?;
                    if t.dims() != var.dims() {
                        return Err(crate::Error::CorruptCheckpoint(format!(
                            "optimizer slot `{key}` shape mismatch"
                        )));
                    }
                    Ok(t.clone())
                };
                Ok((name.clone(), fetch("m")?, fetch("v")?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            step,
            moments,
        })
    }
}
