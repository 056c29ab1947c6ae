//! Adam optimizer with bias correction.

use super::{real, ParamStore, Real};
use crate::error::{Error, Result};

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(lr: F, params: &ParamStore<F>) -> Self {
        AdamState {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            t: 0,
            m: (0..params.len())
                .map(|i| vec![F::zero(); params.get(i).numel()])
                .collect(),
            v: (0..params.len())
                .map(|i| vec![F::zero(); params.get(i).numel()])
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. `grads[i]` must hold the gradient of
    /// parameter `i`; a missing gradient is rejected.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Option<&[F]>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArg(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.is_none() {
                return Err(Error::InvalidArg(format!(
                    "adam: missing gradient for parameter '{}'",
                    params.name(i)
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        let one = F::one();
        for (i, g) in grads.iter().enumerate() {
            let g = g.unwrap();
            let p = params.get_mut(i);
            debug_assert_eq!(g.len(), p.numel());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (one - self.beta1) * gv;
                *vv = self.beta2 * *vv + (one - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
