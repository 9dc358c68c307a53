use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moments are kept in 64-bit regardless of the parameter type.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Real>(lr: f64, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam { lr, beta1: BETA1, beta2: BETA2, eps: ADAM_EPS, t: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update of every parameter.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!("{} parameters, {} gradients, optimizer tracks {}", params.len(), grads.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(Error::shape(format!("parameter {i}: {} vs gradient {}", p.shape(), g.shape())));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powf(self.t as f64);
        let bc2 = 1.0 - self.beta2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(j, (&theta, &gj))| {
                    let gj = gj.f64();
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                    let (mh, vh) = (m[j] / bc1, v[j] / bc2);
                    T::of(theta.f64() - self.lr * mh / (vh.sqrt() + self.eps))
                })
                .collect();
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}
