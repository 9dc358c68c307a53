use crate::autodiff::record_op;
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Learnable affine terms plus running statistics of one BatchNorm layer.
/// All four tensors have shape `(1, c, 1, 1)`.
#[derive(Clone, Debug)]
pub struct BatchNormState<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNormState {
            gamma: Tensor::ones(s),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::ones(s),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

/// Per-channel normalization followed by `γ·x̂ + β`.
///
/// In [`Mode::Train`] the batch statistics over `(n, h, w)` are used and
/// the running statistics move towards them by `momentum` (the running
/// variance takes the unbiased estimate). In [`Mode::Eval`] the running
/// statistics are used and `state` is left untouched.
pub fn batchnorm<T: Real>(x: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    let s = x.shape();
    let c = state.channels();
    if s.c != c {
        return Err(Error::shape(format!("batchnorm: {} channels, state has {c}", s.c)));
    }
    let count = s.n * s.plane();
    let plane = s.plane();
    let xd = x.data();
    let channel = move |ch: usize| (0..s.n).flat_map(move |n| (n * s.c + ch) * plane..(n * s.c + ch + 1) * plane);

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape(format!("batchnorm: {count} value per channel in training mode")));
            }
            let stats: Vec<(f64, f64)> = (0..c)
                .map(|ch| {
                    let m = channel(ch).map(|i| xd[i].f64()).sum::<f64>() / count as f64;
                    let v = channel(ch).map(|i| (xd[i].f64() - m).powi(2)).sum::<f64>() / count as f64;
                    (m, v)
                })
                .collect();
            let unbias = count as f64 / (count - 1) as f64;
            let mom = state.momentum;
            let rm: Vec<f64> = state.running_mean.data().iter().zip(&stats).map(|(r, (m, _))| (1.0 - mom) * r.f64() + mom * m).collect();
            let rv: Vec<f64> = state.running_var.data().iter().zip(&stats).map(|(r, (_, v))| (1.0 - mom) * r.f64() + mom * v * unbias).collect();
            state.running_mean = Tensor::from_f64(Shape::new(1, c, 1, 1), &rm)?;
            state.running_var = Tensor::from_f64(Shape::new(1, c, 1, 1), &rv)?;
            stats.into_iter().unzip()
        }
        Mode::Eval => (state.running_mean.to_f64(), state.running_var.to_f64()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
    let gamma = state.gamma.to_f64();
    let beta = state.beta.to_f64();

    let mut xhat = vec![0.0f64; s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    for ch in 0..c {
        for i in channel(ch) {
            xhat[i] = (xd[i].f64() - mean[ch]) * inv_std[ch];
            out[i] = T::of(gamma[ch] * xhat[i] + beta[ch]);
        }
    }

    Ok(record_op(s, out, &[x, &state.gamma, &state.beta], move |g, need| {
        let mut dx = need[0].then(|| vec![T::zero(); s.numel()]);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            let sum_g: f64 = channel(ch).map(|i| g[i].f64()).sum();
            let sum_gx: f64 = channel(ch).map(|i| g[i].f64() * xhat[i]).sum();
            dgamma[ch] = T::of(sum_gx);
            dbeta[ch] = T::of(sum_g);
            if let Some(dx) = dx.as_mut() {
                let k = gamma[ch] * inv_std[ch];
                match mode {
                    Mode::Train => {
                        let (mg, mgx) = (sum_g / count as f64, sum_gx / count as f64);
                        for i in channel(ch) {
                            dx[i] = T::of(k * (g[i].f64() - mg - xhat[i] * mgx));
                        }
                    }
                    Mode::Eval => {
                        for i in channel(ch) {
                            dx[i] = T::of(k * g[i].f64());
                        }
                    }
                }
            }
        }
        vec![dx, need[1].then_some(dgamma), need[2].then_some(dbeta)]
    }))
}
