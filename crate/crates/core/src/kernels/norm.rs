use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Infer,
}

/// Exponential moving averages of per-channel mean and (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let s = x.shape();
    for (name, t) in [
        ("gamma", gamma.numel()),
        ("beta", beta.numel()),
        ("running mean", stats.mean.len()),
        ("running var", stats.var.len()),
    ] {
        if t != s.c {
            return Err(Error::dim(
                "channels",
                format!("{name} has {t} entries for a {}-channel input", s.c),
            ));
        }
    }
    let plane = s.plane();
    let count = s.n * plane;
    let eps = T::from_f64(BN_EPSILON);
    let momentum = T::from_f64(BN_MOMENTUM);
    let data = x.data();
    let mut inv_std = vec![T::zero(); s.c];
    let mut xhat = vec![T::zero(); data.len()];
    for c in 0..s.c {
        let channel = || {
            (0..s.n).flat_map(move |n| {
                let off = (n * s.c + c) * plane;
                off..off + plane
            })
        };
        let (mean, var) = match mode {
            NormMode::Train => {
                let mean = channel().map(|i| data[i]).sum::<T>() / T::from_usize(count);
                let var = channel().map(|i| (data[i] - mean) * (data[i] - mean)).sum::<T>() / T::from_usize(count);
                stats.mean[c] = (T::one() - momentum) * stats.mean[c] + momentum * mean;
                stats.var[c] = (T::one() - momentum) * stats.var[c] + momentum * var;
                (mean, var)
            }
            NormMode::Infer => (stats.mean[c], stats.var[c]),
        };
        inv_std[c] = T::one() / (var + eps).sqrt();
        for i in channel() {
            xhat[i] = (data[i] - mean) * inv_std[c];
        }
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); data.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            for i in off..off + plane {
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
    }
    Ok((Tensor::from_vec(s, out)?, NormCache { xhat, inv_std, mode }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let plane = s.plane();
    let count = T::from_usize(s.n * plane);
    let g = gamma.data();
    let mut dx = vec![T::zero(); dout.len()];
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    for c in 0..s.c {
        let idx = || {
            (0..s.n).flat_map(move |n| {
                let off = (n * s.c + c) * plane;
                off..off + plane
            })
        };
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for i in idx() {
            sum_dy += dout[i];
            sum_dy_xhat += dout[i] * cache.xhat[i];
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = g[c] * cache.inv_std[c];
        match cache.mode {
            NormMode::Train => {
                for i in idx() {
                    dx[i] = scale * (dout[i] - sum_dy / count - cache.xhat[i] * sum_dy_xhat / count);
                }
            }
            NormMode::Infer => {
                for i in idx() {
                    dx[i] = scale * dout[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
