#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdecoder::kernels::ConvParams;
use segdecoder::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values whose pairwise gaps and distance from zero all exceed `gap`, so
/// that ReLU kinks and max-pool ties stay out of reach of a finite-difference
/// probe.
pub fn separated(shape: Shape, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.numel();
    let mut levels: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * 3.0 * gap).collect();
    // fisher-yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        levels.swap(i, j);
    }
    let mut it = levels.into_iter();
    Tensor::from_fn(shape, |_| it.next().unwrap())
}

/// Direct summation of a (dilated, strided, padded) cross-correlation.
pub fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, p: &ConvParams) -> Option<Tensor<f64>> {
    let s = x.shape();
    let (kh, kw) = p.kernel;
    let (sh, sw) = p.stride;
    let (ph, pw) = p.padding;
    let (dh, dw) = p.dilation;
    let ext_h = dh * (kh - 1) + 1;
    let ext_w = dw * (kw - 1) + 1;
    if ext_h > s.h + 2 * ph || ext_w > s.w + 2 * pw {
        return None;
    }
    let oh = (s.h + 2 * ph - ext_h) / sh + 1;
    let ow = (s.w + 2 * pw - ext_w) / sw + 1;
    let out_shape = Shape::new(s.n, p.out_channels, oh, ow);
    Some(Tensor::from_fn(out_shape, |[n, co, oy, ox]| {
        let mut acc = b.map_or(0.0, |b| b[co]);
        for ci in 0..p.in_channels {
            for i in 0..kh {
                for j in 0..kw {
                    let iy = (oy * sh + i * dh) as isize - ph as isize;
                    let ix = (ox * sw + j * dw) as isize - pw as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += w.at(co, ci, i, j) * x.at(n, ci, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    }))
}
