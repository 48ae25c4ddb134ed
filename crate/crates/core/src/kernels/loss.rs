use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean pixelwise cross-entropy of `logits` `(n, k, h, w)` against `labels`
/// laid out `(n, h, w)`. Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> Result<(T, Vec<T>)> {
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(Error::dim(
            "labels",
            format!("{} labels for logits of shape {s}", labels.len()),
        ));
    }
    let data = logits.data();
    let mut probs = vec![T::zero(); data.len()];
    let mut total = 0.0f64;
    for n in 0..s.n {
        for p in 0..plane {
            let label = labels[n * plane + p] as usize;
            if label >= s.c {
                return Err(Error::Label {
                    value: label as u32,
                    row: p / s.w,
                    col: p % s.w,
                    num_classes: s.c,
                });
            }
            let at = |c: usize| (n * s.c + c) * plane + p;
            let max = (0..s.c).map(|c| data[at(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (data[at(c)] - max).exp();
                probs[at(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                probs[at(c)] /= z;
            }
            total += (z.ln() - (data[at(label)] - max)).as_f64();
        }
    }
    Ok((T::from_f64(total / (s.n * plane) as f64), probs))
}

/// `(softmax - onehot) * scale / pixels`.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &[T],
    labels: &[u8],
    n: usize,
    k: usize,
    plane: usize,
    scale: T,
) -> Vec<T> {
    let norm = scale / T::from_usize(n * plane);
    let mut g: Vec<T> = probs.iter().map(|&p| p * norm).collect();
    for img in 0..n {
        for p in 0..plane {
            let label = labels[img * plane + p] as usize;
            g[(img * k + label) * plane + p] -= norm;
        }
    }
    g
}
