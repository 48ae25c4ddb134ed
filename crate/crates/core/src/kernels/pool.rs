use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PoolParams {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl Default for PoolParams {
    fn default() -> Self {
        PoolParams {
            window: (2, 2),
            stride: (2, 2),
        }
    }
}

impl PoolParams {
    pub fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (wh, ww) = self.window;
        if wh == 0 || ww == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Geometry("pool window and stride must be positive".into()));
        }
        if wh > h || ww > w {
            return Err(Error::Geometry(format!("pool window {wh}x{ww} exceeds input {h}x{w}")));
        }
        Ok(((h - wh) / self.stride.0 + 1, (w - ww) / self.stride.1 + 1))
    }
}

/// Max pooling. Returns the output and, per output element, the flat input
/// index it was taken from. Ties resolve to the first index in row-major
/// scan order of the window.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, p: &PoolParams) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    let (oh, ow) = p.output(s.h, s.w)?;
    let mut out = Vec::with_capacity(s.n * s.c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    let data = x.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * p.stride.0 * s.w + ox * p.stride.1;
                for dy in 0..p.window.0 {
                    let row = base + (oy * p.stride.0 + dy) * s.w + ox * p.stride.1;
                    for i in row..row + p.window.1 {
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(input_len: usize, argmax: &[usize], dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dout) {
        dx[i] += g;
    }
    dx
}
