//! 2-D convolution and transposed convolution lowered to im2col + GEMM.
//!
//! Both operators share one `(image side, column side)` index map, so the
//! transposed convolution is the exact linear adjoint of the convolution
//! with the same geometry.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry and channel counts of a (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    /// Extra rows/cols appended to a transposed convolution's output so that
    /// odd kernels can upsample by exactly the stride. Ignored by `conv2d`.
    #[serde(default)]
    pub output_padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvParams {
    /// Square `k x k` kernel, stride 1, no padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvParams {
            kernel: (k, k),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            output_padding: (0, 0),
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self
    }

    pub fn output_padding(mut self, op: usize) -> Self {
        self.output_padding = (op, op);
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Padding `d*(k-1)/2` on each axis. Even kernels get no padding.
    pub fn same(mut self) -> Self {
        let half = |k: usize, d: usize| if k % 2 == 1 { d * (k - 1) / 2 } else { 0 };
        self.padding = (
            half(self.kernel.0, self.dilation.0),
            half(self.kernel.1, self.dilation.1),
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("kernel height", self.kernel.0),
            ("kernel width", self.kernel.1),
            ("stride height", self.stride.0),
            ("stride width", self.stride.1),
            ("dilation height", self.dilation.0),
            ("dilation width", self.dilation.1),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ];
        for (name, v) in checks {
            if v == 0 {
                return Err(Error::Geometry(format!("{name} must be at least 1")));
            }
        }
        let (op, st) = (self.output_padding, self.stride);
        if (op.0 > 0 && op.0 >= st.0) || (op.1 > 0 && op.1 >= st.1) {
            return Err(Error::Geometry(format!(
                "output padding {op:?} must be smaller than stride {st:?}"
            )));
        }
        Ok(())
    }

    /// Convolution output size `(h, w)` for an input of `(h, w)`.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_len(
                "height",
                h,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
            )?,
            conv_len(
                "width",
                w,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
            )?,
        ))
    }

    /// Transposed convolution output size `(h, w)` for an input of `(h, w)`.
    pub fn deconv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            deconv_len(
                "height",
                h,
                self.kernel.0,
                self.stride.0,
                self.padding.0,
                self.dilation.0,
                self.output_padding.0,
            )?,
            deconv_len(
                "width",
                w,
                self.kernel.1,
                self.stride.1,
                self.padding.1,
                self.dilation.1,
                self.output_padding.1,
            )?,
        ))
    }

    pub fn conv_weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn deconv_weight_shape(&self) -> Shape {
        Shape::new(self.in_channels, self.out_channels, self.kernel.0, self.kernel.1)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn weight_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels
    }
}

/// `floor((in + 2p - d(k-1) - 1) / s) + 1`.
pub fn conv_len(axis: &str, len: usize, k: usize, s: usize, p: usize, d: usize) -> Result<usize> {
    let padded = len + 2 * p;
    let extent = d * (k - 1) + 1;
    if extent > padded {
        return Err(Error::Geometry(format!(
            "effective kernel {extent} exceeds padded input {padded} along {axis}"
        )));
    }
    Ok((padded - extent) / s + 1)
}

/// `(in - 1)s - 2p + d(k-1) + 1 + output_padding`.
pub fn deconv_len(axis: &str, len: usize, k: usize, s: usize, p: usize, d: usize, op: usize) -> Result<usize> {
    let full = (len - 1) * s + d * (k - 1) + 1 + op;
    if full <= 2 * p {
        return Err(Error::Geometry(format!(
            "transposed convolution output along {axis} would be {}",
            full as isize - 2 * p as isize
        )));
    }
    Ok(full - 2 * p)
}

/// Index map between an image `(n, channels, h, w)` and a column matrix
/// `(channels*kh*kw) x (n*oh*ow)`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    dh: usize,
    dw: usize,
}

impl Geom {
    fn new(p: &ConvParams, n: usize, channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        Geom {
            n,
            channels,
            h,
            w,
            oh,
            ow,
            kh: p.kernel.0,
            kw: p.kernel.1,
            sh: p.stride.0,
            sw: p.stride.1,
            ph: p.padding.0,
            pw: p.padding.1,
            dh: p.dilation.0,
            dw: p.dilation.1,
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Output positions `o` in `[lo, hi)` whose source `o*s + off` lies in `[0, len)`.
    fn valid_range(out_len: usize, s: usize, off: isize, len: usize) -> (usize, usize) {
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
        let last = len as isize - 1 - off;
        let hi = if last < 0 {
            0
        } else {
            (last as usize / s + 1).min(out_len)
        };
        (lo.min(hi), hi)
    }

    /// Calls `f(col_offset, image_row, valid_cols, x_offset)` for every
    /// output row of every column-matrix row. `image_row` is `None` when the
    /// kernel tap falls in vertical padding.
    fn for_each_row(&self, mut f: impl FnMut(usize, Option<usize>, (usize, usize), isize)) {
        let plane = self.oh * self.ow;
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let off_y = (ki * self.dh) as isize - self.ph as isize;
                    let off_x = (kj * self.dw) as isize - self.pw as isize;
                    let xr = Self::valid_range(self.ow, self.sw, off_x, self.w);
                    for img in 0..self.n {
                        for oy in 0..self.oh {
                            let iy = (oy * self.sh) as isize + off_y;
                            let col0 = row * self.cols() + img * plane + oy * self.ow;
                            if iy < 0 || iy >= self.h as isize {
                                f(col0, None, (0, 0), off_x);
                            } else {
                                let src = ((img * self.channels + c) * self.h + iy as usize) * self.w;
                                f(col0, Some(src), xr, off_x);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (ow, sw) = (self.ow, self.sw);
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_row(|col0, src, (lo, hi), off_x| {
            let Some(src) = src else { return };
            if lo >= hi {
                return;
            }
            let dst = &mut cols[col0..col0 + ow];
            if sw == 1 {
                let s0 = (src as isize + lo as isize + off_x) as usize;
                dst[lo..hi].copy_from_slice(&image[s0..s0 + (hi - lo)]);
            } else {
                for (ox, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                    *d = image[(src as isize + (ox * sw) as isize + off_x) as usize];
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (ow, sw) = (self.ow, self.sw);
        self.for_each_row(|col0, src, (lo, hi), off_x| {
            let Some(src) = src else { return };
            let s = &cols[col0..col0 + ow];
            for (ox, &v) in s.iter().enumerate().take(hi).skip(lo) {
                image[(src as isize + (ox * sw) as isize + off_x) as usize] += v;
            }
        });
    }
}

/// `(n, c, p)` -> `(c, n*p)`.
fn to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for img in 0..n {
        for ch in 0..c {
            let src = &x[(img * c + ch) * p..(img * c + ch + 1) * p];
            out[ch * n * p + img * p..ch * n * p + (img + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `(c, n*p)` -> `(n, c, p)`.
fn to_batch_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    if n == 1 {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for img in 0..n {
            let src = &x[ch * n * p + img * p..ch * n * p + (img + 1) * p];
            out[(img * c + ch) * p..(img * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, c: usize, p: usize) {
    for img in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            out[(img * c + ch) * p..(img * c + ch + 1) * p]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
}

fn bias_grad<T: Scalar>(dout: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for img in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            *acc += dout[(img * c + ch) * p..(img * c + ch + 1) * p]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    db
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, p: &ConvParams) -> Result<()> {
    match (p.bias, bias) {
        (true, Some(b)) if b.numel() == p.out_channels => Ok(()),
        (true, Some(b)) => Err(Error::dim(
            "bias",
            format!("expected {} values, got {}", p.out_channels, b.numel()),
        )),
        (true, None) => Err(Error::Contract("convolution declares a bias but none was given".into())),
        (false, Some(_)) => Err(Error::Contract("bias supplied to a bias-free convolution".into())),
        (false, None) => Ok(()),
    }
}

fn check_weight(actual: Shape, expected: Shape) -> Result<()> {
    for (axis, a, e) in [
        ("weight axis 0", actual.n, expected.n),
        ("weight axis 1", actual.c, expected.c),
        ("kernel height", actual.h, expected.h),
        ("kernel width", actual.w, expected.w),
    ] {
        if a != e {
            return Err(Error::dim(axis, format!("expected {e}, got {a}")));
        }
    }
    Ok(())
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, p: &ConvParams) -> Result<Geom> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.in_channels {
        return Err(Error::dim(
            "input channels",
            format!("input has {} channels, convolution expects {}", s.c, p.in_channels),
        ));
    }
    let (oh, ow) = p.conv_output(s.h, s.w)?;
    Ok(Geom::new(p, s.n, s.c, s.h, s.w, oh, ow))
}

/// Cross-correlation of `x` `(n, cin, h, w)` with `weights` `(cout, cin, kh, kw)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, p)?;
    check_weight(weights.shape(), p.conv_weight_shape())?;
    check_bias(bias, p)?;
    let (k, cols_n, plane) = (g.rows(), g.cols(), g.oh * g.ow);
    let mut cols = vec![T::zero(); k * cols_n];
    g.im2col(x.data(), &mut cols);
    let mut y = vec![T::zero(); p.out_channels * cols_n];
    T::gemm(
        p.out_channels,
        k,
        cols_n,
        T::one(),
        weights.data(),
        (k as isize, 1),
        &cols,
        (cols_n as isize, 1),
        T::zero(),
        &mut y,
        (cols_n as isize, 1),
    );
    let mut out = to_batch_major(&y, g.n, p.out_channels, plane);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.n, p.out_channels, plane);
    }
    Tensor::from_vec(Shape::new(g.n, p.out_channels, g.oh, g.ow), out)
}

/// Gradients w.r.t. input (if requested), weights and bias (if present).
pub type ConvGrads<T> = (Option<Vec<T>>, Vec<T>, Option<Vec<T>>);

/// Gradients of [`conv2d`]: `(dx, dweights, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    p: &ConvParams,
    dout: &[T],
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geom(x, p)?;
    let (k, cols_n, plane) = (g.rows(), g.cols(), g.oh * g.ow);
    let dy = to_channel_major(dout, g.n, p.out_channels, plane);
    let mut cols = vec![T::zero(); k * cols_n];
    g.im2col(x.data(), &mut cols);
    let mut dw = vec![T::zero(); p.out_channels * k];
    T::gemm(
        p.out_channels,
        cols_n,
        k,
        T::one(),
        &dy,
        (cols_n as isize, 1),
        &cols,
        (1, cols_n as isize),
        T::zero(),
        &mut dw,
        (k as isize, 1),
    );
    let dx = need_dx.then(|| {
        T::gemm(
            k,
            p.out_channels,
            cols_n,
            T::one(),
            weights.data(),
            (1, k as isize),
            &dy,
            (cols_n as isize, 1),
            T::zero(),
            &mut cols,
            (cols_n as isize, 1),
        );
        let mut dx = vec![T::zero(); x.numel()];
        g.col2im(&cols, &mut dx);
        dx
    });
    let db = p.bias.then(|| bias_grad(dout, g.n, p.out_channels, plane));
    Ok((dx, dw, db))
}

fn deconv_geom<T: Scalar>(x: &Tensor<T>, p: &ConvParams) -> Result<Geom> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.in_channels {
        return Err(Error::dim(
            "input channels",
            format!(
                "input has {} channels, transposed convolution expects {}",
                s.c, p.in_channels
            ),
        ));
    }
    let (oh, ow) = p.deconv_output(s.h, s.w)?;
    // The image side is the (larger) output; the column side is the input.
    let g = Geom::new(p, s.n, p.out_channels, oh, ow, s.h, s.w);
    // Guard the adjoint relationship: the forward convolution over the output
    // must land back on the input size.
    let back = p.conv_output(oh, ow)?;
    if back != (s.h, s.w) {
        return Err(Error::Geometry(format!(
            "transposed convolution output {oh}x{ow} does not map back to {}x{}",
            s.h, s.w
        )));
    }
    Ok(g)
}

/// Transposed convolution of `x` `(n, cin, h, w)` with `weights` `(cin, cout, kh, kw)`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: &ConvParams,
) -> Result<Tensor<T>> {
    let g = deconv_geom(x, p)?;
    check_weight(weights.shape(), p.deconv_weight_shape())?;
    check_bias(bias, p)?;
    let (k, cols_n, in_plane) = (g.rows(), g.cols(), g.oh * g.ow);
    let xm = to_channel_major(x.data(), g.n, p.in_channels, in_plane);
    let mut cols = vec![T::zero(); k * cols_n];
    T::gemm(
        k,
        p.in_channels,
        cols_n,
        T::one(),
        weights.data(),
        (1, k as isize),
        &xm,
        (cols_n as isize, 1),
        T::zero(),
        &mut cols,
        (cols_n as isize, 1),
    );
    let mut out = vec![T::zero(); g.n * p.out_channels * g.h * g.w];
    g.col2im(&cols, &mut out);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), g.n, p.out_channels, g.h * g.w);
    }
    Tensor::from_vec(Shape::new(g.n, p.out_channels, g.h, g.w), out)
}

/// Gradients of [`conv_transpose2d`]: `(dx, dweights, dbias)`.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    p: &ConvParams,
    dout: &[T],
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = deconv_geom(x, p)?;
    let (k, cols_n, in_plane) = (g.rows(), g.cols(), g.oh * g.ow);
    let mut cols = vec![T::zero(); k * cols_n];
    g.im2col(dout, &mut cols);
    let xm = to_channel_major(x.data(), g.n, p.in_channels, in_plane);
    let mut dw = vec![T::zero(); p.in_channels * k];
    T::gemm(
        p.in_channels,
        cols_n,
        k,
        T::one(),
        &xm,
        (cols_n as isize, 1),
        &cols,
        (1, cols_n as isize),
        T::zero(),
        &mut dw,
        (k as isize, 1),
    );
    let dx = need_dx.then(|| {
        let mut dxm = vec![T::zero(); p.in_channels * cols_n];
        T::gemm(
            p.in_channels,
            k,
            cols_n,
            T::one(),
            weights.data(),
            (k as isize, 1),
            &cols,
            (cols_n as isize, 1),
            T::zero(),
            &mut dxm,
            (cols_n as isize, 1),
        );
        to_batch_major(&dxm, g.n, p.in_channels, in_plane)
    });
    let db = p.bias.then(|| bias_grad(dout, g.n, p.out_channels, g.h * g.w));
    Ok((dx, dw, db))
}
