//! Dense channel-major tensors and the differentiable primitives the feature
//! extractor is built from: circular convolution, rectifier, 2x2 pooling and
//! bilinear upsampling, each with its analytic backward pass.
//!
//! Convolution uses cross-correlation orientation (no kernel flip) and wraps
//! around both spatial axes, so every primitive except pooling commutes
//! exactly with cyclic shifts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, sum_squares, Scalar};

/// `channels x height x width` array stored row-major per channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, S::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: S) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "data length {} does not match shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Tensor {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Pixels per channel.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[S] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [S] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> S {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: S) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape(),
                self.shape()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn dot(&self, other: &Self) -> S {
        dot(&self.data, &other.data)
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> S {
        sum_squares(&self.data).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: S, hi: S) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// Moves pixel `(y, x)` to `(y + dy, x + dx)` with wrap-around.
    pub fn cyclic_shift(&self, dy: isize, dx: isize) -> Self {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Tensor::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                let ty = (y as isize + dy).rem_euclid(h) as usize;
                for x in 0..self.width {
                    let tx = (x as isize + dx).rem_euclid(w) as usize;
                    out.set(c, ty, tx, self.get(c, y, x));
                }
            }
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

/// Convolution filter bank, weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterKernels<S> {
    out_channels: usize,
    in_channels: usize,
    kernel_height: usize,
    kernel_width: usize,
    weights: Vec<S>,
    bias: Vec<S>,
}

impl<S: Scalar> FilterKernels<S> {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_height: usize,
        kernel_width: usize,
        weights: Vec<S>,
        bias: Vec<S>,
    ) -> Result<Self> {
        if kernel_height % 2 == 0 || kernel_width % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel dims must be odd, got {kernel_height}x{kernel_width}"
            )));
        }
        if weights.len() != out_channels * in_channels * kernel_height * kernel_width {
            return Err(Error::shape(format!(
                "weight count {} does not match {}x{}x{}x{}",
                weights.len(),
                out_channels,
                in_channels,
                kernel_height,
                kernel_width
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::shape(format!(
                "bias count {} does not match {out_channels} output channels",
                bias.len()
            )));
        }
        Ok(FilterKernels {
            out_channels,
            in_channels,
            kernel_height,
            kernel_width,
            weights,
            bias,
        })
    }

    /// Single-tap identity mapping, mostly useful in tests.
    pub fn identity(channels: usize) -> Self {
        let mut weights = vec![S::zero(); channels * channels];
        for c in 0..channels {
            weights[c * channels + c] = S::one();
        }
        FilterKernels {
            out_channels: channels,
            in_channels: channels,
            kernel_height: 1,
            kernel_width: 1,
            weights,
            bias: vec![S::zero(); channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_height(&self) -> usize {
        self.kernel_height
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel_width
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    /// Weights of one output filter, `[in][ky][kx]`.
    pub fn filter(&self, out: usize) -> &[S] {
        let n = self.in_channels * self.kernel_height * self.kernel_width;
        &self.weights[out * n..(out + 1) * n]
    }

    #[inline]
    fn weight(&self, o: usize, c: usize, ky: usize, kx: usize) -> S {
        self.weights
            [((o * self.in_channels + c) * self.kernel_height + ky) * self.kernel_width + kx]
    }
}

/// `dst[y][x] += weight * src[(y + dy) % h][(x + dx) % w]` for one row.
#[inline]
fn accumulate_row<S: Scalar>(dst: &mut [S], src_row: &[S], weight: S, dx: usize) {
    let w = dst.len();
    let split = w - dx;
    let (head, tail) = dst.split_at_mut(split);
    for (d, s) in head.iter_mut().zip(&src_row[dx..]) {
        *d += weight * *s;
    }
    for (d, s) in tail.iter_mut().zip(&src_row[..dx]) {
        *d += weight * *s;
    }
}

fn check_conv_input<S: Scalar>(x: &Tensor<S>, k: &FilterKernels<S>) -> Result<()> {
    if x.channels() != k.in_channels {
        return Err(Error::shape(format!(
            "convolution expects {} input channels, got {}",
            k.in_channels,
            x.channels()
        )));
    }
    if x.height() < k.kernel_height || x.width() < k.kernel_width {
        return Err(Error::shape(format!(
            "input {}x{} smaller than kernel {}x{}",
            x.height(),
            x.width(),
            k.kernel_height,
            k.kernel_width
        )));
    }
    Ok(())
}

/// Circular cross-correlation; output has the input's spatial size.
pub fn conv2d_circular<S: Scalar>(x: &Tensor<S>, k: &FilterKernels<S>) -> Result<Tensor<S>> {
    check_conv_input(x, k)?;
    let (h, w) = (x.height(), x.width());
    let (ph, pw) = (k.kernel_height / 2, k.kernel_width / 2);
    let mut out = Tensor::zeros(k.out_channels, h, w);
    out.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(k.bias[o]);
            for y in 0..h {
                let drow = &mut plane[y * w..(y + 1) * w];
                for c in 0..k.in_channels {
                    let src = x.plane(c);
                    for ky in 0..k.kernel_height {
                        let sy = (y + ky + h - ph) % h;
                        let srow = &src[sy * w..(sy + 1) * w];
                        for kx in 0..k.kernel_width {
                            let dx = (kx + w - pw) % w;
                            accumulate_row(drow, srow, k.weight(o, c, ky, kx), dx);
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of a loss with respect to the convolution input, given the
/// gradient with respect to its output. Exact adjoint of the linear part of
/// [`conv2d_circular`].
pub fn conv2d_circular_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &FilterKernels<S>,
    upstream: &Tensor<S>,
) -> Result<Tensor<S>> {
    check_conv_input(x, k)?;
    let (h, w) = (x.height(), x.width());
    if upstream.shape() != (k.out_channels, h, w) {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match convolution output {:?}",
            upstream.shape(),
            (k.out_channels, h, w)
        )));
    }
    let (ph, pw) = (k.kernel_height / 2, k.kernel_width / 2);
    let mut grad = Tensor::zeros(k.in_channels, h, w);
    grad.data
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(c, plane)| {
            for y in 0..h {
                let drow = &mut plane[y * w..(y + 1) * w];
                for o in 0..k.out_channels {
                    let src = upstream.plane(o);
                    for ky in 0..k.kernel_height {
                        let sy = (y + ph + h - ky) % h;
                        let srow = &src[sy * w..(sy + 1) * w];
                        for kx in 0..k.kernel_width {
                            let dx = (pw + w - kx) % w;
                            accumulate_row(drow, srow, k.weight(o, c, ky, kx), dx);
                        }
                    }
                }
            }
        });
    Ok(grad)
}

pub fn rectify<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Passes `upstream` where the rectifier input (or, equivalently, its
/// output) is strictly positive. The subgradient at zero is zero.
pub fn rectify_backward<S: Scalar>(x: &Tensor<S>, upstream: &Tensor<S>) -> Result<Tensor<S>> {
    x.expect_shape(upstream, "rectifier backward")?;
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(x.channels, x.height, x.width, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Average,
    Maximum,
}

fn check_even<S: Scalar>(x: &Tensor<S>) -> Result<()> {
    if x.height() % 2 != 0 || x.width() % 2 != 0 || x.height() == 0 || x.width() == 0 {
        return Err(Error::shape(format!(
            "pooling needs even spatial dims, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    Ok(())
}

/// Reduces non-overlapping 2x2 windows.
pub fn pool2<S: Scalar>(x: &Tensor<S>, mode: PoolMode) -> Result<Tensor<S>> {
    check_even(x)?;
    let (oh, ow) = (x.height() / 2, x.width() / 2);
    let quarter = S::lit(0.25);
    Ok(Tensor::from_fn(x.channels(), oh, ow, |c, y, xx| {
        let a = x.get(c, 2 * y, 2 * xx);
        let b = x.get(c, 2 * y, 2 * xx + 1);
        let d = x.get(c, 2 * y + 1, 2 * xx);
        let e = x.get(c, 2 * y + 1, 2 * xx + 1);
        match mode {
            PoolMode::Average => (a + b + d + e) * quarter,
            PoolMode::Maximum => a.max(b).max(d).max(e),
        }
    }))
}

pub fn pool2_backward<S: Scalar>(
    x: &Tensor<S>,
    mode: PoolMode,
    upstream: &Tensor<S>,
) -> Result<Tensor<S>> {
    check_even(x)?;
    let (oh, ow) = (x.height() / 2, x.width() / 2);
    if upstream.shape() != (x.channels(), oh, ow) {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match pooled shape {:?}",
            upstream.shape(),
            (x.channels(), oh, ow)
        )));
    }
    let mut grad = Tensor::zeros(x.channels(), x.height(), x.width());
    let quarter = S::lit(0.25);
    for c in 0..x.channels() {
        for y in 0..oh {
            for xx in 0..ow {
                let g = upstream.get(c, y, xx);
                let window = [
                    (2 * y, 2 * xx),
                    (2 * y, 2 * xx + 1),
                    (2 * y + 1, 2 * xx),
                    (2 * y + 1, 2 * xx + 1),
                ];
                match mode {
                    PoolMode::Average => {
                        for (py, px) in window {
                            grad.set(c, py, px, g * quarter);
                        }
                    }
                    PoolMode::Maximum => {
                        // first maximum in window order takes the gradient
                        let mut best = window[0];
                        for &(py, px) in &window[1..] {
                            if x.get(c, py, px) > x.get(c, best.0, best.1) {
                                best = (py, px);
                            }
                        }
                        grad.set(c, best.0, best.1, g);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Doubles both spatial dims with bilinear interpolation on half-pixel
/// centres. Borders wrap, matching the tiling behaviour of the network.
pub fn upsample_bilinear2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = x.shape();
    let (near, far) = (S::lit(0.75), S::lit(0.25));
    // horizontal pass
    let mut wide = Tensor::zeros(c, h, 2 * w);
    for ch in 0..c {
        for y in 0..h {
            for j in 0..w {
                let v = x.get(ch, y, j);
                let left = x.get(ch, y, (j + w - 1) % w);
                let right = x.get(ch, y, (j + 1) % w);
                wide.set(ch, y, 2 * j, near * v + far * left);
                wide.set(ch, y, 2 * j + 1, near * v + far * right);
            }
        }
    }
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for i in 0..h {
            let up = (i + h - 1) % h;
            let down = (i + 1) % h;
            for xx in 0..2 * w {
                let v = wide.get(ch, i, xx);
                out.set(ch, 2 * i, xx, near * v + far * wide.get(ch, up, xx));
                out.set(ch, 2 * i + 1, xx, near * v + far * wide.get(ch, down, xx));
            }
        }
    }
    out
}

/// Central finite differences of a scalar function, one element at a time.
pub fn finite_diff_gradient<S: Scalar>(
    mut f: impl FnMut(&Tensor<S>) -> S,
    x: &Tensor<S>,
    eps: S,
) -> Tensor<S> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.channels(), x.height(), x.width());
    let two_eps = eps + eps;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (plus - minus) / two_eps;
    }
    grad
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the comparison used by gradient checks.
pub fn relative_error<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, floor: S) -> S {
    let mut diff = S::zero();
    for (x, y) in a.data.iter().zip(&b.data) {
        diff += (*x - *y) * (*x - *y);
    }
    diff.sqrt() / a.norm().max(b.norm()).max(floor)
}
