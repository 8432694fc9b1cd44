//! Convolution kernels: dense reference, block-wise, and FFT fast paths.
//!
//! All paths compute the cross-correlation
//!
//! ```text
//! y(w2, h2, c2) = sum_{w1, h1, c0} x(w2*stride - pad + w1, h2*stride - pad + h1, c0) * k(w1, h1, c0, c2)
//! ```
//!
//! with out-of-range input sites reading as zero. With first-row circulant
//! blocks, the channel mixing of block `(j, i)` is the circular convolution of
//! input fiber `j` with base row `(j, i)`, so it runs as a product of spectra.
//! The weight and input gradients are circular correlations, obtained by
//! transforming circularly reversed fibers.

use num_complex::Complex64;

use crate::circulant::{reverse_fiber, CirculantBaseTensor, PartitionConfig};
use crate::error::{Error, Result};
use crate::spectral::{forward_real_half, half_len, inverse_real_half_unnormalized, record_flops};
use crate::tensor::{Tensor3, Tensor4};

/// Spatial zero-padding and stride of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub pad_w: usize,
    pub pad_h: usize,
    pub stride: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self::valid()
    }
}

impl ConvGeometry {
    pub fn new(pad_w: usize, pad_h: usize, stride: usize) -> Self {
        Self {
            pad_w,
            pad_h,
            stride,
        }
    }

    /// No padding, stride 1.
    pub fn valid() -> Self {
        Self::new(0, 0, 1)
    }

    /// Symmetric padding `pad`, stride 1.
    pub fn padded(pad: usize) -> Self {
        Self::new(pad, pad, 1)
    }

    /// Output spatial dims for input `(w0, h0)` and kernel `(w1, h1)`.
    pub fn output_dims(&self, input: (usize, usize), kernel: (usize, usize)) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let span_w = input.0 + 2 * self.pad_w;
        let span_h = input.1 + 2 * self.pad_h;
        if kernel.0 == 0 || kernel.1 == 0 || kernel.0 > span_w || kernel.1 > span_h {
            return Err(Error::shape(format!(
                "kernel {kernel:?} does not fit padded input {:?}",
                (span_w, span_h)
            )));
        }
        Ok((
            (span_w - kernel.0) / self.stride + 1,
            (span_h - kernel.1) / self.stride + 1,
        ))
    }

    /// Input site read by output `(w2, h2)` at tap `(w1, h1)`, if inside the image.
    #[inline]
    fn source(&self, out: (usize, usize), tap: (usize, usize), input: (usize, usize)) -> Option<(usize, usize)> {
        let x = (out.0 * self.stride + tap.0).checked_sub(self.pad_w)?;
        let y = (out.1 * self.stride + tap.1).checked_sub(self.pad_h)?;
        (x < input.0 && y < input.1).then_some((x, y))
    }

    fn require_unit_stride(&self) -> Result<()> {
        if self.stride != 1 {
            return Err(Error::UnsupportedGeometry(format!(
                "FFT path requires stride 1 (got {}); use conv_naive",
                self.stride
            )));
        }
        Ok(())
    }
}

/// Dense reference convolution; the ground truth for every fast path.
pub fn conv_naive(x: &Tensor3, w: &Tensor4, g: ConvGeometry) -> Result<Tensor3> {
    let (w0, h0, c0) = x.dims();
    let (kw, kh, kc0, kc2) = w.dims();
    if c0 != kc0 {
        return Err(Error::shape(format!(
            "input has {c0} channels, kernel expects {kc0}"
        )));
    }
    let (w2, h2) = g.output_dims((w0, h0), (kw, kh))?;
    let mut y = Tensor3::zeros(w2, h2, kc2);
    for ow in 0..w2 {
        for oh in 0..h2 {
            let mut acc = vec![0.0; kc2];
            for tw in 0..kw {
                for th in 0..kh {
                    let Some((ix, iy)) = g.source((ow, oh), (tw, th), (w0, h0)) else {
                        continue;
                    };
                    let pixel = x.pixel(ix, iy);
                    let tap = w.tap(tw, th);
                    for (ci, &xv) in pixel.iter().enumerate() {
                        let row = &tap[ci * kc2..(ci + 1) * kc2];
                        for (a, &k) in acc.iter_mut().zip(row) {
                            *a += xv * k;
                        }
                    }
                }
            }
            y.pixel_mut(ow, oh).copy_from_slice(&acc);
        }
    }
    Ok(y)
}

/// Kernel gradient of [`conv_naive`] for upstream gradient `grad_y`.
pub fn conv_naive_backward_weight(
    x: &Tensor3,
    grad_y: &Tensor3,
    kernel: (usize, usize),
    g: ConvGeometry,
) -> Result<Tensor4> {
    let (w0, h0, c0) = x.dims();
    let (w2, h2) = g.output_dims((w0, h0), kernel)?;
    if (grad_y.width(), grad_y.height()) != (w2, h2) {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match output dims {:?}",
            grad_y.dims(),
            (w2, h2)
        )));
    }
    let c2 = grad_y.channels();
    let mut dw = Tensor4::zeros((kernel.0, kernel.1, c0, c2));
    for tw in 0..kernel.0 {
        for th in 0..kernel.1 {
            let start = dw.offset(tw, th, 0, 0);
            for ow in 0..w2 {
                for oh in 0..h2 {
                    let Some((ix, iy)) = g.source((ow, oh), (tw, th), (w0, h0)) else {
                        continue;
                    };
                    let gy = grad_y.pixel(ow, oh);
                    let xs = x.pixel(ix, iy);
                    let tap = &mut dw.as_mut_slice()[start..start + c0 * c2];
                    for (ci, &xv) in xs.iter().enumerate() {
                        for (d, &gv) in tap[ci * c2..(ci + 1) * c2].iter_mut().zip(gy) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(dw)
}

/// Input gradient of [`conv_naive`] (transposed convolution).
pub fn conv_naive_backward_input(
    grad_y: &Tensor3,
    w: &Tensor4,
    input: (usize, usize),
    g: ConvGeometry,
) -> Result<Tensor3> {
    let (kw, kh, c0, c2) = w.dims();
    let (w2, h2) = g.output_dims(input, (kw, kh))?;
    if grad_y.dims() != (w2, h2, c2) {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match {:?}",
            grad_y.dims(),
            (w2, h2, c2)
        )));
    }
    let mut dx = Tensor3::zeros(input.0, input.1, c0);
    for ow in 0..w2 {
        for oh in 0..h2 {
            let gy = grad_y.pixel(ow, oh);
            for tw in 0..kw {
                for th in 0..kh {
                    let Some((ix, iy)) = g.source((ow, oh), (tw, th), input) else {
                        continue;
                    };
                    let tap = w.tap(tw, th);
                    let px = dx.pixel_mut(ix, iy);
                    for (ci, d) in px.iter_mut().enumerate() {
                        let row = &tap[ci * c2..(ci + 1) * c2];
                        *d += row.iter().zip(gy).map(|(k, gv)| k * gv).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn check_input_channels(x: &Tensor3, cfg: PartitionConfig) -> Result<()> {
    if x.channels() != cfg.c0() && x.channels() != cfg.padded_c0() {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            x.channels(),
            cfg.c0()
        )));
    }
    Ok(())
}

/// Block-form convolution: for every output block `i`, sums the products of
/// length-`N` input fibers with the `N x N` kernel slices `(j, i)`.
///
/// `w` is any dense kernel carrying either logical or padded channel counts;
/// the result equals [`conv_naive`] on the same kernel, truncated to `C2`.
pub fn conv_block(x: &Tensor3, w: &Tensor4, config: PartitionConfig, g: ConvGeometry) -> Result<Tensor3> {
    g.require_unit_stride()?;
    check_input_channels(x, config)?;
    let n = config.n();
    let (rn, sn) = (config.padded_c0(), config.padded_c2());
    let (kw, kh, kc0, kc2) = w.dims();
    if kc0 > rn || kc2 > sn || kc0 < config.c0() || kc2 < config.c2() {
        return Err(Error::shape(format!(
            "kernel {:?} incompatible with partition (C0={}, C2={}, N={n})",
            w.dims(),
            config.c0(),
            config.c2()
        )));
    }
    let x = x.with_channels(rn);
    let w = w.with_channels(rn, sn);
    let (w0, h0, _) = x.dims();
    let (w2, h2) = g.output_dims((w0, h0), (kw, kh))?;
    let mut y = Tensor3::zeros(w2, h2, config.c2());
    let mut out = vec![0.0; sn];
    for ow in 0..w2 {
        for oh in 0..h2 {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..config.s() {
                let y_block = &mut out[i * n..(i + 1) * n];
                for tw in 0..kw {
                    for th in 0..kh {
                        let Some((ix, iy)) = g.source((ow, oh), (tw, th), (w0, h0)) else {
                            continue;
                        };
                        let pixel = x.pixel(ix, iy);
                        for j in 0..config.r() {
                            let fiber = &pixel[j * n..(j + 1) * n];
                            // fiber (1 x N) times slice (N x N)
                            for (a, &xv) in fiber.iter().enumerate() {
                                for (b, yv) in y_block.iter_mut().enumerate() {
                                    *yv += xv * w.get(tw, th, j * n + a, i * n + b);
                                }
                            }
                        }
                    }
                }
            }
            y.pixel_mut(ow, oh).copy_from_slice(&out[..config.c2()]);
        }
    }
    Ok(y)
}

/// Real FLOPs of one half-spectrum multiply-accumulate of length `n`: real
/// bins (DC, and Nyquist for even `n`) cost 2, complex bins 8.
pub fn spectral_mac_flops(n: usize) -> u64 {
    let real_bins = if n.is_multiple_of(2) && n > 1 { 2 } else { 1 };
    let complex_bins = half_len(n) - real_bins;
    2 * real_bins as u64 + 8 * complex_bins as u64
}

/// `acc += a * b` over half spectra, counting executed FLOPs.
#[inline]
fn spectral_mac(acc: &mut [Complex64], a: &[Complex64], b: &[Complex64], n: usize) {
    let last = acc.len() - 1;
    acc[0].re += a[0].re * b[0].re;
    let upper = if n.is_multiple_of(2) && n > 1 {
        acc[last].re += a[last].re * b[last].re;
        last
    } else {
        last + 1
    };
    for k in 1..upper {
        acc[k] += a[k] * b[k];
    }
}

/// Half spectra of every base row, scaled by `1/N` so inverse transforms can
/// skip normalization. Layout `[w1][h1][j][i][bin]`.
#[derive(Debug, Clone)]
pub struct CircKernelSpectra {
    config: PartitionConfig,
    kernel: (usize, usize),
    reversed: bool,
    bins: Vec<Complex64>,
}

impl CircKernelSpectra {
    /// Spectra for the forward pass.
    pub fn forward(base: &CirculantBaseTensor) -> Self {
        Self::build(base, false)
    }

    /// Spectra of circularly reversed rows, for the input gradient.
    pub fn reversed(base: &CirculantBaseTensor) -> Self {
        Self::build(base, true)
    }

    fn build(base: &CirculantBaseTensor, reversed: bool) -> Self {
        let config = base.config();
        let n = config.n();
        let hl = half_len(n);
        let (kw, kh) = base.kernel_size();
        let (r, s) = (config.r(), config.s());
        let mut bins = vec![Complex64::new(0.0, 0.0); kw * kh * r * s * hl];
        let scale = 1.0 / n as f64;
        let mut flops = 0;
        for tw in 0..kw {
            for th in 0..kh {
                for j in 0..r {
                    for i in 0..s {
                        let mut row = base.first_row(tw, th, j, i);
                        if reversed {
                            row = reverse_fiber(&row).into_vec();
                        }
                        row.iter_mut().for_each(|v| *v *= scale);
                        let at = (((tw * kh + th) * r + j) * s + i) * hl;
                        forward_real_half(&row, &mut bins[at..at + hl], &mut flops);
                    }
                }
            }
        }
        Self {
            config,
            kernel: (kw, kh),
            reversed,
            bins,
        }
    }

    pub fn config(&self) -> PartitionConfig {
        self.config
    }

    #[inline]
    fn get(&self, tw: usize, th: usize, j: usize, i: usize) -> &[Complex64] {
        let hl = half_len(self.config.n());
        let (r, s) = (self.config.r(), self.config.s());
        let at = (((tw * self.kernel.1 + th) * r + j) * s + i) * hl;
        &self.bins[at..at + hl]
    }
}

/// Half spectra of every `N`-channel block of every site of `x`, channels
/// zero-padded to `blocks * N`. Layout `[w][h][block][bin]`.
fn fiber_spectra(x: &Tensor3, n: usize, blocks: usize, reversed: bool, flops: &mut u64) -> Vec<Complex64> {
    let hl = half_len(n);
    let (w, h, c) = x.dims();
    let mut out = vec![Complex64::new(0.0, 0.0); w * h * blocks * hl];
    let mut fiber = vec![0.0; n];
    for iw in 0..w {
        for ih in 0..h {
            let pixel = x.pixel(iw, ih);
            for j in 0..blocks {
                let lo = (j * n).min(c);
                let hi = ((j + 1) * n).min(c);
                fiber.iter_mut().for_each(|v| *v = 0.0);
                fiber[..hi - lo].copy_from_slice(&pixel[lo..hi]);
                if reversed {
                    fiber = reverse_fiber(&fiber).into_vec();
                }
                let at = ((iw * h + ih) * blocks + j) * hl;
                forward_real_half(&fiber, &mut out[at..at + hl], flops);
            }
        }
    }
    out
}

/// FFT fast forward pass of a circulant layer.
pub fn circ_forward(x: &Tensor3, base: &CirculantBaseTensor, g: ConvGeometry) -> Result<Tensor3> {
    circ_forward_with(x, &CircKernelSpectra::forward(base), g)
}

/// [`circ_forward`] with kernel spectra computed once by the caller.
pub fn circ_forward_with(x: &Tensor3, spectra: &CircKernelSpectra, g: ConvGeometry) -> Result<Tensor3> {
    if spectra.reversed {
        return Err(Error::Contract("forward pass given reversed kernel spectra".into()));
    }
    g.require_unit_stride()?;
    let config = spectra.config;
    check_input_channels(x, config)?;
    let n = config.n();
    let hl = half_len(n);
    let (r, s) = (config.r(), config.s());
    let (kw, kh) = spectra.kernel;
    let (w0, h0, _) = x.dims();
    let (w2, h2) = g.output_dims((w0, h0), (kw, kh))?;

    let mut flops = 0;
    let xs = fiber_spectra(x, n, r, false, &mut flops);
    let mac = spectral_mac_flops(n);
    let mut y = Tensor3::zeros(w2, h2, config.c2());
    let mut acc = vec![Complex64::new(0.0, 0.0); s * hl];
    let mut block = vec![0.0; n];
    for ow in 0..w2 {
        for oh in 0..h2 {
            acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for tw in 0..kw {
                for th in 0..kh {
                    let Some((ix, iy)) = g.source((ow, oh), (tw, th), (w0, h0)) else {
                        continue;
                    };
                    for j in 0..r {
                        let at = ((ix * h0 + iy) * r + j) * hl;
                        let xj = &xs[at..at + hl];
                        for i in 0..s {
                            spectral_mac(&mut acc[i * hl..(i + 1) * hl], xj, spectra.get(tw, th, j, i), n);
                        }
                        flops += mac * s as u64;
                    }
                }
            }
            let pixel = y.pixel_mut(ow, oh);
            for i in 0..s {
                inverse_real_half_unnormalized(&acc[i * hl..(i + 1) * hl], &mut block, &mut flops);
                let lo = i * n;
                let hi = ((i + 1) * n).min(config.c2());
                pixel[lo..hi].copy_from_slice(&block[..hi - lo]);
            }
        }
    }
    record_flops(flops);
    Ok(y)
}

/// Gradient of the loss with respect to every base-tensor entry, given the
/// layer input `x` and the upstream gradient `grad_y`.
///
/// For each tap and block pair the gradient is the circular correlation of
/// the output-gradient fiber with the input fiber, accumulated over all output
/// sites in the frequency domain and inverted once.
pub fn circ_backward_weight(
    x: &Tensor3,
    grad_y: &Tensor3,
    kernel: (usize, usize),
    config: PartitionConfig,
    g: ConvGeometry,
) -> Result<CirculantBaseTensor> {
    g.require_unit_stride()?;
    check_input_channels(x, config)?;
    let (w0, h0, _) = x.dims();
    let (w2, h2) = g.output_dims((w0, h0), kernel)?;
    if grad_y.dims() != (w2, h2, config.c2()) && grad_y.dims() != (w2, h2, config.padded_c2()) {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_y.dims(),
            (w2, h2, config.c2())
        )));
    }
    let n = config.n();
    let hl = half_len(n);
    let (r, s) = (config.r(), config.s());
    let (kw, kh) = kernel;

    let mut flops = 0;
    let xs = fiber_spectra(x, n, r, true, &mut flops);
    let gs = fiber_spectra(grad_y, n, s, false, &mut flops);
    let mac = spectral_mac_flops(n);
    let mut acc = vec![Complex64::new(0.0, 0.0); kw * kh * r * s * hl];
    for ow in 0..w2 {
        for oh in 0..h2 {
            for tw in 0..kw {
                for th in 0..kh {
                    let Some((ix, iy)) = g.source((ow, oh), (tw, th), (w0, h0)) else {
                        continue;
                    };
                    for j in 0..r {
                        let xat = ((ix * h0 + iy) * r + j) * hl;
                        let xj = &xs[xat..xat + hl];
                        for i in 0..s {
                            let gat = ((ow * h2 + oh) * s + i) * hl;
                            let at = (((tw * kh + th) * r + j) * s + i) * hl;
                            spectral_mac(&mut acc[at..at + hl], &gs[gat..gat + hl], xj, n);
                        }
                        flops += mac * s as u64;
                    }
                }
            }
        }
    }
    let mut grad = CirculantBaseTensor::zeros(kw, kh, config);
    let mut row = vec![0.0; n];
    let scale = 1.0 / n as f64;
    for tw in 0..kw {
        for th in 0..kh {
            for j in 0..r {
                for i in 0..s {
                    let at = (((tw * kh + th) * r + j) * s + i) * hl;
                    inverse_real_half_unnormalized(&acc[at..at + hl], &mut row, &mut flops);
                    row.iter_mut().for_each(|v| *v *= scale);
                    grad.set_first_row(tw, th, j, i, &row);
                }
            }
        }
    }
    flops += (kw * kh * r * s * n) as u64;
    record_flops(flops);
    Ok(grad)
}

/// Gradient of the loss with respect to the layer input `x` of spatial dims
/// `input`. Contributions into padded input channels are dropped.
pub fn circ_backward_input(
    grad_y: &Tensor3,
    base: &CirculantBaseTensor,
    input: (usize, usize),
    g: ConvGeometry,
) -> Result<Tensor3> {
    circ_backward_input_with(grad_y, &CircKernelSpectra::reversed(base), input, g)
}

/// [`circ_backward_input`] with reversed kernel spectra computed by the caller.
pub fn circ_backward_input_with(
    grad_y: &Tensor3,
    spectra: &CircKernelSpectra,
    input: (usize, usize),
    g: ConvGeometry,
) -> Result<Tensor3> {
    if !spectra.reversed {
        return Err(Error::Contract("input gradient needs reversed kernel spectra".into()));
    }
    g.require_unit_stride()?;
    let config = spectra.config;
    let n = config.n();
    let hl = half_len(n);
    let (r, s) = (config.r(), config.s());
    let (kw, kh) = spectra.kernel;
    let (w2, h2) = g.output_dims(input, (kw, kh))?;
    if grad_y.dims() != (w2, h2, config.c2()) && grad_y.dims() != (w2, h2, config.padded_c2()) {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_y.dims(),
            (w2, h2, config.c2())
        )));
    }

    let mut flops = 0;
    let gs = fiber_spectra(grad_y, n, s, false, &mut flops);
    let mac = spectral_mac_flops(n);
    let mut dx = Tensor3::zeros(input.0, input.1, config.c0());
    let mut acc = vec![Complex64::new(0.0, 0.0); r * hl];
    let mut block = vec![0.0; n];
    for ix in 0..input.0 {
        for iy in 0..input.1 {
            acc.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            for tw in 0..kw {
                for th in 0..kh {
                    // output site whose tap (tw, th) reads input (ix, iy)
                    let (Some(ow), Some(oh)) = ((ix + g.pad_w).checked_sub(tw), (iy + g.pad_h).checked_sub(th))
                    else {
                        continue;
                    };
                    if ow >= w2 || oh >= h2 {
                        continue;
                    }
                    for i in 0..s {
                        let gat = ((ow * h2 + oh) * s + i) * hl;
                        let gi = &gs[gat..gat + hl];
                        for j in 0..r {
                            spectral_mac(&mut acc[j * hl..(j + 1) * hl], gi, spectra.get(tw, th, j, i), n);
                        }
                        flops += mac * r as u64;
                    }
                }
            }
            let pixel = dx.pixel_mut(ix, iy);
            for j in 0..r {
                inverse_real_half_unnormalized(&acc[j * hl..(j + 1) * hl], &mut block, &mut flops);
                let lo = j * n;
                let hi = ((j + 1) * n).min(config.c0());
                if lo < hi {
                    pixel[lo..hi].copy_from_slice(&block[..hi - lo]);
                }
            }
        }
    }
    record_flops(flops);
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::{circulant_from_first_row, expand};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn output_dims_formula() {
        let g = ConvGeometry::new(1, 2, 2);
        assert_eq!(g.output_dims((7, 5), (3, 3)).unwrap(), (4, 4));
        assert!(ConvGeometry::valid().output_dims((2, 2), (3, 3)).is_err());
    }

    #[test]
    fn naive_identity_and_zero() {
        let x = Tensor3::random((4, 3, 3), &mut rng(1));
        let id = Tensor4::from_fn((1, 1, 3, 3), |_, _, a, b| if a == b { 1.0 } else { 0.0 });
        assert_eq!(conv_naive(&x, &id, ConvGeometry::valid()).unwrap(), x);
        let w = Tensor4::random((3, 3, 3, 2), &mut rng(2));
        let y = conv_naive(&Tensor3::zeros(4, 4, 3), &w, ConvGeometry::padded(1)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        assert!(conv_naive(&Tensor3::zeros(4, 4, 2), &w, ConvGeometry::valid()).is_err());
    }

    #[test]
    fn naive_handles_stride() {
        let x = Tensor3::random((5, 5, 2), &mut rng(3));
        let w = Tensor4::random((3, 3, 2, 2), &mut rng(4));
        let full = conv_naive(&x, &w, ConvGeometry::padded(1)).unwrap();
        let strided = conv_naive(&x, &w, ConvGeometry::new(1, 1, 2)).unwrap();
        assert_eq!(strided.dims(), (3, 3, 2));
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(strided.pixel(a, b), full.pixel(2 * a, 2 * b));
            }
        }
    }

    #[test]
    fn block_form_matches_naive() {
        let cfg = PartitionConfig::new(4, 8, 12).unwrap();
        let base = CirculantBaseTensor::random_he(3, 3, cfg, &mut rng(5));
        let dense = expand(&base);
        let x = Tensor3::random((6, 5, 8), &mut rng(6));
        let g = ConvGeometry::padded(1);
        let a = conv_block(&x, &dense, cfg, g).unwrap();
        let b = conv_naive(&x, &dense, g).unwrap();
        assert!(max_rel(a.as_slice(), b.as_slice()) < 1e-12);
        // any dense kernel, N = 1
        let cfg1 = PartitionConfig::new(1, 8, 5).unwrap();
        let w = Tensor4::random((3, 3, 8, 5), &mut rng(7));
        let a = conv_block(&x, &w, cfg1, g).unwrap();
        let b = conv_naive(&x, &w, g).unwrap();
        assert!(max_rel(a.as_slice(), b.as_slice()) < 1e-12);
    }

    #[test]
    fn single_site_is_circular_convolution() {
        let cfg = PartitionConfig::new(5, 5, 5).unwrap();
        let base = CirculantBaseTensor::random_he(1, 1, cfg, &mut rng(8));
        let x = Tensor3::random((1, 1, 5), &mut rng(9));
        let y = circ_forward(&x, &base, ConvGeometry::valid()).unwrap();
        let m = circulant_from_first_row(&base.first_row(0, 0, 0, 0));
        for b in 0..5 {
            let want: f64 = (0..5).map(|a| x.get(0, 0, a) * m.get(a, b)).sum();
            assert!((y.get(0, 0, b) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_forward_matches_expansion_with_padding() {
        let cfg = PartitionConfig::new(4, 7, 10).unwrap();
        let base = CirculantBaseTensor::random_he(3, 2, cfg, &mut rng(10));
        let x = Tensor3::random((6, 7, 7), &mut rng(11));
        let g = ConvGeometry::new(1, 0, 1);
        let fast = circ_forward(&x, &base, g).unwrap();
        let dense = expand(&base);
        let reference = conv_naive(&x.with_channels(8), &dense, g).unwrap();
        let reference = reference.with_channels(10);
        assert_eq!(fast.dims(), reference.dims());
        assert!(max_rel(fast.as_slice(), reference.as_slice()) < 1e-10);
    }

    #[test]
    fn fast_path_rejects_stride() {
        let cfg = PartitionConfig::new(2, 2, 2).unwrap();
        let base = CirculantBaseTensor::zeros(1, 1, cfg);
        let x = Tensor3::zeros(4, 4, 2);
        assert!(matches!(
            circ_forward(&x, &base, ConvGeometry::new(0, 0, 2)),
            Err(Error::UnsupportedGeometry(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = PartitionConfig::new(3, 6, 3).unwrap();
        let base = CirculantBaseTensor::random_he(3, 3, cfg, &mut rng(12));
        let x = Tensor3::random((5, 5, 6), &mut rng(13));
        let g = ConvGeometry::padded(1);
        let gy = Tensor3::zeros(5, 5, 3);
        let gw = circ_backward_weight(&x, &gy, (3, 3), cfg, g).unwrap();
        assert!(gw.base().as_slice().iter().all(|&v| v == 0.0));
        let gx = circ_backward_input(&gy, &base, (5, 5), g).unwrap();
        assert!(gx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn n1_weight_gradient_is_dense_gradient() {
        let cfg = PartitionConfig::new(1, 3, 4).unwrap();
        let x = Tensor3::random((5, 4, 3), &mut rng(14));
        let gy = Tensor3::random((5, 4, 4), &mut rng(15));
        let g = ConvGeometry::padded(1);
        let fast = circ_backward_weight(&x, &gy, (3, 3), cfg, g).unwrap();
        let dense = conv_naive_backward_weight(&x, &gy, (3, 3), g).unwrap();
        assert!(max_rel(fast.base().as_slice(), dense.as_slice()) < 1e-12);
    }

    #[test]
    fn adjoint_identity() {
        let cfg = PartitionConfig::new(4, 8, 8).unwrap();
        let base = CirculantBaseTensor::random_he(3, 3, cfg, &mut rng(16));
        let x = Tensor3::random((6, 6, 8), &mut rng(17));
        let g = ConvGeometry::padded(1);
        let y = circ_forward(&x, &base, g).unwrap();
        let gy = Tensor3::random(y.dims(), &mut rng(18));
        let gx = circ_backward_input(&gy, &base, (6, 6), g).unwrap();
        let lhs = y.dot(&gy).unwrap();
        let rhs = x.dot(&gx).unwrap();
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn mac_flops() {
        assert_eq!(spectral_mac_flops(1), 2);
        assert_eq!(spectral_mac_flops(2), 4);
        assert_eq!(spectral_mac_flops(4), 12);
        assert_eq!(spectral_mac_flops(5), 18);
        assert_eq!(spectral_mac_flops(8), 28);
    }
}
