//! Convolution and bilinear sampling kernels.

use super::Tensor;
use crate::error::CoreError;
use crate::par;
use crate::Result;

fn div_ceil_i64(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    (a + b - 1).div_euclid(b)
}

/// Output index range `[lo, hi)` such that `o*stride + off` stays inside
/// `[0, extent)`.
fn valid_out_range(extent: usize, off: i64, stride: usize, n_out: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = div_ceil_i64(-off, s).max(0);
    let hi = ((extent as i64 - 1 - off).div_euclid(s) + 1).clamp(0, n_out as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<ConvDims> {
    if input.shape().len() != 3 {
        return Err(CoreError::arg("conv2d", "input must be [C_in, H, W]"));
    }
    if kernel.shape().len() != 4 {
        return Err(CoreError::arg("conv2d", "kernel must be [C_out, C_in, kH, kW]"));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc != c_in {
        return Err(CoreError::shape(
            "conv2d",
            format!("kernel input channels {c_in}"),
            format!("{kc}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(CoreError::shape(
            "conv2d",
            format!("bias [{c_out}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(CoreError::arg("conv2d", "kernel extents must be odd"));
    }
    if stride == 0 {
        return Err(CoreError::arg("conv2d", "stride must be positive"));
    }
    let span_h = h as i64 + 2 * padding as i64 - kh as i64;
    let span_w = w as i64 + 2 * padding as i64 - kw as i64;
    if span_h < 0 || span_w < 0 {
        return Err(CoreError::arg(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
        ));
    }
    let h_out = span_h as usize / stride + 1;
    let w_out = span_w as usize / stride + 1;
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        h_out,
        w_out,
    })
}

#[allow(clippy::too_many_arguments)]
fn fill_output_channel(
    oc: usize,
    plane: &mut [f64],
    input: &[f64],
    kernel: &[f64],
    bias: f64,
    d: &ConvDims,
    padding: usize,
    stride: usize,
) {
    plane.fill(bias);
    let p = padding as i64;
    for ic in 0..d.c_in {
        let in_plane = &input[ic * d.h * d.w..(ic + 1) * d.h * d.w];
        for ky in 0..d.kh {
            let off_y = ky as i64 - p;
            let (oy_lo, oy_hi) = valid_out_range(d.h, off_y, stride, d.h_out);
            for kx in 0..d.kw {
                let wgt = kernel[((oc * d.c_in + ic) * d.kh + ky) * d.kw + kx];
                if wgt == 0.0 {
                    continue;
                }
                let off_x = kx as i64 - p;
                let (ox_lo, ox_hi) = valid_out_range(d.w, off_x, stride, d.w_out);
                if ox_lo >= ox_hi {
                    continue;
                }
                let len = ox_hi - ox_lo;
                for oy in oy_lo..oy_hi {
                    let iy = ((oy * stride) as i64 + off_y) as usize;
                    let out_row = &mut plane[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                    if stride == 1 {
                        let ix0 = (ox_lo as i64 + off_x) as usize;
                        let in_row = &in_plane[iy * d.w + ix0..iy * d.w + ix0 + len];
                        for (o, x) in out_row.iter_mut().zip(in_row) {
                            *o += wgt * x;
                        }
                    } else {
                        let base = iy * d.w;
                        for (k, o) in out_row.iter_mut().enumerate() {
                            let ix = (((ox_lo + k) * stride) as i64 + off_x) as usize;
                            *o += wgt * in_plane[base + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation convolution with stride.
///
/// Input `[C_in, H, W]`, kernel `[C_out, C_in, kH, kW]` (odd extents),
/// bias `[C_out]`. Output spatial size is
/// `(H + 2*padding - kH) / stride + 1`.
pub fn conv2d_strided(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias, padding, stride)?;
    let mut out = Tensor::zeros(&[d.c_out, d.h_out, d.w_out]);
    let plane = d.h_out * d.w_out;
    par::for_each_chunk(out.data_mut(), plane, |oc, chunk| {
        fill_output_channel(
            oc,
            chunk,
            input.data(),
            kernel.data(),
            bias.data()[oc],
            &d,
            padding,
            stride,
        );
    });
    Ok(out)
}

/// Stride-1 convolution; see [`conv2d_strided`].
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    conv2d_strided(input, kernel, bias, padding, 1)
}

/// Sequential reference path for [`conv2d_strided`]; always single
/// threaded regardless of features. Kept public for benchmarks.
pub fn conv2d_strided_seq(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let d = conv_dims(input, kernel, bias, padding, stride)?;
    let mut out = Tensor::zeros(&[d.c_out, d.h_out, d.w_out]);
    let plane = d.h_out * d.w_out;
    for oc in 0..d.c_out {
        let chunk = &mut out.data_mut()[oc * plane..(oc + 1) * plane];
        fill_output_channel(
            oc,
            chunk,
            input.data(),
            kernel.data(),
            bias.data()[oc],
            &d,
            padding,
            stride,
        );
    }
    Ok(out)
}

/// Reverse-mode step for stride-1 [`conv2d`]: given the output cotangent,
/// returns `(input cotangent, kernel gradient, bias gradient)`.
pub fn conv2d_vjp(
    input: &Tensor,
    kernel: &Tensor,
    cot_out: &Tensor,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias_probe = Tensor::zeros(&[kernel.shape()[0]]);
    let d = conv_dims(input, kernel, &bias_probe, padding, 1)?;
    if cot_out.shape() != [d.c_out, d.h_out, d.w_out] {
        return Err(CoreError::shape(
            "conv2d_vjp",
            format!("[{}, {}, {}]", d.c_out, d.h_out, d.w_out),
            format!("{:?}", cot_out.shape()),
        ));
    }
    let p = padding as i64;
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;

    let mut grad_bias = Tensor::zeros(&[d.c_out]);
    for oc in 0..d.c_out {
        grad_bias.data_mut()[oc] = cot_out.data()[oc * out_plane..(oc + 1) * out_plane]
            .iter()
            .sum();
    }

    let mut grad_kernel = Tensor::zeros(kernel.shape().to_vec().as_slice());
    let k_chunk = d.c_in * d.kh * d.kw;
    par::for_each_chunk(grad_kernel.data_mut(), k_chunk, |oc, chunk| {
        let cot_plane = &cot_out.data()[oc * out_plane..(oc + 1) * out_plane];
        for ic in 0..d.c_in {
            let inp = &input.data()[ic * in_plane..(ic + 1) * in_plane];
            for ky in 0..d.kh {
                let off_y = ky as i64 - p;
                let (oy_lo, oy_hi) = valid_out_range(d.h, off_y, 1, d.h_out);
                for kx in 0..d.kw {
                    let off_x = kx as i64 - p;
                    let (ox_lo, ox_hi) = valid_out_range(d.w, off_x, 1, d.w_out);
                    let mut acc = 0.0;
                    if ox_lo < ox_hi {
                        let len = ox_hi - ox_lo;
                        let ix0 = (ox_lo as i64 + off_x) as usize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as i64 + off_y) as usize;
                            let in_seg = &inp[iy * d.w + ix0..iy * d.w + ix0 + len];
                            let cot_seg =
                                &cot_plane[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                            acc += cot_seg
                                .iter()
                                .zip(in_seg)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                    chunk[(ic * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    });

    let mut cot_input = Tensor::zeros(input.shape().to_vec().as_slice());
    par::for_each_chunk(cot_input.data_mut(), in_plane, |ic, chunk| {
        for oc in 0..d.c_out {
            let cot_plane = &cot_out.data()[oc * out_plane..(oc + 1) * out_plane];
            for ky in 0..d.kh {
                let off_y = ky as i64 - p;
                let (oy_lo, oy_hi) = valid_out_range(d.h, off_y, 1, d.h_out);
                for kx in 0..d.kw {
                    let wgt = kernel.data()[((oc * d.c_in + ic) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let off_x = kx as i64 - p;
                    let (ox_lo, ox_hi) = valid_out_range(d.w, off_x, 1, d.w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let ix0 = (ox_lo as i64 + off_x) as usize;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as i64 + off_y) as usize;
                        let cot_seg = &cot_plane[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                        let in_seg = &mut chunk[iy * d.w + ix0..iy * d.w + ix0 + len];
                        for (iv, c) in in_seg.iter_mut().zip(cot_seg) {
                            *iv += wgt * c;
                        }
                    }
                }
            }
        }
    });

    Ok((cot_input, grad_kernel, grad_bias))
}

/// Input-cotangent half of [`conv2d_vjp`], skipping the kernel and bias
/// gradients (used by adjoint iterations that only need state VJPs).
pub fn conv2d_vjp_input(
    input_shape: &[usize],
    kernel: &Tensor,
    cot_out: &Tensor,
    padding: usize,
) -> Result<Tensor> {
    if input_shape.len() != 3 {
        return Err(CoreError::arg("conv2d_vjp_input", "input shape must be rank 3"));
    }
    let probe = Tensor::zeros(input_shape);
    let bias_probe = Tensor::zeros(&[kernel.shape()[0]]);
    let d = conv_dims(&probe, kernel, &bias_probe, padding, 1)?;
    if cot_out.shape() != [d.c_out, d.h_out, d.w_out] {
        return Err(CoreError::shape(
            "conv2d_vjp_input",
            format!("[{}, {}, {}]", d.c_out, d.h_out, d.w_out),
            format!("{:?}", cot_out.shape()),
        ));
    }
    let p = padding as i64;
    let out_plane = d.h_out * d.w_out;
    let in_plane = d.h * d.w;
    let mut cot_input = Tensor::zeros(input_shape);
    par::for_each_chunk(cot_input.data_mut(), in_plane, |ic, chunk| {
        for oc in 0..d.c_out {
            let cot_plane = &cot_out.data()[oc * out_plane..(oc + 1) * out_plane];
            for ky in 0..d.kh {
                let off_y = ky as i64 - p;
                let (oy_lo, oy_hi) = valid_out_range(d.h, off_y, 1, d.h_out);
                for kx in 0..d.kw {
                    let wgt = kernel.data()[((oc * d.c_in + ic) * d.kh + ky) * d.kw + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let off_x = kx as i64 - p;
                    let (ox_lo, ox_hi) = valid_out_range(d.w, off_x, 1, d.w_out);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let len = ox_hi - ox_lo;
                    let ix0 = (ox_lo as i64 + off_x) as usize;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy as i64 + off_y) as usize;
                        let cot_seg = &cot_plane[oy * d.w_out + ox_lo..oy * d.w_out + ox_hi];
                        let in_seg = &mut chunk[iy * d.w + ix0..iy * d.w + ix0 + len];
                        for (iv, c) in in_seg.iter_mut().zip(cot_seg) {
                            *iv += wgt * c;
                        }
                    }
                }
            }
        }
    });
    Ok(cot_input)
}

#[inline]
fn plane_at(plane: &[f64], h: usize, w: usize, x: i64, y: i64) -> f64 {
    if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
        plane[y as usize * w + x as usize]
    } else {
        0.0
    }
}

/// Bilinear interpolation on a single `[H, W]` plane at real coordinates
/// `(x, y)`. Corners outside `[0, W-1] x [0, H-1]` contribute zero.
pub fn plane_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0f = x.floor();
    let y0f = y.floor();
    let tx = x - x0f;
    let ty = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let v00 = plane_at(plane, h, w, x0, y0);
    let v01 = plane_at(plane, h, w, x0 + 1, y0);
    let v10 = plane_at(plane, h, w, x0, y0 + 1);
    let v11 = plane_at(plane, h, w, x0 + 1, y0 + 1);
    let top = v00 + tx * (v01 - v00);
    let bot = v10 + tx * (v11 - v10);
    top + ty * (bot - top)
}

/// [`plane_sample`] plus the partial derivatives of the sampled value with
/// respect to `x` and `y`.
pub fn plane_sample_grad(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> (f64, f64, f64) {
    let x0f = x.floor();
    let y0f = y.floor();
    let tx = x - x0f;
    let ty = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let v00 = plane_at(plane, h, w, x0, y0);
    let v01 = plane_at(plane, h, w, x0 + 1, y0);
    let v10 = plane_at(plane, h, w, x0, y0 + 1);
    let v11 = plane_at(plane, h, w, x0 + 1, y0 + 1);
    let top = v00 + tx * (v01 - v00);
    let bot = v10 + tx * (v11 - v10);
    let value = top + ty * (bot - top);
    let dvdx = (1.0 - ty) * (v01 - v00) + ty * (v11 - v10);
    let dvdy = bot - top;
    (value, dvdx, dvdy)
}

/// Bilinear sampling of a `[C, H, W]` grid at `N` real `(x, y)` points
/// given as a `[2, N]` tensor (row 0 = x, row 1 = y). Returns `[C, N]`.
pub fn bilinear_sample(grid: &Tensor, coords: &Tensor) -> Result<Tensor> {
    if grid.shape().len() != 3 {
        return Err(CoreError::arg("bilinear_sample", "grid must be [C, H, W]"));
    }
    if coords.shape().len() != 2 || coords.shape()[0] != 2 {
        return Err(CoreError::arg("bilinear_sample", "coords must be [2, N]"));
    }
    let (c, h, w) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let n = coords.shape()[1];
    let xs = &coords.data()[..n];
    let ys = &coords.data()[n..];
    let mut out = Tensor::zeros(&[c, n]);
    par::for_each_chunk(out.data_mut(), n, |ch, row| {
        let plane = &grid.data()[ch * h * w..(ch + 1) * h * w];
        for i in 0..n {
            row[i] = plane_sample(plane, h, w, xs[i], ys[i]);
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Direct quadruple-loop convolution used as an oracle.
    fn conv2d_brute(
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        padding: usize,
        stride: usize,
    ) -> Tensor {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
        for oc in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - padding as i64;
                                let ix = (ox * stride + kx) as i64 - padding as i64;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += kernel.at4(oc, ic, ky, kx)
                                        * input.at3(ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    let i = out.idx3(oc, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passthrough() {
        let mut rng = Rng::new(1);
        let input = random_tensor(&mut rng, &[3, 5, 7]);
        // 1x1 identity: kernel[oc][ic] = delta(oc, ic)
        let mut kdata = vec![0.0; 9];
        for i in 0..3 {
            kdata[i * 3 + i] = 1.0;
        }
        let kernel = Tensor::new(vec![3, 3, 1, 1], kdata).unwrap();
        let bias = Tensor::zeros(&[3]);
        let out = conv2d(&input, &kernel, &bias, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn averaging_kernel_on_constant_image() {
        let input = Tensor::full(&[1, 6, 6], 2.75);
        let kernel = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &kernel, &bias, 0).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4]);
        for &v in out.data() {
            assert!((v - 2.75).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_padded() {
        let mut rng = Rng::new(2);
        let input = random_tensor(&mut rng, &[1, 4, 4]);
        let kernel = random_tensor(&mut rng, &[1, 1, 3, 3]);
        let bias = random_tensor(&mut rng, &[1]);
        let fast = conv2d(&input, &kernel, &bias, 1).unwrap();
        let slow = conv2d_brute(&input, &kernel, &bias, 1, 1);
        assert_eq!(fast.shape(), &[1, 4, 4]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_brute_force_multichannel_strided() {
        let mut rng = Rng::new(3);
        let input = random_tensor(&mut rng, &[3, 16, 16]);
        let kernel = random_tensor(&mut rng, &[4, 3, 5, 5]);
        let bias = random_tensor(&mut rng, &[4]);
        for &(pad, stride) in &[(2usize, 1usize), (2, 4), (1, 2)] {
            let fast = conv2d_strided(&input, &kernel, &bias, pad, stride).unwrap();
            let slow = conv2d_brute(&input, &kernel, &bias, pad, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seq_and_dispatch_agree_bitwise() {
        let mut rng = Rng::new(4);
        let input = random_tensor(&mut rng, &[8, 12, 12]);
        let kernel = random_tensor(&mut rng, &[6, 8, 3, 3]);
        let bias = random_tensor(&mut rng, &[6]);
        let a = conv2d_strided(&input, &kernel, &bias, 1, 1).unwrap();
        let b = conv2d_strided_seq(&input, &kernel, &bias, 1, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn linearity_in_input() {
        let mut rng = Rng::new(5);
        let x = random_tensor(&mut rng, &[2, 6, 6]);
        let y = random_tensor(&mut rng, &[2, 6, 6]);
        let kernel = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = Tensor::zeros(&[3]);
        let (a, b) = (1.7, -0.4);
        let lhs = conv2d(&x.scale(a).add(&y.scale(b)).unwrap(), &kernel, &bias, 1).unwrap();
        let rhs = conv2d(&x, &kernel, &bias, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d(&y, &kernel, &bias, 1).unwrap().scale(b))
            .unwrap();
        for (u, v) in lhs.data().iter().zip(rhs.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::zeros(&[3, 4, 4]);
        let kernel = Tensor::zeros(&[2, 4, 3, 3]);
        let bias = Tensor::zeros(&[2]);
        assert!(conv2d(&input, &kernel, &bias, 1).is_err());
    }

    #[test]
    fn rejects_even_kernel() {
        let input = Tensor::zeros(&[1, 4, 4]);
        let kernel = Tensor::zeros(&[1, 1, 2, 2]);
        let bias = Tensor::zeros(&[1]);
        assert!(conv2d(&input, &kernel, &bias, 0).is_err());
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let input = random_tensor(&mut rng, &[2, 5, 5]);
        let kernel = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = random_tensor(&mut rng, &[3]);
        let cot = random_tensor(&mut rng, &[3, 5, 5]);
        let (cot_in, grad_k, grad_b) = conv2d_vjp(&input, &kernel, &cot, 1).unwrap();

        let loss = |inp: &Tensor, ker: &Tensor, bi: &Tensor| -> f64 {
            conv2d(inp, ker, bi, 1).unwrap().dot(&cot).unwrap()
        };
        let eps = 1e-6;
        for probe in 0..10 {
            let i = (probe * 7) % input.len();
            let mut plus = input.clone();
            plus.data_mut()[i] += eps;
            let mut minus = input.clone();
            minus.data_mut()[i] -= eps;
            let fd = (loss(&plus, &kernel, &bias) - loss(&minus, &kernel, &bias)) / (2.0 * eps);
            assert!((fd - cot_in.data()[i]).abs() < 1e-6, "input grad {probe}");
        }
        for probe in 0..10 {
            let i = (probe * 5) % kernel.len();
            let mut plus = kernel.clone();
            plus.data_mut()[i] += eps;
            let mut minus = kernel.clone();
            minus.data_mut()[i] -= eps;
            let fd = (loss(&input, &plus, &bias) - loss(&input, &minus, &bias)) / (2.0 * eps);
            assert!((fd - grad_k.data()[i]).abs() < 1e-6, "kernel grad {probe}");
        }
        for i in 0..bias.len() {
            let mut plus = bias.clone();
            plus.data_mut()[i] += eps;
            let mut minus = bias.clone();
            minus.data_mut()[i] -= eps;
            let fd = (loss(&input, &kernel, &plus) - loss(&input, &kernel, &minus)) / (2.0 * eps);
            assert!((fd - grad_b.data()[i]).abs() < 1e-6, "bias grad {i}");
        }
    }

    #[test]
    fn bilinear_lattice_points_exact() {
        let mut rng = Rng::new(7);
        let grid = random_tensor(&mut rng, &[2, 4, 5]);
        let coords = Tensor::new(vec![2, 2], vec![3.0, 1.0, 2.0, 0.0]).unwrap();
        let out = bilinear_sample(&grid, &coords).unwrap();
        // point 0: (x=3, y=2), point 1: (x=1, y=0)
        assert_eq!(out.data()[0], grid.at3(0, 2, 3));
        assert_eq!(out.data()[1], grid.at3(0, 0, 1));
        assert_eq!(out.data()[2], grid.at3(1, 2, 3));
        assert_eq!(out.data()[3], grid.at3(1, 0, 1));
    }

    #[test]
    fn bilinear_midpoint_average() {
        let grid = Tensor::new(vec![1, 1, 2], vec![4.0, 10.0]).unwrap();
        let coords = Tensor::new(vec![2, 1], vec![0.5, 0.0]).unwrap();
        let out = bilinear_sample(&grid, &coords).unwrap();
        assert_eq!(out.data()[0], 7.0);
    }

    #[test]
    fn bilinear_out_of_range_zero() {
        let grid = Tensor::full(&[3, 4, 4], 9.0);
        let coords = Tensor::new(vec![2, 1], vec![-10.0, -10.0]).unwrap();
        let out = bilinear_sample(&grid, &coords).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_affine_along_axis() {
        // Between lattice points the interpolant is affine in each
        // coordinate: value(t) = (1-t) a + t b along a grid edge.
        let mut rng = Rng::new(8);
        let grid = random_tensor(&mut rng, &[1, 3, 3]);
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let coords = Tensor::new(vec![2, 1], vec![t, 1.0]).unwrap();
            let v = bilinear_sample(&grid, &coords).unwrap().data()[0];
            let expect = (1.0 - t) * grid.at3(0, 1, 0) + t * grid.at3(0, 1, 1);
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_sample_grad_matches_fd() {
        let mut rng = Rng::new(9);
        let grid = random_tensor(&mut rng, &[1, 6, 6]);
        let plane = grid.data();
        for probe in 0..20 {
            let x = rng.uniform_in(-1.0, 6.0);
            let y = rng.uniform_in(-1.0, 6.0);
            let (_, dx, dy) = plane_sample_grad(plane, 6, 6, x, y);
            let eps = 1e-7;
            let fx = (plane_sample(plane, 6, 6, x + eps, y)
                - plane_sample(plane, 6, 6, x - eps, y))
                / (2.0 * eps);
            let fy = (plane_sample(plane, 6, 6, x, y + eps)
                - plane_sample(plane, 6, 6, x, y - eps))
                / (2.0 * eps);
            // Skip probes that straddle a lattice line where the
            // interpolant is not differentiable.
            if (x - x.round()).abs() < 1e-6 || (y - y.round()).abs() < 1e-6 {
                continue;
            }
            assert!((dx - fx).abs() < 1e-5, "probe {probe} dx {dx} vs {fx}");
            assert!((dy - fy).abs() < 1e-5, "probe {probe} dy {dy} vs {fy}");
        }
    }
}
