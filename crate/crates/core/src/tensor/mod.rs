//! Minimal dense-tensor arithmetic.
//!
//! A [`Tensor`] is a row-major flat `f64` buffer plus an explicit shape.
//! There are no strided views; every op that combines tensors requires
//! exact shape agreement, and the only broadcasting defined anywhere is
//! scalar broadcast. All operations are pure and deterministic.

mod conv;
mod io;

pub use conv::{
    bilinear_sample, conv2d, conv2d_strided, conv2d_strided_seq, conv2d_vjp, conv2d_vjp_input,
    plane_sample, plane_sample_grad,
};
pub use io::{load_named_tensors, save_named_tensors, NamedTensor};

use crate::error::CoreError;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::arg("Tensor::new", "zero-sized dimension"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::shape(
                "Tensor::new",
                format!("{n} elements for shape {}", shape_str(&shape)),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat index for a `[C, H, W]` tensor.
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 3);
        (c * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx3(c, y, x)]
    }

    /// Flat index for a rank-4 tensor.
    #[inline]
    pub fn idx4(&self, a: usize, b: usize, c: usize, d: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((a * self.shape[1] + b) * self.shape[2] + c) * self.shape[3] + d
    }

    #[inline]
    pub fn at4(&self, a: usize, b: usize, c: usize, d: usize) -> f64 {
        self.data[self.idx4(a, b, c, d)]
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::shape(
                op,
                shape_str(&self.shape),
                shape_str(&other.shape),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Scalar broadcast: multiply every element.
    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// Scalar broadcast: add to every element.
    pub fn add_scalar(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a + s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Euclidean norm of a flat slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Concatenates `[C_i, H, W]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| CoreError::arg("concat_channels", "empty input"))?;
    if first.shape().len() != 3 {
        return Err(CoreError::arg("concat_channels", "expected rank-3 tensors"));
    }
    let (h, w) = (first.shape()[1], first.shape()[2]);
    let mut c_total = 0;
    for p in parts {
        if p.shape().len() != 3 || p.shape()[1] != h || p.shape()[2] != w {
            return Err(CoreError::shape(
                "concat_channels",
                format!("[*, {h}, {w}]"),
                shape_str(p.shape()),
            ));
        }
        c_total += p.shape()[0];
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![c_total, h, w], data)
}

/// Splits the channel axis of a `[C, H, W]` tensor at the given sizes.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    if t.shape().len() != 3 {
        return Err(CoreError::arg("split_channels", "expected rank-3 tensor"));
    }
    let total: usize = sizes.iter().sum();
    if total != t.shape()[0] {
        return Err(CoreError::shape(
            "split_channels",
            format!("channel sum {}", t.shape()[0]),
            format!("{total}"),
        ));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &c in sizes {
        let data = t.data()[off * plane..(off + c) * plane].to_vec();
        out.push(Tensor::new(vec![c, h, w], data)?);
        off += c;
    }
    Ok(out)
}

/// Mean-pools the spatial axes of a `[C, H, W]` tensor by `factor`.
pub fn avg_pool2d(t: &Tensor, factor: usize) -> Result<Tensor> {
    if t.shape().len() != 3 {
        return Err(CoreError::arg("avg_pool2d", "expected rank-3 tensor"));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(CoreError::arg(
            "avg_pool2d",
            format!("spatial dims {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += t.at3(ch, oy * factor + dy, ox * factor + dx);
                    }
                }
                let i = out.idx3(ch, oy, ox);
                out.data_mut()[i] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Mean-pools the last two axes of a rank-4 tensor by 2 (used for
/// correlation pyramid levels).
pub fn avg_pool_last2(t: &Tensor) -> Result<Tensor> {
    if t.shape().len() != 4 {
        return Err(CoreError::arg("avg_pool_last2", "expected rank-4 tensor"));
    }
    let (a, b, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::arg(
            "avg_pool_last2",
            format!("trailing dims {h}x{w} not divisible by 2"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[a, b, ho, wo]);
    let in_plane = h * w;
    let out_plane = ho * wo;
    for ab in 0..a * b {
        let src = &t.data()[ab * in_plane..(ab + 1) * in_plane];
        let dst = &mut out.data_mut()[ab * out_plane..(ab + 1) * out_plane];
        for oy in 0..ho {
            for ox in 0..wo {
                let y = oy * 2;
                let x = ox * 2;
                dst[oy * wo + ox] = 0.25
                    * (src[y * w + x]
                        + src[y * w + x + 1]
                        + src[(y + 1) * w + x]
                        + src[(y + 1) * w + x + 1]);
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling of a `[C, H, W]` tensor by an integer factor.
///
/// Output pixel centers map to `(i + 0.5) / factor - 0.5` in input
/// coordinates and sampling clamps to the border, so constant fields stay
/// exactly constant.
pub fn upsample_bilinear(t: &Tensor, factor: usize) -> Result<Tensor> {
    if t.shape().len() != 3 {
        return Err(CoreError::arg("upsample_bilinear", "expected rank-3 tensor"));
    }
    if factor == 0 {
        return Err(CoreError::arg("upsample_bilinear", "factor must be positive"));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let clamp = |v: f64, hi: usize| v.max(0.0).min((hi - 1) as f64);
    for oy in 0..ho {
        let sy = clamp((oy as f64 + 0.5) / factor as f64 - 0.5, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        for ox in 0..wo {
            let sx = clamp((ox as f64 + 0.5) / factor as f64 - 0.5, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = sx - x0 as f64;
            for ch in 0..c {
                let v00 = t.at3(ch, y0, x0);
                let v01 = t.at3(ch, y0, x1);
                let v10 = t.at3(ch, y1, x0);
                let v11 = t.at3(ch, y1, x1);
                let top = v00 + tx * (v01 - v00);
                let bot = v10 + tx * (v11 - v10);
                let i = out.idx3(ch, oy, ox);
                out.data_mut()[i] = top + ty * (bot - top);
            }
        }
    }
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

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(Tensor::zeros(&[4, 4]).l2_norm(), 0.0);
        let one_hot = Tensor::new(vec![5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(one_hot.l2_norm(), 1.0);
        let t = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(t.l2_norm(), 5.0);
    }

    #[test]
    fn arithmetic_requires_exact_shape() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
        assert!(a.dot(&b).is_err());
    }

    #[test]
    fn scalar_broadcast() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(a.scale(2.0).data(), &[2.0, -4.0, 1.0]);
        assert_eq!(a.add_scalar(1.0).data(), &[2.0, -1.0, 1.5]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = Rng::new(3);
        let a = random_tensor(&mut rng, &[2, 4, 5]);
        let b = random_tensor(&mut rng, &[3, 4, 5]);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[5, 4, 5]);
        let parts = split_channels(&cat, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn avg_pool_constant_stays_constant() {
        let t = Tensor::full(&[2, 8, 8], 3.5);
        let p = avg_pool2d(&t, 4).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2]);
        assert!(p.data().iter().all(|&v| (v - 3.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_constant_exact() {
        let t = Tensor::full(&[2, 3, 3], -1.25);
        let u = upsample_bilinear(&t, 8).unwrap();
        assert_eq!(u.shape(), &[2, 24, 24]);
        assert!(u.data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = Rng::new(17);
        let a = random_tensor(&mut rng, &[4, 6, 6]);
        let b = random_tensor(&mut rng, &[4, 6, 6]);
        let x = a.mul(&b).unwrap();
        let y = a.mul(&b).unwrap();
        assert_eq!(x.data(), y.data());
    }
}
