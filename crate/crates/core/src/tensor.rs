//! Dense `B×C×H×W` arrays of `f64`.
//!
//! Every image, feature map, deformation field, mask and parameter in the
//! crate is carried by [`Tensor`]. Parameters that are conceptually matrices
//! or vectors use singleton leading dimensions.

use std::fmt;

use crate::error::{ensure, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape::new(self.b, c, self.h, self.w)
    }

    pub const fn with_hw(self, h: usize, w: usize) -> Self {
        Shape::new(self.b, self.c, h, w)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.b, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Row-major `B×C×H×W` array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// An image or feature plane. Image-valued planes live in `[0, 1]`.
pub type ImagePlane = Tensor;

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == shape.numel(),
            "buffer of {} values does not fill shape {shape}",
            data.len()
        );
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((b * s.c + c) * s.h + y) * s.w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `H×W` slice of one channel.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.shape.plane();
        let start = (b * self.shape.c + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.shape.plane();
        let start = (b * self.shape.c + c) * n;
        &mut self.data[start..start + n]
    }

    /// The `C×H×W` block of batch item `b`.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape.c * self.shape.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        ensure!(
            shape.numel() == self.data.len(),
            "cannot reshape {} into {shape}",
            self.shape
        );
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        ensure!(
            self.shape == other.shape,
            "shape mismatch {} vs {}",
            self.shape,
            other.shape
        );
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += alpha * other`, shapes must agree.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Copy of channels `[start, start + count)`.
    pub fn channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let s = self.shape;
        ensure!(start + count <= s.c, "channel range {start}+{count} exceeds {}", s.c);
        let mut out = Tensor::zeros(s.with_c(count));
        for b in 0..s.b {
            for c in 0..count {
                out.plane_mut(b, c).copy_from_slice(self.plane(b, start + c));
            }
        }
        Ok(out)
    }

    /// Replicate a single channel `count` times.
    pub fn repeat_channels(&self, count: usize) -> Result<Tensor> {
        ensure!(self.shape.c == 1, "repeat_channels expects 1 channel, got {}", self.shape.c);
        let s = self.shape;
        let mut out = Tensor::zeros(s.with_c(count));
        for b in 0..s.b {
            for c in 0..count {
                out.plane_mut(b, c).copy_from_slice(self.plane(b, 0));
            }
        }
        Ok(out)
    }

    /// Stack single-item tensors of equal shape along the batch dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        ensure!(!items.is_empty(), "cannot stack an empty list");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut b = 0;
        for t in items {
            ensure!(
                t.shape.c == s.c && t.shape.h == s.h && t.shape.w == s.w,
                "stack shape mismatch {} vs {s}",
                t.shape
            );
            b += t.shape.b;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(b, s.c, s.h, s.w),
            data,
        })
    }

    /// Batch item `b` as a `1×C×H×W` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let s = self.shape;
        Tensor {
            shape: Shape::new(1, s.c, s.h, s.w),
            data: self.item(b).to_vec(),
        }
    }

    /// Per-channel spatial window copy.
    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        ensure!(
            top + h <= s.h && left + w <= s.w,
            "window {h}×{w} at ({top},{left}) exceeds {}×{}",
            s.h,
            s.w
        );
        let mut out = Tensor::zeros(s.with_hw(h, w));
        for b in 0..s.b {
            for c in 0..s.c {
                let src = self.plane(b, c);
                let dst = out.plane_mut(b, c);
                for y in 0..h {
                    dst[y * w..(y + 1) * w]
                        .copy_from_slice(&src[(top + y) * s.w + left..(top + y) * s.w + left + w]);
                }
            }
        }
        Ok(out)
    }
}

/// ITU-R BT.601 luma of a 3-channel plane; single-channel input passes through.
pub fn luma(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    match s.c {
        1 => Ok(img.clone()),
        3 => {
            let mut out = Tensor::zeros(s.with_c(1));
            for b in 0..s.b {
                let (r, g, bl) = (img.plane(b, 0), img.plane(b, 1), img.plane(b, 2));
                for (i, o) in out.plane_mut(b, 0).iter_mut().enumerate() {
                    *o = 0.299 * r[i] + 0.587 * g[i] + 0.114 * bl[i];
                }
            }
            Ok(out)
        }
        c => Err(crate::Error::Contract(format!(
            "luma expects 1 or 3 channels, got {c}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |b, c, y, x| {
            (((b * 3 + c) * 4 + y) * 5 + x) as f64
        });
        for (i, v) in t.data().iter().enumerate() {
            assert_eq!(*v, i as f64);
        }
        assert_eq!(t.at(1, 2, 3, 4), 119.0);
    }

    #[test]
    fn stack_and_split() {
        let a = Tensor::full(Shape::new(1, 2, 3, 3), 1.0);
        let b = Tensor::full(Shape::new(1, 2, 3, 3), 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 3, 3));
        assert_eq!(s.batch_item(1), b);
        assert!(Tensor::stack(&[a, Tensor::zeros(Shape::new(1, 1, 3, 3))]).is_err());
    }

    #[test]
    fn luma_of_gray_rgb_is_gray() {
        let t = Tensor::full(Shape::new(1, 3, 2, 2), 0.4);
        let l = luma(&t).unwrap();
        assert!(l.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }
}
