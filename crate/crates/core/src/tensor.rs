//! Dense five-dimensional tensors in `[batch, channel, depth, height, width]`
//! layout, row-major with width fastest.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

/// Floating point element type used by the tensor engine.
///
/// Implemented for `f32` (training) and `f64` (gradient checks).
pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }

    /// `C = alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape of a five-dimensional tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> Self {
        Shape([n, c, d, h, w])
    }

    pub fn batch(&self) -> usize {
        self.0[0]
    }

    pub fn channels(&self) -> usize {
        self.0[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    /// Number of voxels per channel.
    pub fn spatial_len(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(&self, c: usize) -> Self {
        let mut s = *self;
        s.0[1] = c;
        s
    }

    pub fn with_batch(&self, n: usize) -> Self {
        let mut s = *self;
        s.0[0] = n;
        s
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, c, d, h, w] = self.0;
        write!(f, "[{n}, {c}, {d}, {h}, {w}]")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::ZERO; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(Shape::new(1, 1, 1, 1, 1), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length does not match shape {shape}"
        );
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterprets the buffer with a new shape of equal length.
    pub fn reshaped(mut self, shape: Shape) -> Self {
        assert_eq!(
            shape.len(),
            self.data.len(),
            "reshape to {shape} changes length"
        );
        self.shape = shape;
        self
    }

    /// Contiguous slice holding channel `c` of batch item `n`.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let s = self.shape.spatial_len();
        let off = (n * self.shape.channels() + c) * s;
        &self.data[off..off + s]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let s = self.shape.spatial_len();
        let off = (n * self.shape.channels() + c) * s;
        &mut self.data[off..off + s]
    }

    /// All channels of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape.channels() * self.shape.spatial_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.channels() * self.shape.spatial_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates single items along the batch axis.
    pub fn stack(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let first = items[0].shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            assert_eq!(
                t.shape.with_batch(first.batch()),
                first,
                "stack shape mismatch"
            );
            data.extend_from_slice(&t.data);
        }
        let n = items.iter().map(|t| t.shape.batch()).sum();
        Tensor {
            shape: first.with_batch(n),
            data,
        }
    }

    /// Converts element type through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Zero-pads the spatial dimensions at the high end up to `target`.
    pub fn pad_spatial(&self, target: [usize; 3]) -> Self {
        let [n, c, d, h, w] = self.shape.0;
        assert!(target[0] >= d && target[1] >= h && target[2] >= w);
        if target == [d, h, w] {
            return self.clone();
        }
        let mut out = Tensor::zeros(Shape::new(n, c, target[0], target[1], target[2]));
        for nc in 0..n * c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((nc * d + z) * h + y) * w;
                    let dst = ((nc * target[0] + z) * target[1] + y) * target[2];
                    out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
                }
            }
        }
        out
    }

    /// Copies the leading hyper-rectangle shared by `src` and `self`,
    /// leaving the remaining elements of `self` untouched.
    pub fn copy_overlap_from(&mut self, src: &Tensor<T>) {
        let a = self.shape.0;
        let b = src.shape.0;
        let m = [0, 1, 2, 3, 4].map(|i| a[i].min(b[i]));
        for i0 in 0..m[0] {
            for i1 in 0..m[1] {
                for i2 in 0..m[2] {
                    for i3 in 0..m[3] {
                        let dst = (((i0 * a[1] + i1) * a[2] + i2) * a[3] + i3) * a[4];
                        let s = (((i0 * b[1] + i1) * b[2] + i2) * b[3] + i3) * b[4];
                        self.data[dst..dst + m[4]].copy_from_slice(&src.data[s..s + m[4]]);
                    }
                }
            }
        }
    }

    /// Crops the spatial dimensions starting at `origin`.
    pub fn crop_spatial(&self, origin: [usize; 3], size: [usize; 3]) -> Self {
        let [n, c, d, h, w] = self.shape.0;
        assert!(origin[0] + size[0] <= d && origin[1] + size[1] <= h && origin[2] + size[2] <= w);
        let mut out = Tensor::zeros(Shape::new(n, c, size[0], size[1], size[2]));
        for nc in 0..n * c {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let src = ((nc * d + z + origin[0]) * h + y + origin[1]) * w + origin[2];
                    let dst = ((nc * size[0] + z) * size[1] + y) * size[2];
                    out.data[dst..dst + size[2]].copy_from_slice(&self.data[src..src + size[2]]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_round_trips() {
        let shape = Shape::new(2, 3, 3, 4, 5);
        let data: Vec<f32> = (0..shape.len()).map(|i| i as f32).collect();
        let t = Tensor::from_vec(shape, data);
        let padded = t.pad_spatial([4, 8, 8]);
        assert_eq!(padded.shape(), Shape::new(2, 3, 4, 8, 8));
        assert_eq!(padded.crop_spatial([0, 0, 0], [3, 4, 5]), t);
        assert_eq!(padded.sum(), t.sum());
    }

    #[test]
    fn overlap_copy_fills_leading_block() {
        let src = Tensor::<f32>::from_vec(
            Shape::new(2, 3, 1, 1, 1),
            (0..6).map(|i| i as f32).collect(),
        );
        let mut dst = Tensor::<f32>::full(Shape::new(2, 4, 1, 1, 1), -1.0);
        dst.copy_overlap_from(&src);
        assert_eq!(dst.data(), &[0.0, 1.0, 2.0, -1.0, 3.0, 4.0, 5.0, -1.0]);
    }

    #[test]
    fn stack_concatenates_batch() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 2, 2), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 2, 2, 2), 2.0);
        let s = Tensor::stack(&[&a, &b]);
        assert_eq!(s.shape().batch(), 2);
        assert!(s.item(1).iter().all(|&v| v == 2.0));
    }
}
