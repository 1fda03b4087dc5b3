//! Dense 4-d tensors (batch, channel, height, width) in row-major order.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (default compute and
/// storage) and `f64` (gradient checking).
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for row-major `a: m x k`, `b: k x n`,
    /// `c: m x n`. `ta`/`tb` select the transpose of the stored operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        ta: bool,
        b: &[Self],
        tb: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                ta: bool,
                b: &[Self],
                tb: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // a is stored m x k (or k x m when transposed)
                let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: strides describe matrices fully contained in the
                // slices checked above; c does not alias a or b.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense `batch x channel x height x width` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len =
            checked_len(dims).ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
        if len != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: [usize; 4], value: T) -> Self {
        let len = checked_len(dims).expect("tensor dims overflow");
        Tensor {
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(checked_len(dims).expect("tensor dims overflow"));
        for b in 0..dims[0] {
            for c in 0..dims[1] {
                for y in 0..dims[2] {
                    for x in 0..dims[3] {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    /// A single-image tensor from a `height x width` grid.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::of_f64(v)))
            .collect();
        Self::new([1, 1, h, w], data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.dims[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.dims[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.dims[3]
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
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Linear index of element `(b, c, y, x)`.
    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cn, h, w] = self.dims;
        ((b * cn + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(b, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `height x width` plane of one channel.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// All channels of one batch item.
    #[inline]
    pub fn item(&self, b: usize) -> &[T] {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        &self.data[b * chw..(b + 1) * chw]
    }

    #[inline]
    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let chw = self.dims[1] * self.dims[2] * self.dims[3];
        &mut self.data[b * chw..(b + 1) * chw]
    }

    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Inner product, accumulated in double precision.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for v in &mut self.data {
            *v = *v * k;
        }
    }

    fn check_same(&self, other: &Self, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Spatial window `[offset_h, offset_h + out_h) x [offset_w, offset_w + out_w)`;
    /// batch and channel extents are kept.
    pub fn crop(
        &self,
        offset_h: usize,
        offset_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = self.dims;
        if offset_h + out_h > h {
            return Err(Error::CropBounds {
                axis: "height",
                offset: offset_h,
                extent: out_h,
                input: h,
            });
        }
        if offset_w + out_w > w {
            return Err(Error::CropBounds {
                axis: "width",
                offset: offset_w,
                extent: out_w,
                input: w,
            });
        }
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for plane in self.data.chunks_exact(h * w) {
            for y in offset_h..offset_h + out_h {
                let row = y * w + offset_w;
                data.extend_from_slice(&plane[row..row + out_w]);
            }
        }
        Ok(Tensor {
            dims: [n, c, out_h, out_w],
            data,
        })
    }

    /// Zero-pad the spatial axes: `top`/`left` before, `bottom`/`right` after.
    pub fn pad(&self, top: usize, left: usize, bottom: usize, right: usize) -> Self {
        let [n, c, h, w] = self.dims;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for (src, dst) in self
            .data
            .chunks_exact(h * w)
            .zip(out.data.chunks_exact_mut(oh * ow))
        {
            for y in 0..h {
                let d = (y + top) * ow + left;
                dst[d..d + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        out
    }

    /// Concatenate along the batch axis. All inputs must share `c, h, w`.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "stack: {:?} vs {:?}",
                    t.dims, first.dims
                )));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            dims: [n, c, h, w],
            data,
        })
    }
}

pub(crate) fn checked_len(dims: [usize; 4]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}
