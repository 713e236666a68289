//! Dense tensors, the forward/backward kernels used by the network, and a
//! tape-based reverse-mode differentiation graph.
//!
//! Image data is laid out `N×C×H×W`, row-major. Kernels are single-threaded
//! and use a fixed reduction order, so identical inputs give bit-identical
//! outputs.

mod graph;
pub mod kernels;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use graph::{Gradients, Graph, Var};

/// Scalar type a tensor can hold. Implemented for `f32` (training and
/// inference) and `f64` (gradient verification).
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;

    /// `c ← alpha·a·b + beta·c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn check_span(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_element {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Element for $t {
            const PRECISION: Precision = $prec;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_span(a.len(), m, k, rsa, csa);
                check_span(b.len(), k, n, rsb, csb);
                check_span(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand span was bounds-checked above.
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_element!(f32, Precision::F32, matrixmultiply::sgemm);
impl_element!(f64, Precision::F64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Dense row-major N-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected = checked_numel(shape)?;
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                "element count",
                expected,
                data.len(),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Shape as `[N, C, H, W]`; errors for tensors of any other rank.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok([n, c, h, w]),
            other => Err(Error::shape(op, "rank", 4, other.len())),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), n));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    /// Inner product over all elements, accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            "extent",
            "positive extents",
            format!("{shape:?}"),
        ));
    }
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::ExtentOverflow(format!("shape {shape:?}")))
    })
}

/// Geometry of a 2-D (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    /// Extra rows/columns appended to a transposed convolution's output.
    pub output_padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square, bias-free, undilated convolution.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            dilation: 1,
            output_padding: 0,
            has_bias: false,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
            || self.dilation == 0
        {
            return Err(Error::Config(format!("conv spec has a zero extent: {self:?}")));
        }
        if self.output_padding >= self.stride.max(self.dilation) {
            return Err(Error::Config(format!(
                "output_padding {} must be smaller than stride or dilation",
                self.output_padding
            )));
        }
        Ok(())
    }

    /// Output extents of the forward convolution for an `h×w` input.
    pub fn conv_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_extent(h, self.kernel_h, self.stride, self.padding, self.dilation);
        let ow = conv_extent(w, self.kernel_w, self.stride, self.padding, self.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Config(format!(
                "non-positive output extent for {h}x{w} input with {self:?}"
            ))),
        }
    }

    /// Output extents of the transposed convolution for an `h×w` input.
    pub fn transpose_out(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ext = |i: usize, k: usize| -> Option<usize> {
            let full = (i - 1) * self.stride + self.dilation * (k - 1) + self.output_padding + 1;
            full.checked_sub(2 * self.padding).filter(|&v| v >= 1)
        };
        match (ext(h, self.kernel_h), ext(w, self.kernel_w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Config(format!(
                "non-positive transposed output extent for {h}x{w} input with {self:?}"
            ))),
        }
    }
}

/// `floor((n + 2p − d(k−1) − 1)/s) + 1`, or `None` when that is below 1.
pub fn conv_extent(n: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d * (k - 1) + 1;
    let padded = n + 2 * p;
    if padded < span {
        None
    } else {
        Some((padded - span) / s + 1)
    }
}
