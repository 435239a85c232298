//! Dense rank-4 tensors in NCHW layout.
//!
//! `Tensor4` is the universal value type of the engine: activations, weights
//! and gradients all use it. Data is stored row-major as `n * c * h * w`
//! scalars; the element `(n, c, y, x)` lives at flat index
//! `((n * C + c) * H + y) * W + x`. Tensors are immutable once an operation
//! has produced them; construction is single-owner.
//!
//! The scalar type is selected statically: `f32` for training and inference,
//! `f64` for gradient verification where finite-difference noise matters.

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` (deployment) or `f64` (verification).
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;
    /// Dtype tag used by the weights-file format (0 = f32, 1 = f64).
    const DTYPE_TAG: u8;
    /// Size in bytes of one little-endian encoded scalar.
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INFINITY: Self = f32::NEG_INFINITY;
    const DTYPE_TAG: u8 = 0;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NEG_INFINITY: Self = f64::NEG_INFINITY;
    const DTYPE_TAG: u8 = 1;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

/// Shape of a rank-4 tensor: `(batch, channels, rows, cols)`.
pub type Shape4 = (usize, usize, usize, usize);

/// Elementwise unary kinds used by [`map_unary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Relu6,
    Copy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<S: Scalar> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<S>,
}

fn checked_len(shape: Shape4) -> Result<usize> {
    let (n, c, h, w) = shape;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidShape(format!(
            "dimensions must all be >= 1, got {n}x{c}x{h}x{w}"
        )));
    }
    n.checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::InvalidShape(format!("element count overflows: {n}x{c}x{h}x{w}")))
}

impl<S: Scalar> Tensor4<S> {
    /// Constant-fill constructor.
    pub fn filled(shape: Shape4, fill: S) -> Result<Self> {
        let len = checked_len(shape)?;
        Ok(Tensor4 { n: shape.0, c: shape.1, h: shape.2, w: shape.3, data: vec![fill; len] })
    }

    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::filled(shape, S::ZERO)
    }

    /// Per-element generator constructor; `f` receives `(n, c, y, x)`.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Result<Self> {
        let len = checked_len(shape)?;
        let (n, c, h, w) = shape;
        let mut data = Vec::with_capacity(len);
        for in_ in 0..n {
            for ic in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        data.push(f(in_, ic, iy, ix));
                    }
                }
            }
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    /// Wrap an existing NCHW-ordered buffer.
    pub fn from_vec(shape: Shape4, data: Vec<S>) -> Result<Self> {
        let len = checked_len(shape)?;
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "buffer holds {} elements, shape {:?} needs {len}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor4 { n: shape.0, c: shape.1, h: shape.2, w: shape.3, data })
    }

    pub fn shape(&self) -> Shape4 {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn flat_index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.flat_index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.flat_index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous row `(n, c, y, ..)`, the unit of work of the conv kernels.
    #[inline]
    pub fn row(&self, n: usize, c: usize, y: usize) -> &[S] {
        let start = self.flat_index(n, c, y, 0);
        &self.data[start..start + self.w]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize, c: usize, y: usize) -> &mut [S] {
        let start = self.flat_index(n, c, y, 0);
        let w = self.w;
        &mut self.data[start..start + w]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the batch dimension.
    pub fn stack_batches(parts: &[Tensor4<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero tensors".into()))?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::new();
        let mut n_total = 0;
        for p in parts {
            if p.channels() != c || p.height() != h || p.width() != w {
                return Err(Error::ShapeMismatch(format!(
                    "stack_batches: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            n_total += p.batch();
            data.extend_from_slice(p.data());
        }
        Tensor4::from_vec((n_total, c, h, w), data)
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor4<T> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor4<f64> {
        self.map(|v| v.to_f64())
    }
}

/// `out[i] = alpha * x[i] + beta * y[i]`, the elementwise core of the
/// learnable weighted sum that fuses adjacent pyramid levels.
pub fn axpy<S: Scalar>(alpha: S, x: &Tensor4<S>, beta: S, y: &Tensor4<S>) -> Result<Tensor4<S>> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "axpy: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| alpha * a + beta * b)
        .collect();
    Tensor4::from_vec(x.shape(), data)
}

/// Shape-preserving elementwise map: relu, relu6 or copy.
pub fn map_unary<S: Scalar>(x: &Tensor4<S>, kind: UnaryKind) -> Tensor4<S> {
    let six = S::from_f64(6.0);
    let f = |v: S| match kind {
        UnaryKind::Relu => {
            if v > S::ZERO {
                v
            } else {
                S::ZERO
            }
        }
        UnaryKind::Relu6 => {
            if v <= S::ZERO {
                S::ZERO
            } else if v < six {
                v
            } else {
                six
            }
        }
        UnaryKind::Copy => v,
    };
    x.map(f)
}

/// Integer label map of shape `(n, h, w)`; 255 is the conventional ignore index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(n: usize, h: usize, w: usize, v: u8) -> Self {
        LabelMap { n, h, w, data: vec![v; n * h * w] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::InvalidShape(format!(
                "label buffer holds {} values, {n}x{h}x{w} needs {}",
                data.len(),
                n * h * w
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn stack_batches(parts: &[LabelMap]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidShape("cannot stack zero label maps".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.h != h || p.w != w {
                return Err(Error::ShapeMismatch(format!(
                    "stack label maps: {}x{} vs {h}x{w}",
                    p.h, p.w
                )));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(LabelMap { n, h, w, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn filled_zero_case() {
        let t = Tensor4::<f32>::filled((1, 1, 2, 2), 0.0).unwrap();
        assert_eq!(t.shape(), (1, 1, 2, 2));
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn filled_sum_forced_by_shape() {
        let t = Tensor4::<f32>::filled((2, 3, 4, 5), 1.0).unwrap();
        assert_eq!(t.iter().sum::<f32>(), 120.0);
    }

    #[test]
    fn filled_single_element() {
        let t = Tensor4::<f64>::filled((1, 1, 1, 1), 7.5).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 7.5);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(
            Tensor4::<f32>::filled((1, 0, 2, 2), 1.0),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn overflow_shape_rejected() {
        assert!(matches!(
            Tensor4::<f32>::zeros((usize::MAX, 2, 2, 2)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn nchw_order_round_trips() {
        // Distinct values per coordinate prove the flat layout is row-major NCHW.
        let t = Tensor4::<f64>::from_fn((2, 3, 4, 5), |n, c, y, x| {
            (((n * 3 + c) * 4 + y) * 5 + x) as f64
        })
        .unwrap();
        for (i, &v) in t.data().iter().enumerate() {
            assert_eq!(v, i as f64);
        }
        assert_eq!(t.at(1, 2, 3, 4), (t.len() - 1) as f64);
    }

    #[test]
    fn axpy_direct_arithmetic() {
        let x = Tensor4::from_vec((1, 1, 1, 2), vec![1.0f64, 2.0]).unwrap();
        let y = Tensor4::from_vec((1, 1, 1, 2), vec![3.0f64, 4.0]).unwrap();
        let out = axpy(0.5, &x, 2.0, &y).unwrap();
        assert_eq!(out.data(), &[6.5, 9.0]);
    }

    #[test]
    fn axpy_cancellation() {
        let x = Tensor4::from_vec((1, 1, 2, 2), vec![1.0f32, -2.5, 3.0, 0.25]).unwrap();
        let out = axpy(-1.0, &x, 1.0, &x).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn axpy_shape_mismatch() {
        let x = Tensor4::<f32>::zeros((1, 1, 2, 2)).unwrap();
        let y = Tensor4::<f32>::zeros((1, 1, 2, 3)).unwrap();
        assert!(matches!(axpy(1.0, &x, 1.0, &y), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn relu_definition() {
        let x = Tensor4::from_vec((1, 1, 1, 3), vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(map_unary(&x, UnaryKind::Relu).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu6_definition() {
        let x = Tensor4::from_vec((1, 1, 1, 2), vec![7.0f32, 3.0]).unwrap();
        assert_eq!(map_unary(&x, UnaryKind::Relu6).data(), &[6.0, 3.0]);
    }

    #[test]
    fn copy_is_bit_identical() {
        let x = Tensor4::from_vec((1, 1, 1, 3), vec![-0.0f32, 1.5, f32::MIN_POSITIVE]).unwrap();
        let y = map_unary(&x, UnaryKind::Copy);
        for (a, b) in x.iter().zip(y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn stack_batches_concatenates() {
        let a = Tensor4::<f32>::filled((1, 2, 2, 2), 1.0).unwrap();
        let b = Tensor4::<f32>::filled((2, 2, 2, 2), 2.0).unwrap();
        let s = Tensor4::stack_batches(&[a, b]).unwrap();
        assert_eq!(s.shape(), (3, 2, 2, 2));
        assert_eq!(s.at(0, 0, 0, 0), 1.0);
        assert_eq!(s.at(2, 1, 1, 1), 2.0);
    }

    proptest! {
        #[test]
        fn axpy_identity_with_zeros(values in proptest::collection::vec(-1e3f64..1e3, 24)) {
            let x = Tensor4::from_vec((2, 3, 2, 2), values).unwrap();
            let zeros = Tensor4::zeros(x.shape()).unwrap();
            let out = axpy(1.0, &x, 1.0, &zeros).unwrap();
            prop_assert_eq!(out.data(), x.data());
        }

        #[test]
        fn map_unary_preserves_shape(
            n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5,
            kind in prop_oneof![Just(UnaryKind::Relu), Just(UnaryKind::Relu6), Just(UnaryKind::Copy)]
        ) {
            let x = Tensor4::<f32>::from_fn((n, c, h, w), |a, b, y, z| (a + b + y + z) as f32 - 3.0).unwrap();
            prop_assert_eq!(map_unary(&x, kind).shape(), x.shape());
        }

        #[test]
        fn relu6_bounded(values in proptest::collection::vec(-1e6f32..1e6, 8)) {
            let x = Tensor4::from_vec((1, 2, 2, 2), values).unwrap();
            let y = map_unary(&x, UnaryKind::Relu6);
            prop_assert!(y.iter().all(|&v| (0.0..=6.0).contains(&v)));
        }
    }
}
