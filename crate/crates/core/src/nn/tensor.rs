use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Shape of a batch of feature maps: `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub const fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn with_n(self, n: usize) -> Self {
        Shape4 { n, ..self }
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape4 { c, ..self }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense `n x c x h x w` tensor, row-major within each channel plane.
#[derive(Clone, PartialEq)]
pub struct Tensor4<R> {
    shape: Shape4,
    data: Vec<R>,
}

impl<R: fmt::Debug> fmt::Debug for Tensor4<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor4({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl<R: Real> Tensor4<R> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn new(shape: Shape4, data: Vec<R>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor4::new",
                format!("{} elements for {shape}", shape.len()),
                data.len(),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Tensor4::new element {i}")));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Internal constructor for computed values; finiteness is checked at the
    /// model boundary instead of on every intermediate.
    pub(crate) fn from_vec(shape: Shape4, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Tensor4 { shape, data }
    }

    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![R::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape4, value: R) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn randn(shape: Shape4, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| R::of(StandardNormal.sample(rng)))
            .collect();
        Tensor4 { shape, data }
    }

    pub fn uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| R::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> R {
        self.data[self.index(n, c, y, x)]
    }

    pub fn item(&self, n: usize) -> &[R] {
        let sz = self.shape.item();
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(R, R) -> R) -> Result<Self> {
        self.expect_shape("zip_map", other.shape)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> R {
        self.data.iter().copied().sum()
    }

    /// Sum per batch item, accumulated in `f64`.
    pub fn sum_per_item(&self) -> Vec<f64> {
        let sz = self.shape.item();
        (0..self.shape.n)
            .map(|n| {
                self.data[n * sz..(n + 1) * sz]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum()
            })
            .collect()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.expect_shape("dot", other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().fold(R::zero(), |m, v| m.max(v.abs()))
    }

    pub fn expect_shape(&self, op: &'static str, want: Shape4) -> Result<()> {
        if self.shape != want {
            return Err(Error::shape(op, want, self.shape));
        }
        Ok(())
    }

    /// Channel range `[start, start + len)` of every batch item.
    pub fn channels(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape.c);
        let s = self.shape;
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor4 {
            shape: s.with_c(len),
            data,
        }
    }

    /// Channelwise concatenation; all parts must agree on `n`, `h`, `w`.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_channels of zero tensors".into()))?
            .shape;
        let mut c = 0;
        for p in parts {
            let s = p.shape;
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat_channels", first.with_c(s.c), s));
            }
            c += s.c;
        }
        let shape = first.with_c(c);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.item(n));
            }
        }
        Ok(Tensor4 { shape, data })
    }

    /// Rows `range` of the batch.
    pub fn batch_slice(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape.n);
        let sz = self.shape.item();
        Tensor4 {
            shape: self.shape.with_n(len),
            data: self.data[start * sz..(start + len) * sz].to_vec(),
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor4<S> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| S::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        let s = Shape4::new(1, 1, 2, 2);
        assert!(Tensor4::<f64>::new(s, vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor4::<f64>::new(s, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor4::<f64>::new(s, vec![0.0, f64::INFINITY, 0.0, 0.0]).is_err());
        assert!(Tensor4::<f64>::new(s, vec![1.0; 4]).is_ok());
    }

    #[test]
    fn channel_slice_and_concat_are_inverse() {
        let s = Shape4::new(2, 3, 2, 2);
        let t = Tensor4::<f64>::from_fn(s, |n, c, y, x| (n * 100 + c * 10 + y * 2 + x) as f64);
        let a = t.channels(0, 1);
        let b = t.channels(1, 2);
        assert_eq!(b.at(1, 0, 1, 1), 113.0);
        let back = Tensor4::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(back, t);
    }
}
