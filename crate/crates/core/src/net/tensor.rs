use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense `N x C x H x W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::ZERO; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::invalid(format!(
                "tensor data has {} elements, shape ({n}, {c}, {h}, {w}) needs {}",
                data.len(),
                n * c * h * w
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[T] {
        let s = self.item_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.item_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    /// Repeats the batch `times` times: item `i` of the result is item
    /// `i % n` of `self`.
    pub fn tile_batch(&self, times: usize) -> Self {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self {
            n: self.n * times,
            data,
            ..*self
        }
    }

    /// Adjoint of [`Tensor::tile_batch`]: sums the repeated copies.
    pub fn untile_batch(&self, times: usize) -> Self {
        let n = self.n / times;
        let len = n * self.item_len();
        let mut out = self.data[..len].to_vec();
        for t in 1..times {
            for (o, v) in out.iter_mut().zip(&self.data[t * len..(t + 1) * len]) {
                *o += *v;
            }
        }
        Self {
            n,
            data: out,
            ..*self
        }
    }

    /// Channel-wise concatenation of equally sized tensors.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Self {
        let first = parts[0];
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(first.n * c * first.plane());
        for i in 0..first.n {
            for p in parts {
                debug_assert_eq!((p.n, p.h, p.w), (first.n, first.h, first.w));
                data.extend_from_slice(p.item(i));
            }
        }
        Self {
            n: first.n,
            c,
            h: first.h,
            w: first.w,
            data,
        }
    }

    /// Splits along channels into tensors of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Vec<Self> {
        let mut out: Vec<Self> = counts
            .iter()
            .map(|&c| Self::zeros(self.n, c, self.h, self.w))
            .collect();
        let plane = self.plane();
        for i in 0..self.n {
            let item = self.item(i);
            let mut off = 0;
            for (o, &c) in out.iter_mut().zip(counts) {
                o.item_mut(i).copy_from_slice(&item[off..off + c * plane]);
                off += c * plane;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
