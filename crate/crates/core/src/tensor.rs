//! Dense NCHW `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;

/// Four-dimensional `[N, C, H, W]` tensor. Scalars are `[1, 1, 1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of elements in one batch item.
    #[inline]
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Scalar value; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenates along the batch dimension.
    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of nothing");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            assert_eq!(&t.shape[1..], &[c, h, w], "stack shape");
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        Tensor {
            shape: [n, c, h, w],
            data,
        }
    }

    /// Concatenates along the channel dimension.
    pub fn concat_channels(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty(), "concat of nothing");
        let [n, _, h, w] = items[0].shape;
        let c: usize = items.iter().map(|t| t.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for t in items {
                assert!(
                    t.shape[0] == n && t.shape[2] == h && t.shape[3] == w,
                    "concat shape"
                );
                data.extend_from_slice(t.sample(b));
            }
        }
        Tensor {
            shape: [n, c, h, w],
            data,
        }
    }

    /// Channels `start..start + len` of every sample.
    pub fn channels(&self, start: usize, len: usize) -> Tensor {
        let [n, c, h, w] = self.shape;
        assert!(start + len <= c, "channel range");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let s = self.sample(b);
            data.extend_from_slice(&s[start * plane..(start + len) * plane]);
        }
        Tensor {
            shape: [n, len, h, w],
            data,
        }
    }

    /// Batch items `start..start + len`.
    pub fn batch_range(&self, start: usize, len: usize) -> Tensor {
        let sl = self.sample_len();
        let [_, c, h, w] = self.shape;
        Tensor {
            shape: [len, c, h, w],
            data: self.data[start * sl..(start + len) * sl].to_vec(),
        }
    }
}
