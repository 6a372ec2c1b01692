//! Dense rank-4 activations laid out sample-major as (B, C, H, W), plus the
//! per-channel reductions every normalizer is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { batch, channels, height, width }
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    /// Number of spatial positions per (sample, channel) slice.
    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }

    /// Elements per sample.
    pub const fn sample_len(&self) -> usize {
        self.channels * self.spatial()
    }

    pub const fn len(&self) -> usize {
        self.batch * self.sample_len()
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::EmptyDimension(self.dims()));
        }
        Ok(())
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

/// Per-channel mean and biased variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `sqrt(var + eps)` per channel.
    pub fn std(&self, eps: T) -> Vec<T> {
        self.var.iter().map(|&v| (v + eps).sqrt()).collect()
    }
}

/// Spatial mean and biased variance of every (sample, channel) slice, stored B×C row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleChannelStats<T> {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> PerSampleChannelStats<T> {
    pub fn mean_at(&self, b: usize, c: usize) -> T {
        self.mean[b * self.channels + c]
    }

    pub fn var_at(&self, b: usize, c: usize) -> T {
        self.var[b * self.channels + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    /// Wraps `data`, rejecting empty dimensions, length mismatches and non-finite values.
    pub fn new(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch { shape: shape.dims(), len: data.len(), expected: shape.len() });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: impl Into<Shape4>, value: T) -> Result<Self> {
        let shape = shape.into();
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for h in 0..shape.height {
                    for w in 0..shape.width {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self::new(shape, data)
    }

    /// Builds a tensor from an op's output buffer. Callers guarantee the length;
    /// finiteness follows from finite inputs.
    pub(crate) fn from_raw(shape: Shape4, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.batch
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + h) * self.shape.width + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, c, h, w)]
    }

    /// All elements of sample `b`, channel-major.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.shape.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// The H·W spatial slice of (sample `b`, channel `c`).
    #[inline]
    pub fn slice(&self, b: usize, c: usize) -> &[T] {
        let s = self.shape.spatial();
        let start = (b * self.shape.channels + c) * s;
        &self.data[start..start + s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Applies `f(value, sample, channel)` to every element.
    pub fn map_indexed(&self, f: impl Fn(T, usize, usize) -> T) -> Self {
        let s = self.shape.spatial();
        let c_count = self.shape.channels;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let bc = i / s;
                f(x, bc / c_count, bc % c_count)
            })
            .collect();
        Self::from_raw(self.shape, data)
    }

    /// Copies the listed samples (duplicates allowed) into a new batch.
    pub fn gather_samples(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptySelection);
        }
        let n = self.shape.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.shape.batch {
                return Err(Error::IndexOutOfRange { index: i, batch: self.shape.batch });
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Self::from_raw(self.shape.with_batch(indices.len()), data))
    }

    /// Per-channel statistics over the listed samples and every spatial position.
    pub fn stats_over<I>(&self, samples: I) -> ChannelStats<T>
    where
        I: IntoIterator<Item = usize> + Clone,
    {
        let channels = self.shape.channels;
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        let mut count = 0usize;
        let s = self.shape.spatial();
        for b in samples.clone() {
            count += 1;
            if s == 1 {
                for (m, &x) in mean.iter_mut().zip(self.sample(b)) {
                    *m += x;
                }
            } else {
                for (m, chunk) in mean.iter_mut().zip(self.sample(b).chunks_exact(s)) {
                    *m += chunk.iter().copied().sum::<T>();
                }
            }
        }
        let n = T::of_usize(count * s);
        for m in &mut mean {
            *m /= n;
        }
        for b in samples {
            if s == 1 {
                for ((v, &mu), &x) in var.iter_mut().zip(&mean).zip(self.sample(b)) {
                    *v += (x - mu) * (x - mu);
                }
            } else {
                for ((v, &mu), chunk) in var.iter_mut().zip(&mean).zip(self.sample(b).chunks_exact(s)) {
                    *v += chunk.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>();
                }
            }
        }
        for v in &mut var {
            *v /= n;
        }
        ChannelStats { mean, var }
    }

    /// Per-channel mean and biased variance over (sample, height, width).
    pub fn channel_stats(&self) -> ChannelStats<T> {
        self.stats_over(0..self.shape.batch)
    }

    /// Mean and biased variance of each (sample, channel) slice over (height, width).
    pub fn spatial_stats(&self) -> PerSampleChannelStats<T> {
        let Shape4 { batch, channels, .. } = self.shape;
        let n = T::of_usize(self.shape.spatial());
        let mut mean = Vec::with_capacity(batch * channels);
        let mut var = Vec::with_capacity(batch * channels);
        for b in 0..batch {
            for c in 0..channels {
                let slice = self.slice(b, c);
                let mu = slice.iter().copied().sum::<T>() / n;
                let v = slice.iter().map(|&x| (x - mu) * (x - mu)).sum::<T>() / n;
                mean.push(mu);
                var.push(v);
            }
        }
        PerSampleChannelStats { batch, channels, mean, var }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    /// Largest elementwise absolute difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs()))
    }
}
