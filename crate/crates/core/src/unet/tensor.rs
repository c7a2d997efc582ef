use crate::error::{Error, Result};
use crate::raster::Planes;

/// A dense B×C×H×W batch of f32 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = batch * channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for a {batch}x{channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
            data: vec![0.0; batch * channels * height * width],
        }
    }

    /// Stacks equally shaped planes into a batch.
    pub fn from_planes<'a>(planes: impl IntoIterator<Item = &'a Planes>) -> Result<Self> {
        let mut iter = planes.into_iter().peekable();
        let first = iter
            .peek()
            .ok_or_else(|| Error::Shape("cannot batch zero samples".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::new();
        let mut batch = 0;
        for p in iter {
            if (p.channels, p.height, p.width) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "sample {batch} is {}x{}x{}, expected {c}x{h}x{w}",
                    p.channels, p.height, p.width
                )));
            }
            data.extend_from_slice(&p.data);
            batch += 1;
        }
        Self::new(batch, c, h, w, data)
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.plane_len()
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn sample_planes(&self, n: usize) -> Planes {
        Planes {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.sample(n).to_vec(),
        }
    }

    /// Channel concatenation `[a, b]` per sample.
    pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.batch, a.height, a.width), (b.batch, b.height, b.width));
        let mut out = Tensor::zeros(a.batch, a.channels + b.channels, a.height, a.width);
        let (sa, sb) = (a.sample_len(), b.sample_len());
        for n in 0..a.batch {
            let dst = out.sample_mut(n);
            dst[..sa].copy_from_slice(a.sample(n));
            dst[sa..sa + sb].copy_from_slice(b.sample(n));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub(crate) fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let second = self.channels - first;
        let mut a = Tensor::zeros(self.batch, first, self.height, self.width);
        let mut b = Tensor::zeros(self.batch, second, self.height, self.width);
        let sa = a.sample_len();
        for n in 0..self.batch {
            let src = self.sample(n);
            a.sample_mut(n).copy_from_slice(&src[..sa]);
            b.sample_mut(n).copy_from_slice(&src[sa..]);
        }
        (a, b)
    }
}
