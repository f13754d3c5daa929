use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GmrError, Result};
use crate::io::{read_dataset, write_dataset, DatasetHeader};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA: &str = "gmr-synthetic-rings/1";

/// Level-set shape of the drawn rings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingShape {
    /// Euclidean distance: circles
    Circle,
    /// Chebyshev distance: axis-aligned squares
    Square,
}

/// Concentric-ring images whose class is the ring count (class `c` has
/// `c + 1` rings). The count does not change under any rotation or
/// reflection of the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDatasetSpec {
    pub size: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise_std: f64,
    /// Gaussian profile std of each ring line, in pixels
    pub ring_width: f64,
    pub shape: RingShape,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            size: 48,
            classes: 4,
            train_per_class: 500,
            test_per_class: 200,
            noise_std: 0.05,
            ring_width: 0.6,
            shape: RingShape::Square,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, 1, size, size)`
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub classes: usize,
}

impl SyntheticDatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.size < 16 || self.classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(GmrError::InvalidArgument(format!("degenerate dataset spec {self:?}")));
        }
        if !(self.ring_width > 0.0 && self.ring_width.is_finite()) {
            return Err(GmrError::InvalidArgument("ring width must be finite and positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(GmrError::InvalidArgument("noise std must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn render(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = self.size as f64;
        let half = s / 2.0;
        let rings = class + 1;
        let center = (half - 0.5 + rng.gen_range(-2.0..2.0), half - 0.5 + rng.gen_range(-2.0..2.0));
        // keep the outermost ring inside the frame under any rotation
        let outer = rng.gen_range(0.5..0.62) * (half - 2.0);
        let phase = rng.gen_range(0.0..0.3);
        let amplitude = rng.gen_range(0.7..1.3);
        let width = self.ring_width;
        let radii: Vec<f64> = (1..=rings).map(|j| outer * (j as f64 - phase) / rings as f64).collect();
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        (0..self.size * self.size)
            .map(|p| {
                let (dy, dx) = ((p / self.size) as f64 - center.0, (p % self.size) as f64 - center.1);
                let d = match self.shape {
                    RingShape::Circle => (dy * dy + dx * dx).sqrt(),
                    RingShape::Square => dy.abs().max(dx.abs()),
                };
                let v: f64 = radii.iter().map(|r| (-(d - r).powi(2) / (2.0 * width * width)).exp()).sum();
                let n = if self.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                amplitude * v + n
            })
            .collect()
    }

    fn generate(&self, per_class: usize, stream: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let count = per_class * self.classes;
        let mut images = Vec::with_capacity(count * self.size * self.size);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let class = i % self.classes;
            images.extend(self.render(class, &mut rng));
            labels.push(class as u32);
        }
        Dataset {
            images: Tensor::new(&[count, 1, self.size, self.size], images).expect("consistent extents"),
            labels,
            classes: self.classes,
        }
    }

    /// `(train, test)` splits drawn from independent streams.
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        Ok((self.generate(self.train_per_class, 1), self.generate(self.test_per_class, 2)))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Stacks the selected samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u32>) {
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = vec![indices.len()];
        shape.extend(self.image_shape());
        (Tensor::new(&shape, data).expect("consistent extents"), indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn write<W: Write>(&self, w: &mut W, meta: serde_json::Value) -> Result<()> {
        let s = self.image_shape();
        let header = DatasetHeader {
            schema: DATASET_SCHEMA.into(),
            count: self.len(),
            channels: s[0],
            height: s[1],
            width: s[2],
            classes: self.classes,
            meta,
        };
        write_dataset(w, &header, self.images.data(), &self.labels)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<(Self, serde_json::Value)> {
        let (h, images, labels) = read_dataset(r)?;
        let images = Tensor::new(&[h.count, h.channels, h.height, h.width], images)?;
        Ok((Self { images, labels, classes: h.classes }, h.meta))
    }
}
