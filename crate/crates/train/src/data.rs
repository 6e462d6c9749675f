//! Training data: seeded synthetic class blobs and a `label,pixels...` CSV
//! reader, plus a reshuffling batch sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sparseprop::{Layout4, Tensor4};

use crate::error::{Result, TrainError};

/// Per-sample shape `C×H×W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `CxHxW`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrainError::Config(format!("input shape {s:?}: {e}")))?;
        match parts[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Self::new(c, h, w)),
            _ => Err(TrainError::Config(format!("input shape {s:?} must be CxHxW with positive extents"))),
        }
    }
}

impl std::fmt::Display for InputShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    shape: InputShape,
    classes: usize,
    images: Vec<f32>,
    labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub shape: InputShape,
    pub classes: usize,
    pub samples: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
}

impl Dataset {
    pub fn new(shape: InputShape, classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if classes == 0 || labels.is_empty() {
            return Err(TrainError::Data("dataset needs at least one class and one sample".into()));
        }
        if images.len() != labels.len() * shape.len() {
            return Err(TrainError::Data(format!(
                "{} pixels for {} samples of {shape}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TrainError::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { shape, classes, images, labels })
    }

    /// Each class is a Gaussian bump with its own center, width and
    /// per-channel amplitude; samples jitter the center by up to one pixel
    /// and add pixel noise.
    pub fn synthetic_blobs(spec: BlobSpec, seed: u64) -> Result<Self> {
        let InputShape { channels, height, width } = spec.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let protos: Vec<(f32, f32, f32, Vec<f32>)> = (0..spec.classes)
            .map(|_| {
                let cy = rng.random_range(0.0..height as f32);
                let cx = rng.random_range(0.0..width as f32);
                let sigma = rng.random_range(0.8..2.0f32) * (height.max(width) as f32 / 10.0).max(0.5);
                let amps = (0..channels).map(|_| rng.random_range(0.5..1.5f32)).collect();
                (cy, cx, sigma, amps)
            })
            .collect();
        let mut images = Vec::with_capacity(spec.samples * spec.shape.len());
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let label = i % spec.classes;
            let (cy, cx, sigma, amps) = &protos[label];
            let jy = cy + rng.random_range(-1.0..1.0f32);
            let jx = cx + rng.random_range(-1.0..1.0f32);
            for amp in amps {
                for y in 0..height {
                    for x in 0..width {
                        let d2 = (y as f32 - jy).powi(2) + (x as f32 - jx).powi(2);
                        let n: f32 = StandardNormal.sample(&mut rng);
                        images.push(amp * (-d2 / (2.0 * sigma * sigma)).exp() + spec.noise * n);
                    }
                }
            }
            labels.push(label);
        }
        Self::new(spec.shape, spec.classes, images, labels)
    }

    /// Reads headerless `label,p0,p1,...` lines. `classes = None` infers the
    /// class count from the largest label.
    pub fn from_csv(path: &Path, shape: InputShape, classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| TrainError::Data(format!("{}: {e}", path.display())))?;
            let bad = |what: &str| TrainError::Data(format!("{} line {}: {what}", path.display(), line + 1));
            if rec.len() != shape.len() + 1 {
                return Err(bad(&format!("expected {} fields, found {}", shape.len() + 1, rec.len())));
            }
            labels.push(rec[0].parse::<usize>().map_err(|_| bad("label is not a non-negative integer"))?);
            for f in rec.iter().skip(1) {
                images.push(f.parse::<f32>().map_err(|_| bad(&format!("pixel {f:?} is not a number")))?);
            }
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(shape, classes, images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> InputShape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers samples into a `(B, C, H, W)` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor4, Vec<usize>) {
        let s = self.shape.len();
        let mut data = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            data.extend_from_slice(&self.images[i * s..(i + 1) * s]);
        }
        let dims = [idx.len(), self.shape.channels, self.shape.height, self.shape.width];
        let t = Tensor4::from_vec(dims, Layout4::Bicmn, data).expect("batch length matches dims");
        (t, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Walks a shuffled permutation of the dataset, reshuffling when exhausted.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    proptest! {
        #[test]
        fn sampler_visits_each_index_once_per_pass(len in 1usize..50, size in 1usize..20, seed in any::<u64>()) {
            let mut s = BatchSampler::new(len, seed);
            let mut seen = Vec::new();
            while seen.len() < 3 * len {
                let batch = s.next_batch(size);
                prop_assert_eq!(batch.len(), size);
                seen.extend(batch);
            }
            for pass in seen.chunks_exact(len).take(3) {
                let mut p = pass.to_vec();
                p.sort_unstable();
                prop_assert_eq!(p, (0..len).collect::<Vec<_>>());
            }
        }
    }

    fn spec() -> BlobSpec {
        BlobSpec { shape: InputShape::new(2, 6, 5), classes: 3, samples: 30, noise: 0.1 }
    }

    #[test]
    fn blobs_are_seeded() {
        let a = Dataset::synthetic_blobs(spec(), 7).unwrap();
        assert_eq!(a, Dataset::synthetic_blobs(spec(), 7).unwrap());
        assert_ne!(a, Dataset::synthetic_blobs(spec(), 8).unwrap());
        assert_eq!(a.len(), 30);
        assert_eq!(a.labels().iter().filter(|&&l| l == 2).count(), 10);
    }

    #[test]
    fn batch_gathers_samples() {
        let d = Dataset::synthetic_blobs(spec(), 1).unwrap();
        let (t, labels) = d.batch(&[4, 1]);
        assert_eq!(t.dims(), [2, 2, 6, 5]);
        assert_eq!(labels, vec![d.labels()[4], d.labels()[1]]);
        assert_eq!(&t.data()[..60], &d.images[4 * 60..5 * 60]);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next_batch(25).len(), 25);
    }

    #[test]
    fn csv_round() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1, 0.5, 1.5").unwrap();
        writeln!(f, "0,2,3").unwrap();
        let d = Dataset::from_csv(f.path(), InputShape::new(1, 1, 2), None).unwrap();
        assert_eq!(d.classes(), 2);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.batch(&[0]).0.data(), &[0.5, 1.5]);
        assert!(Dataset::from_csv(f.path(), InputShape::new(1, 1, 3), None).is_err());
        assert!(Dataset::from_csv(f.path(), InputShape::new(1, 1, 2), Some(1)).is_err());
        assert!(Dataset::from_csv(Path::new("/nonexistent/x.csv"), InputShape::new(1, 1, 2), None).is_err());
    }

    #[test]
    fn shape_parsing() {
        assert_eq!(InputShape::parse("3x8x9").unwrap(), InputShape::new(3, 8, 9));
        assert!(InputShape::parse("3x8").is_err());
        assert!(InputShape::parse("0x8x8").is_err());
        assert_eq!(InputShape::new(1, 2, 3).to_string(), "1x2x3");
    }
}
