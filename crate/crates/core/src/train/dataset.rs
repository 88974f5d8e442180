use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// Header-less `u8` tensor of `count x C x H x W`.
    RawU8,
    /// Same layout; pixels are binarized on the way in.
    Binarized,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "raw_u8" | "raw_u8_tensor" => Ok(DatasetFormat::RawU8),
            "binarized" | "binary" => Ok(DatasetFormat::Binarized),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarization {
    /// Each pixel drawn from `Bernoulli(gray)` afresh every time it is seen.
    Dynamic,
    /// `gray >= 0.5`.
    Threshold,
}

impl FromStr for Binarization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Binarization::Dynamic),
            "threshold" => Ok(Binarization::Threshold),
            other => Err(Error::Config(format!("unknown binarization `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub path: PathBuf,
    pub format: DatasetFormat,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Training images; 0 takes everything not reserved for validation.
    pub train: usize,
    pub valid: usize,
    pub shuffle_seed: u64,
}

/// Images held as bytes in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    format: DatasetFormat,
    shape: Shape4,
    bytes: Vec<u8>,
}

impl Dataset {
    pub fn from_bytes(
        bytes: Vec<u8>,
        format: DatasetFormat,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<Self> {
        let item = c * h * w;
        if item == 0 {
            return Err(Error::Dataset("image dims must be positive".into()));
        }
        if !bytes.len().is_multiple_of(item) {
            return Err(Error::Dataset(format!(
                "{} bytes is not a whole number of {c}x{h}x{w} images ({item} bytes each)",
                bytes.len()
            )));
        }
        Ok(Dataset {
            format,
            shape: Shape4::new(bytes.len() / item, c, h, w),
            bytes,
        })
    }

    pub fn len(&self) -> usize {
        self.shape.n
    }

    pub fn is_empty(&self) -> bool {
        self.shape.n == 0
    }

    pub fn format(&self) -> DatasetFormat {
        self.format
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.shape.c, self.shape.h, self.shape.w)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let item = self.shape.item();
        &self.bytes[i * item..(i + 1) * item]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut bytes = Vec::with_capacity(idx.len() * self.shape.item());
        for &i in idx {
            bytes.extend_from_slice(self.image_bytes(i));
        }
        Dataset {
            format: self.format,
            shape: self.shape.with_n(idx.len()),
            bytes,
        }
    }

    /// First `n` images and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    /// Images `idx` scaled by `1/255`.
    pub fn batch<R: Real>(&self, idx: &[usize], step: f64) -> ImageBatch<R> {
        let sub = self.subset(idx);
        let s = sub.shape;
        ImageBatch::from_u8(&sub.bytes, s.n, s.c, s.h, s.w, step)
            .expect("subset sizes are consistent")
    }

    pub fn all<R: Real>(&self, step: f64) -> ImageBatch<R> {
        self.batch(&(0..self.len()).collect::<Vec<_>>(), step)
    }

    /// Visiting order for `epoch`; a function of `(seed, epoch)` only.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        idx.shuffle(&mut rng);
        idx
    }

    /// Shuffled minibatches of one epoch; the last may be short.
    pub fn batches<R: Real>(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        step: f64,
    ) -> Vec<ImageBatch<R>> {
        self.epoch_order(seed, epoch)
            .chunks(batch_size.max(1))
            .map(|c| self.batch(c, step))
            .collect()
    }

    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, &self.bytes).map_err(|e| Error::io(path, e))
    }

    /// Per-pixel mean intensity in `[0, 1]`, i.e. the probability of an
    /// "on" pixel under dynamic binarization.
    pub fn pixel_means(&self) -> Vec<f64> {
        let item = self.shape.item();
        let mut acc = vec![0.0; item];
        for i in 0..self.len() {
            for (a, &b) in acc.iter_mut().zip(self.image_bytes(i)) {
                *a += b as f64 / 255.0;
            }
        }
        let n = self.len().max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Binarizes every image once with a fixed seed, so evaluation sees the
    /// same pixels every time.
    pub fn binarized_copy(&self, mode: Binarization, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes = self
            .bytes
            .iter()
            .map(|&b| {
                let on = match mode {
                    Binarization::Threshold => b >= 128,
                    Binarization::Dynamic => rng.gen::<f64>() < b as f64 / 255.0,
                };
                if on {
                    255
                } else {
                    0
                }
            })
            .collect();
        Dataset {
            format: DatasetFormat::Binarized,
            shape: self.shape,
            bytes,
        }
    }
}

/// Reads a raw tensor file, shuffles it with the spec's seed and splits it
/// into `(train, valid)`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let bytes = std::fs::read(&spec.path).map_err(|e| Error::io(&spec.path, e))?;
    let item = spec.channels * spec.height * spec.width;
    if item == 0 {
        return Err(Error::Dataset("image dims must be positive".into()));
    }
    let wanted = spec.train + spec.valid;
    if wanted > 0 && spec.train > 0 && bytes.len() < wanted * item {
        return Err(Error::Dataset(format!(
            "{}: need {} bytes for {wanted} images of {item} bytes, file has {}",
            spec.path.display(),
            wanted * item,
            bytes.len()
        )));
    }
    if bytes.len() % item != 0 {
        return Err(Error::Dataset(format!(
            "{}: length {} is not a multiple of the image size {item} (truncated file?)",
            spec.path.display(),
            bytes.len()
        )));
    }
    let all = Dataset::from_bytes(bytes, spec.format, spec.channels, spec.height, spec.width)?;
    if spec.valid > all.len() {
        return Err(Error::Dataset(format!(
            "{}: {} validation images requested, file holds {}",
            spec.path.display(),
            spec.valid,
            all.len()
        )));
    }
    let order = all.epoch_order(spec.shuffle_seed, u64::MAX);
    let shuffled = all.subset(&order);
    let (valid, rest) = shuffled.split_at(spec.valid);
    let train = if spec.train == 0 {
        rest
    } else {
        rest.split_at(spec.train).0
    };
    Ok((train, valid))
}

/// Binarizes a `[0, 1]` batch.
pub fn binarize<R: Real>(
    x: &ImageBatch<R>,
    mode: Binarization,
    rng: &mut impl Rng,
) -> ImageBatch<R> {
    let half = R::of(0.5);
    let data =
        x.x.data()
            .iter()
            .map(|&v| {
                let on = match mode {
                    Binarization::Threshold => v >= half,
                    Binarization::Dynamic => rng.gen::<f64>() < v.as_f64(),
                };
                if on {
                    R::one()
                } else {
                    R::zero()
                }
            })
            .collect();
    ImageBatch::new(Tensor4::new(x.x.shape(), data).expect("finite"), x.step)
}

/// `x + U(-s/2, s/2)` elementwise.
pub fn dequantize<R: Real>(x: &ImageBatch<R>, s: f64, seed: u64) -> ImageBatch<R> {
    if s == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data =
        x.x.data()
            .iter()
            .map(|&v| v + R::of(s * (rng.gen::<f64>() - 0.5)))
            .collect();
    ImageBatch::new(Tensor4::new(x.x.shape(), data).expect("finite"), s)
}

/// Validation cost in nats per image of the factorized Bernoulli model whose
/// pixel probabilities are the (add-one smoothed) training frequencies.
pub fn marginal_bernoulli_baseline(train: &Dataset, valid: &Dataset) -> f64 {
    let n = train.len() as f64;
    let p: Vec<f64> = train
        .pixel_means()
        .iter()
        .map(|&m| (m * n + 1.0) / (n + 2.0))
        .collect();
    let mut total = 0.0;
    for i in 0..valid.len() {
        for (&b, &pi) in valid.image_bytes(i).iter().zip(&p) {
            let g = b as f64 / 255.0;
            total -= g * pi.ln() + (1.0 - g) * (1.0 - pi).ln();
        }
    }
    total / valid.len().max(1) as f64
}
