use crate::error::{Error, Result};
use crate::nn::{Real, Shape4, Tensor4};

/// A batch of images in `[0, 1]` (before dequantization noise) with the
/// spacing `step` between representable intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<R> {
    pub x: Tensor4<R>,
    pub step: f64,
}

impl<R: Real> ImageBatch<R> {
    pub fn new(x: Tensor4<R>, step: f64) -> Self {
        ImageBatch { x, step }
    }

    /// Scales `u8` pixels by `1/255`; `bytes` holds `n` images of `c x h x w`.
    pub fn from_u8(
        bytes: &[u8],
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        step: f64,
    ) -> Result<Self> {
        let shape = Shape4::new(n, c, h, w);
        if bytes.len() != shape.len() {
            return Err(Error::Dataset(format!(
                "expected {} bytes for {n} images of {c}x{h}x{w}, got {}",
                shape.len(),
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| R::of(b as f64 / 255.0)).collect();
        Ok(ImageBatch {
            x: Tensor4::from_vec(shape, data),
            step,
        })
    }

    /// Pixels rounded back to `u8` after clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.x
            .data()
            .iter()
            .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.x.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> ImageBatch<R> {
        ImageBatch {
            x: self.x.batch_slice(i, 1),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_scaling_hits_unit_interval_exactly() {
        let b = ImageBatch::<f64>::from_u8(&[0, 255, 128, 1], 1, 1, 2, 2, 1.0 / 256.0).unwrap();
        assert_eq!(b.x.data()[0], 0.0);
        assert_eq!(b.x.data()[1], 1.0);
        assert_eq!(b.to_u8(), vec![0, 255, 128, 1]);
        assert!(ImageBatch::<f32>::from_u8(&[0; 3], 1, 1, 2, 2, 0.0).is_err());
    }
}
