//! Samples, dataset directories, augmentation, and the synthetic figure generator.
//!
//! On-disk layout of a dataset directory:
//!
//! ```text
//! <root>/list.txt          one sample id per line
//! <root>/images/<id>.png   8-bit RGB (RGBA and grey are accepted)
//! <root>/labels/<id>.png   palette-indexed or 8-bit grey class ids
//! <root>/manifest.toml     class id -> name table, optional hierarchy file name
//! ```

mod augment;
mod io;
mod synth;

pub use augment::{apply_augment, augment, draw_augment, AugmentDraw, AugmentParams};
pub use io::{
    dataset_hierarchy, load_dataset, load_sample, read_label_png, read_rgb_png, write_dataset, write_indexed_png, write_rgb_png,
    Manifest, ManifestClass,
};
pub use synth::{generate_synthetic, generate_with, sample_rng, SynthParams};

use crate::error::{Error, Result};
use crate::hierarchy::LabelGrid;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `[3, height, width]` row-major.
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("planar layout")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let [_, c, h, w] = t.shape();
        assert_eq!(c, 3, "rgb tensor");
        Self { width: w, height: h, data: t.sample(0).iter().map(|v| v.f64() as f32).collect() }
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        let t = crate::kernels::resize_bilinear(&self.to_tensor::<f32>(), height, width);
        Self::from_tensor(&t)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// 8-bit interleaved RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push((self.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.set(c, x, y, bytes[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        img
    }
}

/// One image with its leaf-level class-id annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub leaf_labels: LabelGrid,
    pub id: String,
}

impl Sample {
    pub fn new(image: RgbImage, leaf_labels: LabelGrid, id: impl Into<String>) -> Result<Self> {
        if (image.width, image.height) != (leaf_labels.width, leaf_labels.height) {
            return Err(Error::SizeMismatch {
                image: (image.width, image.height),
                label: (leaf_labels.width, leaf_labels.height),
            });
        }
        Ok(Self { image, leaf_labels, id: id.into() })
    }
}

/// Deterministic Fisher-Yates order of `0..len` for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut sample_rng(seed ^ 0x5eed_0fde, epoch));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_rejects_mismatched_sizes() {
        let err = Sample::new(RgbImage::new(64, 64), LabelGrid::new(64, 32), "x").unwrap_err();
        assert!(matches!(err, Error::SizeMismatch { image: (64, 64), label: (64, 32) }));
    }

    #[test]
    fn epoch_order_is_deterministic_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn rgb8_round_trip() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let img = RgbImage::from_rgb8(4, 3, &bytes);
        assert_eq!(img.to_rgb8(), bytes);
    }
}
