use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelGrid};

/// Random scale, crop and horizontal flip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub scale_range: [f64; 2],
    pub crop_size: usize,
    pub hflip_prob: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { scale_range: [0.5, 2.0], crop_size: 473, hflip_prob: 0.5 }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("scale range {:?}", self.scale_range)));
        }
        if self.crop_size < 8 {
            return Err(Error::Config(format!("crop size {} below one output cell", self.crop_size)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("flip probability {}", self.hflip_prob)));
        }
        Ok(())
    }
}

/// One concrete draw of the augmentation parameters.
///
/// Along each axis the crop window starts at `offset` in scaled-image
/// coordinates. When the scaled image is larger than the crop, `offset` is
/// uniform in `[0, scaled - crop]`; when it is smaller, uniform in
/// `[scaled - crop, 0]`, which places the content at a random position inside a
/// background-padded canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub offset_x: isize,
    pub offset_y: isize,
    pub flip: bool,
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

pub fn draw_augment(width: usize, height: usize, params: &AugmentParams, rng: &mut impl Rng) -> AugmentDraw {
    let [lo, hi] = params.scale_range;
    let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let crop = params.crop_size as isize;
    let mut offset = |len: usize| {
        let slack = scaled_len(len, scale) as isize - crop;
        let (a, b) = if slack >= 0 { (0, slack) } else { (slack, 0) };
        if a == b {
            a
        } else {
            rng.gen_range(a..=b)
        }
    };
    let offset_x = offset(width);
    let offset_y = offset(height);
    let flip = params.hflip_prob > 0.0 && rng.gen_bool(params.hflip_prob);
    AugmentDraw { scale, offset_x, offset_y, flip }
}

/// Apply a draw: bilinear image / nearest label scaling, crop with zero /
/// background padding, then a joint flip with leaf swap pairs remapped.
pub fn apply_augment(sample: &Sample, draw: &AugmentDraw, crop: usize, graph: &Hierarchy) -> Sample {
    let (sw, sh) = (scaled_len(sample.image.width, draw.scale), scaled_len(sample.image.height, draw.scale));
    let img = sample.image.resize(sw, sh);
    let lab = sample.leaf_labels.resize_nearest(sw, sh);
    let mut out_img = RgbImage::new(crop, crop);
    let mut out_lab = LabelGrid::new(crop, crop);
    for y in 0..crop {
        let sy = y as isize + draw.offset_y;
        if sy < 0 || sy >= sh as isize {
            continue;
        }
        for x in 0..crop {
            let sx = x as isize + draw.offset_x;
            if sx < 0 || sx >= sw as isize {
                continue;
            }
            let (sx, sy) = (sx as usize, sy as usize);
            for c in 0..3 {
                out_img.set(c, x, y, img.get(c, sx, sy));
            }
            out_lab.set(x, y, lab.get(sx, sy));
        }
    }
    if draw.flip {
        out_img = out_img.flip_horizontal();
        out_lab = out_lab.flip_horizontal();
        if graph.has_swaps() {
            for v in &mut out_lab.data {
                *v = graph.flip_class(*v);
            }
        }
    }
    Sample { image: out_img, leaf_labels: out_lab, id: sample.id.clone() }
}

pub fn augment(sample: &Sample, params: &AugmentParams, graph: &Hierarchy, rng: &mut impl Rng) -> Sample {
    let draw = draw_augment(sample.image.width, sample.image.height, params, rng);
    apply_augment(sample, &draw, params.crop_size, graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_rng;

    fn pattern(w: usize, h: usize) -> Sample {
        let mut img = RgbImage::new(w, h);
        let mut lab = LabelGrid::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(0, x, y, x as f32 / w as f32);
                img.set(2, x, y, y as f32 / h as f32);
                lab.set(x, y, ((x / 7 + y / 5) % 7) as u8);
            }
        }
        Sample::new(img, lab, "p").unwrap()
    }

    #[test]
    fn identity_draw() {
        let g = Hierarchy::default_human();
        let s = pattern(33, 33);
        let draw = AugmentDraw { scale: 1.0, offset_x: 0, offset_y: 0, flip: false };
        assert_eq!(apply_augment(&s, &draw, 33, &g), s);
    }

    #[test]
    fn double_flip_restores_labels() {
        let g = Hierarchy::default_human();
        let s = pattern(20, 16);
        let draw = AugmentDraw { scale: 1.0, offset_x: -2, offset_y: 3, flip: true };
        let once = apply_augment(&s, &draw, 20, &g);
        let back = apply_augment(&once, &AugmentDraw { scale: 1.0, offset_x: 0, offset_y: 0, flip: true }, 20, &g);
        let plain = apply_augment(&s, &AugmentDraw { flip: false, ..draw }, 20, &g);
        assert_eq!(back.leaf_labels, plain.leaf_labels);
    }

    #[test]
    fn alphabet_preserved_under_random_draws() {
        let g = Hierarchy::default_human();
        let s = pattern(40, 30);
        let params = AugmentParams { crop_size: 32, ..Default::default() };
        let mut rng = sample_rng(1, 2);
        for _ in 0..20 {
            let a = augment(&s, &params, &g, &mut rng);
            assert_eq!((a.image.width, a.image.height), (32, 32));
            assert!(a.leaf_labels.data.iter().all(|&v| v <= 6));
        }
    }
}
