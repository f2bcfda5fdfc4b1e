//! Confusion matrices, segmentation metrics and the multi-scale flip protocol.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::hierarchy::{derive_level_labels, Hierarchy, LabelGrid};
use crate::kernels;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `counts[label * n + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::ShapeMismatch(format!("{} predictions for {} labels", pred.len(), label.len())));
        }
        let n = self.classes;
        if let Some(&v) = pred.iter().chain(label).find(|&&v| v as usize >= n) {
            return Err(Error::AlphabetViolation { value: v as usize, alphabet: n });
        }
        for (&p, &l) in pred.iter().zip(label) {
            self.counts[l as usize * n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch(format!("{} vs {} classes", self.classes, other.classes)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Averages run over classes present in the labels.
    pub fn metrics(&self) -> Result<Metrics> {
        let n = self.classes;
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyConfusion);
        }
        let row = |c: usize| (0..n).map(|p| self.get(c, p)).sum::<u64>();
        let col = |c: usize| (0..n).map(|l| self.get(l, c)).sum::<u64>();
        let trace: u64 = (0..n).map(|c| self.get(c, c)).sum();
        let mut iou = vec![None; n];
        let mut precision = vec![None; n];
        let mut recall = vec![None; n];
        let mut f1 = vec![None; n];
        for c in 0..n {
            let (tp, r, p) = (self.get(c, c) as f64, row(c) as f64, col(c) as f64);
            if r == 0.0 {
                continue;
            }
            iou[c] = Some(tp / (r + p - tp));
            recall[c] = Some(tp / r);
            let prec = if p > 0.0 { tp / p } else { 0.0 };
            precision[c] = Some(prec);
            let rc = tp / r;
            f1[c] = Some(if prec + rc > 0.0 { 2.0 * prec * rc / (prec + rc) } else { 0.0 });
        }
        let mean = |v: &[Option<f64>]| {
            let xs: Vec<f64> = v.iter().flatten().copied().collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let fg_total: u64 = (1..n).map(row).sum();
        let fg_hit: u64 = (1..n).map(|c| self.get(c, c)).sum();
        Ok(Metrics {
            pix_acc: trace as f64 / total as f64,
            mean_acc: mean(&recall),
            miou: mean(&iou),
            fg_acc: if fg_total > 0 { fg_hit as f64 / fg_total as f64 } else { f64::NAN },
            precision: mean(&precision),
            recall: mean(&recall),
            f1: mean(&f1),
            iou,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pix_acc: f64,
    pub mean_acc: f64,
    /// `None` for classes absent from the labels.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    /// Pixel accuracy over foreground-labelled pixels.
    pub fg_acc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Test-time protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Protocol {
    pub fn single() -> Self {
        Self { scales: vec![1.0], flip: false }
    }

    /// Scales 0.5 to 1.5 in steps of 0.25, each with its mirror image.
    pub fn multiscale() -> Self {
        Self { scales: vec![0.5, 0.75, 1.0, 1.25, 1.5], flip: true }
    }
}

fn level_probs_at<T: Scalar>(model: &Model<T>, image: &RgbImage, w: usize, h: usize, flip: bool) -> Result<Vec<Tensor<T>>> {
    let img = if flip { image.flip_horizontal() } else { image.clone() };
    let probs = model.predict_probs(&img.to_tensor())?;
    Ok(probs
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = kernels::resize_bilinear(&p, h, w);
            if flip {
                p = kernels::flip_horizontal(&p);
                let perm = model.graph.flip_labels(i + 1);
                let src = p.clone();
                let plane = h * w;
                for (c, &from) in perm.iter().enumerate() {
                    p.data_mut()[c * plane..(c + 1) * plane].copy_from_slice(src.channel(0, from as usize));
                }
            }
            p
        })
        .collect())
}

/// Per-level class probabilities `[1, |V^l| + 1, H, W]` averaged over scales and flips.
pub fn multiscale_flip_predict<T: Scalar>(model: &Model<T>, image: &RgbImage, protocol: &Protocol) -> Result<Vec<Tensor<T>>> {
    let (w, h) = (image.width, image.height);
    let mut acc: Option<Vec<Tensor<T>>> = None;
    let mut count = 0;
    for &s in &protocol.scales {
        let sw = ((w as f64 * s).round() as usize).max(8);
        let sh = ((h as f64 * s).round() as usize).max(8);
        let scaled = if (sw, sh) == (w, h) { image.clone() } else { image.resize(sw, sh) };
        let flips: &[bool] = if protocol.flip { &[false, true] } else { &[false] };
        for &f in flips {
            let probs = level_probs_at(model, &scaled, w, h, f)?;
            count += 1;
            match &mut acc {
                None => acc = Some(probs),
                Some(a) => a.iter_mut().zip(&probs).for_each(|(x, p)| x.add_assign(p)),
            }
        }
    }
    let acc = acc.ok_or_else(|| Error::Config("protocol without scales".into()))?;
    if count == 1 {
        return Ok(acc);
    }
    let inv = T::one() / T::of(count as f64);
    Ok(acc.into_iter().map(|t| t.map(|v| v * inv)).collect())
}

/// Argmax label grid of a `[1, C, H, W]` probability field.
pub fn argmax_grid<T: Scalar>(probs: &Tensor<T>) -> LabelGrid {
    let [_, _, h, w] = probs.shape();
    let data = kernels::argmax_channels(probs).remove(0).into_iter().map(|c| c as u8).collect();
    LabelGrid { width: w, height: h, data }
}

/// Resolution at which predictions are scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalResolution {
    /// Probabilities upsampled to the image size.
    #[default]
    Input,
    /// The model's output grid, labels downsampled with nearest neighbour.
    Feature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub resolution: EvalResolution,
    /// Levels to report, all when empty.
    pub levels: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { protocol: Protocol::single(), resolution: EvalResolution::Input, levels: Vec::new() }
    }
}

/// Per-level predictions of one image at the requested resolution.
pub fn predict_levels<T: Scalar>(model: &Model<T>, image: &RgbImage, opts: &EvalOptions) -> Result<Vec<LabelGrid>> {
    match opts.resolution {
        EvalResolution::Input => {
            Ok(multiscale_flip_predict(model, image, &opts.protocol)?.iter().map(argmax_grid).collect())
        }
        EvalResolution::Feature => Ok(model.predict_probs(&image.to_tensor())?.iter().map(argmax_grid).collect()),
    }
}

/// Fraction of pixels whose level-`l` prediction is a child of the level-`l+1`
/// prediction, pooled over all adjacent level pairs.
pub fn consistency_counts(preds: &[LabelGrid], graph: &Hierarchy) -> (u64, u64) {
    let mut hit = 0;
    let mut total = 0;
    for l in 1..preds.len() {
        for (&a, &b) in preds[l - 1].data.iter().zip(&preds[l].data) {
            total += 1;
            hit += u64::from(graph.parent_label(l, a) == b);
        }
    }
    (hit, total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub levels: Vec<LevelReport>,
    pub consistency: f64,
    pub images: usize,
}

impl EvalReport {
    pub fn level(&self, l: usize) -> Option<&LevelReport> {
        self.levels.iter().find(|r| r.level == l)
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}\n",
            "level", "pixAcc", "meanAcc", "mIoU", "fgAcc", "prec", "recall", "F1"
        );
        for r in &self.levels {
            let m = &r.metrics;
            s += &format!(
                "{:<6} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}\n",
                r.level, m.pix_acc, m.mean_acc, m.miou, m.fg_acc, m.precision, m.recall, m.f1
            );
        }
        s += &format!("hierarchy consistency {:.4} over {} images\n", self.consistency, self.images);
        s
    }
}

/// Evaluate every sample; images are processed in parallel and merged in order.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[Sample], opts: &EvalOptions) -> Result<EvalReport> {
    let graph = &model.graph;
    let levels: Vec<usize> = if opts.levels.is_empty() { (1..=graph.num_levels()).collect() } else { opts.levels.clone() };
    if let Some(&bad) = levels.iter().find(|&&l| l == 0 || l > graph.num_levels()) {
        return Err(Error::Config(format!("level {bad} outside 1..={}", graph.num_levels())));
    }
    let per_image: Vec<Result<(Vec<ConfusionMatrix>, (u64, u64))>> = samples
        .par_iter()
        .map(|s| {
            let preds = predict_levels(model, &s.image, opts)?;
            let truth = derive_level_labels(&s.leaf_labels, graph)?;
            let mut confs = Vec::new();
            for &l in &levels {
                let p = &preds[l - 1];
                let t = truth.level(l).resize_nearest(p.width, p.height);
                let mut c = ConfusionMatrix::new(graph.level(l).len() + 1);
                c.accumulate(&p.data, &t.data)?;
                confs.push(c);
            }
            Ok((confs, consistency_counts(&preds, graph)))
        })
        .collect();
    let mut merged: Vec<ConfusionMatrix> = levels.iter().map(|&l| ConfusionMatrix::new(graph.level(l).len() + 1)).collect();
    let (mut hit, mut total) = (0, 0);
    for r in per_image {
        let (confs, (h, t)) = r?;
        for (m, c) in merged.iter_mut().zip(&confs) {
            m.merge(c)?;
        }
        hit += h;
        total += t;
    }
    let levels = levels
        .iter()
        .zip(merged)
        .map(|(&level, confusion)| Ok(LevelReport { level, metrics: confusion.metrics()?, confusion }))
        .collect::<Result<_>>()?;
    Ok(EvalReport { levels, consistency: if total > 0 { hit as f64 / total as f64 } else { 1.0 }, images: samples.len() })
}
