mod support;

use compofuse::data::{generate_synthetic, RgbImage};
use compofuse::error::Error;
use compofuse::eval::{evaluate, multiscale_flip_predict, ConfusionMatrix, EvalOptions, Protocol};
use compofuse::kernels::resize_bilinear;
use compofuse::{Hierarchy, Model, TrainConfig, Trainer, Variant};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::tiny_model;

fn confusion(pairs: &[(u8, u8, usize)], classes: usize) -> ConfusionMatrix {
    let mut pred = Vec::new();
    let mut label = Vec::new();
    for &(l, p, n) in pairs {
        label.extend(std::iter::repeat_n(l, n));
        pred.extend(std::iter::repeat_n(p, n));
    }
    let mut c = ConfusionMatrix::new(classes);
    c.accumulate(&pred, &label).unwrap();
    c
}

/// Per-class IoU straight from the pixel pairs, classes absent from labels skipped.
fn oracle_miou(pred: &[u8], label: &[u8], classes: usize) -> f64 {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let mut inter = 0;
        let mut union = 0;
        let mut present = false;
        for i in 0..pred.len() {
            let (p, l) = (pred[i] == c, label[i] == c);
            present |= l;
            inter += usize::from(p && l);
            union += usize::from(p || l);
        }
        if present {
            ious.push(inter as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn two_class_hand_example() {
    let m = confusion(&[(0, 0, 50), (0, 1, 50), (1, 1, 100)], 2).metrics().unwrap();
    assert_eq!(m.iou, vec![Some(0.5), Some(100.0 / 150.0)]);
    assert!((m.miou - 0.583_333_333_333_333_3).abs() < 1e-15);
    assert_eq!(m.pix_acc, 0.75);
    assert_eq!(m.mean_acc, 0.75);
    assert_eq!(m.fg_acc, 1.0);
}

#[test]
fn perfect_and_absent_classes() {
    let m = confusion(&[(0, 0, 5), (2, 2, 7)], 4).metrics().unwrap();
    assert_eq!(m.iou, vec![Some(1.0), None, Some(1.0), None]);
    for v in [m.pix_acc, m.mean_acc, m.miou, m.fg_acc, m.precision, m.recall, m.f1] {
        assert_eq!(v, 1.0);
    }
    let mut c = ConfusionMatrix::new(3);
    c.accumulate(&[], &[]).unwrap();
    assert!(matches!(c.metrics(), Err(Error::EmptyConfusion)));
    assert!(matches!(c.accumulate(&[3], &[0]), Err(Error::AlphabetViolation { value: 3, alphabet: 3 })));
}

proptest! {
    #[test]
    fn metrics_match_pixel_oracle(seed in any::<u64>(), classes in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let label: Vec<u8> = (0..256).map(|_| rng.gen_range(0..classes as u8)).collect();
        let pred: Vec<u8> = label.iter().map(|&l| if rng.gen_bool(0.6) { l } else { rng.gen_range(0..classes as u8) }).collect();
        let mut c = ConfusionMatrix::new(classes);
        c.accumulate(&pred, &label).unwrap();
        for l in 0..classes {
            for p in 0..classes {
                let count = pred.iter().zip(&label).filter(|&(&a, &b)| a as usize == p && b as usize == l).count();
                prop_assert_eq!(c.get(l, p), count as u64);
            }
        }
        let m = c.metrics().unwrap();
        prop_assert!((m.miou - oracle_miou(&pred, &label, classes)).abs() < 1e-12);

        // relabelling classes consistently permutes per-class IoU
        let perm: Vec<u8> = (0..classes as u8).rev().collect();
        let mut q = ConfusionMatrix::new(classes);
        let map = |v: &[u8]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<_>>();
        q.accumulate(&map(&pred), &map(&label)).unwrap();
        let mq = q.metrics().unwrap();
        prop_assert!((mq.miou - m.miou).abs() < 1e-12);
        for k in 0..classes {
            prop_assert_eq!(mq.iou[perm[k] as usize], m.iou[k]);
        }
    }
}

fn symmetric_image(seed: u64, w: usize, h: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w.div_ceil(2) {
            for c in 0..3 {
                let v = rng.gen_range(0.0..1.0);
                img.set(c, x, y, v);
                img.set(c, w - 1 - x, y, v);
            }
        }
    }
    img
}

#[test]
fn single_scale_protocol_is_one_forward() {
    let graph = Hierarchy::default_human();
    let model = Model::<f64>::new(&tiny_model(), Variant::Full, &graph, 1).unwrap();
    let img = symmetric_image(1, 44, 36);
    let probs = multiscale_flip_predict(&model, &img, &Protocol::single()).unwrap();
    let direct = model.predict_probs(&img.to_tensor()).unwrap();
    for (p, d) in probs.iter().zip(&direct) {
        assert_eq!(p, &resize_bilinear(d, 36, 44));
    }
}

#[test]
fn flip_averaging_is_symmetric_on_symmetric_input() {
    let graph = Hierarchy::default_human();
    let model = Model::<f64>::new(&tiny_model(), Variant::Full, &graph, 2).unwrap();
    let img = symmetric_image(2, 48, 40);
    for protocol in [Protocol { scales: vec![1.0], flip: true }, Protocol::multiscale()] {
        let probs = multiscale_flip_predict(&model, &img, &protocol).unwrap();
        for p in &probs {
            let [_, c, h, w] = p.shape();
            for k in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        assert!((p.at(0, k, y, x) - p.at(0, k, y, w - 1 - x)).abs() < 1e-5);
                    }
                }
            }
        }
    }
}

#[test]
fn level_filter_and_protocol_sanity() {
    let graph = Hierarchy::default_human();
    let data = generate_synthetic(40, 8, 96, &graph);
    let mut config = TrainConfig { iterations: Some(300), eval_each_epoch: false, ..TrainConfig::desk() };
    config.augment.crop_size = 96;
    let mut t = Trainer::<f32>::new(config, data.clone(), &graph).unwrap();
    while !t.done() {
        t.step().unwrap();
    }
    let leaf_only = evaluate(&t.model, &data, &EvalOptions { levels: vec![1], ..EvalOptions::default() }).unwrap();
    assert_eq!(leaf_only.levels.len(), 1);
    assert_eq!(leaf_only.levels[0].level, 1);
    assert!(matches!(
        evaluate(&t.model, &data, &EvalOptions { levels: vec![4], ..EvalOptions::default() }),
        Err(Error::Config(_))
    ));
    let single = leaf_only.levels[0].metrics.miou;
    let multi = evaluate(&t.model, &data, &EvalOptions { levels: vec![1], protocol: Protocol::multiscale(), ..EvalOptions::default() }).unwrap();
    assert!(multi.levels[0].metrics.miou >= single - 0.02, "multiscale {} vs single {single}", multi.levels[0].metrics.miou);
}
