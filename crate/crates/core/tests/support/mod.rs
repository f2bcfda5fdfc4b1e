#![allow(dead_code)]

use compofuse::autograd::Graph;
use compofuse::data::{generate_synthetic, Sample};
use compofuse::direct::SeBlock;
use compofuse::encoder::EncoderConfig;
use compofuse::fusion::Gate;
use compofuse::hierarchy::{HierarchySpec, NodeSpec};
use compofuse::kernels::{self, ConvGeom};
use compofuse::nn::{Init, Mode};
use compofuse::optim::make_batch;
use compofuse::params::{ParamId, ParamStore};
use compofuse::{Hierarchy, ModelConfig, Scalar, Tensor, TrainConfig, Trainer, Variant};
use compofuse_oracle::{self as oracle, Array4, OracleReport};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod invariants;
pub mod schedule;
pub mod semantics;

pub const PRIMITIVES: [&str; 8] = ["conv", "dilated_conv", "se", "cap", "pmp", "sigmoid_gate", "softmax", "ce"];

pub fn to_array<T: Scalar>(t: &Tensor<T>) -> Array4 {
    Array4::new(t.shape(), t.data().iter().map(|v| v.f64()).collect())
}

pub fn to_tensor<T: Scalar>(a: &Array4) -> Tensor<T> {
    Tensor::from_vec(a.shape, a.data.iter().map(|&v| T::of(v)).collect()).unwrap()
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Array4 {
    let n = shape.iter().product();
    Array4::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect())
}

fn fill_random<T: Scalar>(store: &mut ParamStore<T>, id: ParamId, rng: &mut ChaCha8Rng, scale: f64) {
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::of(rng.gen_range(-scale..scale)));
}

fn fill_jitter(t: &mut Tensor<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale));
}

/// Worst case of several reports for the same op.
fn worst(op: &str, reports: &[OracleReport], tolerance: f64) -> OracleReport {
    let max_abs = reports.iter().map(|r| r.max_abs).fold(0.0, f64::max);
    let max_rel = reports.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    OracleReport { op: op.into(), max_abs, max_rel, tolerance, pass: reports.iter().all(|r| r.pass) }
}

/// One random instance of `op`, fast path in `T` against the oracle.
pub fn primitive_instance<T: Scalar>(op: &str, rng: &mut ChaCha8Rng, tolerance: f64, floor: f64) -> OracleReport {
    let n = rng.gen_range(1..=2);
    let c = rng.gen_range(1..=16);
    let side = rng.gen_range(1..=8);
    let (fast, reference) = match op {
        "conv" | "dilated_conv" => {
            let cout = rng.gen_range(1..=16);
            let (k, dilation) = if op == "conv" {
                (*[1, 3].choose(rng).unwrap(), 1)
            } else {
                (3, rng.gen_range(2..=3))
            };
            let stride = rng.gen_range(1..=2);
            let mut pad = if k == 1 { 0 } else { rng.gen_range(0..=dilation) };
            while side + 2 * pad < dilation * (k - 1) + 1 {
                pad += 1;
            }
            let x = random_array(rng, [n, c, side, side], 1.0);
            let w = random_array(rng, [cout, c, k, k], 0.5);
            let b = random_array(rng, [1, cout, 1, 1], 0.5);
            let cfg = oracle::OpConfig { stride, pad, dilation, labels: vec![] };
            let reference = oracle::ref_forward(op, std::slice::from_ref(&x), &[w.clone(), b.clone()], &cfg).unwrap();
            let mut g = Graph::<T>::new();
            let (xv, wv, bv) = (g.constant(to_tensor(&x)), g.constant(to_tensor(&w)), g.constant(to_tensor(&b)));
            let y = g.conv2d(xv, wv, Some(bv), ConvGeom { stride, pad, dilation }).unwrap();
            (to_array(g.value(y)), reference)
        }
        "se" => {
            let reduction = rng.gen_range(1..=4);
            let mut store = ParamStore::<T>::new();
            let se = SeBlock::new(&mut Init { store: &mut store, seed: rng.gen() }, "se", c, reduction);
            fill_random(&mut store, se.squeeze.bias.unwrap(), rng, 0.5);
            fill_random(&mut store, se.excite.bias.unwrap(), rng, 0.5);
            let x = random_array(rng, [n, c, side, side], 1.0);
            let params: Vec<Array4> = [se.squeeze.weight, se.squeeze.bias.unwrap(), se.excite.weight, se.excite.bias.unwrap()]
                .iter()
                .map(|&id| to_array(store.get(id)))
                .collect();
            let reference = oracle::ref_forward("se", std::slice::from_ref(&x), &params, &Default::default()).unwrap();
            let mut g = Graph::<T>::new();
            let xv = g.constant(to_tensor(&x));
            let y = se.forward(&mut g, &store, xv).unwrap();
            (to_array(g.value(y)), reference)
        }
        "cap" => {
            let x = random_array(rng, [n, c, side, side], 1.0);
            let reference = oracle::ref_forward("cap", std::slice::from_ref(&x), &[], &Default::default()).unwrap();
            let mut g = Graph::<T>::new();
            let xv = g.constant(to_tensor(&x));
            let y = compofuse::fusion::cap(&mut g, xv);
            (to_array(g.value(y)), reference)
        }
        "pmp" => {
            let kids = rng.gen_range(1..=5);
            let maps: Vec<Array4> = (0..kids).map(|_| random_array(rng, [n, 1, side, side], 2.0)).collect();
            let reference = oracle::ref_forward("pmp", &maps, &[], &Default::default()).unwrap();
            let mut g = Graph::<T>::new();
            let vars: Vec<_> = maps.iter().map(|m| g.constant(to_tensor(m))).collect();
            let y = compofuse::structured::pmp(&mut g, &vars).unwrap();
            (to_array(g.value(y)), reference)
        }
        "sigmoid_gate" => {
            let mut store = ParamStore::<T>::new();
            let gate = Gate::new(&mut Init { store: &mut store, seed: rng.gen() }, "gate", c);
            fill_random(&mut store, gate.linear.conv.weight, rng, 2.0);
            fill_random(&mut store, gate.linear.conv.bias.unwrap(), rng, 1.0);
            let x = random_array(rng, [n, c, side, side], 1.0);
            let params = [to_array(store.get(gate.linear.conv.weight)), to_array(store.get(gate.linear.conv.bias.unwrap()))];
            let reference = oracle::ref_forward("sigmoid_gate", std::slice::from_ref(&x), &params, &Default::default()).unwrap();
            let mut g = Graph::<T>::new();
            let xv = g.constant(to_tensor(&x));
            let y = gate.forward(&mut g, &store, xv).unwrap();
            (to_array(g.value(y)), reference)
        }
        "softmax" => {
            let x = random_array(rng, [n, c, side, side], 8.0);
            let reference = oracle::ref_forward("softmax", std::slice::from_ref(&x), &[], &Default::default()).unwrap();
            (to_array(&kernels::softmax_channels(&to_tensor::<T>(&x))), reference)
        }
        "ce" => {
            let c = c.max(2);
            let x = random_array(rng, [n, c, side, side], 4.0);
            let labels: Vec<usize> = (0..n * side * side).map(|_| rng.gen_range(0..c)).collect();
            let cfg = oracle::OpConfig { labels: labels.clone(), ..Default::default() };
            let reference = oracle::ref_forward("ce", std::slice::from_ref(&x), &[], &cfg).unwrap();
            let mut g = Graph::<T>::new();
            let maps: Vec<_> = (0..c)
                .map(|k| {
                    let t = Tensor::from_fn([n, 1, side, side], |[s, _, y, xx]| T::of(x.at(s, k, y, xx)));
                    g.constant(t)
                })
                .collect();
            let lab: Vec<u32> = labels.iter().map(|&v| v as u32).collect();
            let y = g.softmax_ce(&maps, &lab).unwrap();
            (to_array(g.value(y)), reference)
        }
        other => panic!("no fast path for {other}"),
    };
    if fast.shape != reference.shape {
        return OracleReport { op: op.into(), max_abs: f64::INFINITY, max_rel: f64::INFINITY, tolerance, pass: false };
    }
    oracle::compare(op, &fast.data, &reference.data, tolerance, floor)
}

/// `instances` random cases per primitive; one report per primitive.
pub fn oracle_suite<T: Scalar>(instances: usize, seed: u64, tolerance: f64, floor: f64) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PRIMITIVES
        .iter()
        .map(|op| {
            let reports: Vec<_> = (0..instances).map(|_| primitive_instance::<T>(op, &mut rng, tolerance, floor)).collect();
            worst(op, &reports, tolerance)
        })
        .collect()
}

/// Small network for gradient checks and property tests.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { base_channels: 4, aspp_channels: 8, embed_channels: 8, ..EncoderConfig::default() },
        ..ModelConfig::default()
    }
}

pub fn two_level() -> Hierarchy {
    Hierarchy::from_toml(
        r#"
[[node]]
name = "body"
level = 2

[[node]]
name = "upper"
level = 1
parent = "body"
class_ids = [1]

[[node]]
name = "lower"
level = 1
parent = "body"
class_ids = [2]
"#,
    )
    .unwrap()
}

/// Random well-formed hierarchy: `levels` levels, at least one node per level,
/// every inner node with at least one child, leaves owning consecutive class ids.
pub fn random_hierarchy(levels: usize, widths: &[usize], seed: u64) -> Hierarchy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = vec![NodeSpec { name: format!("n{levels}_0"), level: levels, parent: None, class_ids: vec![] }];
    let mut above = 1;
    let mut next_class = 1u8;
    for l in (1..levels).rev() {
        let count = above + widths.get(l - 1).copied().unwrap_or(0);
        let mut parents: Vec<usize> = (0..above).collect();
        parents.extend((above..count).map(|_| rng.gen_range(0..above)));
        parents.shuffle(&mut rng);
        for (i, p) in parents.into_iter().enumerate() {
            let class_ids = if l == 1 {
                let k = rng.gen_range(1..=2u8);
                let ids = (next_class..next_class + k).collect();
                next_class += k;
                ids
            } else {
                vec![]
            };
            nodes.push(NodeSpec { name: format!("n{l}_{i}"), level: l, parent: Some(format!("n{}_{p}", l + 1)), class_ids });
        }
        above = count;
    }
    Hierarchy::build(HierarchySpec { nodes, swaps: vec![] }).unwrap()
}

pub fn small_batch(graph: &Hierarchy, count: usize, size: usize, seed: u64) -> Vec<Sample> {
    generate_synthetic(seed, count, size, graph)
}

pub const GRAD_MODULES: [&str; 9] = ["encoder.", "lsf.", "se.", "direct.", "top_down.", "bottom_up.", "gate.", "fusion.", "background."];

/// Central differences of `total_loss` in f64 against backpropagation, for
/// `per_module` coordinates in every module of a full-variant model.
pub fn gradient_suite(graph: &Hierarchy, per_module: usize, seed: u64, eps: f64, tolerance: f64, floor: f64) -> Vec<OracleReport> {
    let data = small_batch(graph, 2, 48, seed);
    let config = TrainConfig { model: tiny_model(), variant: Variant::Full, seed, ..TrainConfig::desk() };
    let mut trainer = Trainer::<f64>::new(config, data.clone(), graph).unwrap();
    // zero-initialised biases put ReLUs exactly on their corner wherever a pixel's
    // input is all zeros; move off it so both one-sided derivatives agree
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in trainer.model.params.ids().collect::<Vec<_>>() {
        if trainer.model.params.entry(id).kind.trainable() {
            fill_jitter(trainer.model.params.get_mut(id), &mut rng, 0.02);
        }
    }
    let batch = make_batch::<f64>(&data, graph).unwrap();
    let (g, total, _) = trainer.loss(&batch, Mode::Train).unwrap();
    let grads = g.backward(total).unwrap().param_grads(&trainer.model.params);
    let point = trainer.model.params.to_flat();
    let mut analytic = vec![0.0; point.len()];
    let mut offsets = Vec::new();
    let mut off = 0;
    for id in trainer.model.params.ids() {
        let len = trainer.model.params.get(id).len();
        if let Some(gt) = grads.get(id) {
            for (a, v) in analytic[off..off + len].iter_mut().zip(gt.data()) {
                *a = *v;
            }
        }
        offsets.push((id, off, len));
        off += len;
    }
    let mut reports = Vec::new();
    for module in GRAD_MODULES {
        let mut candidates: Vec<usize> = Vec::new();
        for &(id, off, len) in &offsets {
            let e = trainer.model.params.entry(id);
            if e.name.starts_with(module) && e.kind.trainable() {
                candidates.extend(off..off + len);
            }
        }
        assert!(!candidates.is_empty(), "module {module} has no parameters");
        let live: Vec<usize> = candidates.iter().copied().filter(|&i| analytic[i].abs() > 1e-9).collect();
        let pool = if live.len() >= per_module { live } else { candidates };
        let coords: Vec<usize> = pool.choose_multiple(&mut rng, per_module.min(pool.len())).copied().collect();
        let mut loss = |p: &[f64]| {
            trainer.model.params.load_flat(p).unwrap();
            let (g, total, _) = trainer.loss(&batch, Mode::Train).unwrap();
            g.value(total).data()[0]
        };
        let name = format!("{}{}", module.trim_end_matches('.'), if graph.num_levels() == 2 { "@2" } else { "@3" });
        let report = oracle::finite_diff_check(&name, &mut loss, &point, &analytic, &coords, eps, tolerance, floor).unwrap();
        reports.push(report);
    }
    trainer.model.params.load_flat(&point).unwrap();
    reports
}

pub fn report_line(r: &OracleReport) -> String {
    format!("{:<16} max_abs {:.2e} max_rel {:.2e} (tol {:.0e})", r.op, r.max_abs, r.max_rel, r.tolerance)
}
