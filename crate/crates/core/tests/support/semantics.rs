//! Conditional-fusion checks shared by the unit tests and the acceptance runner.

use super::tiny_model;
use compofuse::autograd::Graph;
use compofuse::nn::Mode;
use compofuse::structured::Branch;
use compofuse::{ForwardOptions, Hierarchy, Model, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([2, 3, 40, 40], |_| rng.gen_range(-1.0..1.0))
}

fn jitter(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.entry(id).kind.trainable() {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
    }
}

fn fused_maps(model: &Model<f64>, x: &Tensor<f64>, opts: &ForwardOptions<f64>) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, opts).unwrap();
    model.graph.nodes().map(|(v, _)| g.value(out.logits.node(v).fused).clone()).collect()
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

/// Returns the number of node/branch pairs checked.
pub fn zero_gate_blindness(seed: u64) -> usize {
    let graph = Hierarchy::default_human();
    let mut model = Model::<f64>::new(&tiny_model(), Variant::Full, &graph, seed).unwrap();
    jitter(&mut model, seed);
    let x = image(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
    let mut checked = 0;
    for (v, _) in graph.nodes() {
        for (i, branch) in [Branch::Direct, Branch::TopDown, Branch::BottomUp].into_iter().enumerate() {
            if !model.branches(v)[i] {
                continue;
            }
            let mut quiet = ForwardOptions::new(Mode::Eval);
            quiet.gate_override.push((v, branch, 0.0));
            let base = fused_maps(&model, &x, &quiet)[v.0].clone();
            for scale in [1.0, 1e3] {
                let mut loud = quiet.clone();
                loud.perturb.push((v, branch, Tensor::from_fn([2, 1, 5, 5], |_| rng.gen_range(-scale..scale))));
                assert_eq!(fused_maps(&model, &x, &loud)[v.0], base, "{v:?} {branch:?}");
            }
            let mut open = ForwardOptions::new(Mode::Eval);
            open.perturb.push((v, branch, Tensor::full([2, 1, 5, 5], 5.0)));
            assert_ne!(fused_maps(&model, &x, &open)[v.0], fused_maps(&model, &x, &ForwardOptions::new(Mode::Eval))[v.0]);
            checked += 1;
        }
    }
    checked
}

pub fn unit_gates_match_static(seed: u64) {
    let graph = Hierarchy::default_human();
    let mut full = Model::<f64>::new(&tiny_model(), Variant::Full, &graph, seed).unwrap();
    jitter(&mut full, seed);
    let mut fixed = Model::<f64>::new(&tiny_model(), Variant::DirectBuTd, &graph, seed + 1).unwrap();
    for id in fixed.params.ids().collect::<Vec<_>>() {
        let name = fixed.params.entry(id).name.clone();
        let src = full.params.find(&name).unwrap_or_else(|| panic!("{name} missing from the gated model"));
        *fixed.params.get_mut(id) = full.params.get(src).clone();
    }
    assert!(full.params.len() > fixed.params.len());
    assert!(full.params.entries().iter().all(|e| fixed.params.find(&e.name).is_some() || e.name.starts_with("gate.")));

    let mut ones = ForwardOptions::new(Mode::Eval);
    for (v, _) in graph.nodes() {
        for (i, b) in [Branch::Direct, Branch::TopDown, Branch::BottomUp].into_iter().enumerate() {
            if full.branches(v)[i] {
                ones.gate_override.push((v, b, 1.0));
            }
        }
    }
    let x = image(seed);
    let gated = fused_maps(&full, &x, &ones);
    let plain = fused_maps(&fixed, &x, &ForwardOptions::new(Mode::Eval));
    for (a, b) in gated.iter().zip(&plain) {
        assert_eq!(bits(a), bits(b));
    }
    let learned = fused_maps(&full, &x, &ForwardOptions::new(Mode::Eval));
    assert_ne!(learned, plain);
}

