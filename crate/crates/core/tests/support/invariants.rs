//! Property bodies shared by the proptest suites and the acceptance runner.

use super::{random_hierarchy, tiny_model};
use compofuse::autograd::Graph;
use compofuse::eval::consistency_counts;
use compofuse::hierarchy::{derive_level_labels, LabelGrid};
use compofuse::kernels::softmax_channels;
use compofuse::nn::Mode;
use compofuse::structured::Branch;
use compofuse::{ForwardOptions, Hierarchy, Model, Tensor, Variant};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), TestCaseError>;

pub fn hierarchy() -> impl Strategy<Value = Hierarchy> {
    (2usize..=4, prop::collection::vec(0usize..3, 3), any::<u64>())
        .prop_map(|(levels, widths, seed)| random_hierarchy(levels, &widths, seed))
}

pub fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

pub fn random_image(seed: u64, n: usize, size: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, size, size], |_| rng.gen_range(-1.0..1.0))
}

/// Class ids drawn from the hierarchy's alphabet, background included.
pub fn random_leaf_map(graph: &Hierarchy, seed: u64, w: usize, h: usize) -> LabelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = graph.num_classes() as u8;
    LabelGrid::from_vec(w, h, (0..w * h).map(|_| rng.gen_range(0..max)).collect()).unwrap()
}

/// Label of the ancestor of `class_id`'s leaf at level `l`, by walking parents.
pub fn oracle_level_label(graph: &Hierarchy, class_id: u8, l: usize) -> u8 {
    if class_id == 0 {
        return 0;
    }
    let mut v = graph.nodes().find(|(_, n)| n.class_ids.contains(&class_id)).unwrap().0;
    while graph.node(v).level < l {
        v = graph.parent(v).unwrap();
    }
    1 + graph.level(l).iter().position(|&u| u == v).unwrap() as u8
}

pub fn branch_presence(graph: &Hierarchy, v: Variant) -> Check {
    let model = Model::<f32>::new(&tiny_model(), v, graph, 0).unwrap();
    for (id, _) in graph.nodes() {
        let [d, td, bu] = model.branches(id);
        prop_assert!(d);
        prop_assert_eq!(td, v.has_top_down() && !graph.is_root(id));
        prop_assert_eq!(bu, v.has_bottom_up() && !graph.is_leaf(id));
        let arity = [d, td, bu].iter().filter(|&&b| b).count();
        prop_assert_eq!(model.fusion.net(id).is_some(), arity > 1);
        let gates = &model.fusion.gates[id.0];
        prop_assert_eq!(gates.top_down.is_some(), v.gated() && td);
        prop_assert_eq!(gates.bottom_up.is_some(), v.gated() && bu);
    }
    Ok(())
}

pub fn label_stack_consistency(graph: &Hierarchy, seed: u64) -> Check {
    let leaf = random_leaf_map(graph, seed, 7, 5);
    let stack = derive_level_labels(&leaf, graph).unwrap();
    prop_assert!(stack.is_consistent(graph));
    for l in 1..=graph.num_levels() {
        for (i, &c) in leaf.data.iter().enumerate() {
            prop_assert_eq!(stack.level(l).data[i], oracle_level_label(graph, c, l));
        }
    }
    let (hit, total) = consistency_counts(&stack.levels, graph);
    prop_assert_eq!(hit, total);
    Ok(())
}

pub fn softmax_normalised(seed: u64, c: usize, scale: f64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<f64>::from_fn([2, c, 3, 4], |_| rng.gen_range(-scale..scale));
    let p = softmax_channels(&x);
    for s in 0..2 {
        for y in 0..3 {
            for xx in 0..4 {
                let total: f64 = (0..c).map(|k| p.at(s, k, y, xx)).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!((0..c).all(|k| (0.0..=1.0).contains(&p.at(s, k, y, xx))));
            }
        }
    }
    let p32 = softmax_channels(&x.cast::<f32>());
    let total: f32 = (0..c).map(|k| p32.at(0, k, 0, 0)).sum();
    prop_assert!((total - 1.0).abs() < 1e-5);
    Ok(())
}

pub fn gates_in_open_unit_interval(seed: u64, blow_up: f64) -> Check {
    let graph = Hierarchy::default_human();
    let mut model = Model::<f64>::new(&tiny_model(), Variant::Full, &graph, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.params.with_prefix("gate.").collect::<Vec<_>>() {
        model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0) * blow_up);
    }
    let mut g = Graph::new();
    let x = g.constant(random_image(seed, 2, 32));
    let out = model.forward(&mut g, x, &ForwardOptions::new(Mode::Eval)).unwrap();
    let records = model.gate_records(&g, &out);
    prop_assert_eq!(records.len(), 2 * (9 + 8 + 3));
    for r in records {
        prop_assert!(r.value > 0.0 && r.value < 1.0, "{:?}", r);
    }
    Ok(())
}

/// Perturbing one structured map leaves every direct map, every gate and every
/// other node's maps untouched.
pub fn step_two_reads_only_step_one(seed: u64, pick: prop::sample::Index, which: Branch) -> Check {
    let graph = Hierarchy::default_human();
    let model = Model::<f64>::new(&tiny_model(), Variant::Full, &graph, seed).unwrap();
    let candidates: Vec<_> = graph
        .nodes()
        .map(|(v, _)| v)
        .filter(|&v| {
            let [_, td, bu] = model.branches(v);
            if which == Branch::TopDown {
                td
            } else {
                bu
            }
        })
        .collect();
    let v = *pick.get(&candidates);
    let image = random_image(seed, 1, 32);
    let run = |perturb: bool| {
        let mut opts = ForwardOptions::new(Mode::Eval);
        if perturb {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            opts.perturb.push((v, which, Tensor::from_fn([1, 1, 4, 4], |_| rng.gen_range(-3.0..3.0))));
        }
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = model.forward(&mut g, x, &opts).unwrap();
        let maps: Vec<[Option<Tensor<f64>>; 4]> = graph
            .nodes()
            .map(|(u, _)| {
                let n = out.logits.node(u);
                Branch::ALL.map(|b| n.get(b).map(|var| g.value(var).clone()))
            })
            .collect();
        let gates: Vec<f64> = model.gate_records(&g, &out).iter().map(|r| r.value).collect();
        (maps, gates)
    };
    let (base, base_gates) = run(false);
    let (moved, moved_gates) = run(true);
    prop_assert_eq!(base_gates, moved_gates);
    for (u, _) in graph.nodes() {
        let (b, m) = (&base[u.0], &moved[u.0]);
        prop_assert_eq!(&b[0], &m[0], "direct map of {:?} moved", u);
        if u != v {
            prop_assert_eq!(b, m, "maps of {:?} moved", u);
        }
    }
    let slot = if which == Branch::TopDown { 1 } else { 2 };
    prop_assert_ne!(&base[v.0][slot], &moved[v.0][slot]);
    Ok(())
}

pub fn structured_branch() -> impl Strategy<Value = Branch> {
    prop::sample::select(vec![Branch::TopDown, Branch::BottomUp])
}

pub fn blow_up() -> impl Strategy<Value = f64> {
    prop::sample::select(vec![1.0, 10.0, 1e3, 1e6])
}
