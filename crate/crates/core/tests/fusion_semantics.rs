mod support;

use compofuse::autograd::Graph;
use compofuse::error::Error;
use compofuse::fusion::{fuse, Gate};
use compofuse::nn::{ConvStack, Init, Rectifier};
use compofuse::params::ParamStore;
use compofuse::{Hierarchy, Model, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::semantics::{unit_gates_match_static, zero_gate_blindness};
use support::tiny_model;

#[test]
fn zero_gate_makes_fused_map_blind_to_its_branch() {
    assert_eq!(zero_gate_blindness(4), 9 + 8 + 3);
}

#[test]
fn unit_gates_reproduce_static_fusion_bit_for_bit() {
    unit_gates_match_static(5);
}

#[test]
fn same_seed_variants_share_parameter_values() {
    let graph = Hierarchy::default_human();
    let full = Model::<f32>::new(&tiny_model(), Variant::Full, &graph, 8).unwrap();
    let direct = Model::<f32>::new(&tiny_model(), Variant::Direct, &graph, 8).unwrap();
    for e in direct.params.entries() {
        let id = full.params.find(&e.name).unwrap();
        assert_eq!(full.params.get(id), &e.value, "{}", e.name);
    }
}

#[test]
fn gate_saturation_and_midpoint() {
    let mut store = ParamStore::<f64>::new();
    let gate = Gate::new(&mut Init { store: &mut store, seed: 0 }, "g", 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = Tensor::from_fn([1, 8, 3, 3], |_| rng.gen_range(-1.0..1.0));
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let y = gate.forward(&mut g, store, x).unwrap();
        g.value(y).data()[0]
    };
    store.get_mut(gate.linear.conv.weight).data_mut().fill(0.0);
    assert_eq!(eval(&store), 0.5);
    store.get_mut(gate.linear.conv.bias.unwrap()).data_mut().fill(20.0);
    let high = eval(&store);
    assert!(high > 0.9999 && high < 1.0);
    store.get_mut(gate.linear.conv.bias.unwrap()).data_mut().fill(1e6);
    assert!(eval(&store) < 1.0);
    store.get_mut(gate.linear.conv.bias.unwrap()).data_mut().fill(-1e6);
    assert!(eval(&store) > 0.0);
}

#[test]
fn closed_gates_and_zero_biases_give_zero_map() {
    let mut store = ParamStore::<f64>::new();
    let net = ConvStack::new(&mut Init { store: &mut store, seed: 1 }, "f", &[3, 8, 4, 1], &[1, 1, 1], Some(Rectifier::Relu));
    let out_bias = net.layers[2].bias.unwrap();
    store.get_mut(out_bias).data_mut().fill(0.0);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let maps: Vec<_> = (0..3)
        .map(|_| {
            let m = g.constant(Tensor::from_fn([1, 1, 4, 4], |_| rng.gen_range(0.0..3.0)));
            let z = g.constant(Tensor::full([1, 1, 1, 1], 0.0));
            (m, Some(z))
        })
        .collect();
    let (fused, _) = fuse(&mut g, &store, &net, &maps).unwrap();
    assert!(g.value(fused).data().iter().all(|&v| v == 0.0));
    let err = fuse(&mut g, &store, &net, &maps[..2]).unwrap_err();
    assert!(matches!(err, Error::BranchGateMismatch(_)));
}

#[test]
fn leaf_fusion_takes_two_channels_and_inner_three() {
    let graph = Hierarchy::default_human();
    let model = Model::<f32>::new(&tiny_model(), Variant::Full, &graph, 0).unwrap();
    for (v, node) in graph.nodes() {
        let net = model.fusion.net(v).unwrap();
        let arity = model.params.get(net.layers[0].weight).c();
        let expected = if node.level == 1 || graph.is_root(v) { 2 } else { 3 };
        assert_eq!(arity, expected, "{}", node.name);
    }
}
