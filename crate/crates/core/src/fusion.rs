//! Confidence gates and the per-node fusion network.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::nn::{ConvStack, Init, Linear, Rectifier};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Scalar;

/// Channel-wise average pooling.
pub fn cap<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.spatial_mean(x)
}

/// `sigmoid(affine(cap(x)))`, one scalar per sample. The affine output is
/// clamped to `±ln(1/ε)` so the value never rounds to exactly 0 or 1.
#[derive(Clone, Debug)]
pub struct Gate {
    pub linear: Linear,
}

impl Gate {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, inputs: usize) -> Self {
        let std = 0.1 / (inputs as f64).sqrt();
        Self { linear: Linear::new(init, name, inputs, 1, (ParamKind::GateWeight, ParamKind::GateBias), std) }
    }

    /// `x` is one embedding or several concatenated along channels.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = cap(g, x);
        let a = self.linear.forward(g, store, pooled)?;
        let bound = -T::epsilon().ln();
        let a = g.clamp(a, -bound, bound);
        Ok(g.sigmoid(a))
    }
}

/// Gates of one node, in branch order direct, top-down, bottom-up.
#[derive(Clone, Debug, Default)]
pub struct NodeGates {
    pub direct: Option<Gate>,
    pub top_down: Option<Gate>,
    pub bottom_up: Option<Gate>,
}

/// Gate values of one forward pass, `[n, 1, 1, 1]` each.
#[derive(Clone, Debug, Default)]
pub struct GateSet {
    /// Indexed by `NodeId`; `None` where the node has no such gate.
    pub values: Vec<[Option<Var>; 3]>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub gated: bool,
    /// Per node; `None` for nodes whose only branch is direct.
    pub nets: Vec<Option<ConvStack>>,
    pub gates: Vec<NodeGates>,
}

impl Fusion {
    /// `branches[v]` flags the direct, top-down and bottom-up maps of node `v`.
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        graph: &Hierarchy,
        channels: usize,
        branches: &[[bool; 3]],
        hidden: &[usize],
        gated: bool,
        output: Option<Rectifier>,
    ) -> Self {
        let mut nets = Vec::new();
        let mut gates = Vec::new();
        for (id, node) in graph.nodes() {
            let present = branches[id.0];
            let arity = present.iter().filter(|&&p| p).count();
            if arity < 2 {
                nets.push(None);
                gates.push(NodeGates::default());
                continue;
            }
            let mut widths = vec![arity];
            widths.extend_from_slice(hidden);
            widths.push(1);
            let kernels = vec![1; widths.len() - 1];
            let net = ConvStack::new(init, &format!("fusion.{}", node.name), &widths, &kernels, output);
            // fused map starts out increasing in every branch map
            for layer in &net.layers {
                init.store.get_mut(layer.weight).data_mut().iter_mut().for_each(|v| *v = v.abs());
            }
            nets.push(Some(net));
            let ng = if gated {
                let kids = graph.children(id).len();
                NodeGates {
                    direct: present[0].then(|| Gate::new(init, &format!("gate.{}.direct", node.name), channels)),
                    top_down: present[1].then(|| Gate::new(init, &format!("gate.{}.top_down", node.name), channels)),
                    bottom_up: present[2]
                        .then(|| Gate::new(init, &format!("gate.{}.bottom_up", node.name), channels * kids)),
                }
            } else {
                NodeGates::default()
            };
            gates.push(ng);
        }
        Self { gated, nets, gates }
    }

    pub fn net(&self, v: NodeId) -> Option<&ConvStack> {
        self.nets[v.0].as_ref()
    }
}

/// Scale each map by its gate (`None` leaves it unscaled), concatenate, and
/// run the fusion network.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &ConvStack,
    maps: &[(Var, Option<Var>)],
) -> Result<(Var, Vec<Var>)> {
    let arity = store.get(net.layers[0].weight).c();
    if maps.len() != arity {
        return Err(Error::BranchGateMismatch(format!("{} maps for a fusion network of arity {arity}", maps.len())));
    }
    let mut scaled = Vec::with_capacity(maps.len());
    for &(m, gate) in maps {
        scaled.push(match gate {
            Some(gv) => g.mul_broadcast(m, gv)?,
            None => m,
        });
    }
    let x = g.concat(&scaled)?;
    Ok((net.forward(g, store, x)?, scaled))
}
