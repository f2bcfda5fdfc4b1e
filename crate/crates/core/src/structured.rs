//! Top-down and bottom-up branches conditioned on direct estimates.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::nn::{ConvStack, Init, Rectifier};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Direct,
    TopDown,
    BottomUp,
    Fused,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Direct, Branch::TopDown, Branch::BottomUp, Branch::Fused];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Direct => "direct",
            Branch::TopDown => "top_down",
            Branch::BottomUp => "bottom_up",
            Branch::Fused => "fused",
        }
    }
}

/// Whether cascade heads are owned by each node or shared by a level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSharing {
    #[default]
    PerNode,
    PerLevel,
}

/// Branch maps of one node. `None` marks a branch the node does not have.
#[derive(Clone, Copy, Debug)]
pub struct NodeLogits {
    pub direct: Var,
    pub top_down: Option<Var>,
    pub bottom_up: Option<Var>,
    /// Final map; equals `direct` when the node has no other branch.
    pub fused: Var,
    /// Branch maps after gating, present only when the node is fused.
    pub gated: [Option<Var>; 3],
}

impl NodeLogits {
    pub fn get(&self, b: Branch) -> Option<Var> {
        match b {
            Branch::Direct => Some(self.direct),
            Branch::TopDown => self.top_down,
            Branch::BottomUp => self.bottom_up,
            Branch::Fused => Some(self.fused),
        }
    }
}

/// Every node's branch maps plus the per-level background maps.
#[derive(Clone, Debug)]
pub struct LogitStack {
    /// Indexed by `NodeId`.
    pub nodes: Vec<NodeLogits>,
    /// Indexed by `l - 1`.
    pub background: Vec<Var>,
    /// Whether any node carries a fused map distinct from its direct map.
    pub fused_levels: Vec<bool>,
}

impl LogitStack {
    pub fn node(&self, v: NodeId) -> &NodeLogits {
        &self.nodes[v.0]
    }

    /// Number of nodes with a map for branch `b`.
    pub fn count(&self, b: Branch) -> usize {
        self.nodes.iter().filter(|n| n.get(b).is_some()).count()
    }
}

/// Position-wise maximum over child maps.
pub fn pmp<T: Scalar>(g: &mut Graph<T>, child_maps: &[Var]) -> Result<Var> {
    g.channel_max(child_maps)
}

/// `(c + 1) -> c/2 -> c/4 -> 1` with 3×3, 3×3, 1×1 kernels.
pub fn cascade<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, output: Option<Rectifier>) -> ConvStack {
    let (a, b) = ((channels / 2).max(1), (channels / 4).max(1));
    ConvStack::new(init, name, &[channels + 1, a, b, 1], &[3, 3, 1], output)
}

fn conditioned<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, head: &ConvStack, cond: Var, h_v: Var) -> Result<Var> {
    let (cs, hs) = (g.value(cond).shape(), g.value(h_v).shape());
    if cs[1] != 1 || cs[0] != hs[0] || cs[2..] != hs[2..] {
        return Err(Error::ShapeMismatch(format!("conditioning map {cs:?} vs embedding {hs:?}")));
    }
    let x = g.concat(&[cond, h_v])?;
    head.forward(g, store, x)
}

/// Node map from its parent's direct estimate and its own embedding.
pub fn top_down_logits<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &ConvStack,
    h_v: Var,
    parent_direct: Var,
) -> Result<Var> {
    conditioned(g, store, head, parent_direct, h_v)
}

/// Node map from the position-wise max of its children's direct estimates.
pub fn bottom_up_logits<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    head: &ConvStack,
    h_v: Var,
    child_directs: &[Var],
) -> Result<Var> {
    let pooled = pmp(g, child_directs)?;
    conditioned(g, store, head, pooled, h_v)
}

#[derive(Clone, Debug)]
pub struct StructuredBranch {
    pub sharing: HeadSharing,
    heads: Vec<ConvStack>,
    /// Head index per node, `None` where the branch is absent.
    top_down: Vec<Option<usize>>,
    bottom_up: Vec<Option<usize>>,
}

impl StructuredBranch {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        graph: &Hierarchy,
        channels: usize,
        output: Option<Rectifier>,
        (with_td, with_bu): (bool, bool),
        sharing: HeadSharing,
    ) -> Self {
        let mut heads = Vec::new();
        let mut top_down = vec![None; graph.num_nodes()];
        let mut bottom_up = vec![None; graph.num_nodes()];
        let mut shared: std::collections::HashMap<(Branch, usize), usize> = Default::default();
        for (id, node) in graph.nodes() {
            for (branch, present, slots) in [
                (Branch::TopDown, with_td && !graph.is_root(id), &mut top_down),
                (Branch::BottomUp, with_bu && !graph.is_leaf(id), &mut bottom_up),
            ] {
                if !present {
                    continue;
                }
                let tag = if branch == Branch::TopDown { "top_down" } else { "bottom_up" };
                let idx = match sharing {
                    HeadSharing::PerNode => {
                        heads.push(cascade(init, &format!("{tag}.{}", node.name), channels, output));
                        heads.len() - 1
                    }
                    HeadSharing::PerLevel => *shared.entry((branch, node.level)).or_insert_with(|| {
                        heads.push(cascade(init, &format!("{tag}.level{}", node.level), channels, output));
                        heads.len() - 1
                    }),
                };
                slots[id.0] = Some(idx);
            }
        }
        Self { sharing, heads, top_down, bottom_up }
    }

    pub fn top_down_head(&self, v: NodeId) -> Option<&ConvStack> {
        self.top_down[v.0].map(|i| &self.heads[i])
    }

    pub fn bottom_up_head(&self, v: NodeId) -> Option<&ConvStack> {
        self.bottom_up[v.0].map(|i| &self.heads[i])
    }
}
