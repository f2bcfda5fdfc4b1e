//! Level-specific embeddings, per-node squeeze-excitation, and direct heads.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::hierarchy::{Hierarchy, NodeId};
use crate::kernels::ConvGeom;
use crate::nn::{Conv, ConvNormRelu, ConvStack, Init, Mode, NormKind, Rectifier};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Channel attention: pool, bottleneck, ReLU, expand, sigmoid, rescale.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub squeeze: Conv,
    pub excite: Conv,
}

impl SeBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, reduction: usize) -> Self {
        let mid = (channels / reduction.max(1)).max(1);
        Self {
            squeeze: Conv::new(init, &format!("{name}.squeeze"), channels, mid, 1, ConvGeom::PLAIN, true),
            excite: Conv::new(init, &format!("{name}.excite"), mid, channels, 1, ConvGeom::PLAIN, true),
        }
    }

    /// Per-channel scale in `(0, 1)`, shaped `[n, c, 1, 1]`.
    pub fn excitation<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = g.spatial_mean(x);
        let s = self.squeeze.forward(g, store, pooled)?;
        let s = g.relu(s);
        let e = self.excite.forward(g, store, s)?;
        Ok(g.sigmoid(e))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let e = self.excitation(g, store, x)?;
        g.mul_broadcast(x, e)
    }
}

/// Three 1×1 convolutions, `c -> c/2 -> c/2 -> 1`.
pub fn head<T: Scalar>(init: &mut Init<T>, name: &str, channels: usize, output: Option<Rectifier>) -> ConvStack {
    let mid = (channels / 2).max(1);
    ConvStack::new(init, name, &[channels, mid, mid, 1], &[1, 1, 1], output)
}

#[derive(Clone, Debug)]
pub struct DirectBranch {
    /// One per level, index `l - 1`.
    pub lsf: Vec<ConvNormRelu>,
    /// One per node, indexed by `NodeId`.
    pub se: Vec<SeBlock>,
    pub heads: Vec<ConvStack>,
    /// Background head per level.
    pub background: Vec<ConvStack>,
}

impl DirectBranch {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        graph: &Hierarchy,
        channels: usize,
        reduction: usize,
        norm: NormKind,
        output: Option<Rectifier>,
    ) -> Self {
        let levels = graph.num_levels();
        let lsf = (1..=levels)
            .map(|l| ConvNormRelu::new(init, &format!("lsf.level{l}"), channels, channels, 3, ConvGeom::same3(1), norm))
            .collect();
        let mut se = Vec::new();
        let mut heads = Vec::new();
        for (_, node) in graph.nodes() {
            se.push(SeBlock::new(init, &format!("se.{}", node.name), channels, reduction));
            heads.push(head(init, &format!("direct.{}", node.name), channels, output));
        }
        let background = (1..=levels).map(|l| head(init, &format!("background.level{l}"), channels, output)).collect();
        Self { lsf, se, heads, background }
    }

    /// `h^l_LSF` from `h_I`.
    pub fn level_embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h_i: Var, l: usize, mode: Mode) -> Result<Var> {
        self.lsf[l - 1].forward(g, store, h_i, mode)
    }

    /// `h_v` from the embedding of `v`'s level.
    pub fn node_embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h_lsf: Var, v: NodeId) -> Result<Var> {
        self.se[v.0].forward(g, store, h_lsf)
    }

    pub fn direct_logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h_v: Var, v: NodeId) -> Result<Var> {
        self.heads[v.0].forward(g, store, h_v)
    }

    pub fn background_logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h_lsf: Var, l: usize) -> Result<Var> {
        self.background[l - 1].forward(g, store, h_lsf)
    }
}
