//! The full network and its three-step forward schedule.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::direct::DirectBranch;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse, Fusion, GateSet};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::kernels;
use crate::nn::{Init, Mode, Rectifier};
use crate::objective::{level_maps, ObjectiveConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::structured::{bottom_up_logits, top_down_logits, Branch, HeadSharing, LogitStack, NodeLogits, StructuredBranch};
use crate::tensor::Tensor;

/// Ablation variants. Only `Full` has gates; the others fuse statically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "direct+bu")]
    DirectBu,
    #[serde(rename = "direct+td")]
    DirectTd,
    #[serde(rename = "direct+bu+td")]
    DirectBuTd,
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Direct, Variant::DirectBu, Variant::DirectTd, Variant::DirectBuTd, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Direct => "direct",
            Variant::DirectBu => "direct+bu",
            Variant::DirectTd => "direct+td",
            Variant::DirectBuTd => "direct+bu+td",
            Variant::Full => "full",
        }
    }

    pub fn has_top_down(self) -> bool {
        matches!(self, Variant::DirectTd | Variant::DirectBuTd | Variant::Full)
    }

    pub fn has_bottom_up(self) -> bool {
        matches!(self, Variant::DirectBu | Variant::DirectBuTd | Variant::Full)
    }

    pub fn gated(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected one of direct, direct+bu, direct+td, direct+bu+td, full)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub se_reduction: usize,
    /// Output nonlinearity of direct, cascade and background heads; `None` leaves them affine.
    pub head_output: Option<Rectifier>,
    pub fusion_output: Option<Rectifier>,
    pub head_sharing: HeadSharing,
    pub fusion_hidden: Vec<usize>,
    pub objective: ObjectiveConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            se_reduction: 4,
            head_output: None,
            fusion_output: None,
            head_sharing: HeadSharing::PerNode,
            fusion_hidden: vec![8, 4],
            objective: ObjectiveConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        Self { encoder: EncoderConfig::full_scale(), se_reduction: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.se_reduction == 0 || self.fusion_hidden.contains(&0) {
            return Err(Error::Config("se_reduction and fusion widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-call forward switches.
#[derive(Clone, Debug)]
pub struct ForwardOptions<T> {
    pub mode: Mode,
    /// Replace the gate of `(node, branch)` with a constant.
    pub gate_override: Vec<(NodeId, Branch, f64)>,
    /// Add a tensor to a branch map right after it is computed, before any consumer reads it.
    pub perturb: Vec<(NodeId, Branch, Tensor<T>)>,
}

impl<T> ForwardOptions<T> {
    pub fn new(mode: Mode) -> Self {
        Self { mode, gate_override: Vec::new(), perturb: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub h_i: Var,
    /// `h^l_LSF`, indexed by `l - 1`.
    pub lsf: Vec<Var>,
    /// `h_v`, indexed by `NodeId`.
    pub embeddings: Vec<Var>,
    pub logits: LogitStack,
    pub gates: GateSet,
}

/// One gate value for reporting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub sample: usize,
    pub node: String,
    pub level: usize,
    pub branch: Branch,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub variant: Variant,
    pub graph: Hierarchy,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub direct: DirectBranch,
    pub structured: StructuredBranch,
    pub fusion: Fusion,
    branches: Vec<[bool; 3]>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, variant: Variant, graph: &Hierarchy, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init { store: &mut params, seed };
        let c = config.encoder.embed_channels;
        let encoder = Encoder::new(&mut init, &config.encoder)?;
        let direct = DirectBranch::new(&mut init, graph, c, config.se_reduction, config.encoder.norm, config.head_output);
        let structured = StructuredBranch::new(
            &mut init,
            graph,
            c,
            config.head_output,
            (variant.has_top_down(), variant.has_bottom_up()),
            config.head_sharing,
        );
        let branches: Vec<[bool; 3]> = graph
            .nodes()
            .map(|(id, _)| {
                [true, structured.top_down_head(id).is_some(), structured.bottom_up_head(id).is_some()]
            })
            .collect();
        let fusion =
            Fusion::new(&mut init, graph, c, &branches, &config.fusion_hidden, variant.gated(), config.fusion_output);
        Ok(Self { config: config.clone(), variant, graph: graph.clone(), params, encoder, direct, structured, fusion, branches })
    }

    /// Direct, top-down, bottom-up presence for node `v`.
    pub fn branches(&self, v: NodeId) -> [bool; 3] {
        self.branches[v.0]
    }

    fn perturbed(&self, g: &mut Graph<T>, opts: &ForwardOptions<T>, v: NodeId, b: Branch, x: Var) -> Result<Var> {
        let mut y = x;
        for (node, branch, t) in &opts.perturb {
            if (*node, *branch) == (v, b) {
                let c = g.constant(t.clone());
                y = g.add(y, c)?;
            }
        }
        Ok(y)
    }

    /// Runs the three-step schedule on `x` (`[n, 3, K, K]`):
    /// 1. direct maps for every node,
    /// 2. top-down and bottom-up maps from step-1 maps only,
    /// 3. gated fusion.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, opts: &ForwardOptions<T>) -> Result<ForwardOutput> {
        let store = &self.params;
        let graph = &self.graph;
        let mode = opts.mode;
        let h_i = self.encoder.encode_image(g, store, x, mode)?;
        let mut lsf = Vec::new();
        let mut background = Vec::new();
        for l in 1..=graph.num_levels() {
            let h = self.direct.level_embed(g, store, h_i, l, mode)?;
            background.push(self.direct.background_logits(g, store, h, l)?);
            lsf.push(h);
        }

        let mut embeddings = Vec::with_capacity(graph.num_nodes());
        let mut directs = Vec::with_capacity(graph.num_nodes());
        for (v, node) in graph.nodes() {
            let h_v = self.direct.node_embed(g, store, lsf[node.level - 1], v)?;
            let d = self.direct.direct_logits(g, store, h_v, v)?;
            directs.push(self.perturbed(g, opts, v, Branch::Direct, d)?);
            embeddings.push(h_v);
        }

        let mut nodes = Vec::with_capacity(graph.num_nodes());
        for (v, _) in graph.nodes() {
            let top_down = match self.structured.top_down_head(v) {
                Some(head) => {
                    let parent = graph.parent(v).expect("root has no top-down head");
                    let t = top_down_logits(g, store, head, embeddings[v.0], directs[parent.0])?;
                    Some(self.perturbed(g, opts, v, Branch::TopDown, t)?)
                }
                None => None,
            };
            let bottom_up = match self.structured.bottom_up_head(v) {
                Some(head) => {
                    let kids: Vec<Var> = graph.children(v).iter().map(|c| directs[c.0]).collect();
                    let t = bottom_up_logits(g, store, head, embeddings[v.0], &kids)?;
                    Some(self.perturbed(g, opts, v, Branch::BottomUp, t)?)
                }
                None => None,
            };
            nodes.push(NodeLogits { direct: directs[v.0], top_down, bottom_up, fused: directs[v.0], gated: [None; 3] });
        }

        let n = g.value(x).n();
        let mut gates = GateSet { values: vec![[None; 3]; graph.num_nodes()] };
        let mut fused_levels = vec![false; graph.num_levels()];
        for (v, node) in graph.nodes() {
            let Some(net) = self.fusion.net(v) else { continue };
            let logits = nodes[v.0];
            let ng = &self.fusion.gates[v.0];
            let mut slots = [None; 3];
            for (i, branch) in [Branch::Direct, Branch::TopDown, Branch::BottomUp].into_iter().enumerate() {
                if !self.branches[v.0][i] {
                    continue;
                }
                let forced = opts.gate_override.iter().find(|(u, b, _)| (*u, *b) == (v, branch)).map(|o| o.2);
                slots[i] = match forced {
                    Some(value) => Some(g.constant(Tensor::full([n, 1, 1, 1], T::of(value)))),
                    None => {
                        let gate = match branch {
                            Branch::Direct => ng.direct.as_ref(),
                            Branch::TopDown => ng.top_down.as_ref(),
                            _ => ng.bottom_up.as_ref(),
                        };
                        match gate {
                            Some(gate) => {
                                let input = match branch {
                                    Branch::Direct => embeddings[v.0],
                                    Branch::TopDown => embeddings[graph.parent(v).expect("non-root").0],
                                    _ => {
                                        let kids: Vec<Var> = graph.children(v).iter().map(|c| embeddings[c.0]).collect();
                                        g.concat(&kids)?
                                    }
                                };
                                Some(gate.forward(g, store, input)?)
                            }
                            None => None,
                        }
                    }
                };
            }
            let maps: Vec<(Var, Option<Var>)> = [Some(logits.direct), logits.top_down, logits.bottom_up]
                .into_iter()
                .zip(slots)
                .filter_map(|(m, s)| m.map(|m| (m, s)))
                .collect();
            let (fused, scaled) = fuse(g, store, net, &maps)?;
            let mut gated = [None; 3];
            let mut k = 0;
            for i in 0..3 {
                if self.branches[v.0][i] {
                    gated[i] = Some(scaled[k]);
                    k += 1;
                }
            }
            nodes[v.0].fused = fused;
            nodes[v.0].gated = gated;
            gates.values[v.0] = slots;
            fused_levels[node.level - 1] = true;
        }

        Ok(ForwardOutput { h_i, lsf, embeddings, logits: LogitStack { nodes, background, fused_levels }, gates })
    }

    /// Logit maps that produce the final prediction at level `l`, background first.
    pub fn final_maps(&self, out: &ForwardOutput, l: usize) -> Vec<Var> {
        level_maps(&out.logits, &self.graph, Branch::Fused, l)
            .or_else(|| level_maps(&out.logits, &self.graph, Branch::Direct, l))
            .expect("direct maps always exist")
    }

    /// Per-level probabilities at the feature grid, evaluation mode.
    pub fn predict_probs(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::no_grad();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x, &ForwardOptions::new(Mode::Eval))?;
        (1..=self.graph.num_levels())
            .map(|l| {
                let maps = self.final_maps(&out, l);
                let parts: Vec<&Tensor<T>> = maps.iter().map(|&v| g.value(v)).collect();
                Ok(kernels::softmax_channels(&Tensor::concat_channels(&parts)?))
            })
            .collect()
    }

    /// Every gate value of a forward pass, node order then branch order.
    pub fn gate_records(&self, g: &Graph<T>, out: &ForwardOutput) -> Vec<GateRecord> {
        let mut records = Vec::new();
        let n = g.value(out.h_i).n();
        for sample in 0..n {
            for (v, node) in self.graph.nodes() {
                for (i, branch) in [Branch::Direct, Branch::TopDown, Branch::BottomUp].into_iter().enumerate() {
                    if let Some(var) = out.gates.values[v.0][i] {
                        records.push(GateRecord {
                            sample,
                            node: node.name.clone(),
                            level: node.level,
                            branch,
                            value: g.value(var).data()[sample].f64(),
                        });
                    }
                }
            }
        }
        records
    }
}
