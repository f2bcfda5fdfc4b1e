//! Per-level softmax over `[background, nodes of level l]` and the four-term
//! cross-entropy loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelStack};
use crate::kernels;
use crate::scalar::Scalar;
use crate::structured::{Branch, LogitStack};
use crate::tensor::Tensor;

/// Which step-2 maps the top-down and bottom-up terms supervise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    #[default]
    PreGate,
    PostGate,
}

/// Resolution at which the loss compares logits and labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossResolution {
    /// Labels are downsampled to the logit grid with nearest neighbour.
    #[default]
    Feature,
    /// Logits are upsampled bilinearly to the label grid.
    Input,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub supervision: Supervision,
    pub resolution: LossResolution,
}

/// Maps of `branch` at level `l`, background first. `None` if any node of the
/// level lacks the branch.
pub fn level_maps(stack: &LogitStack, graph: &Hierarchy, branch: Branch, l: usize) -> Option<Vec<Var>> {
    if branch == Branch::Fused && !stack.fused_levels[l - 1] {
        return None;
    }
    let mut maps = vec![stack.background[l - 1]];
    for &v in graph.level(l) {
        maps.push(stack.node(v).get(branch)?);
    }
    Some(maps)
}

/// Per-pixel probabilities `[n, |V^l| + 1, k, k]`.
pub fn level_softmax<T: Scalar>(
    g: &Graph<T>,
    stack: &LogitStack,
    graph: &Hierarchy,
    branch: Branch,
    l: usize,
) -> Result<Tensor<T>> {
    let maps = level_maps(stack, graph, branch, l).ok_or(Error::MissingBranch { branch: branch.name(), level: l })?;
    let parts: Vec<&Tensor<T>> = maps.iter().map(|&v| g.value(v)).collect();
    Ok(kernels::softmax_channels(&Tensor::concat_channels(&parts)?))
}

/// The four terms of one level, in `Branch::ALL` order; `None` marks an absent branch.
#[derive(Clone, Copy, Debug)]
pub struct LevelLoss {
    pub level: usize,
    pub terms: [Option<Var>; 4],
}

impl LevelLoss {
    pub fn values<T: Scalar>(&self, g: &Graph<T>) -> [Option<f64>; 4] {
        self.terms.map(|t| t.map(|v| g.value(v).data()[0].f64()))
    }
}

/// Level-`l` label ids of every sample at `width × height`, laid out `[n, h, w]`.
pub fn level_labels(stacks: &[LabelStack], l: usize, width: usize, height: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(stacks.len() * width * height);
    for s in stacks {
        let grid = s.level(l);
        let grid = if (grid.width, grid.height) == (width, height) { grid.clone() } else { grid.resize_nearest(width, height) };
        out.extend(grid.data.iter().map(|&v| v as u32));
    }
    out
}

/// Cross-entropy of every present branch at level `l`. `labels` are `[n, h, w]`
/// at `size = (h, w)`; logits are resized to `size` when it differs from the grid.
#[allow(clippy::too_many_arguments)]
pub fn level_loss<T: Scalar>(
    g: &mut Graph<T>,
    stack: &LogitStack,
    graph: &Hierarchy,
    l: usize,
    labels: &[u32],
    size: (usize, usize),
    config: &ObjectiveConfig,
) -> Result<LevelLoss> {
    let mut terms = [None; 4];
    for (i, &branch) in Branch::ALL.iter().enumerate() {
        let Some(mut maps) = level_maps(stack, graph, branch, l) else { continue };
        if config.supervision == Supervision::PostGate && matches!(branch, Branch::TopDown | Branch::BottomUp) {
            let slot = if branch == Branch::TopDown { 1 } else { 2 };
            for (m, &v) in maps.iter_mut().skip(1).zip(graph.level(l)) {
                if let Some(gated) = stack.node(v).gated[slot] {
                    *m = gated;
                }
            }
        }
        let maps: Vec<Var> = maps.into_iter().map(|m| g.resize(m, size.0, size.1)).collect();
        terms[i] = Some(g.softmax_ce(&maps, labels)?);
    }
    Ok(LevelLoss { level: l, terms })
}

/// Sum of every present term over all levels, levels weighted equally.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, levels: &[LevelLoss]) -> Result<Var> {
    let terms: Vec<Var> = levels.iter().flat_map(|l| l.terms.iter().flatten().copied()).collect();
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    g.sum(&terms)
}
