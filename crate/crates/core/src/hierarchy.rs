//! The compositional part graph and per-level ground truth derived from leaf labels.
//!
//! Levels are numbered from 1 (leaves) to `L` (the single root). Background is
//! not a node: it is label 0 at every level, and node labels at level `l` run
//! from 1 to `|V^l|` in declaration order.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_SPEC: &str = include_str!("../assets/default_hierarchy.toml");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub level: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_ids: Vec<u8>,
}

/// Leaves whose labels trade places under a horizontal flip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapSpec {
    pub a: String,
    pub b: String,
}

/// Declarative hierarchy description, stored as TOML.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchySpec {
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default, rename = "flip_swap", skip_serializing_if = "Vec::is_empty")]
    pub swaps: Vec<SwapSpec>,
}

impl HierarchySpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::HierarchyParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("hierarchy spec serializes")
    }

    /// Head/torso/arms under upper-body, legs under lower-body, both under full-body.
    pub fn default_human() -> Self {
        Self::parse(DEFAULT_SPEC).expect("bundled hierarchy parses")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub level: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub class_ids: Vec<u8>,
    /// 1-based label value of this node within its level.
    pub label: u8,
}

/// Validated hierarchy. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Hierarchy {
    spec: HierarchySpec,
    nodes: Vec<Node>,
    levels: Vec<Vec<NodeId>>,
    class_to_leaf: Vec<Option<NodeId>>,
    num_classes: usize,
    class_flip: Vec<u8>,
    level_flip: Vec<Vec<u8>>,
}

impl Hierarchy {
    pub fn build(spec: HierarchySpec) -> Result<Self> {
        let num_levels = spec.nodes.iter().map(|n| n.level).max().unwrap_or(0);
        if num_levels < 2 {
            return Err(Error::TooFewLevels(num_levels));
        }
        if let Some(bad) = spec.nodes.iter().find(|n| n.level == 0) {
            return Err(Error::HierarchyParse(format!("node `{}` has level 0; levels start at 1", bad.name)));
        }
        let mut by_name = HashMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            if by_name.insert(n.name.as_str(), i).is_some() {
                return Err(Error::DuplicateNode(n.name.clone()));
            }
        }
        let mut levels = vec![Vec::new(); num_levels];
        for (i, n) in spec.nodes.iter().enumerate() {
            levels[n.level - 1].push(NodeId(i));
        }
        if let Some(l) = levels.iter().position(Vec::is_empty) {
            return Err(Error::EmptyLevel(l + 1));
        }
        let top = &levels[num_levels - 1];
        if top.len() > 1 {
            return Err(Error::MultipleRoots(top.iter().map(|id| spec.nodes[id.0].name.clone()).collect()));
        }

        let mut nodes: Vec<Node> = spec
            .nodes
            .iter()
            .map(|n| Node {
                name: n.name.clone(),
                level: n.level,
                parent: None,
                children: Vec::new(),
                class_ids: n.class_ids.clone(),
                label: 0,
            })
            .collect();
        for lvl in &levels {
            for (k, id) in lvl.iter().enumerate() {
                nodes[id.0].label = u8::try_from(k + 1)
                    .map_err(|_| Error::HierarchyParse("more than 255 nodes in one level".into()))?;
            }
        }
        for (i, n) in spec.nodes.iter().enumerate() {
            match &n.parent {
                None if n.level == num_levels => {}
                None => return Err(Error::OrphanNode(n.name.clone())),
                Some(p) => {
                    let &pi = by_name
                        .get(p.as_str())
                        .ok_or_else(|| Error::UnknownParent { child: n.name.clone(), parent: p.clone() })?;
                    let plevel = spec.nodes[pi].level;
                    if plevel != n.level + 1 {
                        return Err(Error::LevelSkipEdge {
                            child: n.name.clone(),
                            child_level: n.level,
                            parent: p.clone(),
                            parent_level: plevel,
                        });
                    }
                    nodes[i].parent = Some(NodeId(pi));
                    nodes[pi].children.push(NodeId(i));
                }
            }
        }

        let mut class_to_leaf: Vec<Option<NodeId>> = vec![None; 256];
        let mut max_id = 0usize;
        for (i, n) in nodes.iter().enumerate() {
            if n.level == 1 {
                if n.class_ids.is_empty() {
                    return Err(Error::LeafWithoutClasses(n.name.clone()));
                }
                for &c in &n.class_ids {
                    if c == 0 {
                        return Err(Error::BackgroundClaimed(n.name.clone()));
                    }
                    if let Some(prev) = class_to_leaf[c as usize] {
                        return Err(Error::LeafClassOverlap {
                            id: c,
                            nodes: vec![nodes[prev.0].name.clone(), n.name.clone()],
                        });
                    }
                    class_to_leaf[c as usize] = Some(NodeId(i));
                    max_id = max_id.max(c as usize);
                }
            } else if !n.class_ids.is_empty() || n.children.is_empty() {
                return Err(Error::MalformedInnerNode(n.name.clone()));
            }
        }
        let missing: Vec<u8> = (1..=max_id).filter(|&c| class_to_leaf[c].is_none()).map(|c| c as u8).collect();
        if !missing.is_empty() {
            return Err(Error::MissingClassId { missing });
        }

        let mut graph = Self {
            spec,
            nodes,
            levels,
            class_to_leaf,
            num_classes: max_id,
            class_flip: (0..=255u8).collect(),
            level_flip: Vec::new(),
        };
        graph.build_flip_tables()?;
        Ok(graph)
    }

    fn build_flip_tables(&mut self) -> Result<()> {
        let mut level_flip: Vec<Vec<u8>> = self.levels.iter().map(|l| (0..=l.len() as u8).collect()).collect();
        let mut seen = HashSet::new();
        for s in &self.spec.swaps {
            let find = |name: &str| {
                self.nodes
                    .iter()
                    .position(|n| n.name == name && n.level == 1)
                    .map(NodeId)
                    .ok_or_else(|| Error::InvalidSwap(format!("`{name}` is not a leaf")))
            };
            let (a, b) = (find(&s.a)?, find(&s.b)?);
            if a == b || !seen.insert(a) || !seen.insert(b) {
                return Err(Error::InvalidSwap(format!("`{}` / `{}` repeat a node", s.a, s.b)));
            }
            let (ca, cb) = (&self.nodes[a.0].class_ids, &self.nodes[b.0].class_ids);
            if ca.len() != cb.len() {
                return Err(Error::InvalidSwap(format!("`{}` and `{}` own different numbers of ids", s.a, s.b)));
            }
            let mut sa = ca.clone();
            let mut sb = cb.clone();
            sa.sort_unstable();
            sb.sort_unstable();
            for (&x, &y) in sa.iter().zip(&sb) {
                self.class_flip[x as usize] = y;
                self.class_flip[y as usize] = x;
            }
            let (mut u, mut v) = (Some(a), Some(b));
            while let (Some(x), Some(y)) = (u, v) {
                if x != y {
                    let lvl = self.nodes[x.0].level - 1;
                    let (lx, ly) = (self.nodes[x.0].label, self.nodes[y.0].label);
                    let table = &mut level_flip[lvl];
                    let fresh = |t: &Vec<u8>, i: u8, j: u8| t[i as usize] == i || t[i as usize] == j;
                    if !fresh(table, lx, ly) || !fresh(table, ly, lx) {
                        return Err(Error::InvalidSwap(format!(
                            "ancestors `{}` and `{}` conflict with another swap",
                            self.nodes[x.0].name, self.nodes[y.0].name
                        )));
                    }
                    table[lx as usize] = ly;
                    table[ly as usize] = lx;
                }
                u = self.nodes[x.0].parent;
                v = self.nodes[y.0].parent;
            }
        }
        // Induced swaps above the leaves must move whole subtrees: every child of a swapped
        // ancestor must map to a child of its partner.
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                let own = level_flip[n.level - 1][n.label as usize];
                let parent_img = level_flip[n.level][self.nodes[p.0].label as usize];
                let img = self.levels[n.level - 1][own as usize - 1];
                if self.nodes[img.0].parent.map(|q| self.nodes[q.0].label) != Some(parent_img) {
                    return Err(Error::InvalidSwap(format!(
                        "flipping `{}` does not respect its parent",
                        self.nodes[NodeId(i).0].name
                    )));
                }
            }
        }
        self.level_flip = level_flip;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::build(HierarchySpec::parse(text)?)
    }

    pub fn default_human() -> Self {
        Self::build(HierarchySpec::default_human()).expect("bundled hierarchy is valid")
    }

    pub fn spec(&self) -> &HierarchySpec {
        &self.spec
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Largest dataset class id; valid leaf labels are `0..=num_classes`.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    /// Nodes of level `l` (1-based) in declaration order.
    pub fn level(&self, l: usize) -> &[NodeId] {
        &self.levels[l - 1]
    }

    pub fn root(&self) -> NodeId {
        self.levels[self.levels.len() - 1][0]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].children
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id.0].level == 1
    }

    pub fn is_root(&self, id: NodeId) -> bool {
        self.nodes[id.0].parent.is_none()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn leaf_for_class(&self, class_id: u8) -> Option<NodeId> {
        self.class_to_leaf[class_id as usize]
    }

    /// Class id that a pixel of `class_id` becomes under a horizontal flip.
    pub fn flip_class(&self, class_id: u8) -> u8 {
        self.class_flip[class_id as usize]
    }

    /// Label permutation at level `l` (index 0 is background) under a horizontal flip.
    pub fn flip_labels(&self, l: usize) -> &[u8] {
        &self.level_flip[l - 1]
    }

    pub fn has_swaps(&self) -> bool {
        !self.spec.swaps.is_empty()
    }

    /// Label value at level `l + 1` of the parent of the node labelled `label` at level `l`.
    pub fn parent_label(&self, l: usize, label: u8) -> u8 {
        if label == 0 {
            return 0;
        }
        let id = self.levels[l - 1][label as usize - 1];
        self.nodes[id.0].parent.map_or(0, |p| self.nodes[p.0].label)
    }

    /// Deterministic display colour derived from the node name (FNV-1a).
    pub fn node_color(name: &str) -> [u8; 3] {
        let mut h: u32 = 0x811c_9dc5;
        for b in name.bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        [(h >> 16) as u8 | 0x30, (h >> 8) as u8 | 0x30, h as u8 | 0x30]
    }

    /// Palette for level `l`: black background then one colour per node.
    pub fn palette(&self, l: usize) -> Vec<[u8; 3]> {
        std::iter::once([0, 0, 0])
            .chain(self.level(l).iter().map(|&id| Self::node_color(&self.nodes[id.0].name)))
            .collect()
    }
}

/// Row-major grid of small integer labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{}x{} grid from {} values", width, height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut out = Self::new(width, height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                out.data[y * width + x] = self.data[sy * self.width + sx];
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }
}

/// Ground truth at every level; `levels[0]` is the leaf level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelStack {
    pub levels: Vec<LabelGrid>,
}

impl LabelStack {
    pub fn level(&self, l: usize) -> &LabelGrid {
        &self.levels[l - 1]
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        Self { levels: self.levels.iter().map(|g| g.resize_nearest(width, height)).collect() }
    }

    /// Every labelled pixel at level `l` carries its parent's label at `l + 1`,
    /// and background stays background.
    pub fn is_consistent(&self, graph: &Hierarchy) -> bool {
        (1..self.levels.len()).all(|l| {
            let (lo, hi) = (&self.levels[l - 1], &self.levels[l]);
            lo.data.iter().zip(&hi.data).all(|(&a, &b)| graph.parent_label(l, a) == b)
        })
    }

    /// Map level-1 node labels back to dataset class ids (first id of each leaf).
    pub fn leaf_class_map(&self, graph: &Hierarchy) -> LabelGrid {
        let leaves = graph.level(1);
        let data = self.levels[0]
            .data
            .iter()
            .map(|&v| if v == 0 { 0 } else { graph.node(leaves[v as usize - 1]).class_ids[0] })
            .collect();
        LabelGrid { data, ..self.levels[0].clone() }
    }
}

/// Propagate dataset class ids up the hierarchy.
pub fn derive_level_labels(leaf_map: &LabelGrid, graph: &Hierarchy) -> Result<LabelStack> {
    let mut level1 = LabelGrid::new(leaf_map.width, leaf_map.height);
    for (i, &c) in leaf_map.data.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let leaf = graph
            .leaf_for_class(c)
            .ok_or(Error::UnknownClassId { id: c, x: i % leaf_map.width, y: i / leaf_map.width })?;
        level1.data[i] = graph.node(leaf).label;
    }
    let mut levels = vec![level1];
    for l in 1..graph.num_levels() {
        let lookup: Vec<u8> = (0..=graph.level(l).len() as u8).map(|v| graph.parent_label(l, v)).collect();
        let prev = &levels[l - 1];
        let data = prev.data.iter().map(|&v| lookup[v as usize]).collect();
        levels.push(LabelGrid { data, ..prev.clone() });
    }
    Ok(LabelStack { levels })
}
