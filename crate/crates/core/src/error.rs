use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // hierarchy
    #[error("hierarchy needs at least 2 levels, got {0}")]
    TooFewLevels(usize),
    #[error("level {0} has no nodes")]
    EmptyLevel(usize),
    #[error("no root node at the top level")]
    MissingRoot,
    #[error("multiple roots: {}", .0.join(", "))]
    MultipleRoots(Vec<String>),
    #[error("node `{0}` has no parent")]
    OrphanNode(String),
    #[error("node `{0}` declared more than once")]
    DuplicateNode(String),
    #[error("node `{child}` names unknown parent `{parent}`")]
    UnknownParent { child: String, parent: String },
    #[error("edge `{child}` (level {child_level}) -> `{parent}` (level {parent_level}) skips levels")]
    LevelSkipEdge { child: String, child_level: usize, parent: String, parent_level: usize },
    #[error("class id {id} claimed by leaves {}", .nodes.join(" and "))]
    LeafClassOverlap { id: u8, nodes: Vec<String> },
    #[error("class ids {missing:?} are not assigned to any leaf")]
    MissingClassId { missing: Vec<u8> },
    #[error("leaf `{0}` has no class ids")]
    LeafWithoutClasses(String),
    #[error("class id 0 is background and cannot be claimed by `{0}`")]
    BackgroundClaimed(String),
    #[error("inner node `{0}` has class ids or no children")]
    MalformedInnerNode(String),
    #[error("invalid flip swap: {0}")]
    InvalidSwap(String),
    #[error("hierarchy file: {0}")]
    HierarchyParse(String),
    #[error("class id {id} at pixel ({x}, {y}) belongs to no leaf")]
    UnknownClassId { id: u8, x: usize, y: usize },

    // data
    #[error("image is {image:?} but label is {label:?}")]
    SizeMismatch { image: (usize, usize), label: (usize, usize) },
    #[error("cannot read {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),

    // network
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(String),
    #[error("position-wise max pooling needs at least one child map")]
    EmptyChildSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("branch/gate mismatch: {0}")]
    BranchGateMismatch(String),
    #[error("branch {branch} is missing for level {level}")]
    MissingBranch { branch: &'static str, level: usize },

    // optimisation
    #[error("iteration {iter} outside [0, {total}]")]
    IterOutOfRange { iter: usize, total: usize },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize, last_good: Box<crate::optim::Checkpoint> },
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid config: {0}")]
    Config(String),

    // evaluation
    #[error("value {value} outside alphabet of {alphabet} classes")]
    AlphabetViolation { value: usize, alphabet: usize },
    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
